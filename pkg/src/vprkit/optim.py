"""AdamW with decoupled weight decay, warmup/step-decay schedule, and
per-parameter-group learning-rate multipliers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .tensor import NumericalError, Parameter


@dataclass
class Schedule:
    """Linear warmup from zero over `warmup_epochs`, then stepwise decay.

    lr(e) = base_lr * ramp(e) * decay_factor ** k(e), with ramp linear on
    [0, warmup) and k(e) = floor(e / decay_every) once e exceeds the warmup
    boundary (k = 0 through the boundary itself, so lr(warmup) = base_lr).
    """

    base_lr: float = 2e-4
    warmup_epochs: float = 10.0
    decay_every: float = 10.0
    decay_factor: float = 0.1

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.decay_every <= 0:
            raise ValueError("decay_every must be positive")
        if not (0.0 < self.decay_factor <= 1.0):
            raise ValueError("decay_factor must lie in (0, 1]")


def lr_at(schedule: Schedule, epoch: float) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if schedule.warmup_epochs > 0 and epoch < schedule.warmup_epochs:
        ramp = epoch / schedule.warmup_epochs
    else:
        ramp = 1.0
    if epoch <= schedule.warmup_epochs:
        k = 0
    else:
        k = math.floor(epoch / schedule.decay_every)
    return schedule.base_lr * ramp * schedule.decay_factor**k


class AdamW:
    """Decoupled-weight-decay Adam over a fixed parameter list.

    update = lr_multiplier * (lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta));
    the multiplier scales the whole step last, so a step at multiplier m is
    bit-identical to m times the multiplier-1 step.
    """

    def __init__(
        self,
        params: Sequence[Parameter],
        weight_decay: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names: {sorted(names)}")
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr: float) -> list[np.ndarray]:
        """Apply one update; returns the per-parameter deltas actually added."""
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise NumericalError(
                    f"parameter {p.name}: non-finite gradient, step aborted"
                )
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        deltas = []
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay != 0.0 and p.decay:
                update = update + self.weight_decay * p.value
            delta = -(p.lr_multiplier * (lr * update))
            p.value += delta
            deltas.append(delta)
        return deltas


def assign_param_groups(
    params: Sequence[Parameter], multipliers: Mapping[str, float]
) -> dict[str, list[Parameter]]:
    """Set each parameter's lr_multiplier from the longest matching name prefix.

    The empty prefix acts as a catch-all; a parameter matching no prefix is a
    configuration error. Returns the prefix -> parameters grouping.
    """
    for prefix, mult in multipliers.items():
        if mult < 0:
            raise ValueError(f"group {prefix!r}: negative multiplier {mult}")
    groups: dict[str, list[Parameter]] = {prefix: [] for prefix in multipliers}
    for p in params:
        matches = [prefix for prefix in multipliers if p.name.startswith(prefix)]
        if not matches:
            raise ValueError(
                f"parameter {p.name!r} not covered by any group prefix "
                f"{sorted(multipliers)} (add an empty-string catch-all)"
            )
        best = max(matches, key=len)
        p.lr_multiplier = float(multipliers[best])
        groups[best].append(p)
    return groups
