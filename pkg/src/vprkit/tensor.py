"""Dense linear-algebra kernels, stable reductions, and gradient checking.

All in-memory arrays are float64; 32-bit floats appear only at the file
boundary (token/descriptor payloads). Reductions run in a fixed order so
repeated runs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NORM_EPS = 1e-12
REL_ERR_FLOOR = 1e-8


class NumericalError(RuntimeError):
    """Non-finite values or a failed numerical check."""


def require_finite(a: np.ndarray, what: str) -> None:
    """Reject NaN/Inf, naming the first offending flat index."""
    a = np.asarray(a)
    if np.isfinite(a).all():
        return
    bad = int(np.flatnonzero(~np.isfinite(a.reshape(-1)))[0])
    raise NumericalError(
        f"{what}: non-finite value {a.reshape(-1)[bad]!r} at flat index {bad}"
    )


def as_float_array(a, what: str = "array") -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    require_finite(out, what)
    return out


def l2_normalize(v, eps: float = NORM_EPS) -> np.ndarray:
    """v / max(||v||, eps). The zero vector maps to zero, never NaN."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    v = as_float_array(v, "l2_normalize input")
    norm = float(np.linalg.norm(v))
    return v / max(norm, eps)


def l2_normalize_rows(m, eps: float = NORM_EPS) -> np.ndarray:
    """Normalize each row of a 2-D array to unit length (zero rows stay zero)."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    m = as_float_array(m, "l2_normalize_rows input")
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.maximum(norms, eps)


def softmax_columns(scores) -> np.ndarray:
    """Column-wise softmax with max-subtraction; each column sums to 1."""
    s = as_float_array(scores, "softmax_columns input")
    if s.ndim != 2:
        raise ValueError(f"softmax_columns expects a 2-D array, got shape {s.shape}")
    shifted = s - s.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def affine(x, w, b) -> np.ndarray:
    """Row-wise x @ w + b."""
    out = matmul(x, w)
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (out.shape[1],):
        raise ValueError(
            f"affine bias shape mismatch: bias {b.shape}, output columns {out.shape[1]}"
        )
    return out + b


@dataclass
class Parameter:
    """A trainable array with its gradient buffer.

    `decay=False` opts the parameter out of weight decay (biases, query banks).
    """

    name: str
    value: np.ndarray
    lr_multiplier: float = 1.0
    decay: bool = True
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        require_finite(self.value, f"parameter {self.name}")
        if self.lr_multiplier < 0:
            raise ValueError(f"parameter {self.name}: negative lr_multiplier")
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def add_grad(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            raise ValueError(
                f"parameter {self.name}: grad shape {g.shape} != value shape {self.value.shape}"
            )
        self.grad += g


def finite_diff_check(f, params, h: float = 1e-3) -> float:
    """Max relative error between analytic gradients and central differences.

    `f()` must return a scalar and, as a side effect, leave dL/dp in `p.grad`
    for every p in `params` (call sites zero the grads themselves if they
    accumulate). Every coordinate is probed; callers keep instances small.
    """
    if not (1e-4 <= h <= 1e-2):
        raise ValueError(f"h must lie in [1e-4, 1e-2], got {h}")
    for p in params:
        p.zero_grad()
    f()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat_value = p.value.reshape(-1)
        flat_grad = g.reshape(-1)
        for i in range(flat_value.size):
            orig = flat_value[i]
            flat_value[i] = orig + h
            loss_plus = float(f())
            flat_value[i] = orig - h
            loss_minus = float(f())
            flat_value[i] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            ana = float(flat_grad[i])
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), REL_ERR_FLOOR)
            worst = max(worst, rel)
    return worst
