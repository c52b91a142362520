"""Run configuration: JSON with strict unknown-key rejection.

Covers the fusion/aggregation/assignment selectors, loss and optimizer
hyperparameters, training-loop sizes, and the synthetic-data recipe.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .dataio import SynthSpec
from .loss import MsParams
from .optim import Schedule


class ConfigError(ValueError):
    pass


def _take(raw: dict, where: str, allowed: dict) -> dict:
    unknown = set(raw) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    out = dict(allowed)
    out.update(raw)
    return out


@dataclass
class TrainSettings:
    epochs: int = 40
    places_per_batch: int = 110
    images_per_place: int = 4
    max_steps: Optional[int] = None


@dataclass
class RunConfig:
    seed: int = 0
    fusion: str = "residual"
    aggregation: str = "vlaq"
    assignment: str = "softmax"
    blocks: int = 2
    queries_per_block: int = 64
    projection_dim: Optional[int] = None
    sinkhorn_iters: int = 50
    sinkhorn_tol: float = 1e-6
    ms: MsParams = field(default_factory=MsParams)
    schedule: Schedule = field(default_factory=Schedule)
    weight_decay: float = 1e-3
    group_multipliers: dict = field(default_factory=lambda: {"": 1.0})
    train: TrainSettings = field(default_factory=TrainSettings)
    synth: SynthSpec = field(default_factory=SynthSpec)
    manifest: Optional[str] = None
    out: Optional[str] = None

    @classmethod
    def from_dict(cls, doc: dict, where: str = "config") -> "RunConfig":
        top = _take(
            doc,
            where,
            {
                "seed": 0,
                "fusion": "residual",
                "aggregation": "vlaq",
                "assignment": "softmax",
                "blocks": 2,
                "queries_per_block": 64,
                "projection_dim": None,
                "sinkhorn": {},
                "ms": {},
                "opt": {},
                "train": {},
                "synth": {},
                "manifest": None,
                "out": None,
            },
        )
        sink = _take(top["sinkhorn"], f"{where}.sinkhorn", {"iters": 50, "tol": 1e-6})
        ms_raw = _take(
            top["ms"],
            f"{where}.ms",
            {"alpha": 2.0, "beta": 50.0, "lambda": 1.0, "epsilon": 0.1},
        )
        opt_raw = _take(
            top["opt"],
            f"{where}.opt",
            {
                "lr": 2e-4,
                "wd": 1e-3,
                "warmup_epochs": 10,
                "decay_every": 10,
                "decay_factor": 0.1,
                "group_multipliers": {"": 1.0},
            },
        )
        train_raw = _take(
            top["train"],
            f"{where}.train",
            {"epochs": 40, "places_per_batch": 110, "images_per_place": 4, "max_steps": None},
        )
        synth_raw = _take(
            top["synth"],
            f"{where}.synth",
            {
                "places": 32,
                "images_per_place": 4,
                "queries_per_place": 1,
                "dim": 16,
                "tokens": 16,
                "sigma": 0.15,
                "clip_sigma": 0.1,
                "seed": 0,
            },
        )
        try:
            return cls(
                seed=int(top["seed"]),
                fusion=top["fusion"],
                aggregation=top["aggregation"],
                assignment=top["assignment"],
                blocks=int(top["blocks"]),
                queries_per_block=int(top["queries_per_block"]),
                projection_dim=None if top["projection_dim"] is None else int(top["projection_dim"]),
                sinkhorn_iters=int(sink["iters"]),
                sinkhorn_tol=float(sink["tol"]),
                ms=MsParams(
                    alpha_pos=float(ms_raw["alpha"]),
                    beta_neg=float(ms_raw["beta"]),
                    lambda_margin=float(ms_raw["lambda"]),
                    epsilon_mine=float(ms_raw["epsilon"]),
                ),
                schedule=Schedule(
                    base_lr=float(opt_raw["lr"]),
                    warmup_epochs=float(opt_raw["warmup_epochs"]),
                    decay_every=float(opt_raw["decay_every"]),
                    decay_factor=float(opt_raw["decay_factor"]),
                ),
                weight_decay=float(opt_raw["wd"]),
                group_multipliers=dict(opt_raw["group_multipliers"]),
                train=TrainSettings(
                    epochs=int(train_raw["epochs"]),
                    places_per_batch=int(train_raw["places_per_batch"]),
                    images_per_place=int(train_raw["images_per_place"]),
                    max_steps=None if train_raw["max_steps"] is None else int(train_raw["max_steps"]),
                ),
                synth=SynthSpec(**synth_raw),
                manifest=top["manifest"],
                out=top["out"],
            )
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"{where}: {e}") from e

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(doc, where=str(path))
