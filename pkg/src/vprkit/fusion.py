"""Fusion of the two encoder token sets into one retrieval-friendly set.

The default strategy anchors on the DINO-side tokens and adds a learned
linear correction of the CLIP-DINO difference; naive addition and FiLM
modulation are available as baselines behind the same interface.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .tensor import (
    Parameter,
    affine,
    as_float_array,
    l2_normalize_rows,
    matmul,
)

VARIANTS = ("residual", "add", "film")


class Source(str, Enum):
    DINO = "dino"
    CLIP = "clip"
    FUSED = "fused"


ENCODER_NORM_TOL = 1e-4


@dataclass
class TokenSet:
    """M x d token matrix for one image plus its grid metadata.

    Encoder tokens (DINO/CLIP sources) must arrive row-normalized within
    1e-4 (f32 exports qualify); the pipeline re-normalizes on ingest anyway
    so downstream math sees exact unit rows.
    """

    tokens: np.ndarray
    source: Source
    image_id: str
    grid: tuple[int, int]

    def __post_init__(self):
        self.tokens = as_float_array(self.tokens, f"tokens[{self.image_id}]")
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError(
                f"tokens[{self.image_id}]: expected non-empty 2-D matrix, got shape {self.tokens.shape}"
            )
        h, w = self.grid
        if h < 1 or w < 1 or h * w != self.tokens.shape[0]:
            raise ValueError(
                f"tokens[{self.image_id}]: grid {self.grid} inconsistent with {self.tokens.shape[0]} tokens"
            )
        self.source = Source(self.source)
        if self.source in (Source.DINO, Source.CLIP):
            off = np.abs(np.linalg.norm(self.tokens, axis=1) - 1.0)
            if off.max() > ENCODER_NORM_TOL:
                row = int(off.argmax())
                raise ValueError(
                    f"tokens[{self.image_id}]: {self.source.value} row {row} has norm "
                    f"{np.linalg.norm(self.tokens[row]):.6f}, expected 1 within {ENCODER_NORM_TOL}"
                )

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def row_normalized(self, eps: float = 1e-12) -> "TokenSet":
        return TokenSet(l2_normalize_rows(self.tokens, eps), self.source, self.image_id, self.grid)


@dataclass
class FusionParams:
    """Trainable state for one fusion variant.

    Only the active variant's parameters are allocated, so `trainable()`
    never leaks unused tensors into the optimizer.
    """

    variant: str
    w_res: Optional[Parameter] = None
    b_res: Optional[Parameter] = None
    film_gamma_w: Optional[Parameter] = None
    film_gamma_b: Optional[Parameter] = None
    film_beta_w: Optional[Parameter] = None
    film_beta_b: Optional[Parameter] = None
    clip_adapter: Optional[Parameter] = None

    @classmethod
    def create(
        cls,
        dim: int,
        variant: str = "residual",
        clip_dim: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
        anchor_scale: float = 0.1,
    ) -> "FusionParams":
        if variant not in VARIANTS:
            raise ValueError(f"unknown fusion variant {variant!r}, expected one of {VARIANTS}")
        rng = rng if rng is not None else np.random.default_rng(0)

        def small(shape):
            # Start near the DINO anchor: corrections begin close to zero.
            return rng.uniform(-1.0, 1.0, shape) / np.sqrt(dim) * anchor_scale

        params = cls(variant=variant)
        if clip_dim is not None and clip_dim != dim:
            bound = 1.0 / np.sqrt(clip_dim)
            params.clip_adapter = Parameter(
                "fusion.clip_adapter", rng.uniform(-bound, bound, (clip_dim, dim))
            )
        if variant == "residual":
            params.w_res = Parameter("fusion.w_res", small((dim, dim)))
            params.b_res = Parameter("fusion.b_res", np.zeros(dim), decay=False)
        elif variant == "film":
            params.film_gamma_w = Parameter("fusion.film_gamma_w", small((dim, dim)))
            params.film_gamma_b = Parameter("fusion.film_gamma_b", np.ones(dim), decay=False)
            params.film_beta_w = Parameter("fusion.film_beta_w", small((dim, dim)))
            params.film_beta_b = Parameter("fusion.film_beta_b", np.zeros(dim), decay=False)
        return params

    def trainable(self) -> list[Parameter]:
        if self.variant == "residual":
            out = [self.w_res, self.b_res]
        elif self.variant == "film":
            out = [self.film_gamma_w, self.film_gamma_b, self.film_beta_w, self.film_beta_b]
        else:
            out = []
        if self.clip_adapter is not None:
            out.append(self.clip_adapter)
        return out


@dataclass
class FusionCache:
    x_d: np.ndarray
    x_c: np.ndarray  # after the adapter, if any
    x_c_raw: Optional[np.ndarray] = None  # pre-adapter CLIP tokens
    gamma: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None


def _check_pair(x_d: TokenSet, x_c_tokens: np.ndarray, x_c: TokenSet) -> None:
    if x_d.image_id != x_c.image_id:
        raise ValueError(
            f"fusion: image_id mismatch ({x_d.image_id!r} vs {x_c.image_id!r}); token exports are misaligned"
        )
    if x_d.tokens.shape != x_c_tokens.shape:
        raise ValueError(
            f"fusion: token shape mismatch {x_d.tokens.shape} vs {x_c_tokens.shape} (after adaptation)"
        )
    if x_d.grid != x_c.grid:
        raise ValueError(f"fusion: grid mismatch {x_d.grid} vs {x_c.grid}")


def _adapted_clip(x_c: TokenSet, p: FusionParams) -> tuple[np.ndarray, Optional[np.ndarray]]:
    if p.clip_adapter is None:
        return x_c.tokens, None
    return matmul(x_c.tokens, p.clip_adapter.value), x_c.tokens


def fuse_residual(x_d: TokenSet, x_c: TokenSet, p: FusionParams) -> tuple[TokenSet, FusionCache]:
    """Fused token rows = x_d + (x_c - x_d) @ W + b, anchored on the DINO side."""
    x_c_tokens, x_c_raw = _adapted_clip(x_c, p)
    _check_pair(x_d, x_c_tokens, x_c)
    diff = x_c_tokens - x_d.tokens
    fused = x_d.tokens + affine(diff, p.w_res.value, p.b_res.value)
    cache = FusionCache(x_d=x_d.tokens, x_c=x_c_tokens, x_c_raw=x_c_raw)
    return TokenSet(fused, Source.FUSED, x_d.image_id, x_d.grid), cache


def fuse_naive_add(x_d: TokenSet, x_c: TokenSet, p: FusionParams) -> tuple[TokenSet, FusionCache]:
    x_c_tokens, x_c_raw = _adapted_clip(x_c, p)
    _check_pair(x_d, x_c_tokens, x_c)
    fused = x_d.tokens + x_c_tokens
    cache = FusionCache(x_d=x_d.tokens, x_c=x_c_tokens, x_c_raw=x_c_raw)
    return TokenSet(fused, Source.FUSED, x_d.image_id, x_d.grid), cache


def fuse_film(x_d: TokenSet, x_c: TokenSet, p: FusionParams) -> tuple[TokenSet, FusionCache]:
    """Per token: z = gamma(x_c) * x_d + beta(x_c), with affine gamma/beta maps."""
    x_c_tokens, x_c_raw = _adapted_clip(x_c, p)
    _check_pair(x_d, x_c_tokens, x_c)
    gamma = affine(x_c_tokens, p.film_gamma_w.value, p.film_gamma_b.value)
    beta = affine(x_c_tokens, p.film_beta_w.value, p.film_beta_b.value)
    fused = gamma * x_d.tokens + beta
    cache = FusionCache(x_d=x_d.tokens, x_c=x_c_tokens, x_c_raw=x_c_raw, gamma=gamma, beta=beta)
    return TokenSet(fused, Source.FUSED, x_d.image_id, x_d.grid), cache


def fuse(x_d: TokenSet, x_c: TokenSet, p: FusionParams) -> tuple[TokenSet, FusionCache]:
    if p.variant == "residual":
        return fuse_residual(x_d, x_c, p)
    if p.variant == "add":
        return fuse_naive_add(x_d, x_c, p)
    if p.variant == "film":
        return fuse_film(x_d, x_c, p)
    raise ValueError(f"unknown fusion variant {p.variant!r}")


def fusion_backward(
    p: FusionParams, cache: FusionCache, d_z: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Accumulate parameter gradients; return (d_x_d, d_x_c_raw).

    d_x_c_raw is the gradient w.r.t. the pre-adapter CLIP tokens.
    """
    d_z = np.asarray(d_z, dtype=np.float64)
    if d_z.shape != cache.x_d.shape:
        raise ValueError(f"fusion_backward: dZ shape {d_z.shape} != {cache.x_d.shape}")

    if p.variant == "residual":
        w = p.w_res.value
        diff = cache.x_c - cache.x_d
        p.w_res.add_grad(diff.T @ d_z)
        p.b_res.add_grad(d_z.sum(axis=0))
        d_via_w = d_z @ w.T
        d_x_d = d_z - d_via_w
        d_x_c = d_via_w
    elif p.variant == "add":
        d_x_d = d_z.copy()
        d_x_c = d_z.copy()
    elif p.variant == "film":
        d_gamma = d_z * cache.x_d
        d_beta = d_z
        d_x_d = d_z * cache.gamma
        p.film_gamma_w.add_grad(cache.x_c.T @ d_gamma)
        p.film_gamma_b.add_grad(d_gamma.sum(axis=0))
        p.film_beta_w.add_grad(cache.x_c.T @ d_beta)
        p.film_beta_b.add_grad(d_beta.sum(axis=0))
        d_x_c = d_gamma @ p.film_gamma_w.value.T + d_beta @ p.film_beta_w.value.T
    else:
        raise ValueError(f"unknown fusion variant {p.variant!r}")

    if p.clip_adapter is not None:
        p.clip_adapter.add_grad(cache.x_c_raw.T @ d_x_c)
        d_x_c = d_x_c @ p.clip_adapter.value.T
    return d_x_d, d_x_c
