"""Query-residual global aggregation of token sets into unit descriptors.

Per block of learnable queries: scaled dot-product scores, a soft
assignment of tokens to queries (column softmax, or Sinkhorn with uniform
marginals), then a weighted sum of token-minus-query residuals. Block
outputs are concatenated, optionally projected, and L2-normalized.
The bag-of-queries variant sums weighted tokens without the residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import Parameter, as_float_array, matmul, softmax_columns

AGGREGATIONS = ("vlaq", "boq")
ASSIGNMENTS = ("softmax", "sinkhorn")


@dataclass
class QueryBank:
    """B blocks of S learnable d-dimensional query vectors.

    Stored as a single (B*S) x d parameter so the optimizer sees one tensor;
    `block(i)` returns the i-th S x d slice (a view).
    """

    blocks: int
    queries_per_block: int
    dim: int
    param: Parameter

    @classmethod
    def create(
        cls, blocks: int, queries_per_block: int, dim: int, rng: Optional[np.random.Generator] = None
    ) -> "QueryBank":
        if blocks < 1 or queries_per_block < 1:
            raise ValueError(f"need blocks >= 1 and queries_per_block >= 1, got {blocks}, {queries_per_block}")
        rng = rng if rng is not None else np.random.default_rng(0)
        # N(0, 1/d) keeps initial scaled-dot scores O(1).
        vectors = rng.normal(0.0, 1.0 / np.sqrt(dim), (blocks * queries_per_block, dim))
        return cls(blocks, queries_per_block, dim, Parameter("queries", vectors, decay=False))

    def block(self, i: int) -> np.ndarray:
        s = self.queries_per_block
        return self.param.value[i * s : (i + 1) * s]

    def block_grad(self, i: int) -> np.ndarray:
        s = self.queries_per_block
        return self.param.grad[i * s : (i + 1) * s]


@dataclass
class SinkhornAux:
    """Per-iteration potentials, kept for the unrolled backward pass."""

    scores: np.ndarray
    u_history: list[np.ndarray]
    v_history: list[np.ndarray]


@dataclass
class AssignmentMatrix:
    alpha: np.ndarray  # M x S
    mode: str
    converged: bool = True
    marginal_error: float = 0.0
    aux: Optional[SinkhornAux] = field(default=None, repr=False)


@dataclass
class GlobalDescriptor:
    """Unit-norm global image descriptor (all-zero and flagged if degenerate)."""

    values: np.ndarray
    degenerate: bool = False

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


def similarity_scores(tokens: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """scores[j, k] = dot(q_k, z_j) / sqrt(d)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if tokens.ndim != 2 or queries.ndim != 2 or tokens.shape[1] != queries.shape[1]:
        raise ValueError(
            f"similarity_scores: token dim {tokens.shape} incompatible with query dim {queries.shape}"
        )
    return matmul(tokens, queries.T) / np.sqrt(tokens.shape[1])


def assign_softmax(scores: np.ndarray) -> AssignmentMatrix:
    """Softmax over tokens for each query: columns of alpha sum to 1."""
    return AssignmentMatrix(alpha=softmax_columns(scores), mode="softmax")


def softmax_assignment_backward(d_alpha: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Jacobian-vector product of the column softmax."""
    inner = np.sum(alpha * d_alpha, axis=0, keepdims=True)
    return alpha * (d_alpha - inner)


def assign_sinkhorn(
    scores: np.ndarray, iters: int = 50, tol: float = 1e-6
) -> AssignmentMatrix:
    """Alternate row/column normalization of exp(scores) in the log domain.

    Targets uniform marginals with total mass 1: every row sums to 1/M and
    every column to 1/S. Rows are normalized first. Non-convergence within
    `iters` is reported via the flag and the achieved marginal error, not
    raised. Set tol=0 to always run exactly `iters` iterations (this makes
    the map smooth, which the gradient checks rely on).
    """
    if iters < 1:
        raise ValueError(f"sinkhorn needs iters >= 1, got {iters}")
    if tol < 0:
        raise ValueError(f"sinkhorn needs tol >= 0, got {tol}")
    a = as_float_array(scores, "sinkhorn scores")
    if a.ndim != 2:
        raise ValueError(f"sinkhorn expects a 2-D score matrix, got shape {a.shape}")
    m, s = a.shape
    log_row = -np.log(m)
    log_col = -np.log(s)

    u = np.zeros(m)
    v = np.zeros(s)
    u_history: list[np.ndarray] = []
    v_history: list[np.ndarray] = []
    err = np.inf
    for _ in range(iters):
        u = log_row - _logsumexp(a + v[None, :], axis=1)
        u_history.append(u)
        v = log_col - _logsumexp(a + u[:, None], axis=0)
        v_history.append(v)
        alpha = np.exp(a + u[:, None] + v[None, :])
        err = max(
            float(np.max(np.abs(alpha.sum(axis=1) - 1.0 / m))),
            float(np.max(np.abs(alpha.sum(axis=0) - 1.0 / s))),
        )
        if tol > 0 and err <= tol:
            break
    alpha = np.exp(a + u[:, None] + v[None, :])
    return AssignmentMatrix(
        alpha=alpha,
        mode="sinkhorn",
        converged=bool(err <= tol) if tol > 0 else True,
        marginal_error=err,
        aux=SinkhornAux(scores=a, u_history=u_history, v_history=v_history),
    )


def sinkhorn_backward(d_alpha: np.ndarray, aux: SinkhornAux) -> np.ndarray:
    """Reverse-mode gradient through the executed Sinkhorn iterations."""
    a = aux.scores
    m, s = a.shape
    alpha = np.exp(a + aux.u_history[-1][:, None] + aux.v_history[-1][None, :])
    d_log_alpha = np.asarray(d_alpha, dtype=np.float64) * alpha

    d_a = d_log_alpha.copy()
    d_u = d_log_alpha.sum(axis=1)
    d_v = d_log_alpha.sum(axis=0)
    for t in range(len(aux.u_history) - 1, -1, -1):
        # v_t = log(1/S) - LSE_j(a + u_t): column-softmax weights.
        w = _softmax(a + aux.u_history[t][:, None], axis=0)
        d_a -= d_v[None, :] * w
        d_u = d_u - w @ d_v
        # u_t = log(1/M) - LSE_k(a + v_{t-1}): row-softmax weights.
        v_prev = aux.v_history[t - 1] if t > 0 else np.zeros(s)
        r = _softmax(a + v_prev[None, :], axis=1)
        d_a -= d_u[:, None] * r
        # v_{t-1} receives gradient only through u_t; u_{t-1} only through v_{t-1}.
        d_v = -(r.T @ d_u)
        d_u = np.zeros(m)
    return d_a


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    out = np.log(np.exp(x - m).sum(axis=axis)) + np.squeeze(m, axis=axis)
    return out


def aggregate_vlaq(tokens: np.ndarray, queries: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """v_k = sum_j alpha[j,k] * (z_j - q_k), computed as alpha^T Z - colsum(alpha) * Q."""
    tokens = np.asarray(tokens, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    col_mass = alpha.sum(axis=0)
    return matmul(alpha.T, tokens) - col_mass[:, None] * queries


def aggregate_boq(tokens: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """v_k = sum_j alpha[j,k] * z_j."""
    return matmul(np.asarray(alpha, dtype=np.float64).T, np.asarray(tokens, dtype=np.float64))


def vlaq_backward(
    d_v: np.ndarray, tokens: np.ndarray, queries: np.ndarray, alpha: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of aggregate_vlaq: returns (d_tokens, d_queries, d_alpha)."""
    d_v = np.asarray(d_v, dtype=np.float64)
    col_mass = alpha.sum(axis=0)
    d_tokens = alpha @ d_v
    d_queries = -col_mass[:, None] * d_v
    # dV[k]/dalpha[j,k] = z_j - q_k
    d_alpha = tokens @ d_v.T - np.sum(d_v * queries, axis=1)[None, :]
    return d_tokens, d_queries, d_alpha


def boq_backward(
    d_v: np.ndarray, tokens: np.ndarray, alpha: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    d_v = np.asarray(d_v, dtype=np.float64)
    return alpha @ d_v, tokens @ d_v.T


def scores_backward(
    d_scores: np.ndarray, tokens: np.ndarray, queries: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of similarity_scores: returns (d_tokens, d_queries)."""
    scale = 1.0 / np.sqrt(tokens.shape[1])
    d_tokens = d_scores @ queries * scale
    d_queries = d_scores.T @ tokens * scale
    return d_tokens, d_queries


@dataclass
class DescriptorCache:
    flat: np.ndarray
    pre_norm: np.ndarray
    norm: float
    values: np.ndarray
    block_shape: tuple[int, int]
    n_blocks: int


def build_descriptor(
    per_block_residuals: list[np.ndarray],
    projection: Optional[Parameter] = None,
    eps: float = 1e-12,
) -> tuple[GlobalDescriptor, DescriptorCache]:
    """Concatenate block outputs (block-major, query-major, channel-minor),
    optionally project, then L2-normalize. An all-zero pre-normalization
    vector yields a zero descriptor flagged degenerate."""
    if not per_block_residuals:
        raise ValueError("build_descriptor: need at least one block")
    shape = per_block_residuals[0].shape
    for v in per_block_residuals:
        if v.shape != shape:
            raise ValueError(f"build_descriptor: block shape {v.shape} != {shape}")
    flat = np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1) for v in per_block_residuals])
    pre = flat if projection is None else flat @ projection.value
    norm = float(np.linalg.norm(pre))
    values = pre / max(norm, eps)
    cache = DescriptorCache(
        flat=flat,
        pre_norm=pre,
        norm=norm,
        values=values,
        block_shape=shape,
        n_blocks=len(per_block_residuals),
    )
    return GlobalDescriptor(values=values, degenerate=norm == 0.0), cache


def descriptor_backward(
    d_values: np.ndarray,
    cache: DescriptorCache,
    projection: Optional[Parameter] = None,
    eps: float = 1e-12,
) -> list[np.ndarray]:
    """Gradient through normalization (and projection); returns per-block grads.

    Accumulates into the projection parameter's grad when present.
    """
    d_values = np.asarray(d_values, dtype=np.float64)
    if cache.norm >= eps:
        g = cache.values
        d_pre = (d_values - g * float(g @ d_values)) / cache.norm
    else:
        # Below eps the forward map is linear: pre / eps.
        d_pre = d_values / eps
    if projection is not None:
        projection.add_grad(np.outer(cache.flat, d_pre))
        d_flat = projection.value @ d_pre
    else:
        d_flat = d_pre
    s, d = cache.block_shape
    return [
        d_flat[i * s * d : (i + 1) * s * d].reshape(s, d) for i in range(cache.n_blocks)
    ]
