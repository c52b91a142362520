"""Multi-Similarity loss with pair mining over a batch of unit descriptors.

Mining keeps, per anchor, negatives harder than the easiest positive and
positives harder than the hardest negative (each with an epsilon slack).
Gradients flow through the selected similarities only, never through the
discrete mining decision itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import matmul


@dataclass
class MsParams:
    alpha_pos: float = 2.0
    beta_neg: float = 50.0
    lambda_margin: float = 1.0
    epsilon_mine: float = 0.1

    def __post_init__(self):
        for name in ("alpha_pos", "beta_neg", "lambda_margin", "epsilon_mine"):
            if getattr(self, name) <= 0:
                raise ValueError(f"MsParams.{name} must be positive")


@dataclass
class MinedPairs:
    """Per-anchor selected candidate indices (arrays of column indices)."""

    positives: list[np.ndarray]
    negatives: list[np.ndarray]

    @property
    def empty(self) -> bool:
        return all(p.size == 0 for p in self.positives) and all(
            n.size == 0 for n in self.negatives
        )


def similarity_matrix(descriptors: np.ndarray) -> np.ndarray:
    """Pairwise dot products; cosine similarities for unit-norm rows."""
    g = np.asarray(descriptors, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError(f"similarity_matrix expects N x d, got shape {g.shape}")
    return matmul(g, g.T)


def mine_pairs(sim: np.ndarray, labels, epsilon_mine: float) -> MinedPairs:
    """Select informative pairs per anchor.

    Keep negative j when sim[i, j] > min(positive sims) - epsilon, and
    positive j when sim[i, j] < max(negative sims) + epsilon. Anchors with
    no positives (or no negatives) in the batch yield empty sets.
    """
    sim = np.asarray(sim, dtype=np.float64)
    labels = np.asarray(labels)
    n = sim.shape[0]
    if sim.shape != (n, n) or labels.shape != (n,):
        raise ValueError(
            f"mine_pairs: similarity {sim.shape} inconsistent with {labels.shape[0]} labels"
        )
    positives: list[np.ndarray] = []
    negatives: list[np.ndarray] = []
    empty = np.empty(0, dtype=np.intp)
    for i in range(n):
        same = labels == labels[i]
        pos_idx = np.flatnonzero(same)
        pos_idx = pos_idx[pos_idx != i]
        neg_idx = np.flatnonzero(~same)
        if pos_idx.size == 0 or neg_idx.size == 0:
            positives.append(empty)
            negatives.append(empty)
            continue
        min_pos = sim[i, pos_idx].min()
        max_neg = sim[i, neg_idx].max()
        negatives.append(neg_idx[sim[i, neg_idx] > min_pos - epsilon_mine])
        positives.append(pos_idx[sim[i, pos_idx] < max_neg + epsilon_mine])
    return MinedPairs(positives=positives, negatives=negatives)


def ms_loss(
    sim: np.ndarray, mined: MinedPairs, p: MsParams
) -> tuple[float, np.ndarray]:
    """Loss value and dL/dS over the mined pairs.

    L = (1/N) sum_i [ (1/a) log(1 + sum_P exp(-a (S_ip - lam)))
                    + (1/b) log(1 + sum_N exp( b (S_in - lam))) ]
    """
    sim = np.asarray(sim, dtype=np.float64)
    n = sim.shape[0]
    d_sim = np.zeros_like(sim)
    total = 0.0
    for i in range(n):
        pos = mined.positives[i]
        neg = mined.negatives[i]
        if pos.size:
            e_pos = np.exp(-p.alpha_pos * (sim[i, pos] - p.lambda_margin))
            denom = 1.0 + e_pos.sum()
            total += np.log(denom) / p.alpha_pos
            d_sim[i, pos] += -e_pos / denom / n
        if neg.size:
            e_neg = np.exp(p.beta_neg * (sim[i, neg] - p.lambda_margin))
            denom = 1.0 + e_neg.sum()
            total += np.log(denom) / p.beta_neg
            d_sim[i, neg] += e_neg / denom / n
    return total / n, d_sim


def ms_loss_descriptor_grad(
    descriptors: np.ndarray, labels, p: MsParams
) -> tuple[float, np.ndarray, MinedPairs]:
    """Mine on the current similarities, then chain dL/dS to the descriptors."""
    g = np.asarray(descriptors, dtype=np.float64)
    sim = similarity_matrix(g)
    mined = mine_pairs(sim, labels, p.epsilon_mine)
    loss, d_sim = ms_loss(sim, mined, p)
    d_g = (d_sim + d_sim.T) @ g
    return loss, d_g, mined
