"""Exact nearest-neighbor search over a descriptor database and Recall@K.

Search is brute-force cosine ranking; ties break by ascending image id, so
results are independent of database insertion order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .tensor import l2_normalize

UNIT_NORM_TOL = 1e-5


@dataclass
class DescriptorIndex:
    ids: list[str]
    matrix: np.ndarray  # N x d, unit-norm rows, sorted by id
    built: bool = True

    @classmethod
    def build(cls, ids: Sequence[str], matrix: np.ndarray) -> "DescriptorIndex":
        matrix = np.asarray(matrix, dtype=np.float64)
        if len(ids) != matrix.shape[0]:
            raise ValueError(f"{len(ids)} ids for {matrix.shape[0]} descriptor rows")
        if len(set(ids)) != len(ids):
            raise ValueError("descriptor ids must be unique")
        norms = np.linalg.norm(matrix, axis=1)
        off = np.abs(norms - 1.0)
        if off.size and off.max() > UNIT_NORM_TOL:
            bad = ids[int(off.argmax())]
            raise ValueError(
                f"descriptor {bad!r}: norm {norms[off.argmax()]:.8f} deviates from 1 "
                f"by more than {UNIT_NORM_TOL}"
            )
        # Rows sorted by id: a stable sort on -similarity then yields the
        # documented ascending-id tie order for free.
        order = sorted(range(len(ids)), key=lambda i: ids[i])
        return cls(ids=[ids[i] for i in order], matrix=matrix[order])

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def knn_query(
    index: DescriptorIndex, query: np.ndarray, k: int
) -> list[tuple[str, float]]:
    """Top-k (id, cosine similarity) in descending similarity order."""
    if not index.built:
        raise ValueError("index not built")
    if k < 1 or k > index.size:
        raise ValueError(f"k={k} out of range for database of size {index.size}")
    q = np.asarray(query, dtype=np.float64)
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > UNIT_NORM_TOL:
        warnings.warn(f"query norm {norm:.6f} != 1; normalizing", stacklevel=2)
        q = l2_normalize(q)
    sims = index.matrix @ q
    order = np.argsort(-sims, kind="stable")[:k]
    return [(index.ids[i], float(sims[i])) for i in order]


def _full_ranking(index: DescriptorIndex, query: np.ndarray) -> list[str]:
    q = np.asarray(query, dtype=np.float64)
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > UNIT_NORM_TOL:
        q = l2_normalize(q)
    sims = index.matrix @ q
    order = np.argsort(-sims, kind="stable")
    return [index.ids[i] for i in order]


@dataclass
class EvalReport:
    dataset: str
    recall_at: dict[int, float]
    per_query_rank: dict[str, int] = field(default_factory=dict)
    num_queries: int = 0
    num_excluded: int = 0

    def table_lines(self) -> list[str]:
        lines = [f"dataset {self.dataset}", "K recall"]
        for k in sorted(self.recall_at):
            lines.append(f"{k} {self.recall_at[k]:.6f}")
        lines.append(f"num_queries {self.num_queries}")
        lines.append(f"num_excluded {self.num_excluded}")
        return lines

    def kv_lines(self) -> list[str]:
        lines = []
        for k in sorted(self.recall_at):
            lines.append(
                f"dataset={self.dataset} K={k} recall={self.recall_at[k]:.6f} "
                f"num_queries={self.num_queries} num_excluded={self.num_excluded}"
            )
        return lines


def recall_at_k(
    index: DescriptorIndex,
    query_ids: Sequence[str],
    query_matrix: np.ndarray,
    positives: Mapping[str, Iterable[str]],
    ks: Sequence[int],
    dataset: str = "dataset",
) -> EvalReport:
    """Fraction of queries whose top-K retrieval hits a ground-truth positive.

    Queries with an empty positive set are excluded from the denominator and
    reported in `num_excluded`. Unknown database ids in a positive set are an
    error (they indicate a broken manifest).
    """
    known = set(index.ids)
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1 or ks[-1] > index.size:
        raise ValueError(f"K values {ks} out of range for database of size {index.size}")
    per_query_rank: dict[str, int] = {}
    excluded = 0
    query_matrix = np.asarray(query_matrix, dtype=np.float64)
    for qi, qid in enumerate(query_ids):
        pos = set(positives.get(qid, ()))
        bad = pos - known
        if bad:
            raise ValueError(f"query {qid!r}: unknown database ids in positives: {sorted(bad)}")
        if not pos:
            excluded += 1
            continue
        ranking = _full_ranking(index, query_matrix[qi])
        rank = next(r for r, rid in enumerate(ranking, start=1) if rid in pos)
        per_query_rank[qid] = rank
    included = len(per_query_rank)
    recall = {}
    for k in ks:
        if included == 0:
            recall[k] = 0.0
        else:
            hits = sum(1 for r in per_query_rank.values() if r <= k)
            recall[k] = hits / included
    return EvalReport(
        dataset=dataset,
        recall_at=recall,
        per_query_rank=per_query_rank,
        num_queries=included,
        num_excluded=excluded,
    )
