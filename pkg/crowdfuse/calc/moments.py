"""
Second- and third-order co-occurrence statistics of annotator responses.

Under the DS model the joint PMF of two annotators' labels on a shared item is
A_m diag(d) A_i^T, and of three annotators the rank-K tensor [[d; A_m, A_i, A_j]].
"""

import logging
from itertools import combinations
from typing import Self

import numpy as np
from pydantic import model_validator

from crowdfuse._constants import DEFAULT_MIN_COLABELS
from crowdfuse._types import BoolArray, FloatArray, FrozenModel, IntArray
from crowdfuse.core.annotations import AnnotationSet
from crowdfuse.core.params import DSParams

logger = logging.getLogger(__name__)


class PairwiseStats(FrozenModel):
    """
    Empirical pairwise joint PMFs.

    matrices[m, i] is the K x K PMF of (label of m, label of i) over the items
    both labeled; `available[m, i]` is False for m == i and for pairs with
    fewer than `min_colabels` shared items.
    """

    matrices: FloatArray
    counts: IntArray
    available: BoolArray
    min_colabels: int

    @model_validator(mode="after")
    def _check_stats(self) -> Self:
        m = self.counts.shape[0]
        if self.matrices.ndim != 4 or self.matrices.shape[:2] != (m, m):
            raise ValueError("matrices must have shape (M, M, K, K)")
        if self.available.shape != (m, m):
            raise ValueError("available must be M x M")
        return self

    @property
    def num_annotators(self) -> int:
        return int(self.counts.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.matrices.shape[2])

    def pairs(self) -> list[tuple[int, int]]:
        """Available unordered pairs (m, i) with m < i."""
        ms, is_ = np.nonzero(np.triu(self.available, k=1))
        return list(zip(ms.tolist(), is_.tolist()))

    @classmethod
    def from_params(cls, params: DSParams, count: int = 10**6) -> Self:
        """Exact population moments A_m diag(d) A_i^T for every pair."""
        a = params.confusions
        mats = np.einsum("mak,k,ibk->miab", a, params.prior, a)
        m = params.num_annotators
        available = ~np.eye(m, dtype=bool)
        counts = np.where(available, count, 0)
        return cls(
            matrices=mats, counts=counts, available=available, min_colabels=1
        )


class TripleStats(FrozenModel):
    """
    Empirical third-order joint PMFs, stored for unordered triples m < i < j.

    tensors[(m, i, j)][a, b, c] = Pr(m says a, i says b, j says c).
    """

    tensors: dict[tuple[int, int, int], FloatArray]
    counts: dict[tuple[int, int, int], int]
    num_annotators: int
    num_classes: int
    min_colabels: int

    def triples(self) -> list[tuple[int, int, int]]:
        return sorted(self.tensors)

    def coverage(self) -> np.ndarray:
        """How many available triples each annotator belongs to."""
        cover = np.zeros(self.num_annotators, dtype=np.int64)
        for triple in self.tensors:
            cover[list(triple)] += 1
        return cover

    @classmethod
    def from_params(cls, params: DSParams, count: int = 10**6) -> Self:
        """Exact population tensors for every triple of distinct annotators."""
        a = params.confusions
        tensors = {}
        for m, i, j in combinations(range(params.num_annotators), 3):
            tensors[(m, i, j)] = np.einsum(
                "k,ak,bk,ck->abc", params.prior, a[m], a[i], a[j]
            )
        return cls(
            tensors=tensors,
            counts={t: count for t in tensors},
            num_annotators=params.num_annotators,
            num_classes=params.num_classes,
            min_colabels=1,
        )


def pairwise_stats(
    a: AnnotationSet, min_colabels: int = DEFAULT_MIN_COLABELS
) -> PairwiseStats:
    """
    Estimate every pairwise joint PMF from co-labeled items.

    Uses sparse one-hot response matrices so the cost scales with the number
    of records rather than N * M.
    """
    m, k = a.num_annotators, a.num_classes
    y = a.indicator_matrix()
    obs = a.observed_matrix()
    joint = (y.T @ y).toarray().reshape(m, k, m, k).transpose(0, 2, 1, 3)
    counts = np.rint((obs.T @ obs).toarray()).astype(np.int64)
    available = (counts >= min_colabels) & ~np.eye(m, dtype=bool)
    denom = np.where(available, counts, 1)[:, :, None, None]
    matrices = np.where(available[:, :, None, None], joint / denom, 0.0)
    n_off = m * (m - 1)
    if n_off and available.sum() < n_off:
        logger.info(
            "%d of %d annotator pairs below %d co-labels",
            n_off - int(available.sum()),
            n_off,
            min_colabels,
        )
    return PairwiseStats(
        matrices=matrices, counts=counts, available=available, min_colabels=min_colabels
    )


def triple_stats(
    a: AnnotationSet, min_colabels: int = DEFAULT_MIN_COLABELS
) -> TripleStats:
    """Estimate third-order joint PMFs for every triple with enough shared items."""
    k = a.num_classes
    labels = a.label_matrix()
    observed = labels >= 0
    pair_counts = (observed.T.astype(np.int64)) @ observed.astype(np.int64)

    tensors, counts = {}, {}
    for m, i in combinations(range(a.num_annotators), 2):
        if pair_counts[m, i] < min_colabels:
            continue
        both = observed[:, m] & observed[:, i]
        for j in range(i + 1, a.num_annotators):
            if pair_counts[m, j] < min_colabels or pair_counts[i, j] < min_colabels:
                continue
            rows = np.nonzero(both & observed[:, j])[0]
            if rows.shape[0] < min_colabels:
                continue
            flat = (labels[rows, m] * k + labels[rows, i]) * k + labels[rows, j]
            tensor = np.bincount(flat, minlength=k**3).reshape(k, k, k)
            tensors[(m, i, j)] = tensor / rows.shape[0]
            counts[(m, i, j)] = int(rows.shape[0])
    return TripleStats(
        tensors=tensors,
        counts=counts,
        num_annotators=a.num_annotators,
        num_classes=k,
        min_colabels=min_colabels,
    )


class FactorizationResult(FrozenModel):
    """Parameters from a moment-matching fit plus its per-sweep objective."""

    params: DSParams
    objective_trace: list[float]
    iterations: int
