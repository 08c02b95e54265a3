"""
Coupled nonnegative matrix factorization of pairwise annotator moments.

Every available co-occurrence matrix factors as S_{m,i} = A_m diag(d) A_i^T.
Stacking the blocks for a row set of annotators against a column set gives a
single nonnegative factorization X = W H whose W is the stacked confusions of
the row set. When every class has an expert annotator among the rows, W is
separable and the successive projection algorithm recovers it.
"""

import logging

import numpy as np
from scipy.optimize import nnls

from crowdfuse._constants import PROB_FLOOR
from crowdfuse.calc.moments import FactorizationResult, PairwiseStats
from crowdfuse.core.alignment import AlignMode, align_permutation
from crowdfuse.core.params import DSParams, uniform_confusion
from crowdfuse.core.simplex import (
    floor_columns,
    floor_vector,
    normalize_columns,
    simplex_normalize,
)
from crowdfuse.exceptions import (
    AnchorDegenerateError,
    DimensionMismatchError,
    InsufficientPairsError,
    InvalidParamsError,
)

logger = logging.getLogger(__name__)

Partition = tuple[list[int], list[int]]


def auto_partition(num_annotators: int) -> Partition:
    """Even-indexed annotators form the row set, odd-indexed the column set."""
    return list(range(0, num_annotators, 2)), list(range(1, num_annotators, 2))


def _check_partition(partition: Partition, num_annotators: int) -> Partition:
    rows, cols = (list(map(int, part)) for part in partition)
    if set(rows) & set(cols):
        raise InvalidParamsError("partition sets must be disjoint")
    if sorted(rows + cols) != list(range(num_annotators)):
        raise InvalidParamsError("partition must cover every annotator exactly once")
    if not rows or not cols:
        raise InsufficientPairsError("both partition sets need at least one annotator")
    return rows, cols


def successive_projection(x: np.ndarray, r: int) -> list[int]:
    """
    Pick `r` rows of `x` that span the conic hull of all rows.

    Greedily takes the row of largest residual norm, then projects every row
    onto the orthogonal complement of it. Ties go to the lowest row index.

    Raises
    ------
    AnchorDegenerateError
        If fewer than `r` linearly independent rows exist.
    """
    residual = np.array(x, dtype=float)
    scale = np.max(np.sum(residual**2, axis=1), initial=0.0)
    anchors = []
    for _ in range(r):
        norms = np.sum(residual**2, axis=1)
        j = int(np.argmax(norms))
        if norms[j] <= 1e-12 * max(scale, PROB_FLOOR):
            raise AnchorDegenerateError(
                f"only {len(anchors)} independent anchor rows, need {r}"
            )
        anchors.append(j)
        u = residual[j] / np.sqrt(norms[j])
        residual -= np.outer(residual @ u, u)
    return anchors


def _stack_blocks(stats: PairwiseStats, rows: list[int], cols: list[int]):
    k = stats.num_classes
    x = np.zeros((len(rows) * k, len(cols) * k))
    mask = np.zeros_like(x, dtype=bool)
    for r, m in enumerate(rows):
        for c, i in enumerate(cols):
            if stats.available[m, i]:
                x[r * k : (r + 1) * k, c * k : (c + 1) * k] = stats.matrices[m, i]
                mask[r * k : (r + 1) * k, c * k : (c + 1) * k] = True
    return x, mask


def _solve_side(
    stats: PairwiseStats, target: int, partners: list[int], confusions: np.ndarray
) -> np.ndarray | None:
    """
    NNLS estimate of B = A_target diag(d) from S_{target,p} = B A_p^T.

    Returns None when the target shares no available pair with `partners`.
    """
    used = [p for p in partners if stats.available[target, p]]
    if not used:
        return None
    design = np.vstack([confusions[p] for p in used])
    k = stats.num_classes
    b = np.empty((k, k))
    for row in range(k):
        rhs = np.concatenate([stats.matrices[target, p][row] for p in used])
        b[row], _ = nnls(design, rhs)
    return b


def cnmf_spa(stats: PairwiseStats, partition: Partition | None = None) -> DSParams:
    """
    Closed-form CNMF estimate of the DS parameters.

    Steps: stack the available row-set by column-set blocks into X (missing
    blocks are zero-filled), select K anchor rows by successive projection on
    the l1 row-normalized X, recover the row-set confusions by masked NNLS,
    then solve each column-set annotator and refit the row set against it.
    The prior is read from the column sums of A diag(d) and averaged over
    annotators weighted by their number of available pairs. Latent classes
    are finally aligned to make the confusions diagonally dominant.

    Raises
    ------
    InsufficientPairsError
        If no cross pair between the two sets is available.
    AnchorDegenerateError
        If the selected anchor rows are rank deficient.
    """
    m_total, k = stats.num_annotators, stats.num_classes
    rows, cols = _check_partition(partition or auto_partition(m_total), m_total)
    if not stats.available[np.ix_(rows, cols)].any():
        raise InsufficientPairsError("no available pair between the partition sets")

    x, mask = _stack_blocks(stats, rows, cols)
    row_sums = x.sum(axis=1)
    candidates = np.nonzero(row_sums > 0)[0]
    if candidates.size < k:
        raise AnchorDegenerateError("fewer nonzero moment rows than classes")
    x_bar = x[candidates] / row_sums[candidates, None]
    anchors = candidates[successive_projection(x_bar, k)]
    h = x[anchors] / row_sums[anchors, None]
    if np.linalg.matrix_rank(h) < k:
        raise AnchorDegenerateError("selected anchor rows are rank deficient")
    logger.debug("SPA anchors %s", anchors.tolist())

    w = np.zeros((x.shape[0], k))
    for r in range(x.shape[0]):
        seen = mask[r]
        if seen.any():
            w[r], _ = nnls(h[:, seen].T, x[r, seen])

    confusions = np.tile(uniform_confusion(k), (m_total, 1, 1))
    for r, m in enumerate(rows):
        confusions[m] = normalize_columns(w[r * k : (r + 1) * k])

    priors, weights = [], []

    def _side(targets: list[int], partners: list[int]) -> None:
        for t in targets:
            b = _solve_side(stats, t, partners, confusions)
            if b is None:
                logger.warning("annotator %d shares no pair across the partition", t)
                continue
            confusions[t] = normalize_columns(b)
            priors.append(simplex_normalize(b.sum(axis=0)))
            weights.append(int(stats.available[t, partners].sum()))

    _side(cols, rows)
    _side(rows, cols)

    prior = np.average(np.array(priors), axis=0, weights=weights)
    params = DSParams(
        confusions=floor_columns(confusions, PROB_FLOOR),
        prior=floor_vector(prior, PROB_FLOOR),
    )
    perm = align_permutation(params.confusions, AlignMode.DIAG_DOMINANT)
    return params.permute_classes(perm)


def _model_moment(params_a: np.ndarray, prior: np.ndarray, m: int, i: int):
    return params_a[m] @ np.diag(prior) @ params_a[i].T


def _kl_sum(s: np.ndarray, model: np.ndarray) -> float:
    support = s > 0
    return float(
        np.sum(s[support] * np.log(s[support] / np.maximum(model[support], PROB_FLOOR)))
    )


def cnmf_objective(stats: PairwiseStats, params: DSParams) -> float:
    """Sum over available unordered pairs of KL(S_{m,i} || A_m diag(d) A_i^T)."""
    if (params.num_annotators, params.num_classes) != (
        stats.num_annotators,
        stats.num_classes,
    ):
        raise DimensionMismatchError("params do not match the moment statistics")
    a, d = params.confusions, params.prior
    return sum(
        _kl_sum(stats.matrices[m, i], _model_moment(a, d, m, i))
        for m, i in stats.pairs()
    )


def _ratio(s: np.ndarray, model: np.ndarray) -> np.ndarray:
    return np.divide(s, model, out=np.zeros_like(s), where=model > 0)


def cnmf_opt(
    stats: PairwiseStats,
    init: DSParams,
    iters: int = 500,
    tol: float = 1e-10,
) -> FactorizationResult:
    """
    Refine DS parameters by minimizing the summed pairwise KL divergence.

    One sweep updates every A_m in turn and then d. Each block update is the
    multiplicative rule A_m <- A_m * sum_i (S_{m,i} / M_{m,i}) A_i diag(d)
    followed by column renormalization, which is an exact EM step for that
    block and therefore never increases the objective. Stops when the
    objective changes by at most tol * max(1, objective).
    """
    if (init.num_annotators, init.num_classes) != (
        stats.num_annotators,
        stats.num_classes,
    ):
        raise DimensionMismatchError("init does not match the moment statistics")
    a = np.array(init.confusions)
    d = np.array(init.prior)
    pairs = stats.pairs()
    if not pairs:
        raise InsufficientPairsError("no available annotator pairs")

    partners = [np.nonzero(stats.available[m])[0] for m in range(stats.num_annotators)]
    trace = [cnmf_objective(stats, init)]
    sweeps = 0
    for sweeps in range(1, iters + 1):
        for m in range(stats.num_annotators):
            if partners[m].size == 0:
                continue
            grad = np.zeros_like(a[m])
            for i in partners[m]:
                ratio = _ratio(stats.matrices[m, i], _model_moment(a, d, m, i))
                grad += ratio @ a[i] * d
            a[m] = floor_columns(a[m] * grad, PROB_FLOOR)

        weight = np.zeros_like(d)
        for m, i in pairs:
            ratio = _ratio(stats.matrices[m, i], _model_moment(a, d, m, i))
            weight += np.einsum("ab,ak,bk->k", ratio, a[m], a[i])
        d = floor_vector(d * weight, PROB_FLOOR)

        objective = cnmf_objective(stats, DSParams(confusions=a, prior=d))
        trace.append(objective)
        logger.debug("CNMF sweep %d: objective %.12g", sweeps, objective)
        if abs(trace[-2] - objective) <= tol * max(1.0, abs(objective)):
            break

    params = DSParams(confusions=a, prior=d)
    perm = align_permutation(params.confusions, AlignMode.DIAG_DOMINANT)
    return FactorizationResult(
        params=params.permute_classes(perm), objective_trace=trace, iterations=sweeps
    )
