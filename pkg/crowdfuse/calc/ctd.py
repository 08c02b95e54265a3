"""
Coupled CP decomposition of third-order annotator moments.

T_{m,i,j} = sum_k d_k A_m[:, k] o A_i[:, k] o A_j[:, k] for every available
triple. The fit cycles over the confusion blocks and the prior; every block
update is accepted only if it does not increase the objective.
"""

import logging

import numpy as np
from scipy.optimize import nnls

from crowdfuse._constants import PROB_FLOOR
from crowdfuse.calc.moments import FactorizationResult, TripleStats
from crowdfuse.core.alignment import AlignMode, align_permutation
from crowdfuse.core.params import DSParams
from crowdfuse.core.simplex import project_columns, project_simplex
from crowdfuse.exceptions import DimensionMismatchError, UncoveredAnnotatorError

logger = logging.getLogger(__name__)

_GRADIENT_STEPS = 25


def ctd_objective(stats: TripleStats, params: DSParams) -> float:
    """Sum of squared Frobenius residuals over all available triples."""
    a, d = params.confusions, params.prior
    total = 0.0
    for (m, i, j), tensor in stats.tensors.items():
        model = np.einsum("k,ak,bk,ck->abc", d, a[m], a[i], a[j])
        total += float(np.sum((tensor - model) ** 2))
    return total


def _mode_system(stats: TripleStats, a: np.ndarray, d: np.ndarray, m: int):
    """
    Stack the mode-m unfoldings of every triple containing m.

    Returns (T, G) with the triples' contribution to the objective equal to
    ||T - A_m G||_F^2.
    """
    targets, designs = [], []
    for triple, tensor in stats.tensors.items():
        if m not in triple:
            continue
        pos = triple.index(m)
        x, y = (t for t in triple if t != m)
        unfolded = np.moveaxis(tensor, pos, 0).reshape(tensor.shape[0], -1)
        targets.append(unfolded)
        designs.append(np.einsum("k,uk,vk->kuv", d, a[x], a[y]).reshape(d.shape[0], -1))
    return np.hstack(targets), np.hstack(designs)


def _prior_system(stats: TripleStats, a: np.ndarray):
    targets, designs = [], []
    for (m, i, j), tensor in stats.tensors.items():
        targets.append(tensor.ravel())
        block = np.einsum("ak,bk,ck->abck", a[m], a[i], a[j])
        designs.append(block.reshape(-1, a.shape[2]))
    return np.concatenate(targets), np.vstack(designs)


def _update_confusion(current: np.ndarray, t: np.ndarray, g: np.ndarray) -> np.ndarray:
    """
    Minimize ||T - A G||^2 over column-stochastic A without leaving `current`'s
    level set.

    The equality-constrained least-squares solution is taken when it is
    nonnegative, since it is then the exact block minimizer. Otherwise the
    row-wise NNLS solution projected onto the simplex is tried, and as a last
    resort projected gradient steps with step 1/L.
    """
    k = current.shape[1]

    def objective(a):
        return float(np.sum((t - a @ g) ** 2))

    before = objective(current)
    gram = g @ g.T
    free = t @ g.T @ np.linalg.pinv(gram)
    candidate = free - (free.sum(axis=0, keepdims=True) - 1.0) / k
    if candidate.min() >= 0 and objective(candidate) <= before:
        return candidate

    candidate = project_columns(np.stack([nnls(g.T, row)[0] for row in t]))
    if objective(candidate) <= before:
        return candidate

    lipschitz = 2.0 * np.linalg.eigvalsh(gram)[-1]
    a = current
    for _ in range(_GRADIENT_STEPS):
        grad = 2.0 * (a @ g - t) @ g.T
        a = project_columns(a - grad / max(lipschitz, PROB_FLOOR))
    return a if objective(a) <= before else current


def _update_prior(current: np.ndarray, t: np.ndarray, phi: np.ndarray) -> np.ndarray:
    def objective(d):
        return float(np.sum((t - phi @ d) ** 2))

    before = objective(current)
    candidate = project_simplex(nnls(phi, t)[0])
    if objective(candidate) <= before:
        return candidate

    lipschitz = 2.0 * np.linalg.eigvalsh(phi.T @ phi)[-1]
    d = current
    for _ in range(_GRADIENT_STEPS):
        step = 2.0 * phi.T @ (phi @ d - t) / max(lipschitz, PROB_FLOOR)
        d = project_simplex(d - step)
    return d if objective(d) <= before else current


def ctd_fit(
    stats: TripleStats,
    init: DSParams,
    iters: int = 500,
    tol: float = 1e-12,
) -> FactorizationResult:
    """
    Fit DS parameters to third-order moments by cyclic block updates.

    Each sweep updates A_0, ..., A_{M-1} and then d; every update solves its
    least-squares subproblem over all triples involving the block, so the
    objective trace is non-increasing. Stops when a sweep improves the
    objective by at most tol * max(1, objective).

    Raises
    ------
    UncoveredAnnotatorError
        If some annotator belongs to no available triple.
    """
    if (init.num_annotators, init.num_classes) != (
        stats.num_annotators,
        stats.num_classes,
    ):
        raise DimensionMismatchError("init does not match the moment statistics")
    uncovered = np.nonzero(stats.coverage() == 0)[0]
    if uncovered.size:
        raise UncoveredAnnotatorError(
            f"annotators {uncovered.tolist()} are in no available triple"
        )

    a = np.array(init.confusions)
    d = np.array(init.prior)
    trace = [ctd_objective(stats, init)]
    sweeps = 0
    for sweeps in range(1, iters + 1):
        for m in range(stats.num_annotators):
            t, g = _mode_system(stats, a, d, m)
            a[m] = _update_confusion(a[m], t, g)
        t, phi = _prior_system(stats, a)
        d = _update_prior(d, t, phi)

        objective = ctd_objective(stats, DSParams(confusions=a, prior=d))
        trace.append(objective)
        logger.debug("CTD sweep %d: objective %.12g", sweeps, objective)
        if trace[-2] - objective <= tol * max(1.0, objective):
            break

    params = DSParams(confusions=a, prior=d)
    perm = align_permutation(params.confusions, AlignMode.DIAG_DOMINANT)
    return FactorizationResult(
        params=params.permute_classes(perm), objective_trace=trace, iterations=sweeps
    )
