from enum import StrEnum
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

from crowdfuse._constants import BRUTE_FORCE_MAX_CLASSES
from crowdfuse.exceptions import DimensionMismatchError, EmptyInputError


class AlignMode(StrEnum):
    DIAG_DOMINANT = "diag-dominant"
    REFERENCE = "reference"


def _solve_assignment(cost: np.ndarray) -> tuple[int, ...]:
    """
    Minimize sum_j cost[j, perm[j]] over permutations.

    Exhaustive below the brute-force limit so ties resolve to the
    lexicographically smallest mapping; Hungarian algorithm above it.
    """
    k = cost.shape[0]
    if k > BRUTE_FORCE_MAX_CLASSES:
        _, cols = linear_sum_assignment(cost)
        return tuple(int(c) for c in cols)

    # itertools yields permutations in lexicographic order.
    perms = np.array(list(permutations(range(k))), dtype=np.int64)
    totals = cost[np.arange(k), perms].sum(axis=1)
    best = totals.min()
    scale = max(1.0, abs(best))
    first = int(np.nonzero(totals <= best + 1e-12 * scale)[0][0])
    return tuple(int(c) for c in perms[first])


def align_permutation(
    estimates,
    mode: AlignMode = AlignMode.DIAG_DOMINANT,
    reference=None,
) -> tuple[int, ...]:
    """
    Find the column permutation that resolves the latent-class ambiguity.

    The returned mapping `perm` means: column j of the aligned estimate is
    column perm[j] of the raw estimate (``A[:, perm]``).

    Parameters
    ----------
    estimates : sequence of K x K arrays
        Estimated confusion matrices sharing one unknown permutation.
    mode : AlignMode
        DIAG_DOMINANT maximizes the summed trace of the aligned matrices;
        REFERENCE minimizes the summed squared Frobenius distance to
        `reference`.
    reference : sequence of K x K arrays, optional
        Required in REFERENCE mode; same length as `estimates`.

    Raises
    ------
    EmptyInputError
        If `estimates` is empty.
    DimensionMismatchError
        If the reference list does not match the estimates.
    """
    est = np.asarray(estimates, dtype=float)
    if est.size == 0 or est.shape[0] == 0:
        raise EmptyInputError("no confusion matrices to align")
    if est.ndim == 2:
        est = est[None]

    if mode == AlignMode.DIAG_DOMINANT:
        # trace(A[:, perm]) = sum_j A[j, perm[j]]
        cost = -est.sum(axis=0)
    else:
        if reference is None:
            raise DimensionMismatchError("reference mode needs reference matrices")
        ref = np.asarray(reference, dtype=float)
        if ref.ndim == 2:
            ref = ref[None]
        if ref.shape != est.shape:
            raise DimensionMismatchError(
                f"estimates {est.shape} vs reference {ref.shape}"
            )
        # cost[j, p] = sum_m || est_m[:, p] - ref_m[:, j] ||^2
        diff = est[:, :, None, :] - ref[:, :, :, None]
        cost = np.sum(diff**2, axis=(0, 1))
    return _solve_assignment(cost)
