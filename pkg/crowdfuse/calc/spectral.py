import logging
from enum import StrEnum

import numpy as np

from crowdfuse._types import FloatArray, FrozenModel, IntArray
from crowdfuse.calc.voting import majority_vote
from crowdfuse.core.annotations import AnnotationSet
from crowdfuse.exceptions import (
    EmptyItemError,
    InvalidParamsError,
    NoConvergenceError,
    NotBinaryError,
)

logger = logging.getLogger(__name__)


class SignMode(StrEnum):
    MV = "mv"
    ANNOTATOR = "annotator"


class PowerResult(FrozenModel):
    eigvec: FloatArray
    eigval: float
    iterations: int
    converged: bool
    degenerate: bool


class SpectralResult(FrozenModel):
    labels: IntArray
    p_hat: FloatArray
    kappa_hat: float
    fully_observed: bool
    power: PowerResult


def response_matrix(a: AnnotationSet) -> np.ndarray:
    """N x M matrix of +-1 responses, 0 where the annotator gave no label."""
    if a.num_classes != 2:
        raise NotBinaryError(f"one-coin spectral method needs K=2, got {a.num_classes}")
    u = np.zeros((a.num_items, a.num_annotators))
    u[a.items, a.annotators] = 2.0 * a.labels - 1.0
    return u


def _iterate(s, x: np.ndarray, tol: float, max_iters: int):
    eigval = 0.0
    for it in range(1, max_iters + 1):
        y = s @ x
        norm = np.linalg.norm(y)
        if norm == 0:
            return x, 0.0, it, True
        eigval = float(x @ y)
        x_new = y / norm
        # A negative dominant eigenvalue flips the sign every step.
        change = min(np.linalg.norm(x_new - x), np.linalg.norm(x_new + x))
        x = x_new
        if change <= tol:
            return x, float(x @ (s @ x)), it, True
    return x, eigval, max_iters, False


def power_method(
    s,
    tol: float = 1e-10,
    max_iters: int = 10_000,
    seed: int = 0,
    strict: bool = False,
) -> PowerResult:
    """
    Dominant (largest magnitude) eigenpair of a symmetric matrix.

    Iterates x <- S x / ||S x|| from a seeded Gaussian start until successive
    iterates differ by at most `tol` (up to sign). A second, deflated run
    estimates the next eigenvalue; `degenerate` is set when it matches the
    dominant one in magnitude, in which case any vector of the eigenspace is
    returned.

    Raises
    ------
    InvalidParamsError
        If `s` is not square and symmetric.
    NoConvergenceError
        Only with ``strict=True``; otherwise the last iterate is returned
        with ``converged=False``.
    """
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise InvalidParamsError("power method needs a square matrix")
    if not np.allclose(s, s.T, atol=1e-10 * max(1.0, np.abs(s).max(initial=0.0))):
        raise InvalidParamsError("power method needs a symmetric matrix")

    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=s.shape[0])
    x0 /= np.linalg.norm(x0)
    vec, val, iters, converged = _iterate(s, x0, tol, max_iters)
    if not converged:
        if strict:
            raise NoConvergenceError(f"power method did not converge in {max_iters}")
        logger.warning("power method stopped after %d iterations", max_iters)

    degenerate = False
    if s.shape[0] > 1:
        deflated = s - val * np.outer(vec, vec)
        x1 = rng.normal(size=s.shape[0])
        x1 -= (x1 @ vec) * vec
        x1 /= np.linalg.norm(x1)
        # A bounded run suffices: the Rayleigh quotient only has to reach |val|.
        _, val2, _, _ = _iterate(deflated, x1, tol, min(max_iters, 100))
        degenerate = abs(val2) >= abs(val) * (1 - 1e-8) and abs(val) > 0
        if degenerate:
            logger.warning("dominant eigenvalue %.6g is not unique", val)

    return PowerResult(
        eigvec=vec,
        eigval=val,
        iterations=iters,
        converged=converged,
        degenerate=degenerate,
    )


def fit_one_coin_spectral(
    a: AnnotationSet,
    sign_mode: SignMode = SignMode.MV,
    trusted_annotator: int | None = None,
    seed: int = 0,
) -> SpectralResult:
    """
    Recover binary labels from the top eigenvector of U U^T with zeroed diagonal.

    Under the one-coin model the off-diagonal part of E[U U^T] is
    kappa * y y^T, so the sign pattern of its leading eigenvector recovers y
    up to a global sign. The sign is fixed by agreement with majority vote,
    or by requiring `trusted_annotator` to be better than chance.

    Missing responses are zero-filled; guarantees only hold for a fully
    observed response matrix and `fully_observed` reports which case applied.
    """
    u = response_matrix(a)
    if np.any(a.records_per_item() == 0):
        raise EmptyItemError("every item needs at least one annotation")
    fully_observed = a.num_records == a.num_items * a.num_annotators
    if not fully_observed:
        logger.warning("response matrix is sparse; zero-filled estimate is biased")

    gram = u @ u.T
    np.fill_diagonal(gram, 0.0)
    power = power_method(gram, seed=seed)
    signs = np.where(power.eigvec >= 0, 1.0, -1.0)

    match sign_mode:
        case SignMode.MV:
            mv = 2.0 * majority_vote(a).labels - 1.0
            if np.sum(signs == mv) < np.sum(-signs == mv):
                signs = -signs
        case SignMode.ANNOTATOR:
            if trusted_annotator is None:
                raise InvalidParamsError("annotator sign mode needs trusted_annotator")
            col = u[:, trusted_annotator]
            if np.sum(col * signs) < 0:
                signs = -signs

    labels = ((signs + 1) / 2).astype(np.int64)
    n_per = a.records_per_annotator()
    agree = np.bincount(
        a.annotators,
        weights=(labels[a.items] == a.labels).astype(float),
        minlength=a.num_annotators,
    )
    p_hat = np.divide(agree, n_per, out=np.full(a.num_annotators, 0.5), where=n_per > 0)
    kappa_hat = float(np.sum((2 * p_hat - 1) ** 2))
    return SpectralResult(
        labels=labels,
        p_hat=p_hat,
        kappa_hat=kappa_hat,
        fully_observed=fully_observed,
        power=power,
    )
