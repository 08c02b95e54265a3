import numpy as np

from crowdfuse._constants import PROB_FLOOR, SIMPLEX_TOL
from crowdfuse.exceptions import (
    DimensionMismatchError,
    InvalidParamsError,
    NegativeEntryError,
    SupportMismatchError,
)


def simplex_normalize(v) -> np.ndarray:
    """
    Scale a nonnegative vector to unit sum.

    An all-zero vector maps to the uniform distribution.

    Raises
    ------
    NegativeEntryError
        If any entry is negative.
    """
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise NegativeEntryError(f"negative entry in {v}")
    total = v.sum()
    if total == 0:
        return np.full(v.shape, 1.0 / v.shape[0])
    return v / total


def normalize_columns(a: np.ndarray) -> np.ndarray:
    """Column-normalize a nonnegative matrix; all-zero columns become uniform."""
    a = np.asarray(a, dtype=float)
    sums = a.sum(axis=-2, keepdims=True)
    k = a.shape[-2]
    out = np.divide(a, sums, out=np.full_like(a, 1.0 / k), where=sums > 0)
    return out


def floor_columns(a: np.ndarray, floor: float = PROB_FLOOR) -> np.ndarray:
    """Clamp entries at `floor` and renormalize every column."""
    return normalize_columns(np.maximum(a, floor))


def floor_vector(v: np.ndarray, floor: float = PROB_FLOOR) -> np.ndarray:
    return simplex_normalize(np.maximum(v, floor))


def safe_log(p, floor: float = PROB_FLOOR) -> np.ndarray:
    return np.log(np.maximum(p, floor))


def kl_divergence(p, q) -> float:
    """
    KL(p || q) = sum_i p_i log(p_i / q_i) with 0 log 0 = 0.

    Raises
    ------
    DimensionMismatchError
        If the vectors differ in length.
    SupportMismatchError
        If q_i = 0 for some i with p_i > 0.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DimensionMismatchError(f"shapes {p.shape} and {q.shape} differ")
    support = p > 0
    if np.any(q[support] <= 0):
        raise SupportMismatchError("q vanishes where p has mass")
    value = float(np.sum(p[support] * np.log(p[support] / q[support])))
    # Rounding can leave a tiny negative value for p == q.
    return max(value, 0.0)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of a vector onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.shape[0] + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def project_columns(a: np.ndarray) -> np.ndarray:
    """Project each column of a matrix onto the probability simplex."""
    return np.apply_along_axis(project_simplex, 0, np.asarray(a, dtype=float))


def check_simplex(v: np.ndarray, name: str = "vector", tol: float = SIMPLEX_TOL):
    v = np.asarray(v)
    if np.any(v < -tol) or np.any(v > 1 + tol) or abs(v.sum() - 1.0) > tol:
        raise InvalidParamsError(f"{name} is not a probability vector")


def check_rows_simplex(rows: np.ndarray, name: str = "posterior", tol=SIMPLEX_TOL):
    rows = np.asarray(rows)
    if rows.ndim != 2:
        raise InvalidParamsError(f"{name} must be a matrix")
    if np.any(rows < -tol) or np.any(np.abs(rows.sum(axis=1) - 1.0) > tol):
        raise InvalidParamsError(f"{name} rows are not probability vectors")


def check_column_stochastic(a: np.ndarray, name: str = "matrix", tol=SIMPLEX_TOL):
    """Raise InvalidParamsError unless every column of `a` is a PMF; works on stacks."""
    a = np.asarray(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise InvalidParamsError(f"{name} must be square, got shape {a.shape}")
    if np.any(a < -tol) or np.any(a > 1 + tol):
        raise InvalidParamsError(f"{name} has entries outside [0, 1]")
    if np.any(np.abs(a.sum(axis=-2) - 1.0) > tol):
        raise InvalidParamsError(f"{name} columns do not sum to 1")
