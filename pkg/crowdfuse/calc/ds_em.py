"""
Maximum-likelihood Dawid-Skene estimation by expectation-maximization.

All likelihood and posterior arithmetic runs in the log domain so that
hundreds of annotators per item do not underflow.
"""

import logging
from enum import StrEnum
from typing import Self

import numpy as np
from pydantic import Field, model_validator
from scipy.special import logsumexp

from crowdfuse._constants import DEFAULT_MIN_COLABELS, PROB_FLOOR
from crowdfuse._types import FloatArray, FrozenModel, IntArray
from crowdfuse.calc.voting import majority_vote
from crowdfuse.core.annotations import AnnotationSet
from crowdfuse.core.params import DSParams, uniform_confusion
from crowdfuse.core.simplex import (
    check_rows_simplex,
    floor_columns,
    floor_vector,
    safe_log,
)
from crowdfuse.exceptions import DimensionMismatchError

logger = logging.getLogger(__name__)


class EMVariant(StrEnum):
    GENERAL = "general"
    ONE_COIN = "one-coin"
    CONFUSION_VECTOR = "confusion-vector"


class EMInit(StrEnum):
    MV = "mv"
    SPECTRAL = "spectral"
    CNMF_SPA = "cnmf-spa"
    GIVEN = "given"


class EMConfig(FrozenModel):
    max_iters: int = Field(default=500, ge=1)
    rel_tol: float = Field(default=1e-8, gt=0)
    variant: EMVariant = EMVariant.GENERAL
    init: EMInit = EMInit.MV
    given: DSParams | None = None
    floor: float = Field(default=PROB_FLOOR, gt=0, lt=0.5)
    min_colabels: int = Field(default=DEFAULT_MIN_COLABELS, ge=1)

    @model_validator(mode="after")
    def _check_given(self) -> Self:
        if self.init == EMInit.GIVEN and self.given is None:
            raise ValueError("init 'given' requires initial parameters")
        return self


class EMResult(FrozenModel):
    params: DSParams
    posterior: FloatArray
    loglik_trace: list[float]
    iterations: int
    empty_annotators: IntArray

    @property
    def labels(self) -> np.ndarray:
        return map_decode(self.posterior)


def _check_dims(a: AnnotationSet, p: DSParams) -> None:
    if (p.num_annotators, p.num_classes) != (a.num_annotators, a.num_classes):
        raise DimensionMismatchError(
            f"params are (M={p.num_annotators}, K={p.num_classes}) but "
            f"annotations are (M={a.num_annotators}, K={a.num_classes})"
        )


def log_joint(a: AnnotationSet, p: DSParams) -> np.ndarray:
    """N x K matrix of log d(k) + sum_m log A_m(label_nm, k)."""
    _check_dims(a, p)
    log_a = safe_log(p.confusions)
    out = np.tile(safe_log(p.prior), (a.num_items, 1))
    np.add.at(out, a.items, log_a[a.annotators, a.labels, :])
    return out


def log_likelihood(a: AnnotationSet, p: DSParams) -> float:
    """Marginal log-likelihood of all observed labels under the DS model."""
    return float(logsumexp(log_joint(a, p), axis=1).sum())


def e_step(a: AnnotationSet, p: DSParams) -> np.ndarray:
    """Posterior q(y_n = k) for every item; unlabeled items get the prior."""
    lj = log_joint(a, p)
    q = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    empty = a.records_per_item() == 0
    q[empty] = p.prior
    return q


def _soft_counts(a: AnnotationSet, q: np.ndarray) -> np.ndarray:
    """counts[m, k', k] = sum over m's records labeled k' of q_n(k)."""
    counts = np.zeros((a.num_annotators, a.num_classes, a.num_classes))
    np.add.at(counts, (a.annotators, a.labels), q[a.items])
    return counts


def m_step(
    a: AnnotationSet,
    q: np.ndarray,
    variant: EMVariant = EMVariant.GENERAL,
    floor: float = PROB_FLOOR,
) -> DSParams:
    """
    Closed-form M-step for the general, one-coin and confusion-vector models.

    Annotators without records get the uniform confusion matrix and are
    logged; see `empty_annotators`.
    """
    q = np.asarray(q, dtype=float)
    if q.shape != (a.num_items, a.num_classes):
        raise DimensionMismatchError(f"posterior shape {q.shape} does not match")
    check_rows_simplex(q)
    k = a.num_classes
    counts = _soft_counts(a, q)
    col_mass = counts.sum(axis=1)  # (M, K): expected records of m per true class

    match variant:
        case EMVariant.GENERAL:
            confusions = counts
        case EMVariant.ONE_COIN:
            n_per = np.maximum(a.records_per_annotator(), 1)
            p = np.trace(counts, axis1=1, axis2=2) / n_per
            confusions = np.empty_like(counts)
            confusions[:] = ((1.0 - p) / (k - 1))[:, None, None]
            idx = np.arange(k)
            confusions[:, idx, idx] = p[:, None]
        case EMVariant.CONFUSION_VECTOR:
            diag = np.diagonal(counts, axis1=1, axis2=2)
            acc = np.divide(
                diag, col_mass, out=np.full_like(diag, 1.0 / k), where=col_mass > 0
            )
            confusions = np.empty_like(counts)
            confusions[:] = ((1.0 - acc) / (k - 1))[:, None, :]
            idx = np.arange(k)
            confusions[:, idx, idx] = acc

    empty = empty_annotators(a)
    if empty.size:
        logger.warning(
            "annotators %s have no records; using uniform confusions", empty.tolist()
        )
        confusions[empty] = uniform_confusion(k)

    prior = q.sum(axis=0) / max(a.num_items, 1)
    return DSParams(
        confusions=floor_columns(confusions, floor), prior=floor_vector(prior, floor)
    )


def empty_annotators(a: AnnotationSet) -> np.ndarray:
    return np.nonzero(a.records_per_annotator() == 0)[0]


def map_decode(q: np.ndarray) -> np.ndarray:
    """argmax_k q_n(k) per row; ties go to the lowest class index."""
    return np.argmax(np.asarray(q), axis=1)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[np.asarray(labels, dtype=np.int64)]


def mv_posterior(a: AnnotationSet) -> np.ndarray:
    """One-hot majority-vote labels; unvoted items get a uniform row."""
    vote = majority_vote(a)
    q = one_hot(vote.labels, a.num_classes)
    q[vote.unvoted] = 1.0 / a.num_classes
    return q


def initial_params(a: AnnotationSet, cfg: EMConfig) -> DSParams:
    match cfg.init:
        case EMInit.MV:
            return m_step(a, mv_posterior(a), cfg.variant, cfg.floor)
        case EMInit.SPECTRAL:
            from crowdfuse.calc.spectral import fit_one_coin_spectral

            spec = fit_one_coin_spectral(a)
            q = one_hot(spec.labels, a.num_classes)
            return m_step(a, q, cfg.variant, cfg.floor)
        case EMInit.CNMF_SPA:
            from crowdfuse.calc.cnmf import cnmf_spa
            from crowdfuse.calc.moments import pairwise_stats

            return cnmf_spa(pairwise_stats(a, cfg.min_colabels))
        case EMInit.GIVEN:
            _check_dims(a, cfg.given)
            return cfg.given


def fit_em(a: AnnotationSet, cfg: EMConfig | None = None) -> EMResult:
    """
    Alternate E- and M-steps until the log-likelihood stalls.

    Stops when |LL_t - LL_{t-1}| <= rel_tol * |LL_t| or after max_iters
    iterations. The trace holds the log-likelihood of every visited
    parameter set and is non-decreasing up to rounding.
    """
    cfg = cfg or EMConfig()
    params = initial_params(a, cfg)
    trace = [log_likelihood(a, params)]
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        q = e_step(a, params)
        params = m_step(a, q, cfg.variant, cfg.floor)
        ll = log_likelihood(a, params)
        trace.append(ll)
        logger.debug("EM iter %d: loglik %.10f", iterations, ll)
        if abs(ll - trace[-2]) <= cfg.rel_tol * abs(ll):
            break
    else:
        logger.info("EM stopped at max_iters=%d", cfg.max_iters)

    return EMResult(
        params=params,
        posterior=e_step(a, params),
        loglik_trace=trace,
        iterations=iterations,
        empty_annotators=empty_annotators(a),
    )
