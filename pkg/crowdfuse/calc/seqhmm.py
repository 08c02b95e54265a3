"""
Dawid-Skene model with a Markov chain on the true labels.

Positions of a sequence play the role of items. The transition matrix is
column-stochastic: transition[next, prev] = Pr(y_n = next | y_{n-1} = prev).
"""

import logging

import numpy as np
from scipy.special import logsumexp

from crowdfuse._types import FloatArray, FrozenModel
from crowdfuse.calc.ds_em import EMConfig, fit_em, m_step
from crowdfuse.core.annotations import AnnotationSet, LabeledSequence
from crowdfuse.core.params import HMMParams
from crowdfuse.core.simplex import floor_columns, floor_vector, safe_log
from crowdfuse.exceptions import (
    DimensionMismatchError,
    EmptyInputError,
    InvalidParamsError,
    NumericUnderflowError,
)

logger = logging.getLogger(__name__)


class Posteriors(FrozenModel):
    gamma: FloatArray
    xi: FloatArray
    loglik: float


class HMMEMResult(FrozenModel):
    params: HMMParams
    loglik_trace: list[float]
    iterations: int


def _check_dims(seq: AnnotationSet, params: HMMParams) -> None:
    if (seq.num_annotators, seq.num_classes) != (
        params.num_annotators,
        params.num_classes,
    ):
        raise DimensionMismatchError(
            f"sequence has (M={seq.num_annotators}, K={seq.num_classes}), "
            f"params have (M={params.num_annotators}, K={params.num_classes})"
        )


def emission_vector(seq: LabeledSequence, n: int, params: HMMParams) -> np.ndarray:
    """b_n(k) = prod over annotators m labeling position n of A_m(label, k)."""
    _check_dims(seq, params)
    if not 0 <= n < seq.length:
        raise InvalidParamsError(
            f"position {n} outside sequence of length {seq.length}"
        )
    rows = seq.items == n
    b = np.ones(params.num_classes)
    for m, label in zip(seq.annotators[rows], seq.labels[rows]):
        b *= params.confusions[m, label]
    return b


def log_emissions(seq: LabeledSequence, params: HMMParams) -> np.ndarray:
    """N x K matrix of log b_n(k); positions without records get zeros."""
    _check_dims(seq, params)
    log_a = safe_log(params.confusions)
    out = np.zeros((seq.num_items, params.num_classes))
    np.add.at(out, seq.items, log_a[seq.annotators, seq.labels, :])
    return out


def _log_domain_messages(log_b: np.ndarray, params: HMMParams):
    """Normalized forward-backward carried out entirely on log messages."""
    n_pos, k = log_b.shape
    with np.errstate(divide="ignore"):
        log_t = np.log(params.transition)
        log_prev = np.log(params.initial)

    log_alpha = np.empty((n_pos, k))
    log_norms = np.empty(n_pos)
    for n in range(n_pos):
        if n:
            log_prev = logsumexp(log_t + log_alpha[n - 1][None, :], axis=1)
        scores = log_b[n] + log_prev
        log_norms[n] = logsumexp(scores)
        log_alpha[n] = scores - log_norms[n]

    log_beta = np.zeros((n_pos, k))
    for n in range(n_pos - 2, -1, -1):
        back = logsumexp(log_t + (log_b[n + 1] + log_beta[n + 1])[:, None], axis=0)
        log_beta[n] = back - logsumexp(back)

    joint = log_alpha + log_beta
    gamma = np.exp(joint - logsumexp(joint, axis=1, keepdims=True))
    xi = np.zeros((n_pos - 1, k, k))
    if n_pos > 1:
        pair = (
            (log_b[1:] + log_beta[1:])[:, :, None]
            + log_t[None, :, :]
            + log_alpha[:-1, None, :]
        )
        xi = np.exp(pair - logsumexp(pair, axis=(1, 2), keepdims=True))
    return gamma, xi, float(log_norms.sum())


def forward_backward(
    seq: LabeledSequence, params: HMMParams, scaling: bool = True
) -> Posteriors:
    """
    Exact single-position and pairwise posteriors of the hidden labels.

    With scaling (the default) the recursions run on normalized log messages
    and the log-likelihood is the sum of the log normalizers, so long
    sequences and many annotators are handled without underflow. With
    ``scaling=False`` the textbook recursion on raw probabilities is used.
    xi[n][k_next, k_prev] is the joint posterior of positions n+1 and n.

    Raises
    ------
    NumericUnderflowError
        If ``scaling=False`` and a forward message underflows to zero.
    """
    n_pos, k = seq.num_items, params.num_classes
    if n_pos == 0:
        return Posteriors(gamma=np.zeros((0, k)), xi=np.zeros((0, k, k)), loglik=0.0)

    log_b = log_emissions(seq, params)
    if scaling:
        gamma, xi, loglik = _log_domain_messages(log_b, params)
        return Posteriors(gamma=gamma, xi=xi, loglik=loglik)

    emit = np.exp(log_b)
    trans = params.transition
    alpha = np.empty((n_pos, k))
    for n in range(n_pos):
        prev = params.initial if n == 0 else trans @ alpha[n - 1]
        alpha[n] = emit[n] * prev
        if not alpha[n].sum() > 0:
            raise NumericUnderflowError(f"forward message vanished at position {n}")

    beta = np.ones((n_pos, k))
    for n in range(n_pos - 2, -1, -1):
        beta[n] = trans.T @ (emit[n + 1] * beta[n + 1])

    gamma = alpha * beta
    gamma /= gamma.sum(axis=1, keepdims=True)
    xi = (emit[1:] * beta[1:])[:, :, None] * trans[None, :, :] * alpha[:-1, None, :]
    if n_pos > 1:
        xi /= xi.sum(axis=(1, 2), keepdims=True)
    return Posteriors(gamma=gamma, xi=xi, loglik=float(np.log(alpha[-1].sum())))


def viterbi(seq: LabeledSequence, params: HMMParams) -> np.ndarray:
    """Most probable label path; every argmax breaks ties toward the lowest index."""
    n_pos = seq.num_items
    if n_pos == 0:
        return np.zeros(0, dtype=np.int64)
    log_b = log_emissions(seq, params)
    log_t = safe_log(params.transition)

    delta = safe_log(params.initial) + log_b[0]
    back = np.zeros((n_pos, params.num_classes), dtype=np.int64)
    for n in range(1, n_pos):
        # scores[next, prev]
        scores = log_t + delta[None, :]
        back[n] = np.argmax(scores, axis=1)
        delta = scores[np.arange(params.num_classes), back[n]] + log_b[n]

    path = np.empty(n_pos, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for n in range(n_pos - 1, 0, -1):
        path[n - 1] = back[n, path[n]]
    return path


def path_log_probability(
    seq: LabeledSequence, params: HMMParams, path: np.ndarray
) -> float:
    """log Pr(path, observed labels) under the DS-HMM."""
    path = np.asarray(path, dtype=np.int64)
    if path.shape != (seq.num_items,):
        raise DimensionMismatchError("path length must equal the sequence length")
    if path.size == 0:
        return 0.0
    log_b = log_emissions(seq, params)
    log_t = safe_log(params.transition)
    return float(
        safe_log(params.initial)[path[0]]
        + log_t[path[1:], path[:-1]].sum()
        + log_b[np.arange(path.size), path].sum()
    )


def concat_sequences(seqs: list[LabeledSequence]) -> tuple[AnnotationSet, np.ndarray]:
    """
    Stack sequences into one AnnotationSet.

    Returns the stacked set and the start offset of every sequence.
    """
    if not seqs:
        raise EmptyInputError("no sequences given")
    lengths = np.array([s.num_items for s in seqs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    first = seqs[0]
    for s in seqs[1:]:
        if s.shape[1:] != first.shape[1:]:
            raise DimensionMismatchError("sequences disagree on annotators or classes")
    combined = AnnotationSet(
        num_items=int(lengths.sum()),
        num_annotators=first.num_annotators,
        num_classes=first.num_classes,
        items=np.concatenate([s.items + off for s, off in zip(seqs, offsets)]),
        annotators=np.concatenate([s.annotators for s in seqs]),
        labels=np.concatenate([s.labels for s in seqs]),
    )
    return combined, offsets


def _init_from_ds_em(seqs: list[LabeledSequence], cfg: EMConfig) -> HMMParams:
    combined, offsets = concat_sequences(seqs)
    ds = fit_em(combined, cfg)
    labels = ds.labels
    k = combined.num_classes
    bigrams = np.zeros((k, k))
    for seq, off in zip(seqs, offsets):
        path = labels[off : off + seq.num_items]
        np.add.at(bigrams, (path[1:], path[:-1]), 1.0)
    return HMMParams(
        initial=ds.params.prior,
        transition=floor_columns(bigrams, cfg.floor),
        confusions=ds.params.confusions,
    )


def _e_step(seqs: list[LabeledSequence], params: HMMParams) -> list[Posteriors]:
    return [forward_backward(s, params) for s in seqs]


def _m_step(
    seqs: list[LabeledSequence],
    combined: AnnotationSet,
    posts: list[Posteriors],
    cfg: EMConfig,
) -> HMMParams:
    k = combined.num_classes
    initial = np.zeros(k)
    transitions = np.zeros((k, k))
    for seq, post in zip(seqs, posts):
        if seq.num_items:
            initial += post.gamma[0]
            transitions += post.xi.sum(axis=0)
    gamma = np.vstack([post.gamma for post in posts])
    ds = m_step(combined, gamma, cfg.variant, cfg.floor)
    return HMMParams(
        initial=floor_vector(initial, cfg.floor),
        transition=floor_columns(transitions, cfg.floor),
        confusions=ds.confusions,
    )


def fit_hmm_em(
    seqs: list[LabeledSequence],
    init: HMMParams | None = None,
    cfg: EMConfig | None = None,
) -> HMMEMResult:
    """
    Baum-Welch estimation of the DS-HMM.

    Without `init`, parameters start from i.i.d. Dawid-Skene EM on the
    concatenated sequences, with transitions counted from the bigrams of the
    MAP labels. The confusion update reuses the i.i.d. M-step with the
    forward-backward posteriors in place of the i.i.d. ones.
    """
    cfg = cfg or EMConfig()
    combined, _ = concat_sequences(seqs)
    params = init if init is not None else _init_from_ds_em(seqs, cfg)
    _check_dims(combined, params)

    posts = _e_step(seqs, params)
    trace = [sum(p.loglik for p in posts)]
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        params = _m_step(seqs, combined, posts, cfg)
        posts = _e_step(seqs, params)
        ll = sum(p.loglik for p in posts)
        trace.append(ll)
        logger.debug("HMM-EM iter %d: loglik %.10f", iterations, ll)
        if abs(ll - trace[-2]) <= cfg.rel_tol * abs(ll):
            break
    else:
        logger.info("HMM-EM stopped at max_iters=%d", cfg.max_iters)
    return HMMEMResult(params=params, loglik_trace=trace, iterations=iterations)


def decode_all(seqs: list[LabeledSequence], params: HMMParams) -> list[np.ndarray]:
    return [viterbi(s, params) for s in seqs]
