import logging

import numpy as np

from crowdfuse._types import FrozenModel, IntArray
from crowdfuse.core.annotations import AnnotationSet
from crowdfuse.exceptions import (
    AllZeroWeightsError,
    DimensionMismatchError,
    NegativeEntryError,
)

logger = logging.getLogger(__name__)


class VoteResult(FrozenModel):
    labels: IntArray
    counts: IntArray
    unvoted: IntArray


def majority_vote(a: AnnotationSet) -> VoteResult:
    """
    Label every item with its most frequent annotator label.

    Ties go to the lowest class index. Items without any record get label 0
    and are listed in `unvoted`.
    """
    counts = a.vote_counts()
    unvoted = np.nonzero(counts.sum(axis=1) == 0)[0]
    if unvoted.size:
        logger.debug("%d items have no annotations", unvoted.size)
    return VoteResult(labels=np.argmax(counts, axis=1), counts=counts, unvoted=unvoted)


def weighted_majority_vote(a: AnnotationSet, w) -> np.ndarray:
    """
    Label item n with argmax_k sum_m w_m * 1[annotator m said k].

    Raises
    ------
    DimensionMismatchError
        If `w` does not have one entry per annotator.
    NegativeEntryError
        If any weight is negative.
    AllZeroWeightsError
        If every weight is zero.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (a.num_annotators,):
        raise DimensionMismatchError(
            f"expected {a.num_annotators} weights, got shape {w.shape}"
        )
    if np.any(w < 0):
        raise NegativeEntryError("annotator weights must be nonnegative")
    if not np.any(w > 0):
        raise AllZeroWeightsError("at least one annotator weight must be positive")

    scores = np.zeros((a.num_items, a.num_classes))
    np.add.at(scores, (a.items, a.labels), w[a.annotators])
    return np.argmax(scores, axis=1)


def one_coin_weights(p, num_classes: int = 2) -> np.ndarray:
    """
    Log-odds weights log((K-1) p / (1-p)), clipped at zero.

    These are the MAP-optimal voting weights when each annotator follows the
    one-coin model with accuracy p_m.
    """
    p = np.clip(np.asarray(p, dtype=float), 1e-6, 1 - 1e-6)
    return np.maximum(np.log((num_classes - 1) * p / (1 - p)), 0.0)


def iterative_weighted_vote(
    a: AnnotationSet, max_iters: int = 50
) -> tuple[np.ndarray, np.ndarray]:
    """
    Alternate between weighted voting and re-estimating annotator reliability.

    Starts from plain majority vote; each round sets w_m to the one-coin
    log-odds of annotator m's agreement rate with the current labels and
    revotes, until the labels stop changing.

    Returns
    -------
    labels : np.ndarray
    weights : np.ndarray
    """
    labels = majority_vote(a).labels
    weights = np.ones(a.num_annotators)
    n_per = np.maximum(a.records_per_annotator(), 1)
    for it in range(max_iters):
        agree = np.bincount(
            a.annotators,
            weights=(labels[a.items] == a.labels).astype(float),
            minlength=a.num_annotators,
        )
        weights = one_coin_weights(agree / n_per, a.num_classes)
        if not np.any(weights > 0):
            logger.warning("all reliabilities at or below chance; keeping votes")
            break
        new_labels = weighted_majority_vote(a, weights)
        if np.array_equal(new_labels, labels):
            logger.debug("iterative vote settled after %d rounds", it + 1)
            break
        labels = new_labels
    return labels, weights
