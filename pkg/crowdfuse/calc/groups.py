"""
Dependent annotators: group discovery, two-level DS fitting and spammer scores.
"""

import logging

import numpy as np
from sklearn.cluster import KMeans

from crowdfuse._constants import DEFAULT_MIN_COLABELS, DEFAULT_SPAMMER_THRESHOLD
from crowdfuse._types import BoolArray, FloatArray, FrozenModel, IntArray
from crowdfuse.calc.ds_em import EMConfig, EMInit, EMResult, fit_em
from crowdfuse.core.annotations import AnnotationSet
from crowdfuse.core.params import DSParams, GroupModel
from crowdfuse.exceptions import EmptyGroupError, InvalidParamsError

logger = logging.getLogger(__name__)


class AgreementMatrix(FrozenModel):
    values: FloatArray
    counts: IntArray
    filled: BoolArray


class HierarchicalResult(FrozenModel):
    model: GroupModel
    labels: IntArray
    group_labels: IntArray


class SpammerReport(FrozenModel):
    scores: FloatArray
    flagged: IntArray
    threshold: float


def agreement_matrix(
    a: AnnotationSet, min_colabels: int = DEFAULT_MIN_COLABELS
) -> AgreementMatrix:
    """
    Empirical probability that two annotators give the same label.

    Pairs with fewer than `min_colabels` shared items take the mean of the
    reliable off-diagonal entries (1/K if there are none) and are marked in
    `filled`. The diagonal is 1.
    """
    m, k = a.num_annotators, a.num_classes
    y = a.indicator_matrix()
    obs = a.observed_matrix()
    joint = (y.T @ y).toarray().reshape(m, k, m, k)
    same = np.einsum("akbk->ab", joint)
    counts = np.rint((obs.T @ obs).toarray()).astype(np.int64)

    off = ~np.eye(m, dtype=bool)
    reliable = (counts >= min_colabels) & off
    values = np.divide(same, counts, out=np.zeros((m, m)), where=reliable)
    fill = values[reliable].mean() if reliable.any() else 1.0 / k
    filled = off & ~reliable
    values[filled] = fill
    np.fill_diagonal(values, 1.0)
    if filled.any():
        logger.info(
            "%d annotator pairs below %d co-labels, filled with %.4f",
            int(filled.sum()) // 2,
            min_colabels,
            fill,
        )
    return AgreementMatrix(values=values, counts=counts, filled=filled)


def _first_appearance(labels: np.ndarray) -> np.ndarray:
    """Renumber groups in order of their first member."""
    groups, first = np.unique(labels, return_index=True)
    remap = np.empty(groups.max() + 1, dtype=np.int64)
    remap[groups[np.argsort(first)]] = np.arange(groups.shape[0])
    return remap[labels]


def _fresh_init(cfg: EMConfig) -> EMConfig:
    """Given parameters cannot be reused on a subset of annotators."""
    if cfg.init != EMInit.GIVEN:
        return cfg
    return cfg.model_copy(update={"init": EMInit.MV, "given": None})


def cluster_annotators(agreement, num_groups: int, seed: int = 0) -> np.ndarray:
    """
    Spectral clustering of annotators on their agreement matrix.

    Annotators are embedded by the top `num_groups` eigenvectors of
    D^{-1/2} S D^{-1/2}, rows scaled to unit length, and clustered with
    k-means++ (10 restarts, best inertia kept). Groups are numbered in
    order of their lowest-indexed member.

    Raises
    ------
    InvalidParamsError
        If `num_groups` is outside 1..M.
    EmptyGroupError
        If k-means leaves a group without members.
    """
    s = np.asarray(agreement, dtype=float)
    m = s.shape[0]
    if not 1 <= num_groups <= m:
        raise InvalidParamsError(
            f"number of groups must be in 1..{m}, got {num_groups}"
        )
    if num_groups == 1:
        return np.zeros(m, dtype=np.int64)
    if num_groups == m:
        return np.arange(m, dtype=np.int64)

    deg = s.sum(axis=1)
    scale = 1.0 / np.sqrt(np.maximum(deg, 1e-12))
    _, vecs = np.linalg.eigh(scale[:, None] * s * scale[None, :])
    emb = vecs[:, ::-1][:, :num_groups]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = np.divide(emb, norms, out=np.zeros_like(emb), where=norms > 0)

    kmeans = KMeans(
        n_clusters=num_groups, init="k-means++", n_init=10, random_state=seed
    ).fit(emb)
    labels = kmeans.labels_.astype(np.int64)
    found = np.unique(labels).shape[0]
    if found < num_groups:
        raise EmptyGroupError(
            f"only {found} of {num_groups} groups are nonempty; try a smaller count"
        )
    return _first_appearance(labels)


def fit_hierarchical(
    a: AnnotationSet,
    num_groups: int,
    cfg: EMConfig | None = None,
    seed: int = 0,
) -> HierarchicalResult:
    """
    Two-level Dawid-Skene fit for annotators that err together.

    Annotators are clustered on their agreement matrix. Within each group,
    DS-EM estimates every member's confusion against the group's shared
    latent label, and the MAP group label of each item it covered becomes
    one record of a "group annotator". A second DS-EM over the group
    annotators estimates the group confusions, the class prior (fitted
    afresh) and the final labels.
    """
    cfg = _fresh_init(cfg or EMConfig())
    assignment = cluster_annotators(
        agreement_matrix(a, cfg.min_colabels).values, num_groups, seed
    )

    annotator_confusions = np.empty((a.num_annotators, a.num_classes, a.num_classes))
    group_labels = np.full((a.num_items, num_groups), -1, dtype=np.int64)
    for group in range(num_groups):
        members = np.nonzero(assignment == group)[0]
        sub = a.subset_annotators(members)
        fit = fit_em(sub, cfg)
        annotator_confusions[members] = fit.params.confusions
        covered = sub.records_per_item() > 0
        group_labels[covered, group] = fit.labels[covered]
        logger.debug("group %d: %d annotators", group, members.size)

    level_two = AnnotationSet.from_label_matrix(group_labels, a.num_classes)
    top = fit_em(level_two, cfg)
    model = GroupModel(
        assignment=assignment,
        group_confusions=top.params.confusions,
        annotator_confusions=annotator_confusions,
        prior=top.params.prior,
    )
    return HierarchicalResult(model=model, labels=top.labels, group_labels=group_labels)


def spammer_scores(
    params: DSParams, threshold: float = DEFAULT_SPAMMER_THRESHOLD
) -> SpammerReport:
    """
    Score how far each confusion matrix is from rank one.

    score_m = sigma_2(A_m) / sigma_1(A_m); a spammer's columns are all equal,
    giving 0, and the identity gives 1. Annotators scoring below
    `threshold` are flagged.
    """
    sv = np.linalg.svd(params.confusions, compute_uv=False)
    scores = np.clip(sv[:, 1] / sv[:, 0], 0.0, 1.0)
    flagged = np.nonzero(scores < threshold)[0]
    if flagged.size:
        logger.info("flagged %d likely spammers: %s", flagged.size, flagged.tolist())
    return SpammerReport(scores=scores, flagged=flagged, threshold=threshold)


def fit_without_spammers(
    a: AnnotationSet,
    cfg: EMConfig | None = None,
    threshold: float = DEFAULT_SPAMMER_THRESHOLD,
) -> tuple[EMResult, np.ndarray]:
    """
    Fit DS-EM, drop annotators flagged as spammers and fit again.

    Returns the refit on the kept annotators and their original indices.
    When every annotator is flagged the first fit is returned unchanged.
    """
    cfg = cfg or EMConfig()
    first = fit_em(a, cfg)
    report = spammer_scores(first.params, threshold)
    kept = np.setdiff1d(np.arange(a.num_annotators), report.flagged)
    if kept.size in (0, a.num_annotators):
        return first, np.arange(a.num_annotators)
    return fit_em(a.subset_annotators(kept), _fresh_init(cfg)), kept
