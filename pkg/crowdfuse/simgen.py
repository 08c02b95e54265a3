"""
Seeded generators for every supported noise model.

A single integer seed is split by `numpy.random.SeedSequence` into
independent streams for parameters, true labels, observation masks,
responses and model extras (group labels or features). Changing one
setting therefore never reshuffles an unrelated stream: the true labels do
not depend on `p_obs`, and grouped data with identity group confusions
reproduces the plain generator draw for draw.
"""

import logging
from enum import StrEnum
from typing import Self

import numpy as np
from pydantic import Field, model_validator

from crowdfuse._types import FloatArray, FrozenModel, IntArray
from crowdfuse.core.annotations import AnnotationSet, FeatureSet, LabeledSequence
from crowdfuse.core.params import (
    DSParams,
    GroupModel,
    HMMParams,
    confusion_vector_confusion,
    one_coin_confusion,
    uniform_confusion,
)
from crowdfuse.core.simplex import check_column_stochastic, check_simplex

logger = logging.getLogger(__name__)

_STREAMS = ("params", "labels", "mask", "responses", "extra")


class ConfusionMode(StrEnum):
    DIAG_DOMINANT = "diag-dominant"
    ONE_COIN = "one-coin"
    SPAMMER_HAMMER = "spammer-hammer"
    CONFUSION_VECTOR = "confusion-vector"
    GIVEN = "given"


class GenSpec(FrozenModel):
    num_classes: int = Field(default=2, ge=2)
    num_annotators: int = Field(default=5, ge=1)
    num_items: int = Field(default=1000, ge=0)
    prior: list[float] | None = None
    mode: ConfusionMode = ConfusionMode.DIAG_DOMINANT
    gamma: float = 0.7
    accuracy_range: tuple[float, float] = (0.6, 0.9)
    hammer_prob: float = Field(default=0.5, ge=0, le=1)
    hammer_accuracy: float = Field(default=1.0, ge=0, le=1)
    confusions: list[list[list[float]]] | None = None
    p_obs: float = Field(default=1.0, ge=0, le=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check_spec(self) -> Self:
        k, m = self.num_classes, self.num_annotators
        if not 1.0 / k < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (1/{k}, 1]")
        lo, hi = self.accuracy_range
        if not 0 <= lo <= hi <= 1:
            raise ValueError("accuracy range must satisfy 0 <= low <= high <= 1")
        if self.prior is not None:
            if len(self.prior) != k:
                raise ValueError("prior length must equal the number of classes")
            check_simplex(np.array(self.prior), "prior")
        if self.mode == ConfusionMode.GIVEN:
            if self.confusions is None:
                raise ValueError("mode 'given' requires confusions")
            conf = np.array(self.confusions, dtype=float)
            if conf.shape != (m, k, k):
                raise ValueError(f"given confusions must have shape ({m}, {k}, {k})")
            check_column_stochastic(conf, "given confusion")
        return self

    def prior_vector(self) -> np.ndarray:
        k = self.num_classes
        return np.full(k, 1.0 / k) if self.prior is None else np.array(self.prior)


class HMMGenSpec(GenSpec):
    stickiness: float = Field(default=0.8, ge=0, le=1)
    transition: list[list[float]] | None = None
    num_sequences: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _check_transition(self) -> Self:
        if self.transition is not None:
            t = np.array(self.transition, dtype=float)
            if t.shape != (self.num_classes, self.num_classes):
                raise ValueError("transition must be K x K")
            check_column_stochastic(t, "transition")
        return self

    def transition_matrix(self) -> np.ndarray:
        if self.transition is not None:
            return np.array(self.transition, dtype=float)
        k = self.num_classes
        t = np.full((k, k), (1.0 - self.stickiness) / (k - 1))
        np.fill_diagonal(t, self.stickiness)
        return t


class GroupGenSpec(GenSpec):
    num_groups: int = Field(default=1, ge=1)
    group_confusions: list[list[list[float]]] | None = None
    group_gamma: float = 0.8

    @model_validator(mode="after")
    def _check_groups(self) -> Self:
        k, num_groups = self.num_classes, self.num_groups
        if num_groups > self.num_annotators:
            raise ValueError("more groups than annotators")
        if not 1.0 / k < self.group_gamma <= 1.0:
            raise ValueError(f"group_gamma must lie in (1/{k}, 1]")
        if self.group_confusions is not None:
            xi = np.array(self.group_confusions, dtype=float)
            if xi.shape != (num_groups, k, k):
                raise ValueError(
                    f"group confusions must have shape ({num_groups}, {k}, {k})"
                )
            check_column_stochastic(xi, "group confusion")
        return self


class E2EGenSpec(GenSpec):
    dim: int = Field(default=2, ge=2)
    separation: float = Field(default=6.0, ge=0)


class Simulation(FrozenModel):
    annotations: AnnotationSet
    truth: IntArray
    params: DSParams


class HMMSimulation(FrozenModel):
    sequences: list[LabeledSequence]
    paths: list[IntArray]
    params: HMMParams


class GroupSimulation(FrozenModel):
    annotations: AnnotationSet
    truth: IntArray
    model: GroupModel
    group_labels: IntArray


class E2ESimulation(FrozenModel):
    features: FeatureSet
    annotations: AnnotationSet
    truth: IntArray
    params: DSParams


def _streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.default_rng(c) for name, c in zip(_STREAMS, children)}


def _inverse_cdf(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Index k with cdf[k-1] <= u < cdf[k] along the last axis."""
    k = cdf.shape[-1]
    return np.minimum(np.sum(cdf <= u[..., None], axis=-1), k - 1).astype(np.int64)


def diag_dominant_confusion(
    num_classes: int, gamma: float, rng: np.random.Generator
) -> np.ndarray:
    """Diagonal uniform in [gamma, 1]; each column's remaining mass split at random."""
    k = num_classes
    a = np.zeros((k, k))
    for col in range(k):
        diag = rng.uniform(gamma, 1.0)
        weights = rng.uniform(size=k - 1)
        weights /= weights.sum()
        rest = [r for r in range(k) if r != col]
        a[rest, col] = (1.0 - diag) * weights
        a[col, col] = diag
    return a


def _draw_confusions(spec: GenSpec, rng: np.random.Generator) -> np.ndarray:
    k, m = spec.num_classes, spec.num_annotators
    lo, hi = spec.accuracy_range
    match spec.mode:
        case ConfusionMode.DIAG_DOMINANT:
            return np.stack(
                [diag_dominant_confusion(k, spec.gamma, rng) for _ in range(m)]
            )
        case ConfusionMode.ONE_COIN:
            p = rng.uniform(lo, hi, size=m)
            return np.stack([one_coin_confusion(pm, k) for pm in p])
        case ConfusionMode.SPAMMER_HAMMER:
            hammer = rng.uniform(size=m) < spec.hammer_prob
            good = one_coin_confusion(spec.hammer_accuracy, k)
            return np.stack([good if h else uniform_confusion(k) for h in hammer])
        case ConfusionMode.CONFUSION_VECTOR:
            diag = rng.uniform(lo, hi, size=(m, k))
            return np.stack([confusion_vector_confusion(row) for row in diag])
        case ConfusionMode.GIVEN:
            return np.array(spec.confusions, dtype=float)


def _draw_labels(prior: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    return _inverse_cdf(np.cumsum(prior), rng.uniform(size=n))


def _draw_responses(
    confusions: np.ndarray,
    latent: np.ndarray,
    p_obs: float,
    streams: dict[str, np.random.Generator],
) -> AnnotationSet:
    """
    Sample y_nm ~ confusions[m][:, latent[n, m]] where observed.

    Mask and response uniforms are drawn for every (item, annotator) pair so
    the draws do not depend on which pairs end up observed.
    """
    n, m = latent.shape
    k = confusions.shape[1]
    observed = streams["mask"].uniform(size=(n, m)) < p_obs
    u = streams["responses"].uniform(size=(n, m))
    cdf = np.cumsum(confusions, axis=1)  # (M, K', K)
    cols = cdf[np.arange(m)[None, :], :, latent]  # (N, M, K')
    labels = _inverse_cdf(cols, u)
    items, annotators = np.nonzero(observed)
    return AnnotationSet(
        num_items=n,
        num_annotators=m,
        num_classes=k,
        items=items,
        annotators=annotators,
        labels=labels[items, annotators],
    )


def gen_ds(spec: GenSpec) -> Simulation:
    """Sample true labels, observation pattern and responses under the DS model."""
    streams = _streams(spec.seed)
    confusions = _draw_confusions(spec, streams["params"])
    prior = spec.prior_vector()
    truth = _draw_labels(prior, spec.num_items, streams["labels"])
    latent = np.repeat(truth[:, None], spec.num_annotators, axis=1)
    annotations = _draw_responses(confusions, latent, spec.p_obs, streams)
    logger.debug("generated %d records", annotations.num_records)
    return Simulation(
        annotations=annotations,
        truth=truth,
        params=DSParams(confusions=confusions, prior=prior),
    )


def gen_hmm(spec: HMMGenSpec) -> HMMSimulation:
    """
    Sample `num_sequences` Markov label chains of length `num_items` each,
    then annotate every position as in `gen_ds`.
    """
    streams = _streams(spec.seed)
    confusions = _draw_confusions(spec, streams["params"])
    prior = spec.prior_vector()
    trans = spec.transition_matrix()
    cdf_t = np.cumsum(trans, axis=0)
    n, m = spec.num_items, spec.num_annotators

    sequences, paths = [], []
    for sid in range(spec.num_sequences):
        u = streams["labels"].uniform(size=n)
        path = np.zeros(n, dtype=np.int64)
        if n:
            path[0] = _inverse_cdf(np.cumsum(prior), u[:1])[0]
        for pos in range(1, n):
            path[pos] = _inverse_cdf(cdf_t[:, path[pos - 1]], u[pos : pos + 1])[0]
        latent = np.repeat(path[:, None], m, axis=1)
        seq = _draw_responses(confusions, latent, spec.p_obs, streams)
        sequences.append(LabeledSequence(**dict(seq), sequence_id=sid))
        paths.append(path)

    params = HMMParams(initial=prior, transition=trans, confusions=confusions)
    return HMMSimulation(sequences=sequences, paths=paths, params=params)


def group_assignment(num_annotators: int, num_groups: int) -> np.ndarray:
    """Contiguous, nearly equal blocks of annotators."""
    return np.arange(num_annotators) * num_groups // num_annotators


def gen_grouped(spec: GroupGenSpec) -> GroupSimulation:
    """
    Sample from the two-level model: y, then one z per group from the group
    confusion, then every member's response from its own confusion of z.
    """
    streams = _streams(spec.seed)
    confusions = _draw_confusions(spec, streams["params"])
    prior = spec.prior_vector()
    truth = _draw_labels(prior, spec.num_items, streams["labels"])
    k, num_groups = spec.num_classes, spec.num_groups

    if spec.group_confusions is not None:
        xi = np.array(spec.group_confusions, dtype=float)
    else:
        xi = np.stack(
            [
                diag_dominant_confusion(k, spec.group_gamma, streams["extra"])
                for _ in range(num_groups)
            ]
        )
    cdf_xi = np.cumsum(xi, axis=1)
    u = streams["extra"].uniform(size=(spec.num_items, num_groups))
    group_labels = _inverse_cdf(
        cdf_xi[np.arange(num_groups)[None, :], :, truth[:, None]], u
    )

    assignment = group_assignment(spec.num_annotators, num_groups)
    latent = group_labels[:, assignment]
    annotations = _draw_responses(confusions, latent, spec.p_obs, streams)
    model = GroupModel(
        assignment=assignment,
        group_confusions=xi,
        annotator_confusions=confusions,
        prior=prior,
    )
    return GroupSimulation(
        annotations=annotations, truth=truth, model=model, group_labels=group_labels
    )


def class_means(num_classes: int, dim: int, separation: float) -> np.ndarray:
    """
    Class means evenly spaced on a circle in the first two coordinates, with
    neighbouring means `separation` apart.
    """
    radius = separation / (2.0 * np.sin(np.pi / num_classes))
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def gen_e2e(spec: E2EGenSpec) -> E2ESimulation:
    """DS annotations plus unit-variance Gaussian features around class means."""
    sim = gen_ds(spec)
    rng = _streams(spec.seed)["extra"]
    means = class_means(spec.num_classes, spec.dim, spec.separation)
    x = means[sim.truth] + rng.normal(size=(spec.num_items, spec.dim))
    return E2ESimulation(
        features=FeatureSet(x=x),
        annotations=sim.annotations,
        truth=sim.truth,
        params=sim.params,
    )
