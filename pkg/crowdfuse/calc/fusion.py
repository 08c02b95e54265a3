"""
One entry point for every label-integration method, keyed by name.
"""

import logging
from enum import StrEnum

import numpy as np
from pydantic import Field

from crowdfuse._constants import DEFAULT_SPAMMER_THRESHOLD
from crowdfuse._types import FrozenModel, IntArray
from crowdfuse.calc.cnmf import cnmf_opt, cnmf_spa
from crowdfuse.calc.ctd import ctd_fit
from crowdfuse.calc.ds_em import (
    EMConfig,
    EMInit,
    EMVariant,
    e_step,
    fit_em,
    m_step,
    map_decode,
    mv_posterior,
)
from crowdfuse.calc.groups import fit_hierarchical, spammer_scores
from crowdfuse.calc.moments import pairwise_stats, triple_stats
from crowdfuse.calc.seqhmm import decode_all, fit_hmm_em
from crowdfuse.calc.spectral import fit_one_coin_spectral
from crowdfuse.calc.voting import iterative_weighted_vote, majority_vote
from crowdfuse.core.annotations import AnnotationSet, LabeledSequence
from crowdfuse.core.params import DSParams, GroupModel, HMMParams
from crowdfuse.exceptions import AnchorDegenerateError, InsufficientPairsError

logger = logging.getLogger(__name__)


class FusionMethod(StrEnum):
    MV = "mv"
    WMV = "wmv"
    DS_EM = "ds-em"
    ONE_COIN_EM = "one-coin-em"
    SPECTRAL = "spectral"
    CNMF_SPA = "cnmf-spa"
    CNMF_OPT = "cnmf-opt"
    CTD = "ctd"
    HMM_EM = "hmm-em"
    GROUPED = "grouped"


class FusionConfig(FrozenModel):
    method: FusionMethod = FusionMethod.DS_EM
    em: EMConfig = Field(default_factory=EMConfig)
    num_groups: int = Field(default=2, ge=1)
    moment_iters: int = Field(default=500, ge=1)
    refine_em: bool = False
    spammer_threshold: float = Field(default=DEFAULT_SPAMMER_THRESHOLD, ge=0, le=1)
    seed: int = 0


class FusionOutput(FrozenModel):
    method: FusionMethod
    labels: IntArray
    params: DSParams | None = None
    hmm: HMMParams | None = None
    groups: GroupModel | None = None
    trace: list[float] = Field(default_factory=list)
    flagged_spammers: list[int] = Field(default_factory=list)


def to_sequences(
    a: AnnotationSet, sequences: list[np.ndarray]
) -> list[LabeledSequence]:
    """Cut an AnnotationSet into sequences given each one's ordered item ids."""
    out = []
    for sid, items in enumerate(sequences):
        sub = a.subset_items(items)
        out.append(LabeledSequence(**dict(sub), sequence_id=sid))
    return out


def _decode(a: AnnotationSet, params: DSParams, cfg: FusionConfig) -> tuple:
    """MAP labels under `params`, optionally after refining them by EM."""
    if cfg.refine_em:
        em_cfg = cfg.em.model_copy(update={"init": EMInit.GIVEN, "given": params})
        fit = fit_em(a, em_cfg)
        return fit.labels, fit.params, fit.loglik_trace
    return map_decode(e_step(a, params)), params, []


def _moment_init(a: AnnotationSet, cfg: FusionConfig) -> DSParams:
    """CNMF-SPA parameters, or the majority-vote M-step when SPA cannot run."""
    try:
        return cnmf_spa(pairwise_stats(a, cfg.em.min_colabels))
    except (AnchorDegenerateError, InsufficientPairsError) as err:
        logger.warning("SPA initialization failed (%s); using majority vote", err)
        return m_step(a, mv_posterior(a))


def fuse(
    a: AnnotationSet,
    cfg: FusionConfig | None = None,
    sequences: list[np.ndarray] | None = None,
) -> FusionOutput:
    """
    Integrate the labels of `a` with the configured method.

    `sequences` only matters for hmm-em: it lists the item ids of each
    sequence in order. By default all items form one sequence.
    """
    cfg = cfg or FusionConfig()
    method = cfg.method
    logger.info("fusing %d records with %s", a.num_records, method)

    match method:
        case FusionMethod.MV:
            return FusionOutput(method=method, labels=majority_vote(a).labels)

        case FusionMethod.WMV:
            labels, weights = iterative_weighted_vote(a)
            logger.debug("annotator weights %s", np.round(weights, 4).tolist())
            return FusionOutput(method=method, labels=labels)

        case FusionMethod.DS_EM | FusionMethod.ONE_COIN_EM:
            em_cfg = cfg.em
            if method == FusionMethod.ONE_COIN_EM:
                em_cfg = em_cfg.model_copy(update={"variant": EMVariant.ONE_COIN})
            fit = fit_em(a, em_cfg)
            flagged = spammer_scores(fit.params, cfg.spammer_threshold).flagged
            return FusionOutput(
                method=method,
                labels=fit.labels,
                params=fit.params,
                trace=fit.loglik_trace,
                flagged_spammers=flagged.tolist(),
            )

        case FusionMethod.SPECTRAL:
            spec = fit_one_coin_spectral(a, seed=cfg.seed)
            return FusionOutput(
                method=method, labels=spec.labels, params=DSParams.one_coin(spec.p_hat)
            )

        case FusionMethod.CNMF_SPA:
            params = cnmf_spa(pairwise_stats(a, cfg.em.min_colabels))
            labels, params, trace = _decode(a, params, cfg)
            return FusionOutput(
                method=method, labels=labels, params=params, trace=trace
            )

        case FusionMethod.CNMF_OPT:
            stats = pairwise_stats(a, cfg.em.min_colabels)
            fit = cnmf_opt(stats, _moment_init(a, cfg), iters=cfg.moment_iters)
            labels, params, trace = _decode(a, fit.params, cfg)
            return FusionOutput(
                method=method,
                labels=labels,
                params=params,
                trace=trace or fit.objective_trace,
            )

        case FusionMethod.CTD:
            stats = triple_stats(a, cfg.em.min_colabels)
            fit = ctd_fit(stats, _moment_init(a, cfg), iters=cfg.moment_iters)
            labels, params, trace = _decode(a, fit.params, cfg)
            return FusionOutput(
                method=method,
                labels=labels,
                params=params,
                trace=trace or fit.objective_trace,
            )

        case FusionMethod.HMM_EM:
            order = sequences if sequences is not None else [np.arange(a.num_items)]
            seqs = to_sequences(a, order)
            fit = fit_hmm_em(seqs, cfg=cfg.em)
            labels = np.zeros(a.num_items, dtype=np.int64)
            for items, path in zip(order, decode_all(seqs, fit.params)):
                labels[np.asarray(items, dtype=np.int64)] = path
            return FusionOutput(
                method=method, labels=labels, hmm=fit.params, trace=fit.loglik_trace
            )

        case FusionMethod.GROUPED:
            fit = fit_hierarchical(a, cfg.num_groups, cfg.em, seed=cfg.seed)
            return FusionOutput(
                method=method,
                labels=fit.labels,
                params=fit.model.effective_params(),
                groups=fit.model,
            )
