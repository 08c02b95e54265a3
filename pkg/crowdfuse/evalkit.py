"""
Metrics for fused labels and recovered parameters.
"""

import logging
from pathlib import Path

import numpy as np
from matplotlib.figure import Figure
from sklearn.metrics import confusion_matrix

from crowdfuse._types import FloatArray, FrozenModel, IntArray
from crowdfuse.calc.ds_em import e_step, map_decode
from crowdfuse.core.alignment import AlignMode, align_permutation
from crowdfuse.core.params import DSParams
from crowdfuse.exceptions import (
    DimensionMismatchError,
    EmptyInputError,
    InsufficientPointsError,
    InvalidParamsError,
    LengthMismatchError,
    NonPositiveError,
)
from crowdfuse.simgen import ConfusionMode, GenSpec, gen_ds

logger = logging.getLogger(__name__)


class ClassMetrics(FrozenModel):
    precision: FloatArray
    recall: FloatArray
    f1: FloatArray
    undefined_precision: IntArray
    undefined_recall: IntArray
    macro_precision: float
    macro_recall: float
    macro_f1: float


class ExponentFit(FrozenModel):
    """log P_e = log(alpha) - beta * M, fitted by least squares."""

    alpha: float
    beta: float
    r_squared: float
    clipped: list[int]


class ExponentStudy(FrozenModel):
    annotator_counts: list[int]
    error_rates: list[float]
    fit: ExponentFit


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise LengthMismatchError(
            f"{pred.shape[0]} predictions for {truth.shape[0]} labels"
        )
    return pred, truth


def error_rate(pred, truth) -> float:
    """Fraction of positions where `pred` and `truth` differ."""
    pred, truth = _pair(pred, truth)
    if pred.size == 0:
        raise EmptyInputError("no labels to compare")
    return float(np.mean(pred != truth))


def prf1(pred, truth, num_classes: int) -> ClassMetrics:
    """
    Per-class precision, recall and F1 plus unweighted macro averages.

    A class never predicted has undefined precision, and a class never
    present has undefined recall; both are reported as 0 and listed.
    """
    pred, truth = _pair(pred, truth)
    for name, arr in (("prediction", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise InvalidParamsError(f"{name} label outside 0..{num_classes - 1}")

    table = confusion_matrix(truth, pred, labels=np.arange(num_classes))
    tp = np.diag(table).astype(float)
    predicted = table.sum(axis=0)
    actual = table.sum(axis=1)

    precision = np.divide(tp, predicted, out=np.zeros(num_classes), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros(num_classes), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(
        2 * precision * recall, denom, out=np.zeros(num_classes), where=denom > 0
    )
    return ClassMetrics(
        precision=precision,
        recall=recall,
        f1=f1,
        undefined_precision=np.nonzero(predicted == 0)[0],
        undefined_recall=np.nonzero(actual == 0)[0],
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
    )


def confusion_error(estimated: DSParams, truth: DSParams) -> float:
    """
    Mean relative Frobenius error of the confusions after class alignment.

    The estimate's classes are first permuted to best match `truth`.
    """
    if estimated.confusions.shape != truth.confusions.shape:
        raise DimensionMismatchError(
            f"estimated {estimated.confusions.shape} vs true {truth.confusions.shape}"
        )
    perm = align_permutation(
        estimated.confusions, AlignMode.REFERENCE, truth.confusions
    )
    aligned = estimated.confusions[:, :, list(perm)]
    diff = np.linalg.norm(aligned - truth.confusions, axis=(1, 2))
    return float(np.mean(diff / np.linalg.norm(truth.confusions, axis=(1, 2))))


def exponent_fit(
    annotator_counts, error_rates, num_trials: int | None = None
) -> ExponentFit:
    """
    Fit P_e ~ alpha * exp(-beta * M) by least squares on log P_e.

    Zero error rates are replaced by 1 / (2 * num_trials) and listed in
    `clipped`; without `num_trials` they are rejected.

    Raises
    ------
    InsufficientPointsError
        With fewer than three points.
    NonPositiveError
        For negative rates, or zero rates when `num_trials` is not given.
    """
    m = np.asarray(annotator_counts, dtype=float)
    pe = np.asarray(error_rates, dtype=float)
    if m.shape != pe.shape:
        raise LengthMismatchError("one error rate per annotator count is required")
    if m.size < 3:
        raise InsufficientPointsError(f"need at least 3 points, got {m.size}")
    if np.any(pe < 0):
        raise NonPositiveError("error rates must be nonnegative")

    zero = np.nonzero(pe == 0)[0]
    if zero.size:
        if num_trials is None:
            raise NonPositiveError("zero error rate needs num_trials for clipping")
        pe = np.where(pe == 0, 1.0 / (2 * num_trials), pe)
        logger.info("clipped %d zero error rates", zero.size)

    log_pe = np.log(pe)
    design = np.column_stack([np.ones_like(m), -m])
    (log_alpha, beta), *_ = np.linalg.lstsq(design, log_pe, rcond=None)
    residual = log_pe - design @ np.array([log_alpha, beta])
    ss_res = float(residual @ residual)
    ss_tot = float(np.sum((log_pe - log_pe.mean()) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return ExponentFit(
        alpha=float(np.exp(log_alpha)),
        beta=float(beta),
        r_squared=r_squared,
        clipped=zero.tolist(),
    )


def exponent_study(
    accuracy: float = 0.7,
    num_classes: int = 2,
    annotator_counts=range(3, 32, 2),
    num_items: int = 10_000,
    seed: int = 0,
) -> ExponentStudy:
    """
    MAP error with the true one-coin parameters as the crowd grows.

    Every point is an independent seeded simulation with all annotators at
    the same accuracy and full observation.
    """
    counts = [int(m) for m in annotator_counts]
    rates = []
    for m in counts:
        spec = GenSpec(
            num_classes=num_classes,
            num_annotators=m,
            num_items=num_items,
            mode=ConfusionMode.ONE_COIN,
            accuracy_range=(accuracy, accuracy),
            seed=seed + m,
        )
        sim = gen_ds(spec)
        pred = map_decode(e_step(sim.annotations, sim.params))
        rates.append(error_rate(pred, sim.truth))
        logger.debug("M=%d: MAP error %.5f", m, rates[-1])
    fit = exponent_fit(counts, rates, num_trials=num_items)
    return ExponentStudy(annotator_counts=counts, error_rates=rates, fit=fit)


def plot_exponent_fit(study: ExponentStudy, path: Path) -> Path:
    """Save a semi-log plot of the measured error rates and the fitted line."""
    m = np.asarray(study.annotator_counts, dtype=float)
    fit = study.fit
    fig = Figure(figsize=(6, 4))
    ax = fig.subplots()
    ax.semilogy(m, np.maximum(study.error_rates, 1e-12), "o", label="MAP error")
    ax.semilogy(
        m,
        fit.alpha * np.exp(-fit.beta * m),
        "-",
        label=f"fit: beta={fit.beta:.3f}, R^2={fit.r_squared:.3f}",
    )
    ax.set_xlabel("number of annotators")
    ax.set_ylabel("error rate")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    return path
