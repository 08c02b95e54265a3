"""
End-to-end learning from crowd labels with a linear-softmax classifier.

The classifier f(x) = softmax(W x + b) is composed with one confusion layer
per annotator, A_m = column softmax of Z_m, so that annotator m's label
distribution for item n is A_m f(x_n). Training minimizes the coupled
cross-entropy over observed (item, annotator) pairs, optionally minus a
log-det volume bonus on the predicted label matrix.
"""

import logging
from typing import Self

import numpy as np
from pydantic import Field, model_validator
from scipy.special import log_softmax, logsumexp, softmax

from crowdfuse._constants import PROB_FLOOR
from crowdfuse._types import FloatArray, FrozenModel, IntArray
from crowdfuse.calc.ds_em import m_step
from crowdfuse.core.annotations import AnnotationSet, FeatureSet
from crowdfuse.core.simplex import safe_log
from crowdfuse.exceptions import DimensionMismatchError, NonFiniteLossError

logger = logging.getLogger(__name__)


class TrainConfig(FrozenModel):
    lr: float = Field(default=0.5, gt=0)
    iters: int = Field(default=500, ge=1)
    beta: float = Field(default=0.0, ge=0)
    eps: float = Field(default=1e-6, gt=0)
    seed: int = 0
    init_scale: float = Field(default=0.01, ge=0)
    batch_size: int | None = Field(default=None, ge=1)
    max_backtracks: int = Field(default=3, ge=0)
    warmup_fraction: float = Field(default=0.5, ge=0, lt=1)


class CCEMModel(FrozenModel):
    """Classifier weights (K x D), bias (K) and confusion logits (M x K x K)."""

    weights: FloatArray
    bias: FloatArray
    logits: FloatArray

    @model_validator(mode="after")
    def _check_shapes(self) -> Self:
        k = self.bias.shape[0]
        if self.weights.ndim != 2 or self.weights.shape[0] != k:
            raise ValueError("weights must be K x D")
        if self.logits.ndim != 3 or self.logits.shape[1:] != (k, k):
            raise ValueError("confusion logits must be M x K x K")
        return self

    @property
    def num_classes(self) -> int:
        return int(self.bias.shape[0])

    @property
    def dim(self) -> int:
        return int(self.weights.shape[1])

    @property
    def num_annotators(self) -> int:
        return int(self.logits.shape[0])

    @property
    def confusions(self) -> np.ndarray:
        return softmax(self.logits, axis=1)

    def permute_classes(self, perm) -> Self:
        """Reorder latent classes: new class j is old class perm[j]."""
        perm = np.asarray(perm, dtype=np.int64)
        return type(self)(
            weights=self.weights[perm],
            bias=self.bias[perm],
            logits=self.logits[:, :, perm],
        )

    @classmethod
    def initial(
        cls, dim: int, num_classes: int, num_annotators: int, cfg: TrainConfig
    ) -> Self:
        """Small random classifier; confusion logits favor the identity by +2."""
        rng = np.random.default_rng(cfg.seed)
        logits = np.tile(2.0 * np.eye(num_classes), (num_annotators, 1, 1))
        return cls(
            weights=cfg.init_scale * rng.normal(size=(num_classes, dim)),
            bias=np.zeros(num_classes),
            logits=logits,
        )


class Gradients(FrozenModel):
    weights: FloatArray
    bias: FloatArray
    logits: FloatArray


class TrainResult(FrozenModel):
    model: CCEMModel
    loss_trace: list[float]


class E2EResult(FrozenModel):
    model: CCEMModel
    posterior: FloatArray
    loglik_trace: list[float]
    iterations: int


class AnchorReport(FrozenModel):
    anchor_items: IntArray
    anchor_purity: FloatArray
    expert_annotators: IntArray
    expert_margins: FloatArray


def predict(model: CCEMModel, x) -> np.ndarray:
    """softmax(W x + b) for a single feature vector."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.dim,):
        raise DimensionMismatchError(f"expected {model.dim} features, got {x.shape}")
    return softmax(model.weights @ x + model.bias)


def predict_batch(model: CCEMModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise DimensionMismatchError(
            f"expected N x {model.dim} features, got {x.shape}"
        )
    return softmax(x @ model.weights.T + model.bias, axis=1)


def _check_inputs(model: CCEMModel, features: FeatureSet, a: AnnotationSet) -> None:
    features.check_aligned(a)
    if features.dim != model.dim:
        raise DimensionMismatchError(f"model expects {model.dim} features")
    if (a.num_annotators, a.num_classes) != (model.num_annotators, model.num_classes):
        raise DimensionMismatchError("model does not match annotators or classes")


def _softmax_backward(p: np.ndarray, grad: np.ndarray, axis: int) -> np.ndarray:
    return p * (grad - np.sum(grad * p, axis=axis, keepdims=True))


def ccem_loss_grad(
    model: CCEMModel,
    features: FeatureSet,
    a: AnnotationSet,
    beta: float = 0.0,
    eps: float = 1e-6,
) -> tuple[float, Gradients]:
    """
    Coupled cross-entropy with optional volume regularization, and its gradient.

    loss = -mean over records of log [A_m f(x_n)]_label
           - beta * log det(F^T F / N + eps I)

    where F stacks the N predictions f(x_n) as rows. The Gram matrix is
    averaged over items so the volume term stays on the scale of the
    per-record cross-entropy. Probabilities are floored at 1e-12 inside
    the log; floored records contribute no gradient.
    """
    _check_inputs(model, features, a)
    x = features.x
    f = predict_batch(model, x)
    conf = model.confusions

    rows = conf[a.annotators, a.labels, :]  # (R, K)
    p = np.sum(rows * f[a.items], axis=1)
    n_rec = max(a.num_records, 1)
    loss = -float(np.sum(np.log(np.maximum(p, PROB_FLOOR)))) / n_rec
    g_p = np.where(p > PROB_FLOOR, -1.0 / (n_rec * np.maximum(p, PROB_FLOOR)), 0.0)

    g_f = np.zeros_like(f)
    np.add.at(g_f, a.items, g_p[:, None] * rows)
    g_conf = np.zeros_like(conf)
    np.add.at(g_conf, (a.annotators, a.labels), g_p[:, None] * f[a.items])

    if beta > 0:
        n_items = max(f.shape[0], 1)
        gram = f.T @ f / n_items + eps * np.eye(model.num_classes)
        _, logdet = np.linalg.slogdet(gram)
        loss -= beta * float(logdet)
        g_f -= (2.0 * beta / n_items) * f @ np.linalg.inv(gram)

    g_logits = _softmax_backward(f, g_f, axis=1)
    grads = Gradients(
        weights=g_logits.T @ x,
        bias=g_logits.sum(axis=0),
        logits=_softmax_backward(conf, g_conf, axis=1),
    )
    return loss, grads


def _step(model: CCEMModel, grads: Gradients, lr: float) -> CCEMModel:
    return CCEMModel(
        weights=model.weights - lr * grads.weights,
        bias=model.bias - lr * grads.bias,
        logits=model.logits - lr * grads.logits,
    )


def _full_batch(
    model: CCEMModel, features: FeatureSet, a: AnnotationSet, cfg: TrainConfig
) -> TrainResult:
    loss, grads = ccem_loss_grad(model, features, a, cfg.beta, cfg.eps)
    trace = [loss]
    if not np.isfinite(loss):
        raise NonFiniteLossError("initial loss is not finite", trace)
    lr = cfg.lr
    for it in range(cfg.iters):
        for _ in range(cfg.max_backtracks + 1):
            candidate = _step(model, grads, lr)
            new_loss, new_grads = ccem_loss_grad(
                candidate, features, a, cfg.beta, cfg.eps
            )
            if np.isfinite(new_loss) and new_loss <= loss:
                break
            lr /= 10.0
        else:
            if not np.isfinite(new_loss):
                raise NonFiniteLossError(f"loss diverged at iteration {it}", trace)
            logger.info("no descent step found at iteration %d; stopping", it)
            break
        model, loss, grads = candidate, new_loss, new_grads
        trace.append(loss)
        logger.debug("CCEM iter %d: loss %.10f (lr %.3g)", it, loss, lr)
    return TrainResult(model=model, loss_trace=trace)


def _minibatch(
    model: CCEMModel, features: FeatureSet, a: AnnotationSet, cfg: TrainConfig
) -> TrainResult:
    rng = np.random.default_rng(cfg.seed + 1)
    loss, _ = ccem_loss_grad(model, features, a, cfg.beta, cfg.eps)
    trace = [loss]
    for epoch in range(cfg.iters):
        order = rng.permutation(a.num_items)
        for start in range(0, a.num_items, cfg.batch_size):
            batch = np.sort(order[start : start + cfg.batch_size])
            _, grads = ccem_loss_grad(
                model, features.subset(batch), a.subset_items(batch), cfg.beta, cfg.eps
            )
            model = _step(model, grads, cfg.lr)
        loss, _ = ccem_loss_grad(model, features, a, cfg.beta, cfg.eps)
        trace.append(loss)
        if not np.isfinite(loss):
            raise NonFiniteLossError(f"loss diverged in epoch {epoch}", trace)
        logger.debug("CCEM epoch %d: loss %.10f", epoch, loss)
    return TrainResult(model=model, loss_trace=trace)


def train_ccem(
    features: FeatureSet, a: AnnotationSet, cfg: TrainConfig | None = None
) -> TrainResult:
    """
    Fit a CCEM model by gradient descent.

    Full-batch by default: a step that would increase the loss is retried
    with the step size divided by ten, up to `max_backtracks` times, and the
    reduced step size is kept. With `batch_size` set, each iteration is an
    epoch over seeded shuffled item batches at the fixed step size.

    With beta > 0 the first `warmup_fraction` of the iterations fit the plain
    cross-entropy and the volume term is switched on for the rest, starting
    from the warmed-up model. The loss trace then changes objective at that
    point; each phase is non-increasing on its own in full-batch mode.

    Raises
    ------
    NonFiniteLossError
        If the loss becomes NaN or infinite; the error carries the trace.
    """
    cfg = cfg or TrainConfig()
    model = CCEMModel.initial(features.dim, a.num_classes, a.num_annotators, cfg)
    fit = _full_batch if cfg.batch_size is None else _minibatch
    warmup = int(cfg.iters * cfg.warmup_fraction) if cfg.beta > 0 else 0
    if warmup == 0:
        return fit(model, features, a, cfg)

    warm_cfg = cfg.model_copy(update={"beta": 0.0, "iters": warmup})
    plain = fit(model, features, a, warm_cfg)
    logger.debug("volume term on after %d warm-up iterations", warmup)
    rest = cfg.model_copy(update={"iters": cfg.iters - warmup})
    result = fit(plain.model, features, a, rest)
    return TrainResult(
        model=result.model, loss_trace=plain.loss_trace + result.loss_trace
    )


def _weighted_ce(model: CCEMModel, x: np.ndarray, q: np.ndarray):
    log_f = log_softmax(x @ model.weights.T + model.bias, axis=1)
    loss = -float(np.sum(q * log_f)) / x.shape[0]
    g_logits = (np.exp(log_f) - q) / x.shape[0]
    return loss, g_logits.T @ x, g_logits.sum(axis=0)


def _fit_classifier(
    model: CCEMModel, x: np.ndarray, q: np.ndarray, cfg: TrainConfig, steps: int
) -> CCEMModel:
    """Gradient descent with backtracking on the q-weighted cross-entropy."""
    loss, g_w, g_b = _weighted_ce(model, x, q)
    lr = cfg.lr
    for _ in range(steps):
        for _ in range(cfg.max_backtracks + 1):
            candidate = CCEMModel(
                weights=model.weights - lr * g_w,
                bias=model.bias - lr * g_b,
                logits=model.logits,
            )
            new_loss, new_w, new_b = _weighted_ce(candidate, x, q)
            if np.isfinite(new_loss) and new_loss <= loss:
                break
            lr /= 10.0
        else:
            break
        model, loss, g_w, g_b = candidate, new_loss, new_w, new_b
    return model


def _e2e_log_joint(model: CCEMModel, features: FeatureSet, a: AnnotationSet):
    log_f = log_softmax(features.x @ model.weights.T + model.bias, axis=1)
    log_a = safe_log(model.confusions)
    np.add.at(log_f, a.items, log_a[a.annotators, a.labels, :])
    return log_f


def train_em_e2e(
    features: FeatureSet,
    a: AnnotationSet,
    cfg: TrainConfig | None = None,
    em_iters: int = 50,
    inner_steps: int = 20,
    tol: float = 1e-6,
) -> E2EResult:
    """
    EM for the end-to-end model with the classifier as per-item prior.

    E-step: q_n(k) proportional to f(x_n)_k times the product of the
    annotators' confusion entries. M-step: closed-form confusions as in
    Dawid-Skene EM, and a few backtracking gradient steps on the q-weighted
    cross-entropy of the classifier. Each M-step improves the expected
    complete log-likelihood, so the trace is non-decreasing.
    """
    cfg = cfg or TrainConfig()
    model = CCEMModel.initial(features.dim, a.num_classes, a.num_annotators, cfg)
    _check_inputs(model, features, a)
    x = features.x

    lj = _e2e_log_joint(model, features, a)
    trace = [float(logsumexp(lj, axis=1).sum())]
    iterations = 0
    for iterations in range(1, em_iters + 1):
        q = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
        conf = m_step(a, q).confusions
        model = _fit_classifier(model, x, q, cfg, inner_steps)
        model = CCEMModel(weights=model.weights, bias=model.bias, logits=np.log(conf))
        lj = _e2e_log_joint(model, features, a)
        ll = float(logsumexp(lj, axis=1).sum())
        trace.append(ll)
        logger.debug("E2E-EM iter %d: loglik %.10f", iterations, ll)
        if not np.isfinite(ll):
            raise NonFiniteLossError("E2E log-likelihood is not finite", trace)
        if abs(ll - trace[-2]) <= tol * abs(ll):
            break
    posterior = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    return E2EResult(
        model=model, posterior=posterior, loglik_trace=trace, iterations=iterations
    )


def anchor_diagnostic(model: CCEMModel, features: FeatureSet) -> AnchorReport:
    """
    Report how close a trained model comes to the anchor conditions.

    For each class: the item whose prediction is nearest to the unit vector
    and its probability, and the annotator whose row for that class stands
    out most, with its margin A_m[k, k] - max_{j != k} A_m[k, j]. Purities
    near one and positive margins are consistent with identifiability; no
    guarantee is implied.
    """
    f = predict_batch(model, features.x)
    anchors = np.argmax(f, axis=0)
    purity = f[anchors, np.arange(model.num_classes)]

    conf = model.confusions
    k = model.num_classes
    diag = conf[:, np.arange(k), np.arange(k)]
    off = conf.copy()
    off[:, np.arange(k), np.arange(k)] = -np.inf
    margins = diag - off.max(axis=2)
    experts = np.argmax(margins, axis=0)
    return AnchorReport(
        anchor_items=anchors,
        anchor_purity=purity,
        expert_annotators=experts,
        expert_margins=margins[experts, np.arange(k)],
    )
