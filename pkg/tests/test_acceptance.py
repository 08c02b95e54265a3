"""
Seeded end-to-end checks on synthetic data.

Run with ``pytest -m slow``; each test repeats an experiment over several
seeds and can take up to a minute.
"""

import itertools

import numpy as np
import pytest

from crowdfuse.calc.ccem import (
    CCEMModel,
    TrainConfig,
    ccem_loss_grad,
    predict_batch,
    train_ccem,
)
from crowdfuse.calc.cnmf import cnmf_opt, cnmf_spa
from crowdfuse.calc.ctd import ctd_fit
from crowdfuse.calc.ds_em import (
    EMConfig,
    EMInit,
    e_step,
    fit_em,
    log_likelihood,
    map_decode,
)
from crowdfuse.calc.groups import fit_hierarchical, spammer_scores
from crowdfuse.calc.moments import PairwiseStats, TripleStats, pairwise_stats
from crowdfuse.calc.seqhmm import (
    concat_sequences,
    decode_all,
    fit_hmm_em,
    forward_backward,
    path_log_probability,
    viterbi,
)
from crowdfuse.calc.spectral import fit_one_coin_spectral
from crowdfuse.core.params import DSParams, one_coin_confusion
from crowdfuse.evalkit import confusion_error, exponent_study
from crowdfuse.simgen import (
    ConfusionMode,
    E2EGenSpec,
    GenSpec,
    GroupGenSpec,
    HMMGenSpec,
    diag_dominant_confusion,
    gen_ds,
    gen_e2e,
    gen_grouped,
    gen_hmm,
)

pytestmark = pytest.mark.slow


def _separable(k: int, m: int, rng) -> DSParams:
    """Diagonally dominant confusions with one class expert per class on even ids."""
    conf = np.stack([diag_dominant_confusion(k, 0.6, rng) for _ in range(m)])
    for cls in range(k):
        expert = conf[2 * cls]
        expert[cls, np.arange(k) != cls] = 0.0
        expert /= expert.sum(axis=0, keepdims=True)
    return DSParams(confusions=conf, prior=rng.dirichlet(np.full(k, 5.0)))


# ---------------------------------------------------------------------------
# Exact inference against enumeration
# ---------------------------------------------------------------------------


def test_ds_inference_matches_enumeration():
    rng = np.random.default_rng(0)
    for seed in range(50):
        k, m = int(rng.integers(2, 5)), int(rng.integers(1, 6))
        conf = np.swapaxes(rng.dirichlet(np.ones(k), size=(m, k)), 1, 2)
        spec = GenSpec(
            num_classes=k,
            num_annotators=m,
            num_items=8,
            mode=ConfusionMode.GIVEN,
            confusions=conf.tolist(),
            prior=rng.dirichlet(np.ones(k)).tolist(),
            p_obs=0.7,
            seed=seed,
        )
        sim = gen_ds(spec)
        a, p = sim.annotations, sim.params

        joint = np.tile(p.prior, (a.num_items, 1))
        for n, ann, label in a.records:
            joint[n] *= p.confusions[ann][label, :]
        posterior = joint / joint.sum(axis=1, keepdims=True)

        q = e_step(a, p)
        np.testing.assert_allclose(q, posterior, atol=1e-10)
        assert log_likelihood(a, p) == pytest.approx(
            np.log(joint.sum(axis=1)).sum(), rel=1e-10
        )
        best = posterior.max(axis=1)
        chosen = posterior[np.arange(a.num_items), map_decode(q)]
        np.testing.assert_allclose(chosen, best)


@pytest.mark.parametrize("length", [5, 8])
def test_hmm_inference_matches_enumeration(length):
    for seed in range(3):
        spec = HMMGenSpec(
            num_classes=3,
            num_annotators=3,
            num_items=length,
            p_obs=0.6,
            gamma=0.5,
            stickiness=0.6,
            seed=seed,
        )
        sim = gen_hmm(spec)
        seq, params = sim.sequences[0], sim.params
        paths = list(itertools.product(range(3), repeat=length))
        logp = np.array([path_log_probability(seq, params, p) for p in paths])
        weights = np.exp(logp - logp.max())
        weights /= weights.sum()
        gamma = np.zeros((length, 3))
        for w, path in zip(weights, paths):
            gamma[np.arange(length), list(path)] += w

        post = forward_backward(seq, params)
        np.testing.assert_allclose(post.gamma, gamma, atol=1e-10)
        total = logp.max() + np.log(np.exp(logp - logp.max()).sum())
        assert post.loglik == pytest.approx(total, rel=1e-10)
        decoded = path_log_probability(seq, params, viterbi(seq, params))
        assert decoded == pytest.approx(logp.max(), rel=1e-10)


# ---------------------------------------------------------------------------
# EM monotonicity
# ---------------------------------------------------------------------------


def _non_decreasing(trace) -> bool:
    trace = np.asarray(trace)
    return bool(np.all(np.diff(trace) >= -1e-8 * np.abs(trace[1:])))


def test_em_traces_are_monotone():
    for seed in range(20):
        spec = GenSpec(
            num_classes=3, num_annotators=6, num_items=500, p_obs=0.7, seed=seed
        )
        assert _non_decreasing(fit_em(gen_ds(spec).annotations).loglik_trace)
    for seed in range(10):
        spec = HMMGenSpec(num_classes=3, num_annotators=4, num_items=300, seed=seed)
        sim = gen_hmm(spec)
        fit = fit_hmm_em(sim.sequences, cfg=EMConfig(max_iters=100))
        assert _non_decreasing(fit.loglik_trace)


# ---------------------------------------------------------------------------
# Recovery from moments
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(("k", "m"), [(2, 4), (3, 6)])
def test_noiseless_moment_recovery(k, m):
    rng = np.random.default_rng(10 * k + m)
    params = _separable(k, m, rng)
    pairwise = PairwiseStats.from_params(params)

    spa = cnmf_spa(pairwise)
    np.testing.assert_allclose(spa.confusions, params.confusions, atol=1e-6)
    np.testing.assert_allclose(spa.prior, params.prior, atol=1e-6)

    refined = cnmf_opt(pairwise, spa, iters=50).params
    np.testing.assert_allclose(refined.confusions, params.confusions, atol=1e-6)

    start = DSParams(
        confusions=0.9 * params.confusions + 0.1 / k,
        prior=0.9 * params.prior + 0.1 / k,
    )
    ctd = ctd_fit(TripleStats.from_params(params), start, iters=1000, tol=0.0)
    np.testing.assert_allclose(ctd.params.confusions, params.confusions, atol=1e-4)
    np.testing.assert_allclose(ctd.params.prior, params.prior, atol=1e-4)


def test_sampled_moment_recovery():
    rng = np.random.default_rng(42)
    truth = _separable(3, 10, rng)
    spec = GenSpec(
        num_classes=3,
        num_annotators=10,
        num_items=20_000,
        mode=ConfusionMode.GIVEN,
        confusions=truth.confusions.tolist(),
        prior=truth.prior.tolist(),
        seed=42,
    )
    sim = gen_ds(spec)
    spa = cnmf_spa(pairwise_stats(sim.annotations))
    assert confusion_error(spa, truth) <= 0.15

    from_spa = fit_em(sim.annotations, EMConfig(init=EMInit.CNMF_SPA))
    from_truth = fit_em(sim.annotations, EMConfig(init=EMInit.GIVEN, given=truth))
    spa_error = np.mean(from_spa.labels != sim.truth)
    oracle_error = np.mean(from_truth.labels != sim.truth)
    assert spa_error <= oracle_error + 0.01


# ---------------------------------------------------------------------------
# Error exponent and spectral estimator
# ---------------------------------------------------------------------------


def test_error_decays_exponentially_with_crowd_size():
    study = exponent_study(accuracy=0.7, num_classes=2)
    assert study.annotator_counts[0] == 3 and study.annotator_counts[-1] == 31
    assert study.fit.beta > 0
    assert study.fit.r_squared >= 0.9


def test_spectral_one_coin_accuracy():
    for seed in range(10):
        spec = GenSpec(
            num_classes=2,
            num_annotators=20,
            num_items=2000,
            mode=ConfusionMode.ONE_COIN,
            accuracy_range=(0.6, 0.9),
            seed=seed,
        )
        sim = gen_ds(spec)
        result = fit_one_coin_spectral(sim.annotations)
        assert np.mean(result.labels != sim.truth) <= 0.05
        p_true = sim.params.confusions[:, 0, 0]
        assert np.mean(np.abs(result.p_hat - p_true)) <= 0.05


# ---------------------------------------------------------------------------
# Structured models
# ---------------------------------------------------------------------------


def test_sequence_model_beats_iid_on_sticky_chains():
    for seed in range(10):
        spec = HMMGenSpec(
            num_classes=3,
            num_annotators=5,
            num_items=20_000,
            mode=ConfusionMode.ONE_COIN,
            accuracy_range=(0.65, 0.65),
            stickiness=0.8,
            seed=seed,
        )
        sim = gen_hmm(spec)
        truth = np.concatenate(sim.paths)
        fit = fit_hmm_em(sim.sequences, cfg=EMConfig(max_iters=100))
        hmm_labels = np.concatenate(decode_all(sim.sequences, fit.params))
        combined, _ = concat_sequences(sim.sequences)
        iid_labels = fit_em(combined).labels
        assert np.mean(hmm_labels != truth) < np.mean(iid_labels != truth)


def test_group_model_beats_independent_model():
    wins = 0
    for seed in range(10):
        spec = GroupGenSpec(
            num_classes=3,
            num_annotators=80,
            num_items=2000,
            num_groups=4,
            gamma=0.85,
            group_gamma=0.6,
            seed=seed,
        )
        sim = gen_grouped(spec)
        grouped = fit_hierarchical(sim.annotations, num_groups=4, seed=seed)
        independent = fit_em(sim.annotations)
        grouped_error = np.mean(grouped.labels != sim.truth)
        independent_error = np.mean(independent.labels != sim.truth)
        wins += grouped_error <= independent_error
    assert wins >= 8


# ---------------------------------------------------------------------------
# End-to-end learning
# ---------------------------------------------------------------------------


def test_ccem_gradient_and_permutation_invariance():
    sim = gen_e2e(E2EGenSpec(num_classes=3, num_annotators=4, num_items=40, seed=1))
    rng = np.random.default_rng(1)
    model = CCEMModel(
        weights=rng.normal(size=(3, 2)),
        bias=rng.normal(size=3),
        logits=rng.normal(size=(4, 3, 3)),
    )
    for beta in (0.0, 0.2):
        loss, grads = ccem_loss_grad(model, sim.features, sim.annotations, beta)
        h = 1e-6
        for field in ("weights", "bias", "logits"):
            base = getattr(model, field)
            numeric = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                values = []
                for sign in (1.0, -1.0):
                    moved = np.array(base)
                    moved[idx] += sign * h
                    shifted = model.model_copy(update={field: moved})
                    values.append(
                        ccem_loss_grad(shifted, sim.features, sim.annotations, beta)[0]
                    )
                numeric[idx] = (values[0] - values[1]) / (2 * h)
            analytic = getattr(grads, field)
            rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
            assert rel <= 1e-4

        permuted = model.permute_classes([1, 2, 0])
        moved_loss, _ = ccem_loss_grad(permuted, sim.features, sim.annotations, beta)
        assert moved_loss == pytest.approx(loss, rel=1e-12)


def test_ccem_generalizes_on_blobs():
    base = dict(
        num_classes=2,
        num_annotators=5,
        mode=ConfusionMode.ONE_COIN,
        accuracy_range=(0.8, 0.8),
        p_obs=1.0,
    )
    for seed in range(5):
        train = gen_e2e(E2EGenSpec(num_items=2000, seed=seed, **base))
        held_out = gen_e2e(E2EGenSpec(num_items=1000, seed=seed + 100, **base))
        fit = train_ccem(train.features, train.annotations, TrainConfig(iters=500))
        pred = np.argmax(predict_batch(fit.model, held_out.features.x), axis=1)
        assert np.mean(pred == held_out.truth) >= 0.95


# ---------------------------------------------------------------------------
# Spammers
# ---------------------------------------------------------------------------


def test_planted_spammers_are_flagged_exactly():
    planted = [1, 4, 7, 8]
    for seed in range(10):
        rng = np.random.default_rng(seed)
        confusions = []
        for m in range(10):
            if m in planted:
                column = rng.dirichlet(np.ones(3))
                confusions.append(np.tile(column[:, None], (1, 3)))
            else:
                confusions.append(one_coin_confusion(0.8, 3))
        spec = GenSpec(
            num_classes=3,
            num_annotators=10,
            num_items=5000,
            mode=ConfusionMode.GIVEN,
            confusions=[c.tolist() for c in confusions],
            seed=seed,
        )
        fit = fit_em(gen_ds(spec).annotations)
        report = spammer_scores(fit.params)
        assert report.flagged.tolist() == planted
