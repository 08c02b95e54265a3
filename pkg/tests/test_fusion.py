import numpy as np
import pytest

from crowdfuse.calc.fusion import FusionConfig, FusionMethod, fuse, to_sequences
from crowdfuse.calc.seqhmm import concat_sequences, decode_all, fit_hmm_em
from crowdfuse.exceptions import NotBinaryError
from crowdfuse.simgen import GenSpec, HMMGenSpec, gen_ds, gen_hmm


@pytest.fixture(scope="module")
def binary_sim():
    spec = GenSpec(num_classes=2, num_annotators=8, num_items=1500, gamma=0.75, seed=3)
    return gen_ds(spec)


@pytest.fixture(scope="module")
def hmm_sim():
    spec = HMMGenSpec(
        num_classes=2,
        num_annotators=4,
        num_items=400,
        num_sequences=3,
        stickiness=0.85,
        seed=6,
    )
    return gen_hmm(spec)


@pytest.mark.parametrize("method", list(FusionMethod))
def test_every_method_labels_binary_data(binary_sim, method):
    cfg = FusionConfig(method=method, moment_iters=100)
    out = fuse(binary_sim.annotations, cfg)
    assert out.method == method
    assert out.labels.shape == (1500,)
    assert np.mean(out.labels != binary_sim.truth) < 0.15


@pytest.mark.parametrize(
    ("method", "attr"),
    [
        (FusionMethod.DS_EM, "params"),
        (FusionMethod.CNMF_SPA, "params"),
        (FusionMethod.HMM_EM, "hmm"),
        (FusionMethod.GROUPED, "groups"),
    ],
)
def test_methods_report_their_parameters(binary_sim, method, attr):
    out = fuse(binary_sim.annotations, FusionConfig(method=method))
    assert getattr(out, attr) is not None


def test_voting_methods_carry_no_parameters(binary_sim):
    out = fuse(binary_sim.annotations, FusionConfig(method=FusionMethod.MV))
    assert out.params is None and out.trace == []


def test_default_method_is_ds_em(binary_sim):
    assert fuse(binary_sim.annotations).method == FusionMethod.DS_EM


def test_one_coin_em_returns_one_coin_confusions(binary_sim):
    out = fuse(binary_sim.annotations, FusionConfig(method=FusionMethod.ONE_COIN_EM))
    conf = out.params.confusions
    np.testing.assert_allclose(conf[:, 0, 0], conf[:, 1, 1])


def test_refine_em_returns_a_likelihood_trace(binary_sim):
    cfg = FusionConfig(method=FusionMethod.CNMF_SPA, refine_em=True)
    out = fuse(binary_sim.annotations, cfg)
    assert len(out.trace) >= 2
    assert np.all(np.diff(out.trace) >= -1e-8 * np.abs(np.array(out.trace[1:])))


def test_spectral_rejects_multiclass():
    sim = gen_ds(GenSpec(num_classes=3, num_items=50))
    with pytest.raises(NotBinaryError):
        fuse(sim.annotations, FusionConfig(method=FusionMethod.SPECTRAL))


def test_hmm_em_with_sequence_order(hmm_sim):
    combined, offsets = concat_sequences(hmm_sim.sequences)
    order = [off + np.arange(s.num_items) for s, off in zip(hmm_sim.sequences, offsets)]
    out = fuse(combined, FusionConfig(method=FusionMethod.HMM_EM), sequences=order)
    direct = np.concatenate(
        decode_all(hmm_sim.sequences, fit_hmm_em(hmm_sim.sequences).params)
    )
    np.testing.assert_array_equal(out.labels, direct)


def test_to_sequences_round_trips_concatenation(hmm_sim):
    combined, offsets = concat_sequences(hmm_sim.sequences)
    order = [off + np.arange(s.num_items) for s, off in zip(hmm_sim.sequences, offsets)]
    for original, cut in zip(hmm_sim.sequences, to_sequences(combined, order)):
        assert sorted(original.records) == sorted(cut.records)
