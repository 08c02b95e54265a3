import numpy as np
import pytest

from crowdfuse.calc.ds_em import EMConfig, fit_em
from crowdfuse.calc.groups import (
    agreement_matrix,
    cluster_annotators,
    fit_hierarchical,
    fit_without_spammers,
    spammer_scores,
)
from crowdfuse.calc.voting import majority_vote
from crowdfuse.core.annotations import AnnotationSet
from crowdfuse.core.params import DSParams, one_coin_confusion
from crowdfuse.exceptions import InvalidParamsError
from crowdfuse.simgen import ConfusionMode, GenSpec, GroupGenSpec, gen_ds, gen_grouped


@pytest.fixture
def grouped_sim():
    spec = GroupGenSpec(
        num_classes=2,
        num_annotators=9,
        num_items=3000,
        num_groups=3,
        gamma=0.9,
        group_gamma=0.7,
        seed=5,
    )
    return gen_grouped(spec)


@pytest.fixture
def spammer_sim():
    hammer = one_coin_confusion(0.85, 2).tolist()
    spammer = [[0.5, 0.5], [0.5, 0.5]]
    spec = GenSpec(
        num_classes=2,
        num_annotators=9,
        num_items=2000,
        mode=ConfusionMode.GIVEN,
        confusions=[hammer] * 4 + [spammer] * 5,
        seed=11,
    )
    return gen_ds(spec)


# ---------------------------------------------------------------------------
# Agreement and clustering
# ---------------------------------------------------------------------------


def test_agreement_matrix_values_and_fill():
    a = AnnotationSet.from_records(
        [(0, 0, 0), (0, 1, 0), (0, 2, 1), (1, 0, 1), (1, 1, 1), (2, 0, 0), (2, 2, 0)],
        num_items=3,
        num_annotators=3,
        num_classes=2,
    )
    agreement = agreement_matrix(a, min_colabels=2)
    np.testing.assert_array_equal(agreement.counts, [[3, 2, 2], [2, 2, 1], [2, 1, 2]])
    # pair (1, 2) shares one item and takes the mean of the reliable pairs
    expected = [[1.0, 1.0, 0.5], [1.0, 1.0, 0.75], [0.5, 0.75, 1.0]]
    np.testing.assert_allclose(agreement.values, expected)
    assert agreement.filled[1, 2] and agreement.filled[2, 1]
    assert not agreement.filled[0, 1]


def test_agreement_matrix_without_reliable_pairs():
    a = AnnotationSet.from_records(
        [(0, 0, 0), (0, 1, 1)], num_items=1, num_annotators=2, num_classes=4
    )
    values = agreement_matrix(a, min_colabels=5).values
    np.testing.assert_allclose(values, [[1.0, 0.25], [0.25, 1.0]])


def test_cluster_annotators_numbers_groups_by_first_member():
    parity = np.arange(6) % 2
    s = np.where(parity[:, None] == parity[None, :], 0.9, 0.5)
    np.fill_diagonal(s, 1.0)
    np.testing.assert_array_equal(cluster_annotators(s, 2), parity)


def test_cluster_annotators_trivial_counts():
    s = np.full((4, 4), 0.7)
    np.testing.assert_array_equal(cluster_annotators(s, 1), np.zeros(4))
    np.testing.assert_array_equal(cluster_annotators(s, 4), np.arange(4))


@pytest.mark.parametrize("num_groups", [0, 5])
def test_cluster_annotators_rejects_bad_group_count(num_groups):
    with pytest.raises(InvalidParamsError):
        cluster_annotators(np.eye(4), num_groups)


def test_cluster_annotators_ignores_annotator_order():
    rng = np.random.default_rng(2)
    truth = np.repeat([0, 1, 2], 4)
    s = np.where(truth[:, None] == truth[None, :], 0.9, 0.5)
    s += rng.uniform(-0.02, 0.02, size=s.shape)
    s = (s + s.T) / 2
    np.fill_diagonal(s, 1.0)
    base = cluster_annotators(s, 3)
    perm = rng.permutation(12)
    moved = cluster_annotators(s[np.ix_(perm, perm)], 3)
    same_base = base[perm][:, None] == base[perm][None, :]
    np.testing.assert_array_equal(moved[:, None] == moved[None, :], same_base)
    np.testing.assert_array_equal(
        base[:, None] == base[None, :], truth[:, None] == truth[None, :]
    )


# ---------------------------------------------------------------------------
# Hierarchical fit
# ---------------------------------------------------------------------------


def test_hierarchical_fit_recovers_groups(grouped_sim):
    result = fit_hierarchical(grouped_sim.annotations, num_groups=3)
    np.testing.assert_array_equal(
        result.model.assignment, grouped_sim.model.assignment
    )
    assert result.group_labels.shape == (3000, 3)
    assert np.mean(result.labels != grouped_sim.truth) < 0.2


def test_hierarchical_group_labels_track_latent_labels(grouped_sim):
    result = fit_hierarchical(grouped_sim.annotations, num_groups=3)
    agree = np.mean(result.group_labels == grouped_sim.group_labels, axis=0)
    assert np.all(agree > 0.9)


def test_hierarchical_fit_with_given_init_falls_back(grouped_sim):
    params = grouped_sim.model.effective_params()
    cfg = EMConfig(init="given", given=params, max_iters=20)
    result = fit_hierarchical(grouped_sim.annotations, num_groups=3, cfg=cfg)
    assert result.model.num_groups == 3


def test_generated_groups_agree_more_inside_than_across(grouped_sim):
    values = agreement_matrix(grouped_sim.annotations).values
    assignment = grouped_sim.model.assignment
    same = assignment[:, None] == assignment[None, :]
    inside = values[same & ~np.eye(assignment.size, dtype=bool)]
    across = values[~same]
    assert inside.min() > across.max()


def test_single_group_reduces_to_plain_em(grouped_sim):
    a = grouped_sim.annotations
    hierarchical = fit_hierarchical(a, num_groups=1)
    plain = fit_em(a)
    np.testing.assert_array_equal(hierarchical.model.assignment, np.zeros(9))
    np.testing.assert_array_equal(hierarchical.labels, plain.labels)
    np.testing.assert_allclose(
        hierarchical.model.annotator_confusions, plain.params.confusions
    )
    np.testing.assert_allclose(
        hierarchical.model.group_confusions[0], np.eye(2), atol=1e-6
    )


# ---------------------------------------------------------------------------
# Spammer scores
# ---------------------------------------------------------------------------


def test_spammer_scores_of_reference_matrices():
    params = DSParams(
        confusions=[np.eye(2), np.full((2, 2), 0.5), one_coin_confusion(0.8, 2)],
        prior=[0.5, 0.5],
    )
    report = spammer_scores(params, threshold=0.1)
    np.testing.assert_allclose(report.scores, [1.0, 0.0, 0.6], atol=1e-12)
    np.testing.assert_array_equal(report.flagged, [1])


def test_spammer_scores_ignore_class_order():
    rng = np.random.default_rng(6)
    confusions = rng.dirichlet(np.ones(3), size=(5, 3)).transpose(0, 2, 1)
    params = DSParams(confusions=confusions, prior=[0.2, 0.3, 0.5])
    base = spammer_scores(params).scores
    for perm in ([1, 2, 0], [2, 1, 0]):
        moved = params.permute_classes(perm)
        np.testing.assert_allclose(spammer_scores(moved).scores, base)
        np.testing.assert_allclose(spammer_scores(params.relabel(perm)).scores, base)


def test_fit_without_spammers_drops_uniform_annotators(spammer_sim):
    result, kept = fit_without_spammers(spammer_sim.annotations, threshold=0.2)
    np.testing.assert_array_equal(kept, [0, 1, 2, 3])
    assert result.params.num_annotators == 4
    mv_labels = majority_vote(spammer_sim.annotations).labels
    mv_error = np.mean(mv_labels != spammer_sim.truth)
    assert np.mean(result.labels != spammer_sim.truth) <= mv_error


def test_fit_without_spammers_keeps_everyone_when_all_flagged(spammer_sim):
    result, kept = fit_without_spammers(spammer_sim.annotations, threshold=1.01)
    np.testing.assert_array_equal(kept, np.arange(9))
    assert result.params.num_annotators == 9
