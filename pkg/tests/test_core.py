import itertools

import numpy as np
import pytest
from pydantic import ValidationError

from crowdfuse.core.alignment import AlignMode, align_permutation
from crowdfuse.core.annotations import AnnotationSet, FeatureSet, LabeledSequence
from crowdfuse.core.params import (
    DSParams,
    GroupModel,
    HMMParams,
    confusion_vector_confusion,
    one_coin_confusion,
)
from crowdfuse.core.simplex import (
    floor_columns,
    kl_divergence,
    project_columns,
    project_simplex,
    simplex_normalize,
)
from crowdfuse.exceptions import (
    DimensionMismatchError,
    EmptyInputError,
    NegativeEntryError,
    SupportMismatchError,
)


@pytest.fixture
def small_set():
    # 3 items, 2 annotators, item 2 unlabeled
    return AnnotationSet.from_records(
        [(0, 0, 1), (0, 1, 1), (1, 0, 0)], num_items=3, num_annotators=2, num_classes=2
    )


# ---------------------------------------------------------------------------
# Simplex helpers
# ---------------------------------------------------------------------------


def test_simplex_normalize_scales_to_unit_sum():
    np.testing.assert_allclose(simplex_normalize([1, 3]), [0.25, 0.75])


def test_simplex_normalize_zero_vector_is_uniform():
    np.testing.assert_allclose(simplex_normalize([0, 0, 0, 0]), np.full(4, 0.25))


def test_simplex_normalize_rejects_negative():
    with pytest.raises(NegativeEntryError):
        simplex_normalize([0.5, -0.1])


def test_kl_divergence_known_values():
    assert kl_divergence([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2))


def test_kl_divergence_zero_mass_in_p_is_ignored():
    assert kl_divergence([0.0, 1.0], [1e-9, 1 - 1e-9]) == pytest.approx(
        -np.log(1 - 1e-9)
    )


def test_kl_divergence_is_nonnegative_on_random_pairs():
    rng = np.random.default_rng(0)
    for k in (2, 3, 5):
        for p, q in zip(rng.dirichlet(np.ones(k), 100), rng.dirichlet(np.ones(k), 100)):
            assert kl_divergence(p, q) >= 0.0
            assert kl_divergence(p, p) == 0.0


def test_kl_divergence_errors():
    with pytest.raises(SupportMismatchError):
        kl_divergence([0.5, 0.5], [1.0, 0.0])
    with pytest.raises(DimensionMismatchError):
        kl_divergence([1.0], [0.5, 0.5])


def test_project_simplex_lands_on_simplex():
    out = project_simplex(np.array([0.8, 0.6, -0.2]))
    assert out.min() >= 0
    assert out.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(out, [0.6, 0.4, 0.0])


def test_project_simplex_keeps_points_already_on_it():
    v = np.array([0.2, 0.3, 0.5])
    np.testing.assert_allclose(project_simplex(v), v)


def test_project_columns_and_floor_columns_are_column_stochastic():
    a = np.array([[2.0, -1.0], [0.5, 0.0]])
    np.testing.assert_allclose(project_columns(a).sum(axis=0), [1.0, 1.0])
    floored = floor_columns(np.array([[0.0, 1.0], [0.0, 0.0]]))
    np.testing.assert_allclose(floored.sum(axis=0), [1.0, 1.0])
    assert floored.min() > 0


# ---------------------------------------------------------------------------
# AnnotationSet
# ---------------------------------------------------------------------------


def test_vote_counts_and_label_matrix(small_set):
    np.testing.assert_array_equal(small_set.vote_counts(), [[0, 2], [1, 0], [0, 0]])
    np.testing.assert_array_equal(small_set.label_matrix(), [[1, 1], [0, -1], [-1, -1]])
    assert small_set.num_records == 3
    assert small_set.shape == (3, 2, 2)


def test_indicator_matrix_layout(small_set):
    ind = small_set.indicator_matrix().toarray()
    assert ind.shape == (3, 4)
    # column m*K + k
    np.testing.assert_array_equal(ind[0], [0, 1, 0, 1])
    np.testing.assert_array_equal(ind[1], [1, 0, 0, 0])


def test_from_label_matrix_matches_records(small_set):
    rebuilt = AnnotationSet.from_label_matrix(small_set.label_matrix(), num_classes=2)
    assert sorted(rebuilt.records) == sorted(small_set.records)


def test_duplicate_pair_rejected():
    with pytest.raises(ValidationError):
        AnnotationSet.from_records(
            [(0, 0, 1), (0, 0, 0)], num_items=1, num_annotators=1, num_classes=2
        )


def test_out_of_range_label_rejected():
    with pytest.raises(ValidationError):
        AnnotationSet.from_records(
            [(0, 0, 2)], num_items=1, num_annotators=1, num_classes=2
        )


def test_subset_annotators_reindexes(small_set):
    sub = small_set.subset_annotators([1])
    assert sub.num_annotators == 1
    assert sub.records == [(0, 0, 1)]


def test_subset_items_reindexes(small_set):
    sub = small_set.subset_items([1, 0])
    assert sub.num_items == 2
    assert sorted(sub.records) == [(0, 0, 0), (1, 0, 1), (1, 1, 1)]


def test_permute_classes_swaps_labels(small_set):
    swapped = small_set.permute_classes([1, 0])
    np.testing.assert_array_equal(swapped.labels, 1 - small_set.labels)


def test_labeled_sequence_as_annotations(small_set):
    seq = LabeledSequence(**dict(small_set), sequence_id=4)
    assert seq.length == 3
    assert seq.as_annotations().records == small_set.records


def test_feature_set_alignment(small_set):
    features = FeatureSet(x=np.zeros((3, 2)))
    features.check_aligned(small_set)
    with pytest.raises(DimensionMismatchError):
        FeatureSet(x=np.zeros((4, 2))).check_aligned(small_set)
    with pytest.raises(ValidationError):
        FeatureSet(x=np.array([[np.nan, 1.0]]))


# ---------------------------------------------------------------------------
# Parameter models
# ---------------------------------------------------------------------------


def test_one_coin_and_confusion_vector_builders():
    a = one_coin_confusion(0.7, 3)
    np.testing.assert_allclose(np.diag(a), 0.7)
    np.testing.assert_allclose(a.sum(axis=0), 1.0)
    b = confusion_vector_confusion([0.9, 0.6])
    np.testing.assert_allclose(b, [[0.9, 0.4], [0.1, 0.6]])


def test_ds_params_rejects_non_stochastic_columns():
    with pytest.raises(ValidationError):
        DSParams(confusions=[[[0.9, 0.5], [0.2, 0.5]]], prior=[0.5, 0.5])
    with pytest.raises(ValidationError):
        DSParams(confusions=[[[0.9, 0.5], [0.1, 0.5]]], prior=[0.6, 0.6])


def test_ds_params_permute_classes_moves_columns_and_prior():
    p = DSParams(confusions=[[[0.9, 0.3], [0.1, 0.7]]], prior=[0.2, 0.8])
    q = p.permute_classes([1, 0])
    np.testing.assert_allclose(q.confusions[0], [[0.3, 0.9], [0.7, 0.1]])
    np.testing.assert_allclose(q.prior, [0.8, 0.2])


def test_ds_params_json_round_trip():
    p = DSParams.one_coin([0.8, 0.6])
    again = DSParams.model_validate_json(p.model_dump_json())
    np.testing.assert_allclose(again.confusions, p.confusions)
    np.testing.assert_allclose(again.prior, p.prior)


def test_hmm_params_shape_checks():
    HMMParams(
        initial=[0.5, 0.5],
        transition=[[0.9, 0.2], [0.1, 0.8]],
        confusions=[one_coin_confusion(0.8, 2)],
    )
    with pytest.raises(ValidationError):
        HMMParams(
            initial=[0.5, 0.5],
            transition=[[0.9, 0.9], [0.1, 0.8]],
            confusions=[one_coin_confusion(0.8, 2)],
        )


def test_group_model_effective_params_compose():
    xi = one_coin_confusion(0.9, 2)
    own = one_coin_confusion(0.8, 2)
    model = GroupModel(
        assignment=[0, 0],
        group_confusions=[xi],
        annotator_confusions=[own, own],
        prior=[0.5, 0.5],
    )
    eff = model.effective_params()
    np.testing.assert_allclose(eff.confusions[0], own @ xi)
    assert eff.confusions[0][0, 0] == pytest.approx(0.8 * 0.9 + 0.2 * 0.1)


def test_group_model_requires_nonempty_groups():
    xi = one_coin_confusion(0.9, 2)
    with pytest.raises(ValidationError):
        GroupModel(
            assignment=[0, 0],
            group_confusions=[xi, xi],
            annotator_confusions=[xi, xi],
            prior=[0.5, 0.5],
        )


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------


def test_align_diag_dominant_undoes_column_swap():
    a = np.array([[0.9, 0.2, 0.1], [0.05, 0.7, 0.1], [0.05, 0.1, 0.8]])
    perm_true = [2, 0, 1]
    scrambled = a[:, np.argsort(perm_true)]
    perm = align_permutation([scrambled])
    np.testing.assert_allclose(scrambled[:, list(perm)], a)


def test_align_tie_breaks_to_identity():
    assert align_permutation([np.full((3, 3), 1 / 3)]) == (0, 1, 2)


def test_align_reference_mode():
    ref = np.array([[[0.8, 0.3], [0.2, 0.7]]])
    est = ref[:, :, ::-1]
    perm = align_permutation(est, AlignMode.REFERENCE, ref)
    assert perm == (1, 0)


def test_align_hungarian_path_for_many_classes():
    k = 10
    a = np.full((k, k), 0.02)
    np.fill_diagonal(a, 0.82)
    shuffle = np.random.default_rng(3).permutation(k)
    perm = align_permutation([a[:, shuffle]])
    np.testing.assert_allclose(a[:, shuffle][:, list(perm)], a)


def test_align_errors():
    with pytest.raises(EmptyInputError):
        align_permutation([])
    with pytest.raises(DimensionMismatchError):
        align_permutation([np.eye(2)], AlignMode.REFERENCE, None)


@pytest.mark.parametrize("k", [2, 3, 4, 5, 6])
def test_align_matches_exhaustive_search(k):
    rng = np.random.default_rng(k)
    for _ in range(5):
        est = rng.dirichlet(np.ones(k), size=(3, k)).transpose(0, 2, 1)
        ref = rng.dirichlet(np.ones(k), size=(3, k)).transpose(0, 2, 1)
        candidates = list(itertools.permutations(range(k)))

        traces = [
            np.trace(est[:, :, list(p)], axis1=1, axis2=2).sum() for p in candidates
        ]
        assert align_permutation(est) == candidates[int(np.argmax(traces))]

        distances = [np.sum((est[:, :, list(p)] - ref) ** 2) for p in candidates]
        best = candidates[int(np.argmin(distances))]
        assert align_permutation(est, AlignMode.REFERENCE, ref) == best
