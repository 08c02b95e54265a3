import numpy as np
import pytest

from crowdfuse.core.params import DSParams
from crowdfuse.evalkit import (
    confusion_error,
    error_rate,
    exponent_fit,
    exponent_study,
    plot_exponent_fit,
    prf1,
)
from crowdfuse.exceptions import (
    DimensionMismatchError,
    EmptyInputError,
    InsufficientPointsError,
    InvalidParamsError,
    LengthMismatchError,
    NonPositiveError,
)
from crowdfuse.simgen import GenSpec, gen_ds


@pytest.fixture(scope="module")
def small_study():
    return exponent_study(accuracy=0.7, annotator_counts=[3, 5, 7, 9], num_items=4000)


# ---------------------------------------------------------------------------
# Label metrics
# ---------------------------------------------------------------------------


def test_error_rate():
    assert error_rate([0, 1, 1, 2], [0, 1, 2, 2]) == pytest.approx(0.25)


def test_error_rate_errors():
    with pytest.raises(LengthMismatchError):
        error_rate([0, 1], [0])
    with pytest.raises(EmptyInputError):
        error_rate([], [])


def test_prf1_worked_example():
    metrics = prf1([0, 0, 1, 1], [0, 1, 1, 1], num_classes=3)
    np.testing.assert_allclose(metrics.precision, [0.5, 1.0, 0.0])
    np.testing.assert_allclose(metrics.recall, [1.0, 2 / 3, 0.0])
    np.testing.assert_allclose(metrics.f1, [2 / 3, 0.8, 0.0])
    np.testing.assert_array_equal(metrics.undefined_precision, [2])
    np.testing.assert_array_equal(metrics.undefined_recall, [2])
    assert metrics.macro_f1 == pytest.approx((2 / 3 + 0.8) / 3)


def test_prf1_perfect_prediction():
    labels = [0, 1, 2, 2, 1]
    metrics = prf1(labels, labels, num_classes=3)
    assert metrics.macro_f1 == pytest.approx(1.0)
    assert metrics.undefined_precision.size == 0


def test_prf1_rejects_out_of_range_labels():
    with pytest.raises(InvalidParamsError):
        prf1([0, 3], [0, 1], num_classes=3)


# ---------------------------------------------------------------------------
# Parameter metrics
# ---------------------------------------------------------------------------


def test_confusion_error_ignores_class_relabeling():
    params = gen_ds(GenSpec(num_classes=3, num_items=10, gamma=0.8)).params
    moved = params.permute_classes([2, 0, 1])
    assert confusion_error(moved, params) == pytest.approx(0.0, abs=1e-12)


def test_confusion_error_of_uniform_guess():
    truth = DSParams(confusions=[np.eye(2)], prior=[0.5, 0.5])
    guess = DSParams(confusions=[np.full((2, 2), 0.5)], prior=[0.5, 0.5])
    # ||eye - 0.5|| = 1, ||eye|| = sqrt(2)
    assert confusion_error(guess, truth) == pytest.approx(1 / np.sqrt(2))


def test_confusion_error_shape_mismatch():
    two = DSParams.one_coin([0.8, 0.8])
    three = DSParams.one_coin([0.8, 0.8, 0.8])
    with pytest.raises(DimensionMismatchError):
        confusion_error(two, three)


# ---------------------------------------------------------------------------
# Error exponent
# ---------------------------------------------------------------------------


def test_exponent_fit_recovers_exact_curve():
    m = np.array([3, 5, 7, 9])
    fit = exponent_fit(m, 0.5 * np.exp(-0.4 * m))
    assert fit.alpha == pytest.approx(0.5)
    assert fit.beta == pytest.approx(0.4)
    assert fit.r_squared == pytest.approx(1.0)
    assert fit.clipped == []


def test_exponent_fit_clips_zero_rates():
    fit = exponent_fit([3, 5, 7], [0.1, 0.01, 0.0], num_trials=1000)
    assert fit.clipped == [2]
    assert fit.beta > 0


@pytest.mark.parametrize(
    ("counts", "rates", "error"),
    [
        ([3, 5], [0.1, 0.01], InsufficientPointsError),
        ([3, 5, 7], [0.1, -0.01, 0.001], NonPositiveError),
        ([3, 5, 7], [0.1, 0.01, 0.0], NonPositiveError),
        ([3, 5, 7], [0.1, 0.01], LengthMismatchError),
    ],
)
def test_exponent_fit_errors(counts, rates, error):
    with pytest.raises(error):
        exponent_fit(counts, rates)


def test_exponent_study_error_decays(small_study):
    assert small_study.annotator_counts == [3, 5, 7, 9]
    assert small_study.error_rates[0] > small_study.error_rates[-1]
    assert small_study.fit.beta > 0


def test_plot_exponent_fit_writes_png(small_study, tmp_path):
    path = plot_exponent_fit(small_study, tmp_path / "plots" / "exponent.png")
    assert path.exists()
    assert path.read_bytes()[:4] == b"\x89PNG"
