import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sptrlab.data import Split, SyntheticDatasetSpec, generate_dataset, nearest_center_accuracy, sample_few_shot
from sptrlab.encoders import Backbone
from sptrlab.estimator import evaluate
from sptrlab.metrics import accuracy, argmax_accuracy, harmonic_mean, monotone_fraction


@pytest.fixture(scope="module")
def bb():
    return Backbone(seed=0)


def test_zero_noise_samples_sit_on_centres(bb):
    X, y = generate_dataset(SyntheticDatasetSpec(n_classes=4, samples_per_class=3, noise=0.0), bb)
    np.testing.assert_array_equal(X, bb.class_center(range(4))[y])


def test_same_seed_same_dataset(bb):
    spec = SyntheticDatasetSpec(n_classes=5, seed=3)
    a, b = generate_dataset(spec, bb), generate_dataset(spec, bb)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    other = generate_dataset(SyntheticDatasetSpec(n_classes=5, seed=4), bb)
    assert not np.array_equal(a[0], other[0])


def test_dataset_shape_and_range(bb):
    X, y = generate_dataset(SyntheticDatasetSpec(n_classes=10, samples_per_class=64), bb)
    assert X.shape == (640, bb.d_in)
    assert np.bincount(y).tolist() == [64] * 10
    assert X.min() >= 0.0 and X.max() <= 1.0


def test_classes_are_separable_in_pixel_space(bb):
    X, y = generate_dataset(SyntheticDatasetSpec(n_classes=10, noise=0.05), bb)
    assert nearest_center_accuracy(X, y, bb.class_center(range(10))) >= 0.99


def test_dataset_spec_validation():
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(n_classes=1)
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(noise=-0.1)


def test_split_halves():
    assert Split.halves(10) == Split((0, 1, 2, 3, 4), (5, 6, 7, 8, 9))
    assert Split.halves(5) == Split((0, 1, 2), (3, 4))


def test_few_shot_counts():
    y = np.repeat(np.arange(10), 8)
    idx = sample_few_shot(y, range(10), 1, seed=0)
    assert idx.size == 10
    assert sorted(y[idx].tolist()) == list(range(10))
    assert np.array_equal(sample_few_shot(y, range(10), 8, seed=0), np.arange(80))


def test_few_shot_only_base_classes_and_disjoint_from_eval():
    y = np.repeat(np.arange(6), 20)
    idx = sample_few_shot(y, [0, 1, 2], 4, seed=5)
    assert set(y[idx]) == {0, 1, 2}
    held_out = np.setdiff1d(np.arange(y.size), idx)
    assert np.intersect1d(idx, held_out).size == 0
    assert idx.size + held_out.size == y.size


def test_few_shot_is_seeded():
    y = np.repeat(np.arange(3), 30)
    assert np.array_equal(sample_few_shot(y, range(3), 5, 1), sample_few_shot(y, range(3), 5, 1))
    assert not np.array_equal(sample_few_shot(y, range(3), 5, 1), sample_few_shot(y, range(3), 5, 2))


def test_few_shot_rejects_too_many_shots():
    with pytest.raises(ValueError):
        sample_few_shot(np.repeat(np.arange(2), 3), [0, 1], 4, seed=0)


def test_ground_truth_classifier_scores_one():
    y = np.array([0, 2, 1, 2, 0])
    assert argmax_accuracy(np.eye(3), np.eye(3)[y], y) == 1.0


def test_random_text_features_score_chance():
    rng = np.random.default_rng(0)
    k, n = 5, 20000
    text = rng.normal(size=(k, 8))
    text /= np.linalg.norm(text, axis=1, keepdims=True)
    image = rng.normal(size=(n, 8))
    y = rng.integers(0, k, n)
    acc = argmax_accuracy(text, image, y)
    sigma = math.sqrt((1 / k) * (1 - 1 / k) / n)
    assert abs(acc - 1 / k) <= 3 * sigma


def test_accuracy_invariant_under_logit_rescaling():
    rng = np.random.default_rng(1)
    text, image = rng.normal(size=(4, 6)), rng.normal(size=(50, 6))
    y = rng.integers(0, 4, 50)
    assert argmax_accuracy(text, image, y) == argmax_accuracy(37.5 * text, image, y)


def test_evaluate_on_novel_classes(bb):
    X, y = generate_dataset(SyntheticDatasetSpec(n_classes=6, samples_per_class=10), bb)
    state = bb.init_prompts(3)
    mask = y >= 3
    acc = evaluate(state, bb, [3, 4, 5], X[mask], y[mask])
    assert 0.0 <= acc <= 1.0
    with pytest.raises(ValueError):
        evaluate(state, bb, [3, 4, 5], X[:0], y[:0])
    with pytest.raises(ValueError):
        evaluate(state, bb, [3, 4, 5], X, y)


def test_accuracy_rejects_empty():
    with pytest.raises(ValueError):
        accuracy([], [])


def test_harmonic_mean_examples():
    assert harmonic_mean(0.5, 0.5) == 0.5
    assert harmonic_mean(1.0, 0.5) == pytest.approx(2 / 3, abs=1e-15)
    for bad in ((0.0, 1.0), (1.0, -0.2)):
        with pytest.raises(ValueError):
            harmonic_mean(*bad)


def test_harmonic_mean_first_reported_row():
    assert round(harmonic_mean(69.34, 74.22), 2) == 71.70


def test_reported_hm_consistent_with_rounded_inputs():
    # the second reported row, 80.61, is reachable from unrounded inputs within +-0.005 of the printed ones
    lo = min(harmonic_mean(84.85 + a, 76.76 + b) for a in (-0.005, 0.005) for b in (-0.005, 0.005))
    hi = max(harmonic_mean(84.85 + a, 76.76 + b) for a in (-0.005, 0.005) for b in (-0.005, 0.005))
    assert lo <= 80.605 <= hi


@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_harmonic_mean_between_min_and_max(a, b):
    hm = harmonic_mean(a, b)
    assert min(a, b) * (1 - 1e-12) <= hm <= max(a, b) * (1 + 1e-12)
    if a != b:
        assert hm < max(a, b)


def test_monotone_fraction():
    assert monotone_fraction([3.0, 2.0, 2.0, 1.0]) == 1.0
    assert monotone_fraction([1.0, 2.0, 1.0]) == 0.5
    assert monotone_fraction([1.0]) == 1.0
