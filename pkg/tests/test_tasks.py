import numpy as np
import pytest

from precondlab.errors import InvalidSpecError
from precondlab.numerics import RngStream
from precondlab.tasks import (
    TaskInstance,
    TaskSpec,
    build_prompt,
    sample_suite,
    sample_task,
    suite_from_json,
    suite_to_json,
)


def _spec(**kw):
    base = dict(kind="regression", d=2, n_demos=2, cov_spectrum=(1.0, 1.0), noise_std=0.0)
    base.update(kw)
    return TaskSpec(**base)


class TestSpecValidation:
    def test_rejects_bad_dimension(self):
        with pytest.raises(InvalidSpecError):
            _spec(d=0, cov_spectrum=())

    def test_rejects_nonpositive_covariance(self):
        with pytest.raises(InvalidSpecError):
            _spec(cov_spectrum=(1.0, 0.0))

    def test_rejects_wrong_spectrum_length(self):
        with pytest.raises(InvalidSpecError):
            _spec(cov_spectrum=(1.0,))

    def test_classification_needs_classes(self):
        with pytest.raises(InvalidSpecError):
            _spec(kind="classification")

    def test_rejects_negative_noise(self):
        with pytest.raises(InvalidSpecError):
            _spec(noise_std=-0.1)


class TestSampling:
    def test_deterministic_given_seed(self):
        spec = _spec()
        a = sample_task(spec, RngStream(7))
        b = sample_task(spec, RngStream(7))
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.xs, b.xs)
        assert np.array_equal(a.ys, b.ys)
        assert np.array_equal(a.x_query, b.x_query)
        assert a.y_star == b.y_star

    def test_noiseless_labels_are_consistent(self):
        task = sample_task(_spec(d=3, cov_spectrum=(1.0, 2.0, 0.5), n_demos=6), RngStream(3))
        np.testing.assert_array_equal(task.ys, task.xs @ task.weights)
        assert task.y_star == float(task.x_query @ task.weights)

    def test_anisotropic_covariance_shows_in_samples(self):
        # eigenvalue spread of the empirical demo covariance over many draws
        spec = _spec(d=4, n_demos=8, cov_spectrum=(100.0, 10.0, 1.0, 0.1))
        rng = RngStream(3)
        xs = np.vstack([sample_task(spec, rng.substream(i)).xs for i in range(1000)])
        eigs = np.linalg.eigvalsh(np.cov(xs.T))
        assert eigs.max() / eigs.min() > 10.0

    def test_classification_labels_follow_argmax(self):
        spec = _spec(kind="classification", n_classes=3, d=3, cov_spectrum=(1.0, 1.0, 1.0), n_demos=5)
        task = sample_task(spec, RngStream(11))
        scores = task.xs @ task.weights.T
        np.testing.assert_array_equal(task.ys, np.argmax(scores, axis=1).astype(float))
        assert task.y_star == int(np.argmax(task.weights @ task.x_query))

    def test_suite_substreams_are_independent_of_order(self):
        spec = _spec()
        suite = sample_suite(spec, 4, RngStream(5))
        third = sample_task(spec, RngStream(5).substream(2))
        assert np.array_equal(suite[2].xs, third.xs)

    def test_least_squares_recovers_weights_when_overdetermined(self):
        spec = _spec(d=3, n_demos=8, cov_spectrum=(2.0, 1.0, 0.5))
        task = sample_task(spec, RngStream(13))
        solved, *_ = np.linalg.lstsq(task.xs, task.ys, rcond=None)
        np.testing.assert_allclose(solved, task.weights, atol=1e-8)


class TestBuildPrompt:
    def test_direct_stacking_with_zero_slot(self):
        spec = _spec()
        task = TaskInstance(
            spec,
            weights=np.array([2.0, 3.0]),
            xs=np.array([[1.0, 0.0], [0.0, 1.0]]),
            ys=np.array([2.0, 3.0]),
            x_query=np.array([1.0, 1.0]),
            y_star=5.0,
        )
        np.testing.assert_array_equal(build_prompt(task), [[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [2.0, 3.0, 0.0]])

    def test_answer_slot_is_always_zero(self):
        task = sample_task(_spec(d=5, n_demos=7, cov_spectrum=(1.0,) * 5, noise_std=0.3), RngStream(2))
        assert build_prompt(task)[5, 7] == 0.0

    def test_single_demo_single_dim(self):
        spec = _spec(d=1, n_demos=1, cov_spectrum=(1.0,))
        task = TaskInstance(spec, np.array([2.0]), np.array([[5.0]]), np.array([10.0]), np.array([7.0]), 14.0)
        np.testing.assert_array_equal(build_prompt(task), [[5.0, 7.0], [10.0, 0.0]])

    def test_pipeline_is_deterministic(self):
        spec = _spec(noise_std=0.2)
        a = build_prompt(sample_task(spec, RngStream(21)))
        b = build_prompt(sample_task(spec, RngStream(21)))
        assert np.array_equal(a, b)


class TestSuiteJson:
    def test_round_trip(self):
        suite = sample_suite(_spec(d=3, cov_spectrum=(3.0, 1.0, 0.2), noise_std=0.1, n_demos=4), 3, RngStream(9))
        restored = suite_from_json(suite_to_json(suite))
        for a, b in zip(suite, restored):
            assert a.spec == b.spec
            assert np.array_equal(a.xs, b.xs)
            assert np.array_equal(a.ys, b.ys)
            assert np.array_equal(a.weights, b.weights)
            assert np.array_equal(a.x_query, b.x_query)
            assert a.y_star == b.y_star

    def test_classification_round_trip_keeps_int_target(self):
        spec = _spec(kind="classification", n_classes=4, d=2, cov_spectrum=(1.0, 1.0), n_demos=3)
        suite = sample_suite(spec, 2, RngStream(1))
        restored = suite_from_json(suite_to_json(suite))
        assert isinstance(restored[0].y_star, int)
        assert restored[0].y_star == suite[0].y_star
