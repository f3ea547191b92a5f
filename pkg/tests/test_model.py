import json

import numpy as np
import pytest

from precondlab.errors import ShapeMismatchError
from precondlab.model import (
    ModelConfig,
    PreconditionerSet,
    Trajectory,
    build_model,
    checkpoint_from_json,
    checkpoint_to_json,
    encode_prompt,
    forward,
    forward_task,
    layer_update,
    predict,
)
from precondlab.numerics import RngStream
from precondlab.oracle import gd_iterates_ls
from precondlab.tasks import TaskInstance, TaskSpec, build_prompt, sample_task


def _regression_task(seed=0, d=3, n=6, noise=0.0, cov=None):
    spec = TaskSpec("regression", d=d, n_demos=n, cov_spectrum=cov or (1.0,) * d, noise_std=noise)
    return sample_task(spec, RngStream(seed))


def _stable_eta(task):
    return 0.5 / float(np.linalg.eigvalsh(task.xs.T @ task.xs).max())


def _identity_model(task, n_layers, eta=None):
    cfg = ModelConfig(
        d=task.spec.d,
        n_demos=task.spec.n_demos,
        n_layers=n_layers,
        base_lr=_stable_eta(task) if eta is None else eta,
        precond_mode="identity",
    )
    return build_model(cfg), PreconditionerSet.identity(cfg)


class TestGdEquivalence:
    @pytest.mark.parametrize("seed", range(8))
    def test_forward_matches_explicit_gd_iterates(self, seed):
        rng = RngStream(seed, 101)
        d = int(rng.substream(0).integers(1, 9))
        n = int(rng.substream(1).integers(max(2, d), 17))
        n_layers = int(rng.substream(2).integers(1, 7))
        task = _regression_task(seed=seed + 40, d=d, n=n, cov=tuple(0.5 + i for i in range(d)))
        model, precond = _identity_model(task, n_layers)
        traj = forward_task(task, model, precond)
        _, preds = gd_iterates_ls(task, model.weights.eta, n_layers)
        for t in range(n_layers + 1):
            slot = traj.states[t][-1, -1]
            assert abs(slot - preds[t]) <= 1e-10 * max(1.0, abs(preds[t]))

    def test_hand_example_one_step(self):
        # d=1, demo (1 -> 2), query 3, eta=0.5: w_1 = 1, prediction 3
        spec = TaskSpec("regression", d=1, n_demos=1, cov_spectrum=(1.0,))
        task = TaskInstance(spec, np.array([2.0]), np.array([[1.0]]), np.array([2.0]), np.array([3.0]), 6.0)
        model, precond = _identity_model(task, 1, eta=0.5)
        traj = forward_task(task, model, precond)
        assert predict(traj) == pytest.approx(3.0, abs=1e-14)
        ws, preds = gd_iterates_ls(task, 0.5, 1)
        assert ws[1][0] == pytest.approx(1.0)
        assert preds[1] == pytest.approx(3.0)

    def test_demo_labels_track_residuals(self):
        task = _regression_task(seed=5, d=2, n=4, cov=(2.0, 0.5))
        model, precond = _identity_model(task, 3)
        traj = forward_task(task, model, precond)
        ws, _ = gd_iterates_ls(task, model.weights.eta, 3)
        for t, w in enumerate(ws):
            expected = task.ys - task.xs @ w
            np.testing.assert_allclose(traj.states[t][-1, :-1], expected, atol=1e-12)


class TestForward:
    def test_zero_step_size_is_identity(self):
        task = _regression_task(seed=1)
        model, precond = _identity_model(task, 3, eta=0.0)
        z0 = build_prompt(task)
        traj = forward(z0, model, precond)
        for state in traj.states:
            assert np.array_equal(state, z0)
        for stats in traj.stats:
            assert np.all(stats.applied_update == 0.0)
        assert predict(traj) == 0.0

    def test_demo_permutation_invariance(self):
        task = _regression_task(seed=2, d=3, n=7)
        model, precond = _identity_model(task, 4)
        base = predict(forward_task(task, model, precond))
        perm = RngStream(8).permutation(task.spec.n_demos)
        shuffled = TaskInstance(
            task.spec, task.weights, task.xs[perm], task.ys[perm], task.x_query, task.y_star
        )
        assert predict(forward_task(shuffled, model, precond)) == pytest.approx(base, abs=1e-12)

    def test_trajectory_additivity_is_exact(self):
        task = _regression_task(seed=3, d=4, n=9, noise=0.2)
        cfg = ModelConfig(d=4, n_demos=9, n_layers=4, base_lr=_stable_eta(task))
        model = build_model(cfg)
        precond = PreconditionerSet([1.0 + 0.1 * RngStream(4).normal((5,)) for _ in range(4)])
        traj = forward_task(task, model, precond)
        for t in range(4):
            assert np.array_equal(traj.states[t + 1], traj.states[t] + traj.stats[t].applied_update)

    def test_forward_is_deterministic(self):
        task = _regression_task(seed=6, noise=0.1)
        model, precond = _identity_model(task, 5)
        a = forward_task(task, model, precond)
        b = forward_task(task, model, precond)
        assert all(np.array_equal(x, y) for x, y in zip(a.states, b.states))


class TestLayerUpdate:
    def test_identity_mode_applies_raw_update(self):
        task = _regression_task(seed=7)
        model, precond = _identity_model(task, 2)
        z = encode_prompt(build_prompt(task), model.cfg)
        z_next, stats = layer_update(z, 0, model, precond)
        assert np.array_equal(stats.applied_update, stats.raw_update)
        assert stats.sigma == 1.0 and stats.mu == 0.0
        assert np.array_equal(z_next, z + stats.raw_update)

    def test_zero_gains_freeze_the_state(self):
        task = _regression_task(seed=8)
        cfg = ModelConfig(d=3, n_demos=6, n_layers=2, base_lr=0.05)
        model = build_model(cfg)
        precond = PreconditionerSet([np.zeros(4), np.ones(4)])
        z = encode_prompt(build_prompt(task), cfg)
        z_next, _ = layer_update(z, 0, model, precond)
        assert np.array_equal(z_next, z)

    def test_layernorm_gain_normalizes_by_update_std(self):
        task = _regression_task(seed=9, d=2, n=5)
        cfg = ModelConfig(d=2, n_demos=5, n_layers=2, base_lr=0.05)
        model = build_model(cfg)
        precond = PreconditionerSet.identity(cfg)
        z = encode_prompt(build_prompt(task), cfg)
        _, stats = layer_update(z, 0, model, precond)
        sigma = float(np.std(stats.raw_update))  # population std over all entries
        assert stats.sigma == pytest.approx(sigma, rel=1e-12)
        np.testing.assert_allclose(stats.applied_update, stats.raw_update / sigma, atol=1e-14)

    def test_mean_subtract_toggle(self):
        task = _regression_task(seed=10, d=2, n=5)
        cfg = ModelConfig(d=2, n_demos=5, n_layers=1, base_lr=0.05, mean_subtract=True)
        model = build_model(cfg)
        gains = 1.0 + 0.2 * RngStream(12).normal((3,))
        precond = PreconditionerSet([gains])
        z = encode_prompt(build_prompt(task), cfg)
        _, stats = layer_update(z, 0, model, precond)
        raw = stats.raw_update
        expected = gains[:, np.newaxis] * (raw - raw.mean()) / np.std(raw)
        np.testing.assert_allclose(stats.applied_update, expected, atol=1e-14)

    def test_positive_gains_preserve_sign_pattern(self):
        task = _regression_task(seed=11, d=3, n=6)
        cfg = ModelConfig(d=3, n_demos=6, n_layers=1, base_lr=0.05)
        model = build_model(cfg)
        precond = PreconditionerSet.identity(cfg)
        z = encode_prompt(build_prompt(task), cfg)
        _, stats = layer_update(z, 0, model, precond)
        assert np.array_equal(np.sign(stats.applied_update), np.sign(stats.raw_update))

    def test_sigma_floor_flag(self):
        # eta = 0 makes the raw update all-zero, so sigma underflows the floor
        task = _regression_task(seed=12)
        cfg = ModelConfig(d=3, n_demos=6, n_layers=1, base_lr=0.0)
        model = build_model(cfg)
        precond = PreconditionerSet.identity(cfg)
        z = encode_prompt(build_prompt(task), cfg)
        z_next, stats = layer_update(z, 0, model, precond)
        assert stats.sigma_floored
        assert np.array_equal(z_next, z)

    def test_shape_and_index_errors(self):
        task = _regression_task(seed=13)
        model, precond = _identity_model(task, 2)
        with pytest.raises(ShapeMismatchError):
            layer_update(np.zeros((2, 4)), 0, model, precond)
        with pytest.raises(ShapeMismatchError):
            layer_update(np.zeros((4, 7)), 5, model, precond)


class TestPredict:
    def test_reads_answer_slot(self):
        final = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, 3.0], [2.0, 3.0, 0.7]])
        traj = Trajectory(states=[final], stats=[], label_rows=1)
        assert predict(traj) == 0.7

    def test_classification_reads_score_rows(self):
        final = np.zeros((4, 3))
        final[2, -1] = 1.5
        final[3, -1] = -0.5
        traj = Trajectory(states=[final], stats=[], label_rows=2)
        np.testing.assert_array_equal(predict(traj), [1.5, -0.5])


class TestClassificationModel:
    def test_one_hot_encoding(self):
        spec = TaskSpec("classification", d=2, n_demos=3, cov_spectrum=(1.0, 1.0), n_classes=3)
        task = sample_task(spec, RngStream(14))
        cfg = ModelConfig(d=2, n_demos=3, n_layers=1, base_lr=0.1, n_classes=3)
        state = encode_prompt(build_prompt(task), cfg)
        assert state.shape == (5, 4)
        for j, label in enumerate(task.ys.astype(int)):
            expected = np.zeros(3)
            expected[label] = 1.0
            np.testing.assert_array_equal(state[2:, j], expected)
        np.testing.assert_array_equal(state[2:, -1], np.zeros(3))

    def test_forward_matches_multioutput_gd(self):
        spec = TaskSpec("classification", d=3, n_demos=6, cov_spectrum=(1.0, 1.0, 1.0), n_classes=3)
        task = sample_task(spec, RngStream(15))
        x = task.xs.T
        onehot = np.zeros((3, 6))
        onehot[task.ys.astype(int), np.arange(6)] = 1.0
        eta = 0.5 / float(np.linalg.eigvalsh(task.xs.T @ task.xs).max())
        cfg = ModelConfig(d=3, n_demos=6, n_layers=4, base_lr=eta, precond_mode="identity", n_classes=3)
        model = build_model(cfg)
        traj = forward_task(task, model, PreconditionerSet.identity(cfg))

        w = np.zeros((3, 3))  # explicit multi-output GD oracle
        for _ in range(4):
            w = w - eta * (w @ x - onehot) @ x.T
        np.testing.assert_allclose(predict(traj), w @ task.x_query, atol=1e-10)


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self):
        cfg = ModelConfig(d=3, n_demos=5, n_layers=2, base_lr=1 / 3)
        precond = PreconditionerSet([RngStream(16).normal((4,)) for _ in range(2)])
        text = checkpoint_to_json(cfg, precond)
        cfg2, precond2 = checkpoint_from_json(text)
        assert cfg2 == cfg
        for a, b in zip(precond.gains, precond2.gains):
            assert np.array_equal(a, b)
        assert checkpoint_to_json(cfg2, precond2) == text

    def test_rejects_mismatched_gain_count(self):
        cfg = ModelConfig(d=2, n_demos=3, n_layers=2, base_lr=0.1)
        payload = {"config": json.loads(checkpoint_to_json(cfg, PreconditionerSet.identity(cfg)))["config"], "gains": [[1.0, 1.0, 1.0]]}
        with pytest.raises(ShapeMismatchError):
            checkpoint_from_json(json.dumps(payload))


class TestVariableDemoCount:
    def test_forward_adapts_to_prompt_width(self):
        # the frozen weights are independent of n, so a model built for
        # n_demos=4 answers prompts with any demo count
        spec6 = TaskSpec("regression", d=2, n_demos=6, cov_spectrum=(1.0, 1.0), noise_std=0.0)
        task6 = sample_task(spec6, RngStream(30))
        eta = 0.5 / float(np.linalg.eigvalsh(task6.xs.T @ task6.xs).max())
        cfg = ModelConfig(d=2, n_demos=4, n_layers=3, base_lr=eta, precond_mode="identity")
        model = build_model(cfg)
        traj = forward_task(task6, model, PreconditionerSet.identity(cfg))
        _, preds = gd_iterates_ls(task6, eta, 3)
        assert predict(traj) == pytest.approx(preds[-1], abs=1e-12)
