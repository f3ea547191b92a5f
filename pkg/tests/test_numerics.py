import math

import numpy as np
import pytest

from precondlab.errors import NonFiniteError, NonSquareError, NotSymmetricError
from precondlab.numerics import (
    RngStream,
    central_fd_grad,
    frob_norm,
    softplus,
    spectral_radius_sym_similar,
)


class TestFrobNorm:
    def test_pythagorean_entries(self):
        assert frob_norm([[3.0, 0.0], [0.0, 4.0]]) == 5.0

    def test_zero_matrix(self):
        assert frob_norm(np.zeros((3, 3))) == 0.0

    def test_identity(self):
        assert frob_norm(np.eye(4)) == 2.0

    @pytest.mark.parametrize("c", [-2.0, 0.5, 1e3])
    def test_absolute_homogeneity(self, c):
        m = RngStream(11).normal((5, 7))
        assert frob_norm(c * m) == pytest.approx(abs(c) * frob_norm(m), rel=1e-12)

    def test_zero_iff_all_zero(self):
        m = np.zeros((2, 2))
        m[1, 0] = 1e-150
        assert frob_norm(m) > 0.0

    def test_rejects_nan(self):
        with pytest.raises(NonFiniteError):
            frob_norm([[np.nan, 0.0], [0.0, 0.0]])


class TestSoftplus:
    def test_at_zero(self):
        assert softplus(0.0) == pytest.approx(math.log(2.0), rel=1e-15)

    def test_negative_tail(self):
        assert softplus(-20.0) == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-12)
        assert softplus(-20.0) == pytest.approx(2.061e-9, rel=1e-3)

    def test_linear_asymptote(self):
        assert softplus(100.0) == pytest.approx(100.0, rel=1e-12)

    def test_positive_and_monotone(self):
        grid = np.linspace(-40.0, 40.0, 401)
        values = softplus(grid)
        assert np.all(values > 0.0)
        assert np.all(np.diff(values) > 0.0)


class TestSpectralRadius:
    def test_diagonal(self):
        radius, converged = spectral_radius_sym_similar(np.diag([0.8, 0.2]))
        assert converged
        assert radius == pytest.approx(0.8, abs=1e-10)

    def test_zero_matrix(self):
        radius, converged = spectral_radius_sym_similar(np.zeros((3, 3)))
        assert converged and radius == 0.0

    def test_step_operator_matches_eigendecomposition(self):
        # I - diag(0.2) @ diag(1, 4) = diag(0.8, 0.2)
        op = np.eye(2) - 0.2 * np.diag([1.0, 4.0])
        oracle = float(np.max(np.abs(np.linalg.eigvals(op))))
        radius, converged = spectral_radius_sym_similar(op, similarity=np.sqrt([0.2, 0.2]))
        assert converged
        assert radius == pytest.approx(oracle, abs=1e-10)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_similarity_family_vs_eigh(self, seed):
        rng = RngStream(seed, 77)
        d = 6
        p = 0.1 + rng.uniform(0.0, 2.0, (d,))
        basis = rng.normal((d, d))
        h = 0.5 * (basis + basis.T)
        op = np.eye(d) - p[:, np.newaxis] * h
        oracle = float(np.max(np.abs(np.linalg.eigvals(op))))
        radius, converged = spectral_radius_sym_similar(op, iters=5000, similarity=np.sqrt(p))
        assert converged
        assert radius == pytest.approx(oracle, abs=1e-8)

    def test_rejects_non_square(self):
        with pytest.raises(NonSquareError):
            spectral_radius_sym_similar(np.ones((2, 3)))

    def test_rejects_general_nonsymmetric(self):
        with pytest.raises(NotSymmetricError):
            spectral_radius_sym_similar([[0.0, 1.0], [0.0, 0.0]])

    def test_not_converged_flag(self):
        m = np.diag([1.0, 0.9999])
        _, converged = spectral_radius_sym_similar(m, iters=2, tol=1e-15)
        assert not converged


class TestCentralFdGrad:
    def test_quadratic_is_exact(self):
        grad = central_fd_grad(lambda p: p[0] ** 2, np.array([3.0]), 1e-5)
        assert grad[0] == pytest.approx(6.0, abs=1e-8)

    def test_constant_function(self):
        grad = central_fd_grad(lambda p: 1.5, np.array([0.3, -0.7]), 1e-5)
        assert np.all(grad == 0.0)

    def test_sine_against_cosine(self):
        grad = central_fd_grad(lambda p: math.sin(p[0]), np.array([0.7]), 1e-5)
        assert grad[0] == pytest.approx(math.cos(0.7), abs=1e-9)

    def test_degree_two_polynomial_multidim(self):
        a = np.array([[2.0, 0.5], [0.5, 1.0]])

        def f(p):
            return float(p @ a @ p)

        p0 = np.array([0.4, -1.2])
        grad = central_fd_grad(f, p0, 1e-4)
        np.testing.assert_allclose(grad, 2 * a @ p0, atol=1e-8)

    def test_non_finite_evaluation(self):
        with pytest.raises(NonFiniteError):
            central_fd_grad(lambda p: float("nan"), np.array([0.0]), 1e-5)


class TestRngStream:
    def test_same_key_is_bitwise_identical(self):
        a = RngStream(123, 5).normal((100,))
        b = RngStream(123, 5).normal((100,))
        assert np.array_equal(a, b)

    def test_different_streams_differ(self):
        a = RngStream(123, 5).normal((100,))
        b = RngStream(123, 6).normal((100,))
        assert not np.array_equal(a, b)

    def test_interleaving_does_not_change_draws(self):
        lone = RngStream(9, 1)
        seq = [lone.normal((3,)) for _ in range(4)]

        first = RngStream(9, 1)
        other = RngStream(9, 2)
        interleaved = []
        for _ in range(4):
            interleaved.append(first.normal((3,)))
            other.normal((5,))
        assert all(np.array_equal(x, y) for x, y in zip(seq, interleaved))

    def test_substream_is_deterministic_and_pure(self):
        root = RngStream(42, 0)
        a = root.substream(3, 7).normal((8,))
        root.normal((10,))  # consuming the parent must not affect substreams
        b = root.substream(3, 7).normal((8,))
        assert np.array_equal(a, b)

    def test_counter_tracks_draws(self):
        stream = RngStream(0)
        stream.normal((2,))
        stream.normal((2,))
        assert stream.counter == 2
