"""Exact ground truth on explicit quadratic problems.

Everything the package estimates stochastically or realizes implicitly in
the forward pass has a closed-form counterpart here: analytic traces of
preconditioned Hessians, explicit gradient-descent iterates for in-context
least squares, per-step contraction factors against operator spectral
radii, and the curvature quantity inside the generalization bound. These
functions deliberately share no code with the model path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import AtOptimumError, NotSymmetricError, ShapeMismatchError
from .numerics import as_matrix, as_vector, spectral_radius_sym_similar
from .tasks import KIND_REGRESSION, TaskInstance


@dataclass
class QuadraticProblem:
    """f(z) = 0.5 z'Hz - b'z with symmetric H; gradient Hz - b, optimum H z* = b."""

    hessian: np.ndarray
    linear: np.ndarray
    z_star: np.ndarray

    @classmethod
    def from_hessian(cls, hessian, linear=None) -> "QuadraticProblem":
        h = as_matrix(hessian, "hessian")
        if h.shape[0] != h.shape[1]:
            raise ShapeMismatchError("hessian must be square")
        if np.max(np.abs(h - h.T)) > 1e-12 * max(1.0, np.max(np.abs(h))):
            raise NotSymmetricError("hessian must be symmetric to 1e-12")
        b = np.zeros(h.shape[0]) if linear is None else as_vector(linear, "linear")
        if b.shape[0] != h.shape[0]:
            raise ShapeMismatchError("linear term length must match hessian order")
        z_star = np.linalg.solve(h, b)
        return cls(0.5 * (h + h.T), b, z_star)

    def grad(self, z: np.ndarray) -> np.ndarray:
        return self.hessian @ z - self.linear


@dataclass
class BoundReport:
    """The computable pieces of the curvature-based generalization bound."""

    curvature_sum: float
    bound_value: float
    grad_bound: float
    smooth_bound: float
    measured_gap: float


def exact_trace(p_diag, hessian) -> float:
    """tr(P H P') for diagonal P: sum_i p_i^2 H_ii."""
    p = np.asarray(p_diag, dtype=np.float64)
    if p.ndim == 2:
        if np.max(np.abs(p - np.diag(np.diag(p)))) != 0.0:
            raise ShapeMismatchError("P must be diagonal")
        p = np.diag(p)
    p = as_vector(p, "p_diag")
    h = as_matrix(hessian, "hessian")
    if h.shape[0] != h.shape[1]:
        raise ShapeMismatchError("hessian must be square")
    if h.shape[0] != p.shape[0]:
        raise ShapeMismatchError("P and H orders differ")
    if np.max(np.abs(h - h.T)) > 1e-12 * max(1.0, np.max(np.abs(h))):
        raise NotSymmetricError("hessian must be symmetric")
    return float(np.sum(p * p * np.diag(h)))


def gd_iterates_ls(task: TaskInstance, eta: float, n_steps: int, p_seq=None):
    """Explicit preconditioned GD on the in-context least-squares problem.

    Loss 0.5 * sum_i (w.x_i - y_i)^2, so the gradient is X (X'w - y) with X
    the (d, n) demo matrix. Starts from w_0 = 0, applies
    w_{t+1} = w_t - eta * P_t grad, and returns (weights w_0..w_T,
    predictions w_t.x_query).
    """
    if task.kind != KIND_REGRESSION:
        raise ShapeMismatchError("gd_iterates_ls only applies to regression tasks")
    x = task.xs.T  # (d, n)
    y = task.ys
    w = np.zeros(task.spec.d)
    weights = [w.copy()]
    preds = [float(w @ task.x_query)]
    for t in range(n_steps):
        grad = x @ (x.T @ w - y)
        step_p = np.ones(task.spec.d) if p_seq is None else np.asarray(p_seq[t], dtype=np.float64)
        w = w - eta * step_p * grad
        weights.append(w.copy())
        preds.append(float(w @ task.x_query))
    return weights, preds


def contraction_factors(problem: QuadraticProblem, p_seq, eta: float, z_0, n_steps: int):
    """Per-step realized contraction next to the exact operator radius.

    Returns (rho_hat, rho_op): rho_hat[t] = ||z_{t+1}-z*|| / ||z_t-z*|| from
    iterating z_{t+1} = z_t - eta P_t grad(z_t); rho_op[t] is the spectral
    radius of I - eta P_t H. Positive diagonal P uses the exact similarity
    symmetrization; otherwise H must already be diagonal.
    """
    z = as_vector(z_0, "z_0").copy()
    h = problem.hessian
    if np.allclose(z, problem.z_star):
        raise AtOptimumError("z_0 coincides with the optimum; ratios undefined")
    rho_hat, rho_op = [], []
    for t in range(n_steps):
        p = np.asarray(p_seq[t], dtype=np.float64)
        if p.shape != (h.shape[0],):
            raise ShapeMismatchError("each P_t must be a diagonal vector matching H")
        err_before = np.linalg.norm(z - problem.z_star)
        z = z - eta * p * problem.grad(z)
        err_after = np.linalg.norm(z - problem.z_star)
        rho_hat.append(float(err_after / max(err_before, 1e-300)))
        rho_op.append(step_operator_radius(p, h, eta))
    return rho_hat, rho_op


def step_operator_radius(p_diag, hessian, eta: float) -> float:
    """Spectral radius of I - eta diag(p) H for symmetric H."""
    p = as_vector(p_diag, "p_diag")
    h = as_matrix(hessian, "hessian")
    op = np.eye(h.shape[0]) - eta * p[:, np.newaxis] * h
    if np.all(p > 0):
        radius, _ = spectral_radius_sym_similar(op, iters=2000, tol=1e-13, similarity=np.sqrt(p))
        return radius
    if np.max(np.abs(h - np.diag(np.diag(h)))) == 0.0:
        return float(np.max(np.abs(1.0 - eta * p * np.diag(h))))
    raise NotSymmetricError("nonpositive P with non-diagonal H is outside the supported family")


def bound_quantity(p_seq, h_seq, n_samples: int, grad_norms=None, measured_gap: float = 0.0) -> BoundReport:
    """Curvature sum sum_t ||P_t H_t||_F^2 and its sqrt(./n) bound value.

    ``p_seq`` entries may be diagonal vectors or full matrices; ``h_seq``
    entries are symmetric Hessians.
    """
    if len(p_seq) != len(h_seq):
        raise ShapeMismatchError("p_seq and h_seq must have equal length")
    if n_samples < 1:
        raise ShapeMismatchError("n_samples must be >= 1")
    curvature = 0.0
    smooth = 0.0
    for p, h in zip(p_seq, h_seq):
        h = as_matrix(h, "hessian")
        p = np.asarray(p, dtype=np.float64)
        ph = p @ h if p.ndim == 2 else p[:, np.newaxis] * h
        curvature += float(np.sum(ph * ph))
        smooth = max(smooth, float(np.sqrt(np.sum(h * h))))
    grad_bound = float(np.max(grad_norms)) if grad_norms is not None and len(grad_norms) else 0.0
    return BoundReport(
        curvature_sum=curvature,
        bound_value=float(np.sqrt(curvature / n_samples)),
        grad_bound=grad_bound,
        smooth_bound=smooth,
        measured_gap=float(measured_gap),
    )


def quadratic_layer_fn(problem: QuadraticProblem, p_diag):
    """A layer map f(z) = z - P grad(z) over column-matrix states, for
    feeding the stochastic trace estimator its exactly-known counterpart."""
    p = as_vector(p_diag, "p_diag")
    h_const = ad.constant(problem.hessian)
    b_const = ad.constant(problem.linear.reshape(-1, 1))

    def layer_fn(z: ad.Var) -> ad.Var:
        grad = ad.sub(ad.matmul(h_const, z), b_const)
        return ad.sub(z, ad.rowscale(ad.constant(p), grad))

    return layer_fn
