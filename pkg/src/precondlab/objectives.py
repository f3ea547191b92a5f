"""The three-term adaptation objective and its pieces.

Terms: (1) task loss on the query prediction, (2) the step-ratio penalty
sum_{t=1..T-1} ||Z_t - Z_{t+1}|| / ||Z_t - Z_{t-1}||, and (3) a softplus of
the per-layer preconditioned-Hessian trace estimated by probing the layer
map with Gaussian noise. Everything is built twice over the same formulas:
once on plain arrays for reporting, once as autodiff graphs for training;
the test suite pins the two paths together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NonFiniteError, ShapeMismatchError, TooFewLayersError
from .model import (
    MODE_IDENTITY,
    Model,
    PreconditionerSet,
    Trajectory,
    forward_graph,
    forward_task,
    layer_step_vars,
    preconditioner_diag_vars,
    predict,
)
from .numerics import RngStream, frob_norm, softplus
from .tasks import KIND_CLASSIFICATION, KIND_REGRESSION, TaskInstance, build_prompt

STEP_RATIO_FLOOR = 1e-8  # denominator guard for frozen layers
LAMBDA_POOL = (0.1, 0.001, 0.0001, 0.00001, 0.000001)


@dataclass(frozen=True)
class SharpnessConfig:
    """Probe settings for the curvature-trace estimator.

    ``epsilon`` is the perturbation scale, multiplied by ||Z_t||_F when
    ``rel_scale`` is on. ``n_probes`` trades estimator variance for compute;
    8 is enough inside the training loop, diagnostics use 256.
    """

    epsilon: float = 1e-3
    n_probes: int = 8
    rel_scale: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ShapeMismatchError("epsilon must be positive")
        if self.n_probes < 1:
            raise ShapeMismatchError("n_probes must be >= 1")


@dataclass
class ObjectiveBreakdown:
    task_loss: float
    step_ratio: float
    sharpness: float
    lambda1: float
    lambda2: float
    total: float

    @classmethod
    def compose(cls, task_loss, step_ratio, sharpness, lambda1, lambda2):
        return cls(
            task_loss=task_loss,
            step_ratio=step_ratio,
            sharpness=sharpness,
            lambda1=lambda1,
            lambda2=lambda2,
            total=task_loss + lambda1 * step_ratio + lambda2 * sharpness,
        )


def step_ratio_loss(traj: Trajectory) -> float:
    """Sum over t = 1..T-1 of ||Z_t - Z_{t+1}|| / max(||Z_t - Z_{t-1}||, floor)."""
    states = traj.states
    if len(states) < 3:
        raise TooFewLayersError("step ratio needs at least two layers")
    total = 0.0
    for t in range(1, len(states) - 1):
        num = frob_norm(states[t] - states[t + 1])
        den = max(frob_norm(states[t] - states[t - 1]), STEP_RATIO_FLOOR)
        total += num / den
    return total


def step_ratio_vars(state_vars: list) -> ad.Var:
    """Graph version of ``step_ratio_loss`` over state nodes Z_0..Z_T."""
    if len(state_vars) < 3:
        raise TooFewLayersError("step ratio needs at least two layers")
    total = None
    for t in range(1, len(state_vars) - 1):
        num = ad.frobnorm(ad.sub(state_vars[t], state_vars[t + 1]))
        den = ad.maximum(ad.frobnorm(ad.sub(state_vars[t], state_vars[t - 1])), STEP_RATIO_FLOOR)
        term = ad.div(num, den)
        total = term if total is None else ad.add(total, term)
    return total


def hutchinson_trace_vars(
    layer_fn,
    p_diag: ad.Var,
    z: ad.Var,
    cfg: SharpnessConfig,
    rng: RngStream,
    base_delta: ad.Var = None,
) -> ad.Var:
    """Trace of the preconditioned curvature of one layer map, by probing.

    ``layer_fn`` maps a state to the next state, so f(z) - z is the
    (preconditioned, negated) gradient the layer applies. Each probe nu is a
    full-shape Gaussian matrix; the perturbation direction uses the baseline
    ``p_diag`` (gains over the unperturbed sigma) while the perturbed pass
    renormalizes itself. The sign flip accounts for the layer storing the
    negative gradient:

        estimate = (1/eps)(1/N) sum_i <nu_i, delta - delta_i>_F.
    """
    if z.value.ndim != 2:
        raise ShapeMismatchError("state for trace estimation must be 2-D")
    if base_delta is None:
        base_delta = ad.sub(layer_fn(z), z)
    if cfg.rel_scale:
        eps = ad.mul(ad.constant(cfg.epsilon), ad.maximum(ad.frobnorm(z), 1e-12))
    else:
        eps = ad.constant(cfg.epsilon)
    total = None
    for _ in range(cfg.n_probes):
        nu = ad.constant(rng.normal(z.value.shape))
        perturbed = ad.add(z, ad.mul(eps, ad.rowscale(p_diag, nu)))
        delta_i = ad.sub(layer_fn(perturbed), perturbed)
        contrib = ad.frob_inner(nu, ad.sub(base_delta, delta_i))
        total = contrib if total is None else ad.add(total, contrib)
    estimate = ad.div(total, ad.mul(eps, ad.constant(float(cfg.n_probes))))
    if not np.isfinite(estimate.value):
        raise NonFiniteError("trace estimate is non-finite")
    return estimate


def hutchinson_layer_trace(
    model: Model,
    precond: PreconditionerSet,
    z_t: np.ndarray,
    t: int,
    cfg: SharpnessConfig,
    rng: RngStream,
) -> float:
    """Probe-based trace estimate for layer ``t`` at the unperturbed input ``z_t``."""
    gains = None
    if model.cfg.precond_mode != MODE_IDENTITY:
        gains = ad.constant(precond.gains[t])
    z = ad.constant(np.asarray(z_t, dtype=np.float64))
    _, base_step = layer_step_vars(z, gains, model)
    p_diag = preconditioner_diag_vars(base_step, model.cfg)

    def layer_fn(state):
        return layer_step_vars(state, gains, model)[0]

    est = hutchinson_trace_vars(layer_fn, p_diag, z, cfg, rng, base_delta=base_step.applied)
    return float(est.value)


def sharpness_penalty(traces) -> float:
    """Softplus of each layer trace, summed; negative curvature is kept as
    information rather than clamped away."""
    traces = np.asarray(traces, dtype=np.float64)
    if not np.all(np.isfinite(traces)):
        raise NonFiniteError("traces must be finite")
    return float(np.sum(softplus(traces))) if traces.size else 0.0


def task_loss(pred, target, kind: str) -> float:
    """Squared error for regression, cross-entropy over logits for classification."""
    if kind == KIND_REGRESSION:
        return float((float(pred) - float(target)) ** 2)
    if kind == KIND_CLASSIFICATION:
        logits = np.asarray(pred, dtype=np.float64)
        if logits.ndim != 1:
            raise ShapeMismatchError("classification prediction must be a logits vector")
        target = int(target)
        if not 0 <= target < logits.size:
            raise ShapeMismatchError("target class out of range")
        hi = float(np.max(logits))
        return float(hi + np.log(np.sum(np.exp(logits - hi))) - logits[target])
    raise ShapeMismatchError(f"unknown task kind {kind!r}")


def _task_loss_vars(final_state: ad.Var, task: TaskInstance, label_rows: int) -> ad.Var:
    if task.kind == KIND_REGRESSION:
        slot = ad.take(final_state, (-1, -1))
        diff = ad.sub(slot, ad.constant(float(task.y_star)))
        return ad.mul(diff, diff)
    logits = ad.take(final_state, (slice(-label_rows, None), -1))
    return ad.sub(ad.logsumexp(logits), ad.take(logits, int(task.y_star)))


@dataclass
class ObjectiveGraph:
    """Graph nodes for the batch-mean objective terms and their weighted total."""

    task_loss: ad.Var
    step_ratio: ad.Var
    sharpness: ad.Var
    total: ad.Var

    def breakdown(self, lambda1: float, lambda2: float) -> ObjectiveBreakdown:
        return ObjectiveBreakdown(
            task_loss=float(self.task_loss.value),
            step_ratio=float(self.step_ratio.value),
            sharpness=float(self.sharpness.value),
            lambda1=lambda1,
            lambda2=lambda2,
            total=float(self.total.value),
        )


def objective_graph(
    model: Model,
    gain_vars,
    batch: list,
    lambda1: float,
    lambda2: float,
    sharp_cfg: SharpnessConfig,
    probe_rng: RngStream,
    compute_all: bool = False,
) -> ObjectiveGraph:
    """Build the full objective over a batch as one differentiable graph.

    Probe noise is derived from (probe_rng key, task position, layer), so a
    second call with the same stream rebuilds the identical objective; that
    is what makes finite-difference checks of the gains meaningful. Terms
    whose weight is zero are skipped (reported as 0) unless ``compute_all``.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ShapeMismatchError("lambda weights must be nonnegative")
    if not batch:
        raise ShapeMismatchError("batch must be nonempty")
    n_layers = model.cfg.n_layers
    need_sr = compute_all or lambda1 > 0
    need_sh = compute_all or lambda2 > 0
    if (need_sr or need_sh) and n_layers < 2:
        raise TooFewLayersError("step-ratio and sharpness terms need n_layers >= 2")

    task_terms, sr_terms, sh_terms = [], [], []
    for pos, task in enumerate(batch):
        states, steps = forward_graph(build_prompt(task), model, gain_vars)
        task_terms.append(_task_loss_vars(states[-1], task, model.cfg.label_rows))
        if need_sr:
            sr_terms.append(step_ratio_vars(states))
        if need_sh:
            layer_traces = None
            for t in range(1, n_layers):
                p_diag = preconditioner_diag_vars(steps[t], model.cfg)
                gains_t = gain_vars[t] if gain_vars is not None else None

                def layer_fn(state, _g=gains_t):
                    return layer_step_vars(state, _g, model)[0]

                trace = hutchinson_trace_vars(
                    layer_fn, p_diag, states[t], sharp_cfg, probe_rng.substream(pos, t), base_delta=steps[t].applied
                )
                term = ad.softplus(trace)
                layer_traces = term if layer_traces is None else ad.add(layer_traces, term)
            sh_terms.append(layer_traces)

    inv = ad.constant(1.0 / len(batch))

    def batch_mean(terms):
        if not terms:
            return ad.constant(0.0)
        acc = terms[0]
        for term in terms[1:]:
            acc = ad.add(acc, term)
        return ad.mul(acc, inv)

    task_mean = batch_mean(task_terms)
    sr_mean = batch_mean(sr_terms)
    sh_mean = batch_mean(sh_terms)
    # associate exactly like ObjectiveBreakdown.compose: (task + l1*sr) + l2*sh
    total = ad.add(
        ad.add(task_mean, ad.mul(ad.constant(lambda1), sr_mean)),
        ad.mul(ad.constant(lambda2), sh_mean),
    )
    return ObjectiveGraph(task_mean, sr_mean, sh_mean, total)


def total_objective(
    model: Model,
    precond: PreconditionerSet,
    batch: list,
    lambda1: float,
    lambda2: float,
    sharp_cfg: SharpnessConfig,
    rng: RngStream,
    compute_all: bool = True,
) -> ObjectiveBreakdown:
    """Batch-mean objective on concrete preconditioners."""
    gain_vars = None
    if model.cfg.precond_mode != MODE_IDENTITY:
        gain_vars = [ad.constant(g) for g in precond.gains]
    graph = objective_graph(model, gain_vars, batch, lambda1, lambda2, sharp_cfg, rng, compute_all=compute_all)
    breakdown = graph.breakdown(lambda1, lambda2)
    if not np.isfinite(breakdown.total):
        raise NonFiniteError("objective total is non-finite")
    return breakdown


def suite_task_loss(model: Model, precond: PreconditionerSet, suite: list) -> float:
    """Mean task loss over a suite (plain forward passes, no probes)."""
    losses = []
    for task in suite:
        traj = forward_task(task, model, precond)
        losses.append(task_loss(predict(traj), task.y_star, task.kind))
    return float(np.mean(losses))
