"""Gain adaptation: differentiate the objective, run the optimizer, verify.

Gradients come from reverse accumulation through the explicit graph built
in ``objectives``; central finite differences stay available both as an
independent oracle (``gradcheck``) and as a fallback gradient mode. Probe
noise is fixed within each optimization step and re-drawn across steps, so
the per-step objective is a deterministic function of the gains.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import DivergedError, ShapeMismatchError
from .model import MODE_LAYERNORM, Model, ModelConfig, PreconditionerSet, build_model
from .numerics import RngStream
from .objectives import ObjectiveBreakdown, ObjectiveGraph, SharpnessConfig, objective_graph, suite_task_loss
from .oracle import QuadraticProblem, step_operator_radius
from .tasks import TaskSpec, sample_suite

DIVERGENCE_GUARD = 1e12

# substream labels under the master seed
_STREAM_TRAIN_SUITE = 1
_STREAM_EVAL_SUITE = 2
_STREAM_SHUFFLE = 3
_STREAM_PROBES = 4
_STREAM_GRADCHECK = 5


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 1e-3
    lambda2: float = 1e-3
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "adamw"
    weight_decay: float = 1e-4
    sharpness: SharpnessConfig = field(default_factory=SharpnessConfig)
    grad_mode: str = "analytic"
    suite_size: int = 32
    eval_suite_size: int = 32

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ShapeMismatchError("lambda weights must be nonnegative")
        if self.lr < 0 or self.weight_decay < 0:
            raise ShapeMismatchError("lr and weight_decay must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ShapeMismatchError("epochs and batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adamw"):
            raise ShapeMismatchError(f"unknown optimizer {self.optimizer!r}")
        if self.grad_mode not in ("analytic", "finite_difference"):
            raise ShapeMismatchError(f"unknown grad_mode {self.grad_mode!r}")
        if self.suite_size < 1 or self.eval_suite_size < 1:
            raise ShapeMismatchError("suite sizes must be >= 1")


class SgdOptimizer:
    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, params: list, grads: list) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * (g + self.weight_decay * p)


class AdamWOptimizer:
    """AdamW with bias-corrected moments and decoupled weight decay."""

    def __init__(self, lr: float, weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Optional[list] = None
        self.v: Optional[list] = None

    def step(self, params: list, grads: list) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * ((m / b1t) / (np.sqrt(v / b2t) + self.eps) + self.weight_decay * p)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SgdOptimizer(cfg.lr, cfg.weight_decay)
    return AdamWOptimizer(cfg.lr, cfg.weight_decay)


def grad_objective(
    model: Model,
    precond: PreconditionerSet,
    batch: list,
    cfg: TrainConfig,
    probe_rng: RngStream,
) -> tuple[ObjectiveBreakdown, list]:
    """Objective breakdown and d(total)/d(gains), one array per layer.

    Analytic mode backpropagates through the recorded graph; the
    finite-difference mode re-evaluates the identical objective (same probe
    key) at shifted gains. Both see the objective as a deterministic
    function of the gains because probes are rebuilt from the stream key.
    """
    if model.cfg.precond_mode != MODE_LAYERNORM:
        raise ShapeMismatchError("training requires precond_mode=layernorm_gain")
    if cfg.grad_mode == "analytic":
        gain_vars = [ad.leaf(g) for g in precond.gains]
        graph = objective_graph(model, gain_vars, batch, cfg.lambda1, cfg.lambda2, cfg.sharpness, probe_rng)
        ad.backward(graph.total)
        grads = [np.zeros_like(g.value) if g.grad is None else np.asarray(g.grad) for g in gain_vars]
        return graph.breakdown(cfg.lambda1, cfg.lambda2), grads

    shapes = [g.shape for g in precond.gains]

    def unflatten(theta):
        out, start = [], 0
        for shape in shapes:
            size = int(np.prod(shape))
            out.append(theta[start : start + size].reshape(shape))
            start += size
        return out

    def evaluate(theta) -> float:
        gains = [ad.constant(g) for g in unflatten(theta)]
        graph = objective_graph(model, gains, batch, cfg.lambda1, cfg.lambda2, cfg.sharpness, probe_rng)
        return float(graph.total.value)

    theta0 = np.concatenate([g.ravel() for g in precond.gains])
    from .numerics import central_fd_grad

    flat = central_fd_grad(evaluate, theta0, h=1e-5)
    gains = [ad.constant(g) for g in unflatten(theta0)]
    graph = objective_graph(model, gains, batch, cfg.lambda1, cfg.lambda2, cfg.sharpness, probe_rng)
    return graph.breakdown(cfg.lambda1, cfg.lambda2), unflatten(flat)


@dataclass
class EpochRecord:
    epoch: int
    train: ObjectiveBreakdown
    eval_task_loss: float


@dataclass
class TrainReport:
    epochs: list
    final_precond: PreconditionerSet
    wall_seconds: float
    diverged: bool
    final_train_task_loss: float
    final_eval_task_loss: float

    @property
    def measured_gap(self) -> float:
        return self.final_eval_task_loss - self.final_train_task_loss


def metrics_csv(report: TrainReport) -> str:
    """Per-epoch metrics; float fields use shortest round-trip decimals so
    identical runs serialize to identical bytes."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "task_loss", "step_ratio", "sharpness", "total", "eval_task_loss"])
    for rec in report.epochs:
        writer.writerow(
            [
                rec.epoch,
                repr(rec.train.task_loss),
                repr(rec.train.step_ratio),
                repr(rec.train.sharpness),
                repr(rec.train.total),
                repr(rec.eval_task_loss),
            ]
        )
    return buf.getvalue()


def _mean_breakdown(parts: list, cfg: TrainConfig) -> ObjectiveBreakdown:
    return ObjectiveBreakdown.compose(
        task_loss=float(np.mean([p.task_loss for p in parts])),
        step_ratio=float(np.mean([p.step_ratio for p in parts])),
        sharpness=float(np.mean([p.sharpness for p in parts])),
        lambda1=cfg.lambda1,
        lambda2=cfg.lambda2,
    )


def fit_gains(
    model: Model,
    suite: list,
    train_cfg: TrainConfig,
    eval_suite: Optional[list] = None,
    on_epoch=None,
) -> TrainReport:
    """Run the adaptation loop on explicit task suites.

    ``on_epoch``, when given, receives each EpochRecord as it completes
    (progress reporting only; it must not mutate anything).
    """
    started = time.perf_counter()
    eval_suite = suite if eval_suite is None else eval_suite
    root = RngStream(train_cfg.seed)
    precond = PreconditionerSet.identity(model.cfg)
    optimizer = make_optimizer(train_cfg)
    records = []
    step = 0
    for epoch in range(train_cfg.epochs):
        order = root.substream(_STREAM_SHUFFLE, epoch).permutation(len(suite))
        batch_parts = []
        for start in range(0, len(order), train_cfg.batch_size):
            batch = [suite[i] for i in order[start : start + train_cfg.batch_size]]
            probe_rng = root.substream(_STREAM_PROBES, step)
            breakdown, grads = grad_objective(model, precond, batch, train_cfg, probe_rng)
            if not np.isfinite(breakdown.total) or abs(breakdown.total) > DIVERGENCE_GUARD:
                partial = _finish_report(records, precond, model, suite, eval_suite, started, diverged=True)
                raise DivergedError(f"objective diverged at step {step}: total={breakdown.total}", partial)
            optimizer.step(precond.gains, grads)
            batch_parts.append(breakdown)
            step += 1
        record = EpochRecord(
            epoch=epoch,
            train=_mean_breakdown(batch_parts, train_cfg),
            eval_task_loss=suite_task_loss(model, precond, eval_suite),
        )
        records.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return _finish_report(records, precond, model, suite, eval_suite, started, diverged=False)


def train(
    model_cfg: ModelConfig,
    train_spec: TaskSpec,
    train_cfg: TrainConfig,
    eval_spec: Optional[TaskSpec] = None,
    on_epoch=None,
) -> TrainReport:
    """Adapt the gains on a sampled task suite; deterministic given the seed."""
    eval_spec = eval_spec or train_spec
    root = RngStream(train_cfg.seed)
    suite = sample_suite(train_spec, train_cfg.suite_size, root.substream(_STREAM_TRAIN_SUITE))
    eval_suite = sample_suite(eval_spec, train_cfg.eval_suite_size, root.substream(_STREAM_EVAL_SUITE))
    return fit_gains(build_model(model_cfg), suite, train_cfg, eval_suite, on_epoch=on_epoch)


def _finish_report(records, precond, model, suite, eval_suite, started, diverged) -> TrainReport:
    return TrainReport(
        epochs=records,
        final_precond=precond.copy(),
        wall_seconds=time.perf_counter() - started,
        diverged=diverged,
        final_train_task_loss=suite_task_loss(model, precond, suite),
        final_eval_task_loss=suite_task_loss(model, precond, eval_suite),
    )


@dataclass
class GradcheckReport:
    trials: int
    worst_task: float
    worst_step_ratio: float
    worst_sharpness: float
    worst_config: dict

    @property
    def worst_overall(self) -> float:
        return max(self.worst_task, self.worst_step_ratio, self.worst_sharpness)


def _relative_error(analytic: np.ndarray, fd: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(fd))), 1e-12)
    return float(np.max(np.abs(analytic - fd)) / scale)


def gradcheck(
    train_cfg: TrainConfig,
    trials: int = 20,
    seed: int = 0,
    fix_probes: bool = True,
    fd_step: float = 1e-5,
) -> GradcheckReport:
    """Analytic vs central-difference gradients on random small configurations.

    ``fix_probes=False`` re-samples the probe noise on every evaluation and
    exists as a negative control: a stochastic objective has no consistent
    finite-difference gradient, so the check must fail.
    """
    rng = RngStream(seed, _STREAM_GRADCHECK)
    worst = {"task": 0.0, "step_ratio": 0.0, "sharpness": 0.0}
    worst_config: dict = {}
    fd_calls = [0]
    for trial in range(trials):
        trial_rng = rng.substream(trial)
        d = int(trial_rng.substream(0).integers(2, 5))
        n_layers = int(trial_rng.substream(1).integers(2, 5))
        n_demos = int(trial_rng.substream(2).integers(4, 9))
        spec = TaskSpec("regression", d=d, n_demos=n_demos, cov_spectrum=tuple(1.0 + i for i in range(d)), noise_std=0.1)
        batch = sample_suite(spec, 2, trial_rng.substream(3))
        gram_max = max(float(np.linalg.eigvalsh(t.xs.T @ t.xs).max()) for t in batch)
        model_cfg = ModelConfig(d=d, n_demos=n_demos, n_layers=n_layers, base_lr=0.5 / gram_max)
        model = build_model(model_cfg)
        gains0 = [1.0 + 0.3 * trial_rng.substream(10 + t).normal((model_cfg.state_rows,)) for t in range(n_layers)]
        theta0 = np.concatenate([g.ravel() for g in gains0])
        probe_key = trial_rng.substream(4)

        def build(theta, _model=model, _cfg=model_cfg, _batch=batch, _key=probe_key) -> ObjectiveGraph:
            gains = []
            start = 0
            for _ in range(_cfg.n_layers):
                gains.append(ad.leaf(theta[start : start + _cfg.state_rows]))
                start += _cfg.state_rows
            key = _key if fix_probes else _key.substream(17, fd_calls[0])
            fd_calls[0] += 1
            return objective_graph(
                _model, gains, _batch, train_cfg.lambda1, train_cfg.lambda2, train_cfg.sharpness, key, compute_all=True
            ), gains

        graph, gain_vars = build(theta0)
        analytic = {}
        for name, node in (("task", graph.task_loss), ("step_ratio", graph.step_ratio), ("sharpness", graph.sharpness)):
            ad.zero_grads(gain_vars)
            ad.backward(node)
            analytic[name] = np.concatenate(
                [np.zeros_like(g.value) if g.grad is None else np.asarray(g.grad).ravel() for g in gain_vars]
            )

        fd = {name: np.zeros_like(theta0) for name in analytic}
        for i in range(theta0.size):
            up = theta0.copy()
            up[i] += fd_step
            down = theta0.copy()
            down[i] -= fd_step
            gup, _ = build(up)
            gdown, _ = build(down)
            for name, node_up, node_down in (
                ("task", gup.task_loss, gdown.task_loss),
                ("step_ratio", gup.step_ratio, gdown.step_ratio),
                ("sharpness", gup.sharpness, gdown.sharpness),
            ):
                fd[name][i] = (float(node_up.value) - float(node_down.value)) / (2.0 * fd_step)

        for name in worst:
            err = _relative_error(analytic[name], fd[name])
            if err > worst[name]:
                worst[name] = err
                worst_config = {
                    "trial": trial,
                    "term": name,
                    "d": d,
                    "n_layers": n_layers,
                    "n_demos": n_demos,
                    "relative_error": err,
                }
    return GradcheckReport(
        trials=trials,
        worst_task=worst["task"],
        worst_step_ratio=worst["step_ratio"],
        worst_sharpness=worst["sharpness"],
        worst_config=worst_config,
    )


@dataclass
class QuadraticStepRatioResult:
    p_seq: list
    radii_init: list
    radii_final: list
    objective_init: float
    objective_final: float


def minimize_step_ratio_on_quadratic(
    problem: QuadraticProblem,
    eta: float,
    n_layers: int,
    n_opt_steps: int,
    lr: float,
    seed: int,
    n_starts: int = 4,
    start_scale: float = 1.0,
) -> QuadraticStepRatioResult:
    """Minimize the step-ratio objective alone over per-step diagonal
    preconditioners of an explicit quadratic recursion.

    The objective is averaged over ``n_starts`` seeded starting points so
    the learned preconditioners must contract whole neighborhoods rather
    than a single error direction. Returns the learned diagonals with
    the step-operator spectral radii before and after.
    """
    from .objectives import step_ratio_vars

    dim = problem.hessian.shape[0]
    rng = RngStream(seed, 0xAC4)
    starts = [problem.z_star + start_scale * rng.normal((dim,)) for _ in range(n_starts)]
    h_const = ad.constant(problem.hessian)
    b_const = ad.constant(problem.linear.reshape(-1, 1))
    params = [np.ones(dim) for _ in range(n_layers)]

    def objective(gains: list) -> ad.Var:
        total = None
        for z0 in starts:
            z = ad.constant(z0.reshape(-1, 1))
            states = [z]
            for t in range(n_layers):
                grad = ad.sub(ad.matmul(h_const, states[-1]), b_const)
                step_vec = ad.rowscale(gains[t], grad)
                states.append(ad.sub(states[-1], ad.mul(ad.constant(eta), step_vec)))
            term = step_ratio_vars(states)
            total = term if total is None else ad.add(total, term)
        return ad.mul(total, ad.constant(1.0 / len(starts)))

    radii_init = [step_operator_radius(p, problem.hessian, eta) for p in params]
    objective_init = float(objective([ad.constant(p) for p in params]).value)
    optimizer = AdamWOptimizer(lr=lr, weight_decay=0.0)
    for _ in range(n_opt_steps):
        gains = [ad.leaf(p) for p in params]
        value = objective(gains)
        ad.backward(value)
        grads = [np.zeros_like(p) if g.grad is None else np.asarray(g.grad) for p, g in zip(params, gains)]
        optimizer.step(params, grads)
    final_value = float(objective([ad.constant(p) for p in params]).value)
    radii_final = [step_operator_radius(p, problem.hessian, eta) for p in params]
    return QuadraticStepRatioResult(
        p_seq=[p.copy() for p in params],
        radii_init=radii_init,
        radii_final=radii_final,
        objective_init=objective_init,
        objective_final=final_value,
    )
