"""Linear-attention forward pass that runs gradient descent in-context.

Each layer applies one masked linear self-attention step whose output, on
the label rows, equals an exact gradient-descent update for the in-context
least-squares problem over the demonstration columns: with step size eta
baked into the frozen weights, the demonstration labels track the running
residuals y_i - w_t.x_i while the query's answer slot accumulates w_t.x_q.
Demo columns receive the update with sign -1 and the query column with sign
+1; that column masking is what lets the slot carry the prediction with a
positive sign so it can be read out directly.

Preconditioning multiplies each row of the raw attention update by a
trainable gain and divides by the update's standard deviation, exactly a
LayerNorm with learnable diagonal. Those gains are the only trainable
parameters; the attention weights stay frozen at the construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatchError
from .tasks import KIND_CLASSIFICATION, TaskInstance, build_prompt

SIGMA_FLOOR = 1e-8

MODE_IDENTITY = "identity"
MODE_LAYERNORM = "layernorm_gain"


@dataclass(frozen=True)
class ModelConfig:
    d: int
    n_demos: int
    n_layers: int
    base_lr: float
    precond_mode: str = MODE_LAYERNORM
    mean_subtract: bool = False
    n_classes: Optional[int] = None  # None = regression (single label row)

    def __post_init__(self):
        if self.d < 1 or self.n_demos < 1 or self.n_layers < 1:
            raise ShapeMismatchError("d, n_demos and n_layers must all be >= 1")
        if self.base_lr < 0:
            raise ShapeMismatchError("base_lr must be nonnegative")
        if self.precond_mode not in (MODE_IDENTITY, MODE_LAYERNORM):
            raise ShapeMismatchError(f"unknown precond_mode {self.precond_mode!r}")
        if self.n_classes is not None and self.n_classes < 2:
            raise ShapeMismatchError("n_classes must be >= 2 when set")

    @property
    def label_rows(self) -> int:
        return 1 if self.n_classes is None else self.n_classes

    @property
    def state_rows(self) -> int:
        return self.d + self.label_rows


@dataclass(frozen=True)
class AttentionWeights:
    """Frozen attention parameters of the gradient-descent construction.

    Key and query projections select the x-rows, the value projection
    selects the label rows, and the output scale is -eta on demonstration
    columns / +eta on the query column.
    """

    eta: float
    wk: np.ndarray
    wq: np.ndarray
    wv: np.ndarray


@dataclass(frozen=True)
class Model:
    cfg: ModelConfig
    weights: AttentionWeights


def init_gd_construction(cfg: ModelConfig) -> AttentionWeights:
    rows, d = cfg.state_rows, cfg.d
    selector_x = np.zeros((rows, rows))
    selector_x[:d, :d] = np.eye(d)
    selector_label = np.zeros((rows, rows))
    selector_label[d:, d:] = np.eye(cfg.label_rows)
    return AttentionWeights(eta=float(cfg.base_lr), wk=selector_x, wq=selector_x, wv=selector_label)


def build_model(cfg: ModelConfig) -> Model:
    return Model(cfg, init_gd_construction(cfg))


@dataclass
class PreconditionerSet:
    """Per-layer gain vectors; length n_layers, each of length state_rows."""

    gains: list

    def __post_init__(self):
        self.gains = [np.array(g, dtype=np.float64, copy=True) for g in self.gains]
        for g in self.gains:
            if g.ndim != 1 or not np.all(np.isfinite(g)):
                raise ShapeMismatchError("each gain vector must be 1-D and finite")

    @classmethod
    def identity(cls, cfg: ModelConfig) -> "PreconditionerSet":
        return cls([np.ones(cfg.state_rows) for _ in range(cfg.n_layers)])

    def copy(self) -> "PreconditionerSet":
        return PreconditionerSet([g.copy() for g in self.gains])


@dataclass
class LayerUpdateStats:
    raw_update: np.ndarray  # attention output before preconditioning
    sigma: float
    mu: float
    applied_update: np.ndarray
    sigma_floored: bool


@dataclass
class Trajectory:
    """States Z_0..Z_T plus the per-layer update statistics that produced them."""

    states: list
    stats: list
    label_rows: int = 1

    @property
    def n_layers(self) -> int:
        return len(self.stats)


@dataclass
class LayerStepVars:
    """Graph-node view of one layer step, for differentiation."""

    raw: ad.Var
    applied: ad.Var
    sigma: Optional[ad.Var]  # None in identity mode
    mu: Optional[ad.Var]
    sigma_floored: bool
    gains: Optional[ad.Var]


def encode_prompt(prompt: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Map a prompt matrix to the initial internal state.

    Regression states are the prompt itself. Classification prompts carry
    class indices in the single label row; they are expanded to one one-hot
    row per class (the reserved score rows the prediction is read from),
    with the query column's label block zero.
    """
    z = np.asarray(prompt, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] != cfg.d + 1:
        raise ShapeMismatchError(f"prompt must have {cfg.d + 1} rows, got shape {z.shape}")
    if cfg.n_classes is None:
        return z.copy()
    n = z.shape[1] - 1
    s = np.zeros((cfg.state_rows, z.shape[1]))
    s[: cfg.d, :] = z[: cfg.d, :]
    labels = z[cfg.d, :n].astype(int)
    if np.any(labels < 0) or np.any(labels >= cfg.n_classes):
        raise ShapeMismatchError("class indices out of range in prompt label row")
    s[cfg.d + labels, np.arange(n)] = 1.0
    return s


def _column_signs(n_cols: int) -> np.ndarray:
    signs = np.full((1, n_cols), -1.0)
    signs[0, -1] = 1.0
    return signs


def attention_raw_update_vars(weights: AttentionWeights, s: ad.Var) -> ad.Var:
    """Masked linear attention: keys/values from demo columns, signed output."""
    n_cols = s.value.shape[1]
    s_kv = ad.take(s, (slice(None), slice(0, n_cols - 1)))
    k = ad.matmul(ad.constant(weights.wk), s_kv)
    q = ad.matmul(ad.constant(weights.wq), s)
    v = ad.matmul(ad.constant(weights.wv), s_kv)
    scores = ad.matmul(ad.transpose(k), q)
    out = ad.matmul(v, scores)
    return ad.mul(out, ad.constant(weights.eta * _column_signs(n_cols)))


def layer_step_vars(s: ad.Var, gains: Optional[ad.Var], model: Model) -> tuple[ad.Var, LayerStepVars]:
    cfg = model.cfg
    raw = attention_raw_update_vars(model.weights, s)
    if cfg.precond_mode == MODE_IDENTITY:
        applied = raw
        step = LayerStepVars(raw, applied, None, None, False, None)
    else:
        if gains is None:
            raise ShapeMismatchError("layernorm_gain mode requires a gain vector")
        mu = ad.vmean(raw)
        sigma_raw = ad.stddev(raw)
        floored = bool(sigma_raw.value < SIGMA_FLOOR)
        sigma = ad.maximum(sigma_raw, SIGMA_FLOOR)
        centered = ad.sub(raw, mu) if cfg.mean_subtract else raw
        applied = ad.rowscale(gains, ad.div(centered, sigma))
        step = LayerStepVars(raw, applied, sigma, mu, floored, gains)
    return ad.add(s, applied), step


def preconditioner_diag_vars(step: LayerStepVars, cfg: ModelConfig) -> ad.Var:
    """The diagonal of P_t = diag(gains)/sigma_t as a graph node."""
    if cfg.precond_mode == MODE_IDENTITY:
        return ad.constant(np.ones(cfg.state_rows))
    return ad.div(step.gains, step.sigma)


def forward_graph(
    prompt: np.ndarray, model: Model, gain_vars: Optional[list]
) -> tuple[list, list]:
    """Run all layers on a prompt, returning graph nodes (states, steps)."""
    cfg = model.cfg
    state = ad.constant(encode_prompt(prompt, cfg))
    states = [state]
    steps = []
    for t in range(cfg.n_layers):
        gains = gain_vars[t] if gain_vars is not None else None
        state, step = layer_step_vars(state, gains, model)
        states.append(state)
        steps.append(step)
    return states, steps


def _stats_from_step(step: LayerStepVars) -> LayerUpdateStats:
    return LayerUpdateStats(
        raw_update=step.raw.value.copy(),
        sigma=float(step.sigma.value) if step.sigma is not None else 1.0,
        mu=float(step.mu.value) if step.mu is not None else 0.0,
        applied_update=step.applied.value.copy(),
        sigma_floored=step.sigma_floored,
    )


def layer_update(
    z: np.ndarray, t: int, model: Model, precond: PreconditionerSet
) -> tuple[np.ndarray, LayerUpdateStats]:
    """One layer step on a concrete state matrix."""
    cfg = model.cfg
    if t >= cfg.n_layers:
        raise ShapeMismatchError(f"layer index {t} out of range for {cfg.n_layers} layers")
    z = np.asarray(z, dtype=np.float64)
    if z.shape[0] != cfg.state_rows:
        raise ShapeMismatchError(f"state must have {cfg.state_rows} rows, got {z.shape}")
    gains = None
    if cfg.precond_mode == MODE_LAYERNORM:
        gains = ad.constant(precond.gains[t])
    nxt, step = layer_step_vars(ad.constant(z), gains, model)
    return nxt.value, _stats_from_step(step)


def forward(prompt: np.ndarray, model: Model, precond: PreconditionerSet) -> Trajectory:
    """Full forward pass from a prompt matrix; captures every state."""
    gain_vars = None
    if model.cfg.precond_mode == MODE_LAYERNORM:
        if len(precond.gains) != model.cfg.n_layers:
            raise ShapeMismatchError("preconditioner set length must equal n_layers")
        gain_vars = [ad.constant(g) for g in precond.gains]
    states, steps = forward_graph(prompt, model, gain_vars)
    return Trajectory(
        states=[s.value.copy() for s in states],
        stats=[_stats_from_step(st) for st in steps],
        label_rows=model.cfg.label_rows,
    )


def predict(traj: Trajectory):
    """Read the model output from the final state's query column.

    Regression returns the scalar answer slot; classification returns the
    vector of class-score slots (logits).
    """
    final = traj.states[-1]
    if traj.label_rows == 1:
        return float(final[-1, -1])
    return final[-traj.label_rows :, -1].copy()


def forward_task(task: TaskInstance, model: Model, precond: PreconditionerSet) -> Trajectory:
    return forward(build_prompt(task), model, precond)


def config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "d": cfg.d,
        "n_demos": cfg.n_demos,
        "n_layers": cfg.n_layers,
        "base_lr": cfg.base_lr,
        "precond_mode": cfg.precond_mode,
        "mean_subtract": cfg.mean_subtract,
        "n_classes": cfg.n_classes,
    }


def config_from_dict(data: dict) -> ModelConfig:
    return ModelConfig(
        d=int(data["d"]),
        n_demos=int(data["n_demos"]),
        n_layers=int(data["n_layers"]),
        base_lr=float(data["base_lr"]),
        precond_mode=str(data["precond_mode"]),
        mean_subtract=bool(data["mean_subtract"]),
        n_classes=None if data.get("n_classes") is None else int(data["n_classes"]),
    )


def checkpoint_to_json(cfg: ModelConfig, precond: PreconditionerSet) -> str:
    """JSON checkpoint; float serialization round-trips bit-exactly."""
    payload = {"config": config_to_dict(cfg), "gains": [g.tolist() for g in precond.gains]}
    return json.dumps(payload, indent=2)


def checkpoint_from_json(text: str) -> tuple[ModelConfig, PreconditionerSet]:
    payload = json.loads(text)
    cfg = config_from_dict(payload["config"])
    precond = PreconditionerSet([np.asarray(g, dtype=np.float64) for g in payload["gains"]])
    if len(precond.gains) != cfg.n_layers:
        raise ShapeMismatchError("checkpoint gain count does not match n_layers")
    return cfg, precond
