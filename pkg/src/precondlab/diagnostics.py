"""Layer-wise analysis instruments: probes, profiles, and the gap report.

These reproduce the package's three inspection tools on an evaluation
suite: ridge-probe decodability of each layer's query features, per-layer
mean step ratios, and per-layer curvature estimates, plus a report that
correlates the measured generalization gap with the curvature quantity
from the bound. Output is CSV (one schema per report) and simple
self-contained SVG line charts.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats as scipy_stats

from .errors import DegenerateLabelsError, ShapeMismatchError
from .model import MODE_IDENTITY, Model, PreconditionerSet, Trajectory, forward_task
from .numerics import RngStream, frob_norm
from .objectives import STEP_RATIO_FLOOR, SharpnessConfig, hutchinson_layer_trace, task_loss
from .oracle import BoundReport, bound_quantity
from .tasks import TaskInstance

PROFILE_HEADER = ["layer", "mean_step_ratio", "mean_sharpness", "probe_acc", "probe_ce"]
GAP_HEADER = ["run_id", "lambda2", "curvature_sum", "bound_value", "measured_gap"]
DEFAULT_RIDGE_LAMBDA = 1e-3


@dataclass
class LayerProfile:
    """Per-layer means over a suite. Step-ratio and sharpness cover the
    interior layers t = 1..T-1; probe metrics cover every state t = 0..T."""

    layers: list  # layer indices 0..T
    mean_step_ratio: list  # None where undefined
    mean_sharpness: list
    probe_acc: list
    probe_ce: list
    ratio_floored: bool = False


@dataclass
class RidgeProbe:
    weights: np.ndarray  # (n_features + 1, n_classes); last row is the bias
    classes: np.ndarray  # label value per score column

    def scores(self, features: np.ndarray) -> np.ndarray:
        aug = np.hstack([features, np.ones((features.shape[0], 1))])
        return aug @ self.weights


def _stratified_split(labels: np.ndarray, train_fraction: float) -> tuple:
    """Per-class deterministic split so both halves see every class that
    has at least two members; singleton classes go to the training side."""
    train_ix, test_ix = [], []
    for value in np.unique(labels):
        members = np.flatnonzero(labels == value)
        cut = max(1, int(round(len(members) * train_fraction)))
        if cut == len(members) and len(members) > 1:
            cut -= 1
        train_ix.extend(members[:cut])
        test_ix.extend(members[cut:])
    if not test_ix:
        raise ShapeMismatchError("probe evaluation needs a nonempty held-out part")
    return np.sort(np.asarray(train_ix)), np.sort(np.asarray(test_ix))


def query_features(trajectories: list) -> list:
    """Query-column features per layer: list over layers of (n_tasks, rows)."""
    n_states = len(trajectories[0].states)
    out = []
    for t in range(n_states):
        out.append(np.vstack([traj.states[t][:, -1] for traj in trajectories]))
    return out


def probe_fit(features_per_layer: list, labels, ridge_lambda: float = DEFAULT_RIDGE_LAMBDA) -> list:
    """One closed-form ridge classifier per layer on one-hot targets."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise DegenerateLabelsError("probe fitting needs at least two distinct labels")
    onehot = (labels[:, np.newaxis] == classes[np.newaxis, :]).astype(np.float64)
    probes = []
    for features in features_per_layer:
        if features.shape[0] != labels.shape[0]:
            raise ShapeMismatchError("feature rows must match label count")
        aug = np.hstack([features, np.ones((features.shape[0], 1))])
        gram = aug.T @ aug + ridge_lambda * np.eye(aug.shape[1])
        probes.append(RidgeProbe(np.linalg.solve(gram, aug.T @ onehot), classes))
    return probes


def probe_eval(probes: list, features_per_layer: list, labels) -> list:
    """Held-out accuracy and mean cross-entropy per layer.

    Ridge scores act as logits; cross-entropy applies to their softmax.
    Labels the probe never saw count as errors and are skipped in the CE
    mean (the probe has no score slot for them).
    """
    labels = np.asarray(labels)
    results = []
    for probe, features in zip(probes, features_per_layer):
        scores = probe.scores(features)
        if scores.shape[0] != labels.shape[0]:
            raise ShapeMismatchError("feature rows must match label count")
        predicted = probe.classes[np.argmax(scores, axis=1)]
        acc = float(np.mean(predicted == labels))
        ces = []
        lookup = {label: ix for ix, label in enumerate(probe.classes)}
        for i, label in enumerate(labels):
            if label in lookup:
                ces.append(task_loss(scores[i], lookup[label], "classification"))
        results.append((acc, float(np.mean(ces)) if ces else float("nan")))
    return results


def layer_profiles(
    model: Model,
    precond: PreconditionerSet,
    suite: list,
    sharp_cfg: Optional[SharpnessConfig] = None,
    rng: Optional[RngStream] = None,
    probe_labels=None,
    probe_train_fraction: float = 0.5,
    ridge_lambda: float = DEFAULT_RIDGE_LAMBDA,
) -> LayerProfile:
    """Mean per-layer step ratios and curvature estimates over a suite.

    When ``probe_labels`` is given (one label per task), ridge probes are
    fit on the first ``probe_train_fraction`` of the suite's query features
    and evaluated on the rest.
    """
    if not suite:
        raise ShapeMismatchError("suite must be nonempty")
    sharp_cfg = sharp_cfg or SharpnessConfig(n_probes=256)
    rng = rng or RngStream(0, 0xD1A6)
    n_layers = model.cfg.n_layers

    trajectories = [forward_task(task, model, precond) for task in suite]

    ratio_sums = np.zeros(n_layers)
    sharp_sums = np.zeros(n_layers)
    floored = False
    for ix, traj in enumerate(trajectories):
        for t in range(1, n_layers):
            num = frob_norm(traj.states[t] - traj.states[t + 1])
            den = frob_norm(traj.states[t] - traj.states[t - 1])
            if den < STEP_RATIO_FLOOR:
                floored = True
                den = STEP_RATIO_FLOOR
            ratio_sums[t] += num / den
            sharp_sums[t] += hutchinson_layer_trace(
                model, precond, traj.states[t], t, sharp_cfg, rng.substream(ix, t)
            )

    probe_acc: list = [None] * (n_layers + 1)
    probe_ce: list = [None] * (n_layers + 1)
    if probe_labels is not None:
        labels = np.asarray(probe_labels)
        train_ix, test_ix = _stratified_split(labels, probe_train_fraction)
        feats = query_features(trajectories)
        probes = probe_fit([f[train_ix] for f in feats], labels[train_ix], ridge_lambda)
        for t, (acc, ce) in enumerate(probe_eval(probes, [f[test_ix] for f in feats], labels[test_ix])):
            probe_acc[t] = acc
            probe_ce[t] = ce

    n = float(len(suite))
    return LayerProfile(
        layers=list(range(n_layers + 1)),
        mean_step_ratio=[None] + [ratio_sums[t] / n for t in range(1, n_layers)] + [None],
        mean_sharpness=[None] + [sharp_sums[t] / n for t in range(1, n_layers)] + [None],
        probe_acc=probe_acc,
        probe_ce=probe_ce,
        ratio_floored=floored,
    )


def profile_csv(profile: LayerProfile) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PROFILE_HEADER)
    for i, layer in enumerate(profile.layers):
        row = [layer]
        for column in (profile.mean_step_ratio, profile.mean_sharpness, profile.probe_acc, profile.probe_ce):
            value = column[i]
            row.append("" if value is None else repr(float(value)))
        writer.writerow(row)
    return buf.getvalue()


def model_curvature_report(
    model: Model,
    precond: PreconditionerSet,
    suite: list,
    measured_gap: float = 0.0,
) -> BoundReport:
    """Exact preconditioned-curvature quantities for the in-context model.

    On the label rows the layer dynamics are plain preconditioned GD on the
    demo least-squares problem, so per task the weight-space Hessian is
    X X' and the effective preconditioner at layer t is the label-row gain
    over sigma_t times the identity. The suite mean of
    sum_t ||P_t H||_F^2 feeds the bound; gradient norms come from the demo
    residuals the trajectory itself carries.
    """
    if model.cfg.label_rows != 1:
        raise ShapeMismatchError("curvature report is defined for regression models")
    if model.cfg.mean_subtract:
        raise ShapeMismatchError("curvature report assumes mean_subtract off (x-rows must stay fixed)")
    d = model.cfg.d
    curvature_values = []
    grad_norms = []
    smooth = 0.0
    for task in suite:
        traj = forward_task(task, model, precond)
        x = task.xs.T  # (d, n)
        hessian = x @ x.T
        h_norm_sq = float(np.sum(hessian * hessian))
        smooth = max(smooth, float(np.sqrt(h_norm_sq)))
        task_sum = 0.0
        for t in range(model.cfg.n_layers):
            if model.cfg.precond_mode == MODE_IDENTITY:
                scale = 1.0
            else:
                scale = float(precond.gains[t][-1]) / traj.stats[t].sigma
            task_sum += scale * scale * h_norm_sq
            residual = -traj.states[t][-1, : task.spec.n_demos]  # label row holds y - w_t.x
            grad_norms.append(float(np.linalg.norm(x @ residual)))
        curvature_values.append(task_sum)
    curvature = float(np.mean(curvature_values))
    n = suite[0].spec.n_demos
    return BoundReport(
        curvature_sum=curvature,
        bound_value=float(np.sqrt(curvature / n)),
        grad_bound=float(np.max(grad_norms)),
        smooth_bound=smooth,
        measured_gap=float(measured_gap),
    )


@dataclass
class GapRun:
    run_id: str
    lambda2: float
    report: BoundReport


def gap_report(runs: list) -> str:
    """CSV of (run, lambda2, curvature, bound, gap) with a Spearman summary.

    The rank correlation between curvature_sum and measured_gap is appended
    as a comment row; degenerate inputs report "n/a".
    """
    if len(runs) < 2:
        raise ShapeMismatchError("gap report needs at least two runs")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(GAP_HEADER)
    for run in runs:
        writer.writerow(
            [
                run.run_id,
                repr(float(run.lambda2)),
                repr(run.report.curvature_sum),
                repr(run.report.bound_value),
                repr(run.report.measured_gap),
            ]
        )
    curvatures = np.array([run.report.curvature_sum for run in runs])
    gaps = np.array([run.report.measured_gap for run in runs])
    if np.ptp(curvatures) == 0.0 or np.ptp(gaps) == 0.0:
        corr_text = "n/a"
    else:
        rho = scipy_stats.spearmanr(curvatures, gaps).statistic
        corr_text = "n/a" if not np.isfinite(rho) else repr(float(rho))
    writer.writerow(["spearman_gap_vs_curvature", corr_text, "", "", ""])
    return buf.getvalue()


def svg_line_chart(series: dict, title: str, x_label: str = "layer", y_label: str = "") -> str:
    """Minimal self-contained SVG line chart: one polyline per series."""
    width, height = 800, 480
    margin = 60
    points = [(x, y) for values in series.values() for x, y in values]
    if not points:
        raise ShapeMismatchError("chart needs at least one point")
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def to_px(x, y):
        px = margin + (x - x_lo) / x_span * (width - 2 * margin)
        py = height - margin - (y - y_lo) / y_span * (height - 2 * margin)
        return px, py

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" font-size="12">{x_label}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="16" y="{height / 2:.0f}" font-size="12" transform="rotate(-90 16 {height / 2:.0f})" text-anchor="middle">{y_label}</text>',
    ]
    for i, (name, values) in enumerate(series.items()):
        color = palette[i % len(palette)]
        coords = " ".join(f"{to_px(x, y)[0]:.2f},{to_px(x, y)[1]:.2f}" for x, y in values)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - margin + 4}" y="{margin + 18 * i + 12}" font-size="12" fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
