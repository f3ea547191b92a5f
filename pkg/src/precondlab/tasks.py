"""Synthetic in-context regression and classification tasks.

A task is a tiny supervised problem: demonstration pairs plus one held-out
query. ``build_prompt`` stacks it into the (d+1) x (n+1) matrix the model
consumes, with the query's answer slot forced to zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidSpecError
from .numerics import RngStream

KIND_REGRESSION = "regression"
KIND_CLASSIFICATION = "classification"


@dataclass(frozen=True)
class TaskSpec:
    """Distribution parameters for one family of tasks.

    ``cov_spectrum`` holds the eigenvalues of the (diagonal) input covariance;
    anisotropy is what makes learned preconditioners matter, and evaluation
    suites may use a different spectrum than training to create shift.
    """

    kind: str
    d: int
    n_demos: int
    cov_spectrum: tuple
    noise_std: float = 0.0
    n_classes: Optional[int] = None

    def __post_init__(self):
        if self.kind not in (KIND_REGRESSION, KIND_CLASSIFICATION):
            raise InvalidSpecError(f"unknown task kind {self.kind!r}")
        if self.d < 1:
            raise InvalidSpecError("d must be >= 1")
        if self.n_demos < 1:
            raise InvalidSpecError("n_demos must be >= 1")
        spectrum = tuple(float(v) for v in self.cov_spectrum)
        if len(spectrum) != self.d:
            raise InvalidSpecError("cov_spectrum must have exactly d entries")
        if any(v <= 0 for v in spectrum):
            raise InvalidSpecError("cov_spectrum entries must be positive")
        object.__setattr__(self, "cov_spectrum", spectrum)
        if self.noise_std < 0:
            raise InvalidSpecError("noise_std must be nonnegative")
        if self.kind == KIND_CLASSIFICATION:
            if self.n_classes is None or self.n_classes < 2:
                raise InvalidSpecError("classification needs n_classes >= 2")
        elif self.n_classes is not None:
            raise InvalidSpecError("n_classes only applies to classification")


@dataclass
class TaskInstance:
    """One sampled task: latent weights, demonstrations, and a query."""

    spec: TaskSpec
    weights: np.ndarray  # (d,) regression, (n_classes, d) classification
    xs: np.ndarray  # (n_demos, d)
    ys: np.ndarray  # (n_demos,) floats or class indices
    x_query: np.ndarray  # (d,)
    y_star: float | int

    @property
    def kind(self) -> str:
        return self.spec.kind


def sample_task(spec: TaskSpec, rng: RngStream) -> TaskInstance:
    """Draw one task. Draw order is fixed so results are replayable.

    Regression: w* ~ N(0, I_d), x ~ N(0, diag(cov_spectrum)),
    y = w*.x + noise_std * xi. Classification: rows of the template matrix
    ~ N(0, I_d); labels are the argmax template score (noise perturbs the
    scores before the argmax).
    """
    scale = np.sqrt(np.asarray(spec.cov_spectrum))
    if spec.kind == KIND_REGRESSION:
        weights = rng.normal((spec.d,))
    else:
        weights = rng.normal((spec.n_classes, spec.d))
    xs = rng.normal((spec.n_demos, spec.d)) * scale[np.newaxis, :]
    noise = rng.normal((spec.n_demos,)) if spec.kind == KIND_REGRESSION else rng.normal((spec.n_demos, spec.n_classes))
    x_query = rng.normal((spec.d,)) * scale
    query_noise = rng.normal(()) if spec.kind == KIND_REGRESSION else rng.normal((spec.n_classes,))

    if spec.kind == KIND_REGRESSION:
        ys = xs @ weights + spec.noise_std * noise
        y_star = float(x_query @ weights + spec.noise_std * query_noise)
    else:
        scores = xs @ weights.T + spec.noise_std * noise
        ys = np.argmax(scores, axis=1).astype(np.float64)
        y_star = int(np.argmax(weights @ x_query + spec.noise_std * query_noise))
    return TaskInstance(spec, weights, xs, np.asarray(ys, dtype=np.float64), x_query, y_star)


def sample_suite(spec: TaskSpec, count: int, rng: RngStream) -> list[TaskInstance]:
    """Sample ``count`` tasks from independent substreams (order-insensitive)."""
    return [sample_task(spec, rng.substream(i)) for i in range(count)]


def build_prompt(task: TaskInstance) -> np.ndarray:
    """Stack the task into the prompt matrix.

    Columns 1..n are (x_i; y_i), column n+1 is (x_query; 0). The zero is the
    slot the forward pass fills with its prediction. Classification labels
    enter as class indices cast to float; the model expands them internally.
    """
    d, n = task.spec.d, task.spec.n_demos
    z = np.zeros((d + 1, n + 1))
    z[:d, :n] = task.xs.T
    z[d, :n] = task.ys
    z[:d, n] = task.x_query
    # z[d, n] stays exactly 0: the replaceable answer slot
    return z


def suite_to_json(suite: list[TaskInstance]) -> str:
    records = []
    for task in suite:
        records.append(
            {
                "spec": {
                    "kind": task.spec.kind,
                    "d": task.spec.d,
                    "n_demos": task.spec.n_demos,
                    "cov_spectrum": list(task.spec.cov_spectrum),
                    "noise_std": task.spec.noise_std,
                    "n_classes": task.spec.n_classes,
                },
                "weights": task.weights.tolist(),
                "xs": task.xs.tolist(),
                "ys": task.ys.tolist(),
                "x_query": task.x_query.tolist(),
                "y_star": task.y_star,
            }
        )
    return json.dumps(records, indent=2)


def suite_from_json(text: str) -> list[TaskInstance]:
    suite = []
    for rec in json.loads(text):
        spec = TaskSpec(
            kind=rec["spec"]["kind"],
            d=rec["spec"]["d"],
            n_demos=rec["spec"]["n_demos"],
            cov_spectrum=tuple(rec["spec"]["cov_spectrum"]),
            noise_std=rec["spec"]["noise_std"],
            n_classes=rec["spec"]["n_classes"],
        )
        y_star = rec["y_star"]
        suite.append(
            TaskInstance(
                spec=spec,
                weights=np.asarray(rec["weights"], dtype=np.float64),
                xs=np.asarray(rec["xs"], dtype=np.float64),
                ys=np.asarray(rec["ys"], dtype=np.float64),
                x_query=np.asarray(rec["x_query"], dtype=np.float64),
                y_star=int(y_star) if spec.kind == KIND_CLASSIFICATION else float(y_star),
            )
        )
    return suite
