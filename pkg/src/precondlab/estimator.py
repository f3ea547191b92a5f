"""Scikit-learn estimators wrapping the in-context adaptation pipeline.

``fit(X, y)`` performs the few-shot adaptation itself: the demonstrations
become leave-one-out prompts (each sample plays the query once), the
LayerNorm gains are tuned on the three-term objective, and ``predict``
answers new queries in-context with the full demonstration set in the
prompt. Only the gains train; the attention weights stay at the
gradient-descent construction.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .model import ModelConfig, build_model, forward, predict
from .objectives import SharpnessConfig
from .tasks import TaskInstance, TaskSpec
from .training import TrainConfig, fit_gains


def _auto_step_size(x: np.ndarray) -> float:
    """Stable step size from the demo Gram: the largest eigenvalue can only
    shrink on leave-one-out subsets, so 0.5/lambda_max is safe for all prompts."""
    gram = x.T @ x
    top = float(np.linalg.eigvalsh(gram).max())
    return 0.5 / max(top, 1e-12)


def _build_prompt_matrix(demos_x: np.ndarray, demos_y: np.ndarray, query: np.ndarray) -> np.ndarray:
    d = demos_x.shape[1]
    n = demos_x.shape[0]
    z = np.zeros((d + 1, n + 1))
    z[:d, :n] = demos_x.T
    z[d, :n] = demos_y
    z[:d, n] = query
    return z


class _BasePreconditionedAttention(BaseEstimator):
    def __init__(
        self,
        n_layers=4,
        base_lr=None,
        lambda1=1e-3,
        lambda2=1e-3,
        learning_rate=1e-2,
        weight_decay=1e-4,
        epochs=30,
        batch_size=8,
        optimizer="adamw",
        n_probes=4,
        epsilon=1e-3,
        rel_scale=True,
        mean_subtract=False,
        seed=0,
    ):
        self.n_layers = n_layers
        self.base_lr = base_lr
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.n_probes = n_probes
        self.epsilon = epsilon
        self.rel_scale = rel_scale
        self.mean_subtract = mean_subtract
        self.seed = seed

    def _train_cfg(self, n_tasks: int) -> TrainConfig:
        return TrainConfig(
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            lr=self.learning_rate,
            epochs=self.epochs,
            batch_size=min(self.batch_size, n_tasks),
            seed=self.seed,
            optimizer=self.optimizer,
            weight_decay=self.weight_decay,
            sharpness=SharpnessConfig(epsilon=self.epsilon, n_probes=self.n_probes, rel_scale=self.rel_scale),
            suite_size=n_tasks,
            eval_suite_size=n_tasks,
        )

    def _fit_on_tasks(self, suite, d: int, n_demos: int, eta: float, n_classes=None):
        cfg = ModelConfig(
            d=d,
            n_demos=n_demos,
            n_layers=self.n_layers,
            base_lr=eta,
            precond_mode="layernorm_gain",
            mean_subtract=self.mean_subtract,
            n_classes=n_classes,
        )
        model = build_model(cfg)
        report = fit_gains(model, suite, self._train_cfg(len(suite)))
        self.model_ = model
        self.precond_ = report.final_precond
        self.train_report_ = report
        self.eta_ = eta

    def _predict_prompt(self, query: np.ndarray):
        z = _build_prompt_matrix(self._demos_x, self._demos_y, query)
        traj = forward(z, self.model_, self.precond_)
        return predict(traj)


class PreconditionedAttentionRegressor(_BasePreconditionedAttention, RegressorMixin):
    """Few-shot in-context regressor with trained diagonal preconditioners.

    Parameters mirror the adaptation objective: ``lambda1`` weights the
    step-ratio smoothness penalty and ``lambda2`` the curvature (sharpness)
    penalty. ``base_lr=None`` picks a stable step from the demo Gram.
    """

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        if X.shape[0] < 2:
            raise ValueError("need at least 2 demonstrations for leave-one-out adaptation")
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        self._demos_x, self._demos_y = X, y
        eta = self.base_lr if self.base_lr is not None else _auto_step_size(X)

        m, d = X.shape
        spec = TaskSpec("regression", d=d, n_demos=m - 1, cov_spectrum=(1.0,) * d, noise_std=0.0)
        suite = []
        for i in range(m):
            keep = np.arange(m) != i
            suite.append(
                TaskInstance(spec, np.zeros(d), X[keep], y[keep], X[i], float(y[i]))
            )
        self._fit_on_tasks(suite, d=d, n_demos=m - 1, eta=eta)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return np.array([self._predict_prompt(row) for row in X])


class PreconditionedAttentionClassifier(_BasePreconditionedAttention, ClassifierMixin):
    """Few-shot in-context classifier; class scores live in reserved label
    rows of the query column and train under cross-entropy."""

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        if X.shape[0] < 2:
            raise ValueError("need at least 2 demonstrations for leave-one-out adaptation")
        X = np.asarray(X, dtype=np.float64)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.classes_.shape[0] < 2:
            raise ValueError("need at least 2 classes")
        self.n_features_in_ = X.shape[1]
        self._demos_x, self._demos_y = X, encoded.astype(np.float64)
        eta = self.base_lr if self.base_lr is not None else _auto_step_size(X)

        m, d = X.shape
        k = int(self.classes_.shape[0])
        spec = TaskSpec("classification", d=d, n_demos=m - 1, cov_spectrum=(1.0,) * d, noise_std=0.0, n_classes=k)
        suite = []
        for i in range(m):
            keep = np.arange(m) != i
            suite.append(
                TaskInstance(spec, np.zeros((k, d)), X[keep], self._demos_y[keep], X[i], int(encoded[i]))
            )
        self._fit_on_tasks(suite, d=d, n_demos=m - 1, eta=eta, n_classes=k)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return np.vstack([self._predict_prompt(row) for row in X])

    def predict_proba(self, X):
        logits = self.decision_function(X)
        shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
        return shifted / shifted.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
