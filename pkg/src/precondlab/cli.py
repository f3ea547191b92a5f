"""Command-line interface: config parsing, run directories, reproducibility.

Subcommands: train, eval, diagnose, oracle-check, gradcheck, plot. Exit
codes are the machine contract: 0 success, 1 configuration/validation
error, 2 runtime failure. Every run directory contains the resolved
config, metrics CSV, checkpoint JSON, and a manifest with seed and
artifact version, which is enough to replay the run exactly.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, diagnostics
from . import autodiff as ad
from .errors import ConfigError, DivergedError, PrecondLabError
from .model import ModelConfig, PreconditionerSet, build_model, checkpoint_from_json, checkpoint_to_json, forward_task
from .model import predict as model_predict
from .numerics import RngStream, central_fd_grad, spectral_radius_sym_similar
from .objectives import SharpnessConfig, hutchinson_trace_vars, total_objective
from .oracle import QuadraticProblem, contraction_factors, exact_trace, gd_iterates_ls, quadratic_layer_fn
from .tasks import KIND_CLASSIFICATION, KIND_REGRESSION, TaskSpec, sample_suite
from .training import TrainConfig, gradcheck, metrics_csv, train


# --------------------------------------------------------------------------
# config parsing
# --------------------------------------------------------------------------

_TASK_KEYS = {"kind", "d", "n_demos", "cov_spectrum", "noise_std", "n_classes"}
_MODEL_KEYS = {"d", "n_demos", "n_layers", "base_lr", "precond_mode", "mean_subtract", "n_classes"}
_TRAIN_KEYS = {
    "lambda1",
    "lambda2",
    "lr",
    "epochs",
    "batch_size",
    "optimizer",
    "weight_decay",
    "grad_mode",
    "suite_size",
    "eval_suite_size",
    "sharpness",
}
_SHARPNESS_KEYS = {"epsilon", "n_probes", "rel_scale"}
_DIAG_KEYS = {"n_probes", "ridge_lambda", "suite_size", "gap_pairs", "probe_train_fraction"}
_TOP_KEYS = {"seed", "threads", "model", "train_task", "eval_task", "train", "diagnostics"}


def _check_keys(data: dict, allowed: set, path: str) -> None:
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r}", path=f"{path}.{key}" if path else key)


def _number(data: dict, key: str, default, path: str, minimum=None, allow_none=False):
    value = data.get(key, default)
    if value is None:
        if allow_none:
            return None
        raise ConfigError("value required", path=f"{path}.{key}")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", path=f"{path}.{key}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"must be >= {minimum}, got {value}", path=f"{path}.{key}")
    return float(value)


def _integer(data: dict, key: str, default, path: str, minimum=None, allow_none=False):
    value = data.get(key, default)
    if value is None:
        if allow_none:
            return None
        raise ConfigError("value required", path=f"{path}.{key}")
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"expected an integer, got {value!r}", path=f"{path}.{key}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"must be >= {minimum}, got {value}", path=f"{path}.{key}")
    return int(value)


def _boolean(data: dict, key: str, default, path: str) -> bool:
    value = data.get(key, default)
    if not isinstance(value, bool):
        raise ConfigError(f"expected true/false, got {value!r}", path=f"{path}.{key}")
    return value


def _choice(data: dict, key: str, default, options, path: str) -> str:
    value = data.get(key, default)
    if value not in options:
        raise ConfigError(f"expected one of {sorted(options)}, got {value!r}", path=f"{path}.{key}")
    return value


def _default_cov(d: int) -> tuple:
    return tuple(2.0 ** (1 - i) for i in range(d))


def _parse_task(data: dict, path: str, default_d: int = 4, default_n: int = 8) -> TaskSpec:
    _check_keys(data, _TASK_KEYS, path)
    kind = _choice(data, "kind", KIND_REGRESSION, {KIND_REGRESSION, KIND_CLASSIFICATION}, path)
    d = _integer(data, "d", default_d, path, minimum=1)
    n_demos = _integer(data, "n_demos", default_n, path, minimum=1)
    cov = data.get("cov_spectrum")
    if cov is None:
        cov = _default_cov(d)
    elif not isinstance(cov, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in cov):
        raise ConfigError("expected a list of numbers", path=f"{path}.cov_spectrum")
    noise = _number(data, "noise_std", 0.1, path, minimum=0.0)
    n_classes = _integer(data, "n_classes", None, path, minimum=2, allow_none=True)
    try:
        return TaskSpec(
            kind=kind,
            d=d,
            n_demos=n_demos,
            cov_spectrum=tuple(float(v) for v in cov),
            noise_std=noise,
            n_classes=n_classes,
        )
    except PrecondLabError as exc:
        raise ConfigError(str(exc), path=path)


@dataclass
class RunConfig:
    seed: int
    threads: int
    model: ModelConfig
    train_task: TaskSpec
    eval_task: TaskSpec
    train: TrainConfig
    diag_n_probes: int
    diag_ridge_lambda: float
    diag_suite_size: int
    diag_gap_pairs: int
    diag_probe_train_fraction: float

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "threads": self.threads,
            "model": {
                "d": self.model.d,
                "n_demos": self.model.n_demos,
                "n_layers": self.model.n_layers,
                "base_lr": self.model.base_lr,
                "precond_mode": self.model.precond_mode,
                "mean_subtract": self.model.mean_subtract,
                "n_classes": self.model.n_classes,
            },
            "train_task": _task_dict(self.train_task),
            "eval_task": _task_dict(self.eval_task),
            "train": {
                "lambda1": self.train.lambda1,
                "lambda2": self.train.lambda2,
                "lr": self.train.lr,
                "epochs": self.train.epochs,
                "batch_size": self.train.batch_size,
                "optimizer": self.train.optimizer,
                "weight_decay": self.train.weight_decay,
                "grad_mode": self.train.grad_mode,
                "suite_size": self.train.suite_size,
                "eval_suite_size": self.train.eval_suite_size,
                "sharpness": {
                    "epsilon": self.train.sharpness.epsilon,
                    "n_probes": self.train.sharpness.n_probes,
                    "rel_scale": self.train.sharpness.rel_scale,
                },
            },
            "diagnostics": {
                "n_probes": self.diag_n_probes,
                "ridge_lambda": self.diag_ridge_lambda,
                "suite_size": self.diag_suite_size,
                "gap_pairs": self.diag_gap_pairs,
                "probe_train_fraction": self.diag_probe_train_fraction,
            },
        }


def _task_dict(spec: TaskSpec) -> dict:
    return {
        "kind": spec.kind,
        "d": spec.d,
        "n_demos": spec.n_demos,
        "cov_spectrum": list(spec.cov_spectrum),
        "noise_std": spec.noise_std,
        "n_classes": spec.n_classes,
    }


def resolve_config(data: dict, seed_override=None, threads_override=None) -> RunConfig:
    """Validate a raw config dict, filling defaults; rejects unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError("top-level config must be a JSON object")
    _check_keys(data, _TOP_KEYS, "")
    seed = _integer(data, "seed", 0, "", minimum=0)
    if seed_override is not None:
        seed = seed_override
    threads = _integer(data, "threads", 1, "", minimum=1)
    if threads_override is not None:
        if threads_override < 1:
            raise ConfigError("must be >= 1", path="threads")
        threads = threads_override

    train_task = _parse_task(data.get("train_task", {}) or {}, "train_task")
    if "eval_task" in data and data["eval_task"] is not None:
        eval_task = _parse_task(data["eval_task"], "eval_task", default_d=train_task.d, default_n=train_task.n_demos)
    else:
        eval_task = train_task
    if eval_task.d != train_task.d:
        raise ConfigError("eval task dimension must match train task", path="eval_task.d")

    model_data = data.get("model", {}) or {}
    _check_keys(model_data, _MODEL_KEYS, "model")
    d = _integer(model_data, "d", train_task.d, "model", minimum=1)
    if d != train_task.d:
        raise ConfigError("model dimension must match train task", path="model.d")
    n_demos = _integer(model_data, "n_demos", train_task.n_demos, "model", minimum=1)
    base_lr = _number(model_data, "base_lr", None, "model", minimum=0.0, allow_none=True)
    if base_lr is None:
        # stable default: the demo Gram's largest eigenvalue is bounded by its
        # trace, whose expectation is n_demos * sum(cov_spectrum)
        base_lr = 0.5 / (train_task.n_demos * sum(train_task.cov_spectrum))
    n_classes = _integer(model_data, "n_classes", train_task.n_classes, "model", minimum=2, allow_none=True)
    if n_classes != train_task.n_classes:
        raise ConfigError("model n_classes must match train task", path="model.n_classes")
    try:
        model_cfg = ModelConfig(
            d=d,
            n_demos=n_demos,
            n_layers=_integer(model_data, "n_layers", 4, "model", minimum=1),
            base_lr=base_lr,
            precond_mode=_choice(model_data, "precond_mode", "layernorm_gain", {"identity", "layernorm_gain"}, "model"),
            mean_subtract=_boolean(model_data, "mean_subtract", False, "model"),
            n_classes=n_classes,
        )
    except PrecondLabError as exc:
        raise ConfigError(str(exc), path="model")

    train_data = data.get("train", {}) or {}
    _check_keys(train_data, _TRAIN_KEYS, "train")
    sharp_data = train_data.get("sharpness", {}) or {}
    _check_keys(sharp_data, _SHARPNESS_KEYS, "train.sharpness")
    try:
        sharpness = SharpnessConfig(
            epsilon=_number(sharp_data, "epsilon", 1e-3, "train.sharpness", minimum=0.0),
            n_probes=_integer(sharp_data, "n_probes", 8, "train.sharpness", minimum=1),
            rel_scale=_boolean(sharp_data, "rel_scale", True, "train.sharpness"),
        )
        train_cfg = TrainConfig(
            lambda1=_number(train_data, "lambda1", 1e-3, "train", minimum=0.0),
            lambda2=_number(train_data, "lambda2", 1e-3, "train", minimum=0.0),
            lr=_number(train_data, "lr", 1e-3, "train", minimum=0.0),
            epochs=_integer(train_data, "epochs", 100, "train", minimum=1),
            batch_size=_integer(train_data, "batch_size", 8, "train", minimum=1),
            seed=seed,
            optimizer=_choice(train_data, "optimizer", "adamw", {"sgd", "adamw"}, "train"),
            weight_decay=_number(train_data, "weight_decay", 1e-4, "train", minimum=0.0),
            sharpness=sharpness,
            grad_mode=_choice(train_data, "grad_mode", "analytic", {"analytic", "finite_difference"}, "train"),
            suite_size=_integer(train_data, "suite_size", 32, "train", minimum=1),
            eval_suite_size=_integer(train_data, "eval_suite_size", 32, "train", minimum=1),
        )
    except PrecondLabError as exc:
        raise ConfigError(str(exc), path="train")

    diag_data = data.get("diagnostics", {}) or {}
    _check_keys(diag_data, _DIAG_KEYS, "diagnostics")
    return RunConfig(
        seed=seed,
        threads=threads,
        model=model_cfg,
        train_task=train_task,
        eval_task=eval_task,
        train=train_cfg,
        diag_n_probes=_integer(diag_data, "n_probes", 256, "diagnostics", minimum=1),
        diag_ridge_lambda=_number(diag_data, "ridge_lambda", 1e-3, "diagnostics", minimum=0.0),
        diag_suite_size=_integer(diag_data, "suite_size", 32, "diagnostics", minimum=2),
        diag_gap_pairs=_integer(diag_data, "gap_pairs", 3, "diagnostics", minimum=1),
        diag_probe_train_fraction=_number(diag_data, "probe_train_fraction", 0.5, "diagnostics", minimum=0.0),
    )


def parse_config(path, seed_override=None, threads_override=None) -> RunConfig:
    """Load, validate, and default-fill a JSON config file."""
    file_path = Path(path)
    if not file_path.exists():
        raise ConfigError(f"config file not found: {file_path}")
    try:
        data = json.loads(file_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}")
    return resolve_config(data, seed_override=seed_override, threads_override=threads_override)


# --------------------------------------------------------------------------
# run directory helpers
# --------------------------------------------------------------------------


def _prepare_run_dir(out_dir, cfg: RunConfig, command: str) -> Path:
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "resolved_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    manifest = {
        "artifact": "precondlab",
        "version": __version__,
        "command": command,
        "seed": cfg.seed,
        "threads": cfg.threads,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return run_dir


def _finish_manifest(run_dir: Path, wall_seconds: float, extra: dict = None) -> None:
    path = run_dir / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["wall_seconds"] = wall_seconds
    manifest.update(extra or {})
    path.write_text(json.dumps(manifest, indent=2) + "\n")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def _cmd_train(args) -> int:
    cfg = parse_config(args.config, seed_override=args.seed, threads_override=args.threads)
    run_dir = _prepare_run_dir(args.out, cfg, "train")
    started = time.perf_counter()

    def on_epoch(rec):
        print(
            f"epoch {rec.epoch}: task={rec.train.task_loss:.6g} step_ratio={rec.train.step_ratio:.6g} "
            f"sharpness={rec.train.sharpness:.6g} total={rec.train.total:.6g} eval={rec.eval_task_loss:.6g}"
        )

    try:
        report = train(cfg.model, cfg.train_task, cfg.train, cfg.eval_task, on_epoch=on_epoch)
    except DivergedError as exc:
        report = exc.partial_report
        if report is not None:
            (run_dir / "metrics.csv").write_text(metrics_csv(report))
            (run_dir / "checkpoint.json").write_text(checkpoint_to_json(cfg.model, report.final_precond) + "\n")
        print(f"diverged: {exc}", file=sys.stderr)
        return 2
    (run_dir / "metrics.csv").write_text(metrics_csv(report))
    (run_dir / "checkpoint.json").write_text(checkpoint_to_json(cfg.model, report.final_precond) + "\n")
    _finish_manifest(run_dir, time.perf_counter() - started, {"final_eval_task_loss": report.final_eval_task_loss})
    return 0


def _load_checkpoint_arg(args, cfg: RunConfig):
    if args.checkpoint:
        model_cfg, precond = checkpoint_from_json(Path(args.checkpoint).read_text())
        return build_model(model_cfg), precond
    model = build_model(cfg.model)
    return model, PreconditionerSet.identity(cfg.model)


def _cmd_eval(args) -> int:
    cfg = parse_config(args.config, seed_override=args.seed, threads_override=args.threads)
    run_dir = _prepare_run_dir(args.out, cfg, "eval")
    started = time.perf_counter()
    model, precond = _load_checkpoint_arg(args, cfg)
    suite = sample_suite(cfg.eval_task, cfg.train.eval_suite_size, RngStream(cfg.seed).substream(2))
    breakdown = total_objective(
        model,
        precond,
        suite,
        cfg.train.lambda1,
        cfg.train.lambda2,
        SharpnessConfig(n_probes=cfg.diag_n_probes),
        RngStream(cfg.seed).substream(6),
    )
    rows = [
        "task_loss,step_ratio,sharpness,total",
        f"{breakdown.task_loss!r},{breakdown.step_ratio!r},{breakdown.sharpness!r},{breakdown.total!r}",
    ]
    (run_dir / "eval_metrics.csv").write_text("\n".join(rows) + "\n")
    print(
        f"eval: task={breakdown.task_loss:.6g} step_ratio={breakdown.step_ratio:.6g} "
        f"sharpness={breakdown.sharpness:.6g} total={breakdown.total:.6g}"
    )
    _finish_manifest(run_dir, time.perf_counter() - started)
    return 0


def _cmd_diagnose(args) -> int:
    cfg = parse_config(args.config, seed_override=args.seed, threads_override=args.threads)
    run_dir = _prepare_run_dir(args.out, cfg, "diagnose")
    started = time.perf_counter()
    model, precond = _load_checkpoint_arg(args, cfg)
    suite_rng = RngStream(cfg.seed).substream(2)
    diag_rng = RngStream(cfg.seed).substream(7)

    if args.report in ("sharpness", "stepratio", "probe"):
        suite = sample_suite(cfg.eval_task, cfg.diag_suite_size, suite_rng)
        labels = None
        if args.report == "probe":
            if cfg.eval_task.kind == KIND_CLASSIFICATION:
                labels = [int(t.y_star) for t in suite]
            else:
                labels = [int(t.y_star > 0) for t in suite]  # decodable binary target
        profile = diagnostics.layer_profiles(
            model,
            precond,
            suite,
            SharpnessConfig(n_probes=cfg.diag_n_probes),
            diag_rng,
            probe_labels=labels,
            probe_train_fraction=cfg.diag_probe_train_fraction,
            ridge_lambda=cfg.diag_ridge_lambda,
        )
        (run_dir / "profile.csv").write_text(diagnostics.profile_csv(profile))
        interior = list(range(1, model.cfg.n_layers))
        if args.report == "sharpness":
            series = {"sharpness": [(t, profile.mean_sharpness[t]) for t in interior]}
            (run_dir / "sharpness.svg").write_text(diagnostics.svg_line_chart(series, "mean sharpness per layer"))
            print(f"diagnose sharpness: layers={interior} max={max(profile.mean_sharpness[t] for t in interior):.6g}")
        elif args.report == "stepratio":
            series = {"step_ratio": [(t, profile.mean_step_ratio[t]) for t in interior]}
            (run_dir / "step_ratio.svg").write_text(diagnostics.svg_line_chart(series, "mean step ratio per layer"))
            print(f"diagnose stepratio: layers={interior} max={max(profile.mean_step_ratio[t] for t in interior):.6g}")
        else:
            pts = [(t, profile.probe_acc[t]) for t in range(model.cfg.n_layers + 1)]
            (run_dir / "probe_acc.svg").write_text(diagnostics.svg_line_chart({"probe_acc": pts}, "probe accuracy per layer"))
            print(f"diagnose probe: final accuracy={profile.probe_acc[-1]:.6g}")
        _finish_manifest(run_dir, time.perf_counter() - started, {"ridge_lambda": cfg.diag_ridge_lambda})
        return 0

    # gap: paired runs lambda2 = 0 vs configured lambda2
    runs = []
    for pair in range(cfg.diag_gap_pairs):
        for lam2 in (0.0, cfg.train.lambda2):
            pair_cfg = TrainConfig(
                lambda1=cfg.train.lambda1,
                lambda2=lam2,
                lr=cfg.train.lr,
                epochs=cfg.train.epochs,
                batch_size=cfg.train.batch_size,
                seed=cfg.seed + pair,
                optimizer=cfg.train.optimizer,
                weight_decay=cfg.train.weight_decay,
                sharpness=cfg.train.sharpness,
                grad_mode=cfg.train.grad_mode,
                suite_size=cfg.train.suite_size,
                eval_suite_size=cfg.train.eval_suite_size,
            )
            report = train(cfg.model, cfg.train_task, pair_cfg, cfg.eval_task)
            train_suite = sample_suite(cfg.train_task, cfg.train.suite_size, RngStream(pair_cfg.seed).substream(1))
            bound = diagnostics.model_curvature_report(
                build_model(cfg.model), report.final_precond, train_suite, measured_gap=report.measured_gap
            )
            runs.append(diagnostics.GapRun(run_id=f"seed{pair_cfg.seed}_lam{lam2:g}", lambda2=lam2, report=bound))
            print(f"gap run seed={pair_cfg.seed} lambda2={lam2:g} curvature={bound.curvature_sum:.6g} gap={bound.measured_gap:.6g}")
    (run_dir / "gap.csv").write_text(diagnostics.gap_report(runs))
    _finish_manifest(run_dir, time.perf_counter() - started)
    return 0


def _oracle_rows(seed: int) -> list:
    """The oracle comparison battery; every row carries its own tolerance."""
    rng = RngStream(seed, 0x0AC1)
    rows = []

    def add(problem_id, quantity, oracle_value, estimate, tol):
        abs_err = abs(oracle_value - estimate)
        rel_err = abs_err / max(abs(oracle_value), 1e-12)
        rows.append((problem_id, quantity, oracle_value, estimate, abs_err, rel_err, abs_err <= tol))

    # exact trace vs dense triple-product trace
    for i in range(5):
        d = 4 + 2 * i
        sub = rng.substream(1, i)
        p = 0.5 + sub.uniform(0.0, 1.5, (d,))
        basis = sub.normal((d, d))
        h = 0.5 * (basis + basis.T)
        dense = float(np.trace(np.diag(p) @ h @ np.diag(p).T))
        add(f"trace_d{d}", "exact_trace_vs_dense", dense, exact_trace(p, h), 1e-10 * max(1.0, abs(dense)))

    # stochastic trace vs exact on positive-definite quadratics
    for i in range(3):
        d = 6 + 2 * i
        sub = rng.substream(2, i)
        p = 0.5 + sub.uniform(0.0, 1.0, (d,))
        basis = sub.normal((d, d))
        q, _ = np.linalg.qr(basis)
        eigs = 1.0 + sub.uniform(0.0, 3.0, (d,))
        h = q @ np.diag(eigs) @ q.T
        problem = QuadraticProblem.from_hessian(h)
        truth = exact_trace(p, h)
        layer = quadratic_layer_fn(problem, p)
        z = ad.constant(sub.normal((d, 1)))
        est = float(
            hutchinson_trace_vars(layer, ad.constant(p), z, SharpnessConfig(n_probes=2048, rel_scale=False), sub).value
        )
        ph = np.diag(p) @ h @ np.diag(p)
        se = np.sqrt(2.0 * np.sum(ph * ph) / 2048)
        add(f"hutchinson_d{d}", "stochastic_trace_vs_exact", truth, est, 4.0 * se)

    # forward pass vs explicit GD iterates
    for i in range(5):
        sub = rng.substream(3, i)
        d = int(sub.substream(0).integers(2, 7))
        n = int(sub.substream(1).integers(d, 13))
        spec = TaskSpec(KIND_REGRESSION, d=d, n_demos=n, cov_spectrum=tuple(1.0 + j for j in range(d)), noise_std=0.0)
        task = sample_suite(spec, 1, sub.substream(2))[0]
        eta = 0.5 / float(np.linalg.eigvalsh(task.xs.T @ task.xs).max())
        n_layers = 4
        cfg = ModelConfig(d=d, n_demos=n, n_layers=n_layers, base_lr=eta, precond_mode="identity")
        traj = forward_task(task, build_model(cfg), PreconditionerSet.identity(cfg))
        _, preds = gd_iterates_ls(task, eta, n_layers)
        add(f"gd_equiv_{i}", "forward_vs_gd_iterates", preds[-1], model_predict(traj), 1e-10 * max(1.0, abs(preds[-1])))

    # contraction factors: eigendirection start has ratio == operator radius
    h = np.diag(np.array([1.0, 4.0]))
    problem = QuadraticProblem.from_hessian(h)
    rho_hat, rho_op = contraction_factors(problem, [np.ones(2)], 0.2, problem.z_star + np.array([1.0, 0.0]), 1)
    add("contraction_eig", "realized_ratio_vs_radius", rho_op[0], rho_hat[0], 1e-12)

    # power iteration vs dense symmetric eigensolver
    for i in range(3):
        sub = rng.substream(4, i)
        d = 5 + i
        basis = sub.normal((d, d))
        h = 0.5 * (basis + basis.T)
        radius, _ = spectral_radius_sym_similar(h, iters=5000, tol=1e-13, seed=seed + i)
        dense = float(np.max(np.abs(np.linalg.eigvalsh(h))))
        add(f"specrad_d{d}", "power_iteration_vs_eigh", dense, radius, 1e-8 * max(1.0, dense))

    # central differences vs closed-form derivative
    fd = central_fd_grad(lambda p: float(np.sin(p[0])), np.array([0.7]), 1e-5)
    add("fd_sin", "central_fd_vs_cos", float(np.cos(0.7)), float(fd[0]), 1e-9)
    return rows


def _cmd_oracle_check(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = _oracle_rows(args.seed if args.seed is not None else 0)
    lines = ["problem_id,quantity,oracle_value,estimate,abs_error,rel_error"]
    ok = True
    for problem_id, quantity, oracle_value, estimate, abs_err, rel_err, passed in rows:
        lines.append(f"{problem_id},{quantity},{oracle_value!r},{estimate!r},{abs_err!r},{rel_err!r}")
        ok = ok and passed
        print(f"oracle-check {problem_id}: {'ok' if passed else 'FAIL'} (abs={abs_err:.3g})")
    (out_dir / "oracle_report.csv").write_text("\n".join(lines) + "\n")
    return 0 if ok else 2


def _cmd_gradcheck(args) -> int:
    cfg = TrainConfig(lambda1=0.01, lambda2=0.01, sharpness=SharpnessConfig(n_probes=4))
    report = gradcheck(cfg, trials=args.trials, seed=args.seed if args.seed is not None else 0)
    print(
        f"gradcheck: trials={report.trials} worst task={report.worst_task:.3g} "
        f"step_ratio={report.worst_step_ratio:.3g} sharpness={report.worst_sharpness:.3g}"
    )
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "gradcheck.json").write_text(
            json.dumps(
                {
                    "trials": report.trials,
                    "worst_task": report.worst_task,
                    "worst_step_ratio": report.worst_step_ratio,
                    "worst_sharpness": report.worst_sharpness,
                    "worst_config": report.worst_config,
                },
                indent=2,
            )
            + "\n"
        )
    if report.worst_overall > 1e-4:
        print(f"gradcheck FAILED: worst={report.worst_overall:.3g} config={json.dumps(report.worst_config)}", file=sys.stderr)
        return 2
    return 0


def _cmd_plot(args) -> int:
    csv_path = Path(args.csv)
    if not csv_path.exists():
        raise ConfigError(f"csv file not found: {csv_path}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    import csv as csv_mod

    with open(csv_path, newline="") as fh:
        reader = list(csv_mod.reader(fh))
    header, body = reader[0], [row for row in reader[1:] if row and not row[0].startswith("spearman")]
    made = []
    x_col = 0
    for col in range(1, len(header)):
        pts = []
        for row in body:
            if col < len(row) and row[col] not in ("", None):
                try:
                    pts.append((float(row[x_col]), float(row[col])))
                except ValueError:
                    pts = []
                    break
        if len(pts) >= 2:
            name = header[col]
            path = out_dir / f"{name}.svg"
            path.write_text(diagnostics.svg_line_chart({name: pts}, f"{name} vs {header[x_col]}", x_label=header[x_col], y_label=name))
            made.append(path.name)
    print(f"plot: wrote {', '.join(made) if made else 'nothing (no numeric series)'}")
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="precondlab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"precondlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, out=True):
        if config:
            p.add_argument("--config", required=True, help="JSON config file")
        if out:
            p.add_argument("--out", required=True, help="run directory for all outputs")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument(
            "--threads",
            type=int,
            default=None,
            help="cap worker count (execution is sequential and bit-reproducible for any value)",
        )

    p_train = sub.add_parser("train", help="adapt preconditioner gains on a task suite")
    common(p_train)
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the eval suite")
    common(p_eval)
    p_eval.add_argument("--checkpoint", default=None, help="checkpoint JSON (defaults to unit gains)")
    p_eval.set_defaults(func=_cmd_eval)

    p_diag = sub.add_parser("diagnose", help="layer profiles, probes, and the gap report")
    common(p_diag)
    p_diag.add_argument("--checkpoint", default=None, help="checkpoint JSON (defaults to unit gains)")
    p_diag.add_argument("--report", required=True, choices=["sharpness", "stepratio", "probe", "gap"])
    p_diag.set_defaults(func=_cmd_diagnose)

    p_oracle = sub.add_parser("oracle-check", help="compare estimators against exact oracles")
    common(p_oracle, config=False)
    p_oracle.set_defaults(func=_cmd_oracle_check)

    p_grad = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p_grad.add_argument("--trials", type=int, default=20)
    p_grad.add_argument("--seed", type=int, default=None)
    p_grad.add_argument("--threads", type=int, default=None)
    p_grad.add_argument("--out", default=None)
    p_grad.set_defaults(func=_cmd_gradcheck)

    p_plot = sub.add_parser("plot", help="render a metrics/profile/gap CSV as SVG charts")
    p_plot.add_argument("--csv", required=True)
    p_plot.add_argument("--out", required=True)
    p_plot.add_argument("--seed", type=int, default=None)
    p_plot.add_argument("--threads", type=int, default=None)
    p_plot.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except SystemExit:
        raise
    except Exception as exc:  # runtime failures map to exit code 2
        import traceback

        traceback.print_exc()
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
