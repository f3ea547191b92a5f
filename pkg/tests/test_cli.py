import json
from pathlib import Path

import pytest

from precondlab.cli import main, parse_config, resolve_config
from precondlab.errors import ConfigError

FAST_TRAIN = {
    "seed": 1,
    "train_task": {"d": 2, "n_demos": 4, "cov_spectrum": [2.0, 0.5], "noise_std": 0.1},
    "train": {
        "epochs": 2,
        "batch_size": 4,
        "suite_size": 4,
        "eval_suite_size": 4,
        "sharpness": {"n_probes": 2},
    },
    "model": {"n_layers": 2},
    "diagnostics": {"n_probes": 4, "suite_size": 4, "gap_pairs": 1},
}


def _write_config(tmp_path, data=None, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(FAST_TRAIN if data is None else data))
    return str(path)


class TestParseConfig:
    def test_minimal_config_fills_defaults(self, tmp_path):
        cfg = parse_config(_write_config(tmp_path, {"seed": 1}))
        assert cfg.seed == 1
        assert cfg.model.n_layers == 4
        assert cfg.train.optimizer == "adamw"
        assert cfg.train.lambda1 == pytest.approx(1e-3)
        assert cfg.eval_task == cfg.train_task
        assert cfg.model.base_lr > 0  # auto-resolved

    def test_negative_lambda_names_field(self, tmp_path):
        path = _write_config(tmp_path, {"seed": 1, "train": {"lambda1": -0.5}})
        with pytest.raises(ConfigError) as err:
            parse_config(path)
        assert "train.lambda1" in str(err.value)

    def test_unknown_key_typo_guard(self, tmp_path):
        path = _write_config(tmp_path, {"seed": 1, "train": {"lamda1": 0.5}})
        with pytest.raises(ConfigError) as err:
            parse_config(path)
        assert "lamda1" in str(err.value)

    def test_missing_file(self):
        with pytest.raises(ConfigError) as err:
            parse_config("/nonexistent/cfg.json")
        assert "not found" in str(err.value)

    def test_bad_json_reports_location(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"seed": 1,,}')
        with pytest.raises(ConfigError) as err:
            parse_config(str(path))
        assert "line" in str(err.value)

    def test_lambda_pool_values_accepted(self):
        for lam in (0.1, 0.001, 0.0001, 0.00001, 0.000001):
            cfg = resolve_config({"seed": 0, "train": {"lambda1": lam, "lambda2": lam}})
            assert cfg.train.lambda1 == lam

    def test_seed_override(self, tmp_path):
        cfg = parse_config(_write_config(tmp_path, {"seed": 3}), seed_override=9)
        assert cfg.seed == 9


class TestTrainCommand:
    def test_writes_run_directory(self, tmp_path, capsys):
        cfg = _write_config(tmp_path)
        out = tmp_path / "run"
        assert main(["train", "--config", cfg, "--out", str(out)]) == 0
        for name in ("resolved_config.json", "metrics.csv", "checkpoint.json", "manifest.json"):
            assert (out / name).exists(), name
        stdout = capsys.readouterr().out
        assert stdout.count("epoch ") == 2  # one line per epoch
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 1
        assert manifest["version"]

    def test_metrics_csv_schema(self, tmp_path):
        cfg = _write_config(tmp_path)
        out = tmp_path / "run"
        main(["train", "--config", cfg, "--out", str(out)])
        lines = (out / "metrics.csv").read_text().strip().split("\n")
        assert lines[0] == "epoch,task_loss,step_ratio,sharpness,total,eval_task_loss"
        assert len(lines) == 3

    def test_identical_reruns_are_byte_identical(self, tmp_path):
        cfg = _write_config(tmp_path)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--config", cfg, "--out", str(out_a)]) == 0
        assert main(["train", "--config", cfg, "--out", str(out_b)]) == 0
        assert (out_a / "metrics.csv").read_bytes() == (out_b / "metrics.csv").read_bytes()
        assert (out_a / "checkpoint.json").read_bytes() == (out_b / "checkpoint.json").read_bytes()

    def test_invalid_config_exits_1(self, tmp_path, capsys):
        cfg = _write_config(tmp_path, {"seed": 1, "train": {"lambda2": -1.0}})
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "x")]) == 1
        assert "train.lambda2" in capsys.readouterr().err


class TestOtherCommands:
    def test_eval_roundtrip(self, tmp_path, capsys):
        cfg = _write_config(tmp_path)
        run = tmp_path / "run"
        main(["train", "--config", cfg, "--out", str(run)])
        out = tmp_path / "eval"
        code = main(["eval", "--config", cfg, "--out", str(out), "--checkpoint", str(run / "checkpoint.json")])
        assert code == 0
        assert (out / "eval_metrics.csv").exists()
        assert "eval:" in capsys.readouterr().out

    @pytest.mark.parametrize("report,artifact", [("sharpness", "sharpness.svg"), ("stepratio", "step_ratio.svg")])
    def test_diagnose_profiles(self, tmp_path, report, artifact):
        cfg = _write_config(tmp_path)
        out = tmp_path / f"diag_{report}"
        assert main(["diagnose", "--config", cfg, "--out", str(out), "--report", report]) == 0
        assert (out / "profile.csv").exists()
        assert (out / artifact).exists()

    def test_diagnose_probe_on_regression_uses_sign_labels(self, tmp_path):
        data = dict(FAST_TRAIN)
        data["diagnostics"] = {"n_probes": 2, "suite_size": 12, "gap_pairs": 1}
        cfg = _write_config(tmp_path, data)
        out = tmp_path / "diag_probe"
        assert main(["diagnose", "--config", cfg, "--out", str(out), "--report", "probe"]) == 0
        assert (out / "probe_acc.svg").exists()

    def test_diagnose_gap(self, tmp_path):
        cfg = _write_config(tmp_path)
        out = tmp_path / "gap"
        assert main(["diagnose", "--config", cfg, "--out", str(out), "--report", "gap"]) == 0
        text = (out / "gap.csv").read_text()
        assert text.startswith("run_id,lambda2,curvature_sum,bound_value,measured_gap")

    def test_oracle_check(self, tmp_path, capsys):
        out = tmp_path / "oracle"
        assert main(["oracle-check", "--seed", "7", "--out", str(out)]) == 0
        lines = (out / "oracle_report.csv").read_text().strip().split("\n")
        assert lines[0] == "problem_id,quantity,oracle_value,estimate,abs_error,rel_error"
        assert len(lines) > 10
        assert "ok" in capsys.readouterr().out

    def test_gradcheck_passes_and_writes_report(self, tmp_path, capsys):
        out = tmp_path / "gc"
        assert main(["gradcheck", "--trials", "3", "--seed", "1", "--out", str(out)]) == 0
        report = json.loads((out / "gradcheck.json").read_text())
        assert report["trials"] == 3
        assert "gradcheck:" in capsys.readouterr().out

    def test_plot_from_metrics(self, tmp_path):
        cfg = _write_config(tmp_path)
        run = tmp_path / "run"
        main(["train", "--config", cfg, "--out", str(run)])
        out = tmp_path / "plots"
        assert main(["plot", "--csv", str(run / "metrics.csv"), "--out", str(out)]) == 0
        assert (out / "task_loss.svg").exists()
        assert (out / "eval_task_loss.svg").exists()

    def test_unknown_flag_exits_1(self, capsys):
        assert main(["train", "--nope"]) == 1

    def test_runtime_failure_exits_2(self, tmp_path, capsys):
        cfg = _write_config(tmp_path)
        code = main(["eval", "--config", cfg, "--out", str(tmp_path / "e"), "--checkpoint", "/missing.json"])
        assert code == 2


class TestCheckpointAndSeeds:
    def test_diagnose_accepts_trained_checkpoint(self, tmp_path):
        cfg = _write_config(tmp_path)
        run = tmp_path / "run"
        main(["train", "--config", cfg, "--out", str(run)])
        out = tmp_path / "diag_ckpt"
        code = main(
            ["diagnose", "--config", cfg, "--out", str(out), "--report", "stepratio",
             "--checkpoint", str(run / "checkpoint.json")]
        )
        assert code == 0
        assert (out / "profile.csv").exists()

    def test_seed_override_changes_results(self, tmp_path):
        cfg = _write_config(tmp_path)
        out_a, out_b = tmp_path / "s1", tmp_path / "s2"
        main(["train", "--config", cfg, "--out", str(out_a), "--seed", "1"])
        main(["train", "--config", cfg, "--out", str(out_b), "--seed", "2"])
        assert (out_a / "metrics.csv").read_bytes() != (out_b / "metrics.csv").read_bytes()
        assert json.loads((out_b / "manifest.json").read_text())["seed"] == 2
