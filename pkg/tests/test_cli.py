"""End-to-end CLI runs in temp directories: artifacts, determinism, errors."""

import json

import numpy as np
import pytest

from caproj.checkpoint import load_checkpoint
from caproj.cli import main
from caproj.config import TrainConfig
from caproj.errors import ConfigError, PlanError
from caproj.train import build_model

CONFIG_TEXT = (
    "dataset.train_size = 48\n"
    "dataset.eval_size = 16\n"
    "dataset.batch_size = 16\n"
    "model.family = small_vgg\n"
    "model.width_multiplier = 0.25\n"
    "train.epochs = 3\n"
    "train.lr = 0.05\n"
    "sweep.layers = conv2\n"
    "sweep.ratios = 0.5, 1.0\n"
    "ablate.seeds = 0\n"
)

PLAN_TEXT = (
    "mode = cascaded_greedy\n"
    "gamma = 0.0\n"
    "projection_steps = 6\n"
    "projection_lr = 0.05\n"
    "relaxation_epochs = 0\n"
    "layer.conv2.keep_ratio = 0.5\n"
    "layer.conv3.keep_ratio = 0.5\n"
    "layer.conv4.keep_ratio = 0.5\n"
)

IDENTITY_PLAN_TEXT = (
    "mode = cascaded_greedy\n"
    "projection_steps = 2\n"
    "relaxation_epochs = 0\n"
    "layer.conv2.keep_ratio = 1.0\n"
)


@pytest.fixture()
def workspace(tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text(CONFIG_TEXT, encoding="utf-8")
    plan = tmp_path / "plan.txt"
    plan.write_text(PLAN_TEXT, encoding="utf-8")
    return tmp_path, str(cfg), str(plan)


def run_train(tmp_path, cfg_path, subdir="run"):
    out = tmp_path / subdir
    rc = main(["train", "--config", cfg_path, "--out-dir", str(out)])
    assert rc == 0
    return out


class TestTrainVerb:
    def test_artifacts(self, workspace, capsys):
        tmp_path, cfg_path, _ = workspace
        out = run_train(tmp_path, cfg_path)
        assert (out / "baseline.ckpt").exists()
        metrics = (out / "metrics.csv").read_text(encoding="utf-8")
        assert metrics.splitlines()[0] == (
            "epoch,train_loss,train_accuracy,eval_accuracy,lr"
        )
        assert len(metrics.splitlines()) == 4
        assert "eval accuracy" in capsys.readouterr().out

    def test_zero_epochs_checkpoint_is_init(self, tmp_path):
        cfg = tmp_path / "z.cfg"
        cfg.write_text(CONFIG_TEXT.replace("train.epochs = 3",
                                           "train.epochs = 0"),
                       encoding="utf-8")
        out = tmp_path / "out"
        assert main(["train", "--config", str(cfg), "--out-dir", str(out)]) == 0
        bundle = load_checkpoint(str(out / "baseline.ckpt"))
        reference = build_model(TrainConfig.from_file(str(cfg)))
        assert bundle.net.param_hash() == reference.param_hash()

    def test_byte_identical_across_runs(self, workspace):
        tmp_path, cfg_path, _ = workspace
        a = run_train(tmp_path, cfg_path, "a")
        b = run_train(tmp_path, cfg_path, "b")
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        assert (a / "baseline.ckpt").read_bytes() == (b / "baseline.ckpt").read_bytes()

    def test_malformed_config_names_line(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("train.epochs = 1\nwhat is this\n", encoding="utf-8")
        with pytest.raises(ConfigError, match=r"bad\.cfg:2"):
            main(["train", "--config", str(bad), "--out-dir", str(tmp_path / "o")])


class TestCompressVerb:
    def test_report_and_checkpoint(self, workspace):
        tmp_path, cfg_path, plan_path = workspace
        out = run_train(tmp_path, cfg_path)
        rc = main([
            "compress", "--config", cfg_path, "--plan", plan_path,
            "--checkpoint", str(out / "baseline.ckpt"),
            "--out-dir", str(out),
        ])
        assert rc == 0
        report = json.loads((out / "report.json").read_text(encoding="utf-8"))
        assert list(report.keys()) == [
            "schema_version", "mode", "gamma", "seed", "projection_steps",
            "relaxation_epochs", "finetune_epochs", "flops_pct", "param_pct",
            "peak_mem_pct", "acc_no_ft", "acc_ft", "base_acc", "costs",
        ]
        assert report["flops_pct"] < 100.0
        bundle = load_checkpoint(str(out / "compressed.ckpt"))
        assert bundle.plan_text == PLAN_TEXT
        assert bundle.net.conv_by_name("conv2").w.data.shape[0] == 2

    def test_identity_plan(self, workspace):
        tmp_path, cfg_path, _ = workspace
        ident = tmp_path / "ident.txt"
        ident.write_text(IDENTITY_PLAN_TEXT, encoding="utf-8")
        out = run_train(tmp_path, cfg_path)
        rc = main([
            "compress", "--config", cfg_path, "--plan", str(ident),
            "--checkpoint", str(out / "baseline.ckpt"),
            "--out-dir", str(out),
        ])
        assert rc == 0
        report = json.loads((out / "report.json").read_text(encoding="utf-8"))
        assert report["flops_pct"] == 100.0
        assert report["acc_no_ft"] == report["base_acc"]
        baseline = load_checkpoint(str(out / "baseline.ckpt")).net
        compressed = load_checkpoint(str(out / "compressed.ckpt")).net
        assert compressed.param_hash() == baseline.param_hash()

    def test_plan_against_wrong_model(self, workspace, tmp_path):
        _, cfg_path, _ = workspace
        wrong = tmp_path / "wrong.txt"
        wrong.write_text("layer.conv9.rank = 2\n", encoding="utf-8")
        out = run_train(tmp_path, cfg_path)
        with pytest.raises(PlanError, match="conv9"):
            main([
                "compress", "--config", cfg_path, "--plan", str(wrong),
                "--checkpoint", str(out / "baseline.ckpt"),
                "--out-dir", str(out),
            ])


class TestEvalVerb:
    def test_matches_report(self, workspace):
        tmp_path, cfg_path, plan_path = workspace
        out = run_train(tmp_path, cfg_path)
        main([
            "compress", "--config", cfg_path, "--plan", plan_path,
            "--checkpoint", str(out / "baseline.ckpt"), "--out-dir", str(out),
        ])
        rc = main([
            "eval", "--config", cfg_path,
            "--checkpoint", str(out / "compressed.ckpt"),
            "--out-dir", str(out),
        ])
        assert rc == 0
        evald = json.loads((out / "eval.json").read_text(encoding="utf-8"))
        report = json.loads((out / "report.json").read_text(encoding="utf-8"))
        assert evald["accuracy"] == report["acc_no_ft"]


class TestSweepVerb:
    def test_csv_and_trivial_row(self, workspace):
        tmp_path, cfg_path, plan_path = workspace
        out = run_train(tmp_path, cfg_path)
        rc = main([
            "sweep", "--config", cfg_path, "--plan", plan_path,
            "--checkpoint", str(out / "baseline.ckpt"), "--out-dir", str(out),
        ])
        assert rc == 0
        lines = (out / "sweep.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "layer,keep_ratio,recon_error,accuracy"
        assert len(lines) == 3  # conv2 x {0.5, 1.0}
        full = lines[2].split(",")
        assert full[0] == "conv2" and full[1] == "1.0"
        assert float(full[2]) < 1e-10


class TestGradcheckVerb:
    def test_pass_and_artifact(self, tmp_path, capsys):
        out = tmp_path / "g"
        rc = main(["gradcheck", "--out-dir", str(out), "--seed", "0"])
        assert rc == 0
        table = (out / "gradcheck.txt").read_text(encoding="utf-8")
        assert "all suites passed" in table
        assert "svd-backward" in table
        assert table == capsys.readouterr().out

    def test_deterministic_artifact(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["gradcheck", "--out-dir", str(a), "--seed", "3"])
        main(["gradcheck", "--out-dir", str(b), "--seed", "3"])
        assert (a / "gradcheck.txt").read_bytes() == (b / "gradcheck.txt").read_bytes()


class TestAblateVerb:
    def test_artifacts(self, workspace, tmp_path):
        _, cfg_path, _ = workspace
        plan = tmp_path / "ablate_plan.txt"
        plan.write_text(PLAN_TEXT.replace("relaxation_epochs = 0",
                                          "relaxation_epochs = 1"),
                        encoding="utf-8")
        out = tmp_path / "ab"
        rc = main([
            "ablate", "--config", cfg_path, "--plan", str(plan),
            "--out-dir", str(out),
        ])
        assert rc == 0
        lines = (out / "ablation.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "arm,mean_accuracy,std_accuracy"
        assert [l.split(",")[0] for l in lines[1:]] == [
            "compressed_from_scratch", "projection_only",
            "random_projection_relax", "projection_relax",
        ]
        parsed = json.loads((out / "ablation.json").read_text(encoding="utf-8"))
        assert parsed["seeds"] == [0]
