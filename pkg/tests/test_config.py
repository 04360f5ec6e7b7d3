"""Key-value parsing, the typed config schema, and plan file loading."""

import pytest

from caproj.config import TrainConfig, load_plan, parse_kv_file, parse_kv_text
from caproj.errors import ConfigError
from caproj.plan import CompressionPlan


class TestParseKv:
    def test_basic(self):
        kv, lines = parse_kv_text("a = 1\nb=two\n")
        assert kv == {"a": "1", "b": "two"}
        assert lines == {"a": 1, "b": 2}

    def test_comments_and_blanks(self):
        text = "# full comment\n\na = 1  # trailing\n   \nb = 2\n"
        kv, _ = parse_kv_text(text)
        assert kv == {"a": "1", "b": "2"}

    def test_first_equals_splits(self):
        kv, _ = parse_kv_text("key = a=b\n")
        assert kv["key"] == "a=b"

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match=r"cfg\.txt:2: expected"):
            parse_kv_text("a = 1\nnot a pair\n", path="cfg.txt")

    def test_empty_key(self):
        with pytest.raises(ConfigError, match=":1: empty key"):
            parse_kv_text("= 3\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match=":3: duplicate key 'a'"):
            parse_kv_text("a = 1\nb = 2\na = 3\n")

    def test_file_roundtrip(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("x = 9\n", encoding="utf-8")
        kv, lines = parse_kv_file(str(f))
        assert kv == {"x": "9"}

    def test_missing_file(self, tmp_path):
        with pytest.raises(IOError):
            parse_kv_file(str(tmp_path / "absent.txt"))


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.dataset_kind == "synthetic_blobs"
        assert cfg.num_classes == 4
        assert cfg.epochs == 10
        assert cfg.sweep_ratios == [0.25, 0.5, 0.75, 1.0]
        assert cfg.ablate_seeds == [0, 1, 2]

    def test_full_file(self, tmp_path):
        f = tmp_path / "train.cfg"
        f.write_text(
            "dataset.kind = synthetic_blobs\n"
            "dataset.seed = 7\n"
            "dataset.train_size = 64\n"
            "dataset.eval_size = 32\n"
            "dataset.batch_size = 16\n"
            "dataset.noise_std = 0.1\n"
            "model.family = small_resnet\n"
            "model.depth = 18-lite\n"
            "model.seed = 3\n"
            "train.epochs = 5\n"
            "train.lr = 0.02\n"
            "train.momentum = 0.8\n"
            "sweep.layers = conv2, conv3\n"
            "sweep.ratios = 0.5, 1.0\n"
            "ablate.seeds = 1, 2\n",
            encoding="utf-8",
        )
        cfg = TrainConfig.from_file(str(f))
        assert cfg.dataset_seed == 7
        assert cfg.train_size == 64
        assert cfg.model_family == "small_resnet"
        assert cfg.epochs == 5
        assert cfg.lr == 0.02
        assert cfg.sweep_layers == ["conv2", "conv3"]
        assert cfg.sweep_ratios == [0.5, 1.0]
        assert cfg.ablate_seeds == [1, 2]

    def test_unknown_key_has_line(self, tmp_path):
        f = tmp_path / "bad.cfg"
        f.write_text("train.epochs = 3\nmystery.key = 1\n", encoding="utf-8")
        with pytest.raises(ConfigError, match=r"bad\.cfg:2: unknown key"):
            TrainConfig.from_file(str(f))

    def test_bad_value_has_line(self, tmp_path):
        f = tmp_path / "bad.cfg"
        f.write_text("# comment\ntrain.epochs = soon\n", encoding="utf-8")
        with pytest.raises(ConfigError, match=r"bad\.cfg:2: train\.epochs"):
            TrainConfig.from_file(str(f))

    def test_bad_kind(self):
        with pytest.raises(ConfigError, match="dataset.kind"):
            TrainConfig.from_kv({"dataset.kind": "imagenet"})

    def test_bad_family(self):
        with pytest.raises(ConfigError, match="model.family"):
            TrainConfig.from_kv({"model.family": "transformer"})

    def test_ratio_out_of_range(self):
        with pytest.raises(ConfigError, match="sweep.ratios"):
            TrainConfig.from_kv({"sweep.ratios": "0.5, 1.5"})

    def test_nonpositive_lr(self):
        with pytest.raises(ConfigError, match="train.lr"):
            TrainConfig.from_kv({"train.lr": "0"})

    def test_negative_epochs(self):
        with pytest.raises(ConfigError, match="train.epochs"):
            TrainConfig.from_kv({"train.epochs": "-1"})


class TestLoadPlan:
    def test_plan_file(self, tmp_path):
        f = tmp_path / "plan.txt"
        f.write_text(
            "# half ranks\n"
            "mode = simultaneous\n"
            "gamma = 0.5\n"
            "layer.conv2.keep_ratio = 0.5\n"
            "layer.block1.conv1.rank = 8\n",
            encoding="utf-8",
        )
        plan = load_plan(str(f))
        assert plan.mode == "simultaneous"
        assert plan.gamma == 0.5
        assert plan.entries["conv2"] == ("keep_ratio", 0.5)
        assert plan.entries["block1.conv1"] == ("rank", 8)

    def test_kv_roundtrip_through_text(self, tmp_path):
        plan = CompressionPlan(
            entries={"conv2": ("keep_ratio", 0.5)}, mode="single_layer",
            projection_steps=12,
        )
        text = "\n".join(f"{k} = {v}" for k, v in plan.to_kv().items())
        f = tmp_path / "p.txt"
        f.write_text(text, encoding="utf-8")
        again = load_plan(str(f))
        assert again.to_kv() == plan.to_kv()

    def test_syntax_error_line(self, tmp_path):
        f = tmp_path / "p.txt"
        f.write_text("mode = cascaded_greedy\noops\n", encoding="utf-8")
        with pytest.raises(ConfigError, match=":2:"):
            load_plan(str(f))
