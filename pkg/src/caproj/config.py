"""Flat key-value config files and the typed training configuration.

Files are UTF-8 text, one ``key = value`` pair per line, ``#`` starts a
comment. Every knob lives in the documented schema below; unknown keys are
rejected with the offending line number.
"""

from .errors import ConfigError
from .plan import CompressionPlan

__all__ = ["parse_kv_text", "parse_kv_file", "load_plan", "TrainConfig"]


def parse_kv_text(text, path="<config>"):
    """Parse flat key-value text; returns (mapping, key -> line number)."""
    kv = {}
    lines = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line_no=line_no, path=path)
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError("empty key", line_no=line_no, path=path)
        if key in kv:
            raise ConfigError(f"duplicate key {key!r}", line_no=line_no, path=path)
        kv[key] = value
        lines[key] = line_no
    return kv, lines


def parse_kv_file(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IOError(f"cannot read {path}: {exc}") from exc
    return parse_kv_text(text, path=str(path))


def load_plan(path):
    """Parse a plan file into a CompressionPlan."""
    kv, _ = parse_kv_file(path)
    return CompressionPlan.from_kv(kv)


def _parse_str_list(raw):
    return [p.strip() for p in raw.split(",") if p.strip()]


def _parse_float_list(raw):
    return [float(p) for p in _parse_str_list(raw)]


def _parse_int_list(raw):
    return [int(p) for p in _parse_str_list(raw)]


def _parse_config_bool(raw):
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


# key -> (attribute, parser)
_SCHEMA = {
    "dataset.kind": ("dataset_kind", str),
    "dataset.seed": ("dataset_seed", int),
    "dataset.train_size": ("train_size", int),
    "dataset.eval_size": ("eval_size", int),
    "dataset.num_classes": ("num_classes", int),
    "dataset.noise_std": ("noise_std", float),
    "dataset.train_path": ("train_path", str),
    "dataset.eval_path": ("eval_path", str),
    "dataset.mean": ("mean", float),
    "dataset.std": ("std", float),
    "dataset.batch_size": ("batch_size", int),
    "model.family": ("model_family", str),
    "model.depth": ("model_depth", str),
    "model.width_multiplier": ("width_multiplier", float),
    "model.seed": ("model_seed", int),
    "train.epochs": ("epochs", int),
    "train.lr": ("lr", float),
    "train.momentum": ("momentum", float),
    "train.seed": ("train_seed", int),
    "sweep.layers": ("sweep_layers", _parse_str_list),
    "sweep.ratios": ("sweep_ratios", _parse_float_list),
    "ablate.seeds": ("ablate_seeds", _parse_int_list),
}


class TrainConfig:
    """Typed view of a config file; every field has a documented default."""

    def __init__(self):
        self.dataset_kind = "synthetic_blobs"
        self.dataset_seed = 0
        self.train_size = 256
        self.eval_size = 128
        self.num_classes = 4
        self.noise_std = 0.05
        self.train_path = ""
        self.eval_path = ""
        self.mean = 0.5
        self.std = 0.5
        self.batch_size = 32
        self.model_family = "small_vgg"
        self.model_depth = "18-lite"
        self.width_multiplier = 1.0
        self.model_seed = 0
        self.epochs = 10
        self.lr = 0.05
        self.momentum = 0.9
        self.train_seed = 0
        self.sweep_layers = []
        self.sweep_ratios = [0.25, 0.5, 0.75, 1.0]
        self.ablate_seeds = [0, 1, 2]

    @staticmethod
    def from_kv(kv, lines=None, path="<config>"):
        cfg = TrainConfig()
        lines = lines or {}
        for key, raw in kv.items():
            if key not in _SCHEMA:
                raise ConfigError(
                    f"unknown key {key!r}", line_no=lines.get(key), path=path
                )
            attr, parser = _SCHEMA[key]
            try:
                setattr(cfg, attr, parser(raw))
            except ValueError as exc:
                raise ConfigError(
                    f"{key}: {exc}", line_no=lines.get(key), path=path
                ) from None
        cfg._validate(path=path)
        return cfg

    @staticmethod
    def from_file(path):
        kv, lines = parse_kv_file(path)
        return TrainConfig.from_kv(kv, lines=lines, path=str(path))

    def _validate(self, path="<config>"):
        if self.dataset_kind not in ("synthetic_blobs", "cifar10_binary"):
            raise ConfigError(
                f"dataset.kind must be synthetic_blobs or cifar10_binary, "
                f"got {self.dataset_kind!r}",
                path=path,
            )
        if self.model_family not in ("small_vgg", "small_resnet"):
            raise ConfigError(
                f"model.family must be small_vgg or small_resnet, "
                f"got {self.model_family!r}",
                path=path,
            )
        for label, val in (
            ("dataset.train_size", self.train_size),
            ("dataset.eval_size", self.eval_size),
            ("dataset.batch_size", self.batch_size),
            ("dataset.num_classes", self.num_classes),
        ):
            if val < 1:
                raise ConfigError(f"{label} must be >= 1, got {val}", path=path)
        if self.epochs < 0:
            raise ConfigError(f"train.epochs must be >= 0, got {self.epochs}",
                              path=path)
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}",
                              path=path)
        for ratio in self.sweep_ratios:
            if not 0.0 < ratio <= 1.0:
                raise ConfigError(
                    f"sweep.ratios entries must lie in (0, 1], got {ratio}",
                    path=path,
                )
