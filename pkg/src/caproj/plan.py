"""Compression plans: per-site ranks or keep-ratios plus run hyperparameters.

Plan files are flat key-value text. Per-layer entries look like
``layer.conv2.keep_ratio = 0.5`` or ``layer.block1.conv1.rank = 8``; the
remaining keys configure the run (mode, gamma, step counts, seeds).
"""

from __future__ import annotations

from .errors import PlanError

__all__ = ["CompressionPlan", "MODES"]

MODES = ("single_layer", "cascaded_greedy", "simultaneous")

_SCALAR_FIELDS = {
    # key: (attribute, parser)
    "mode": ("mode", str),
    "gamma": ("gamma", float),
    "two_round": ("two_round", None),  # parsed specially
    "projection_steps": ("projection_steps", int),
    "projection_lr": ("projection_lr", float),
    "projection_momentum": ("projection_momentum", float),
    "projection_batch_size": ("projection_batch_size", int),
    "relaxation_epochs": ("relaxation_epochs", int),
    "relaxation_lr": ("relaxation_lr", float),
    "finetune_epochs": ("finetune_epochs", int),
    "finetune_lr": ("finetune_lr", float),
    "seed": ("seed", int),
}


def _parse_bool(raw, key):
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise PlanError(f"{key}: expected a boolean, got {raw!r}")


class CompressionPlan:
    def __init__(
        self,
        entries=None,
        mode="cascaded_greedy",
        gamma=1.0,
        two_round=False,
        projection_steps=200,
        projection_lr=0.003,
        projection_momentum=0.9,
        projection_batch_size=32,
        relaxation_epochs=2,
        relaxation_lr=0.01,
        finetune_epochs=0,
        finetune_lr=0.005,
        seed=0,
    ):
        if mode not in MODES:
            raise PlanError(f"mode must be one of {MODES}, got {mode!r}")
        if gamma < 0:
            raise PlanError(f"gamma must be nonnegative, got {gamma}")
        for label, val in (
            ("projection_steps", projection_steps),
            ("relaxation_epochs", relaxation_epochs),
            ("finetune_epochs", finetune_epochs),
        ):
            if val < 0:
                raise PlanError(f"{label} must be nonnegative, got {val}")
        self.entries = dict(entries or {})
        for site, (kind, value) in self.entries.items():
            if kind == "rank":
                if int(value) < 1:
                    raise PlanError(f"layer.{site}.rank must be >= 1, got {value}")
            elif kind == "keep_ratio":
                if not 0.0 < float(value) <= 1.0:
                    raise PlanError(
                        f"layer.{site}.keep_ratio must be in (0, 1], got {value}"
                    )
            else:
                raise PlanError(f"unknown entry kind {kind!r} for layer {site}")
        self.mode = mode
        self.gamma = float(gamma)
        self.two_round = bool(two_round)
        self.projection_steps = int(projection_steps)
        self.projection_lr = float(projection_lr)
        self.projection_momentum = float(projection_momentum)
        self.projection_batch_size = int(projection_batch_size)
        self.relaxation_epochs = int(relaxation_epochs)
        self.relaxation_lr = float(relaxation_lr)
        self.finetune_epochs = int(finetune_epochs)
        self.finetune_lr = float(finetune_lr)
        self.seed = int(seed)

    # ------------------------------------------------------------------

    @staticmethod
    def from_kv(kv):
        """Build a plan from a parsed flat key-value mapping."""
        entries = {}
        scalars = {}
        for key, raw in kv.items():
            if key.startswith("layer."):
                rest = key[len("layer."):]
                if rest.endswith(".keep_ratio"):
                    site, kind = rest[: -len(".keep_ratio")], "keep_ratio"
                    value = float(raw)
                elif rest.endswith(".rank"):
                    site, kind = rest[: -len(".rank")], "rank"
                    value = int(raw)
                else:
                    raise PlanError(
                        f"{key}: per-layer keys end in .keep_ratio or .rank"
                    )
                if not site:
                    raise PlanError(f"{key}: empty layer id")
                if site in entries:
                    raise PlanError(f"duplicate plan entry for layer {site}")
                entries[site] = (kind, value)
            elif key in _SCALAR_FIELDS:
                attr, parser = _SCALAR_FIELDS[key]
                if key == "two_round":
                    scalars[attr] = _parse_bool(raw, key)
                else:
                    try:
                        scalars[attr] = parser(raw)
                    except ValueError as exc:
                        raise PlanError(f"{key}: {exc}") from None
            else:
                raise PlanError(f"unknown plan key {key!r}")
        return CompressionPlan(entries=entries, **scalars)

    def to_kv(self):
        kv = {
            "mode": self.mode,
            "gamma": repr(self.gamma),
            "two_round": "true" if self.two_round else "false",
            "projection_steps": str(self.projection_steps),
            "projection_lr": repr(self.projection_lr),
            "projection_momentum": repr(self.projection_momentum),
            "projection_batch_size": str(self.projection_batch_size),
            "relaxation_epochs": str(self.relaxation_epochs),
            "relaxation_lr": repr(self.relaxation_lr),
            "finetune_epochs": str(self.finetune_epochs),
            "finetune_lr": repr(self.finetune_lr),
            "seed": str(self.seed),
        }
        for site in sorted(self.entries):
            kind, value = self.entries[site]
            kv[f"layer.{site}.{kind}"] = (
                repr(float(value)) if kind == "keep_ratio" else str(int(value))
            )
        return kv

    # ------------------------------------------------------------------

    def validate(self, net):
        """Check every entry against the network; raises before any training."""
        protected = net.protected()
        known = {c.name for c in net.convs()}
        for site, (kind, value) in self.entries.items():
            if site not in known:
                raise PlanError(f"plan references unknown layer {site!r}")
            if site in protected:
                raise PlanError(
                    f"layer {site} is protected ({protected[site]}) and "
                    f"cannot be compressed"
                )
            c_out = net.conv_by_name(site).c_out
            if kind == "rank" and not 1 <= value <= c_out:
                raise PlanError(
                    f"layer {site}: rank {value} out of range [1, {c_out}]"
                )

    def resolved_ranks(self, net):
        """Per-site integer ranks, in the network's site order."""
        self.validate(net)
        order = [s for s in net.sites() if s in self.entries]
        ranks = {}
        for site in order:
            kind, value = self.entries[site]
            c_out = net.conv_by_name(site).c_out
            if kind == "rank":
                ranks[site] = int(value)
            else:
                ranks[site] = max(1, int(round(value * c_out)))
        return ranks
