"""Layer-wise compression sweeps and the four-arm ablation study.

The sweep compresses one layer at a time over a keep-ratio grid and records
the post-activation reconstruction error plus held-out accuracy. The
ablation compares, over several seeds: training the compressed architecture
from scratch, projection without repair, random orthonormal projections with
kernel relaxation, and learned projections with kernel relaxation.
"""

import copy
import json

import numpy as np

from .compress import (
    TeacherSnapshot,
    compress_network,
    evaluate_accuracy,
    evaluate_recon,
    fold_site,
    kernel_relaxation,
)
from .costs import apply_plan_shapes
from .plan import CompressionPlan
from .train import build_model, train_baseline

__all__ = [
    "run_sweep",
    "sweep_csv",
    "SWEEP_HEADER",
    "run_ablation",
    "ablation_csv",
    "ablation_json",
    "ARM_ORDER",
]

SWEEP_HEADER = "layer,keep_ratio,recon_error,accuracy"
ARM_ORDER = (
    "compressed_from_scratch",
    "projection_only",
    "random_projection_relax",
    "projection_relax",
)


def _plan_with(plan, entries=None, **overrides):
    fields = dict(
        mode=plan.mode,
        gamma=plan.gamma,
        two_round=plan.two_round,
        projection_steps=plan.projection_steps,
        projection_lr=plan.projection_lr,
        projection_momentum=plan.projection_momentum,
        projection_batch_size=plan.projection_batch_size,
        relaxation_epochs=plan.relaxation_epochs,
        relaxation_lr=plan.relaxation_lr,
        finetune_epochs=plan.finetune_epochs,
        finetune_lr=plan.finetune_lr,
        seed=plan.seed,
    )
    fields.update(overrides)
    return CompressionPlan(
        entries=plan.entries if entries is None else entries, **fields
    )


# ---------------------------------------------------------------------------
# sweep


def run_sweep(net, dataset, plan, layers=None, ratios=None):
    """One single-layer compression per (layer, ratio); rows sorted that way."""
    layers = sorted(layers if layers else net.sites())
    ratios = sorted(ratios if ratios is not None else [0.25, 0.5, 0.75, 1.0])
    teacher = TeacherSnapshot(net)
    eval_batches = dataset.eval_batches()
    rows = []
    for layer in layers:
        for ratio in ratios:
            single = _plan_with(plan, entries={layer: ("keep_ratio", ratio)})
            compressed, report, _ = compress_network(
                net, single, dataset.train_batches, eval_batches=eval_batches
            )
            recon = evaluate_recon(compressed, teacher, [layer], eval_batches)
            rows.append((layer, float(ratio), recon, report["acc_ft"]))
    return rows


def sweep_csv(rows):
    lines = [SWEEP_HEADER]
    for layer, ratio, recon, acc in rows:
        lines.append(f"{layer},{repr(ratio)},{recon:.12e},{acc:.6f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# ablation


def _random_orthonormal(n, r, rng):
    q, rr = np.linalg.qr(rng.normal(size=(n, r)))
    return q * np.sign(np.where(np.diag(rr) == 0, 1.0, np.diag(rr)))


def _arm_from_scratch(cfg, dataset, plan, seed):
    """Compressed shapes, fresh random weights, full training budget."""
    fresh_cfg = _cfg_with_seed(cfg, seed + 10_000)
    fresh = build_model(fresh_cfg)
    small = apply_plan_shapes(fresh, plan)
    train_baseline(small, dataset, cfg.epochs, cfg.lr, cfg.momentum)
    return evaluate_accuracy(small, dataset.eval_batches())


def _arm_projection_only(baseline, dataset, plan):
    single = _plan_with(plan, relaxation_epochs=0, finetune_epochs=0)
    _, report, _ = compress_network(
        baseline, single, dataset.train_batches,
        eval_batches=dataset.eval_batches(),
    )
    return report["acc_no_ft"]


def _arm_random_relax(baseline, dataset, plan, seed):
    teacher = TeacherSnapshot(baseline)
    net_c = baseline.clone()
    ranks = plan.resolved_ranks(baseline)
    sites = list(ranks)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xAB1A)))
    for site in sites:
        c_out = net_c.conv_by_name(site).c_out
        fold_site(net_c, site, _random_orthonormal(c_out, ranks[site], rng))
    kernel_relaxation(net_c, plan, teacher, dataset.train_batches, sites)
    return evaluate_accuracy(net_c, dataset.eval_batches())


def _arm_projection_relax(baseline, dataset, plan):
    single = _plan_with(plan, finetune_epochs=0)
    _, report, _ = compress_network(
        baseline, single, dataset.train_batches,
        eval_batches=dataset.eval_batches(),
    )
    return report["acc_no_ft"]


def _cfg_with_seed(cfg, seed):
    out = copy.copy(cfg)
    out.model_seed = seed
    out.train_seed = seed
    return out


def run_ablation(cfg, dataset, plan, seeds=None):
    """Per-seed baselines plus the four arms; returns the result table dict."""
    seeds = list(seeds if seeds is not None else cfg.ablate_seeds)
    if not seeds:
        raise ValueError("ablation needs at least one seed")
    baseline_accs = []
    per_arm = {arm: [] for arm in ARM_ORDER}
    for seed in seeds:
        seed_cfg = _cfg_with_seed(cfg, seed)
        baseline = build_model(seed_cfg)
        train_baseline(baseline, dataset, cfg.epochs, cfg.lr, cfg.momentum)
        baseline_accs.append(evaluate_accuracy(baseline, dataset.eval_batches()))
        seed_plan = _plan_with(plan, seed=seed)
        per_arm["compressed_from_scratch"].append(
            _arm_from_scratch(cfg, dataset, seed_plan, seed)
        )
        per_arm["projection_only"].append(
            _arm_projection_only(baseline, dataset, seed_plan)
        )
        per_arm["random_projection_relax"].append(
            _arm_random_relax(baseline, dataset, seed_plan, seed)
        )
        per_arm["projection_relax"].append(
            _arm_projection_relax(baseline, dataset, seed_plan)
        )

    def agg(values):
        arr = np.asarray(values, dtype=np.float64)
        return {
            "per_seed": [float(v) for v in arr],
            "mean": float(arr.mean()),
            "std": float(arr.std()),
        }

    return {
        "schema_version": 1,
        "seeds": seeds,
        "baseline": agg(baseline_accs),
        "arms": {arm: agg(per_arm[arm]) for arm in ARM_ORDER},
    }


def ablation_csv(result):
    lines = ["arm,mean_accuracy,std_accuracy"]
    for arm in ARM_ORDER:
        entry = result["arms"][arm]
        lines.append(f"{arm},{entry['mean']:.6f},{entry['std']:.6f}")
    return "\n".join(lines) + "\n"


def ablation_json(result):
    return json.dumps(result, indent=2) + "\n"
