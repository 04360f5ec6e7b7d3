"""Acceptance gate: one test per criterion, each printing a verdict line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the verdicts;
each criterion asserts its pinned tolerance so the pytest line itself is
the pass/fail record. Budgeted total runtime is well under the per-criterion
limits asserted below.
"""

import time

import numpy as np
import pytest
from scipy import stats as scipy_stats

from caproj.autodiff import Tensor
from caproj.checkpoint import load_checkpoint, save_checkpoint
from caproj.cli import main as cli_main
from caproj.compress import (
    TeacherSnapshot,
    compress_network,
    evaluate_accuracy,
    fold_site,
    optimize_projection,
)
from caproj.config import TrainConfig, parse_kv_text
from caproj.costs import apply_plan_shapes, count_costs, factorization_variant
from caproj.data import make_dataset
from caproj.experiments import run_ablation, run_sweep
from caproj.gradcheck import run_gradcheck
from caproj.graph import Conv, NetworkGraph, Relu, build_small_vgg
from caproj.plan import CompressionPlan
from caproj.train import build_model, train_baseline

from helpers import random_orthonormal


def _verdict(num, name, ok, detail):
    line = f"[criterion {num}] {'PASS' if ok else 'FAIL'} {name}: {detail}"
    print(line, flush=True)
    assert ok, line


def _cfg(text):
    kv, lines = parse_kv_text(text)
    return TrainConfig.from_kv(kv, lines=lines)


@pytest.fixture(scope="module")
def vgg_setup():
    """Half-width toy VGG trained to convergence on the blob task."""
    cfg = _cfg(
        "model.family = small_vgg\n"
        "model.width_multiplier = 0.5\n"
        "train.epochs = 10\n"
        "train.lr = 0.05\n"
    )
    dataset = make_dataset(cfg)
    net = build_model(cfg)
    train_baseline(net, dataset, cfg.epochs, cfg.lr)
    return cfg, dataset, net


@pytest.fixture(scope="module")
def ablation_result():
    """Shared 3-seed resnet ablation at 50% ranks (criterion 6)."""
    cfg = _cfg(
        "model.family = small_resnet\n"
        "model.depth = 18-lite\n"
        "train.epochs = 16\n"
        "train.lr = 0.01\n"
    )
    dataset = make_dataset(cfg)
    sites = build_model(cfg).sites()
    plan = CompressionPlan(
        entries={s: ("keep_ratio", 0.5) for s in sites},
        mode="cascaded_greedy",
        projection_steps=60,
        projection_lr=0.01,
        relaxation_epochs=2,
        relaxation_lr=0.01,
        gamma=1.0,
    )
    t0 = time.perf_counter()
    result = run_ablation(cfg, dataset, plan, seeds=[0, 1, 2])
    return result, time.perf_counter() - t0


def test_criterion_1_gradient_oracles():
    t0 = time.perf_counter()
    report = run_gradcheck(seed=0, instances_per_case=50, tol=1e-4)
    elapsed = time.perf_counter() - t0
    worst = max(row[3] for row in report["rows"])
    min_checked = min(row[2] for row in report["rows"])
    ok = (
        report["all_pass"]
        and min_checked >= 50
        and worst < 1e-4
        and elapsed < 120.0
    )
    _verdict(
        1,
        "finite-difference oracles",
        ok,
        f"{len(report['rows'])} cases, >= {min_checked} instances each, "
        f"worst rel err {worst:.2e} < 1e-4, {elapsed:.1f}s < 120s",
    )


def test_criterion_2_orthonormality_invariant(vgg_setup):
    cfg, dataset, net = vgg_setup
    plan = CompressionPlan(
        entries={s: ("keep_ratio", 0.5) for s in net.sites()},
        mode="cascaded_greedy",
        projection_steps=170,
        projection_lr=0.05,
        relaxation_epochs=2,
        relaxation_lr=0.01,
        gamma=1.0,
    )
    _, report, stats = compress_network(
        net, plan, dataset.train_batches, eval_batches=dataset.eval_batches()
    )
    steps = len(stats["ortho_errors"])
    worst = stats["max_ortho_err"]
    ok = steps >= 500 and worst < 1e-6
    _verdict(
        2,
        "orthonormality across a full run",
        ok,
        f"{steps} proxy steps >= 500, max |P^T P - I| {worst:.2e} < 1e-6 "
        f"(compressed to {report['flops_pct']:.1f}% flops)",
    )


def test_criterion_3_folding_identity(vgg_setup):
    cfg, dataset, net = vgg_setup
    teacher = TeacherSnapshot(net)
    sites = list(net.sites())
    plan = CompressionPlan(
        entries={s: ("keep_ratio", 0.5) for s in sites},
        projection_steps=40,
        projection_lr=0.05,
        gamma=1.0,
    )
    stream = dataset.train_batches(0)
    projections, _ = optimize_projection(
        net, sites, plan, teacher, lambda step: stream[step % len(stream)]
    )
    rng = np.random.default_rng(7)
    x = rng.random((100, 3, 32, 32))
    overlay_out, _ = net.forward(
        Tensor(x), projections={s: Tensor(p) for s, p in projections.items()}
    )
    folded = net.clone()
    for s in sites:
        fold_site(folded, s, projections[s])
    folded_out, _ = folded.forward(Tensor(x))
    gap = float(np.max(np.abs(overlay_out.data - folded_out.data)))

    identity_plan = CompressionPlan(
        entries={s: ("keep_ratio", 1.0) for s in sites},
        projection_steps=2,
        relaxation_epochs=0,
    )
    same, _, _ = compress_network(net, identity_plan, dataset.train_batches)
    base_out, _ = net.forward(Tensor(x))
    same_out, _ = same.forward(Tensor(x))
    bit_identical = same_out.data.tobytes() == base_out.data.tobytes()

    ok = gap <= 1e-10 and bit_identical
    _verdict(
        3,
        "folding identity",
        ok,
        f"overlay-vs-folded max |diff| {gap:.2e} <= 1e-10 on 100 inputs; "
        f"full-rank plan bit-identical: {bit_identical}",
    )


def test_criterion_4_cost_accounting():
    # Fixed conv pair: 8 -> 64 -> 64 channels on 16x16 maps, k = 3, r = 32.
    rng = np.random.default_rng(0)
    pair_net = NetworkGraph(
        [
            Conv("conv0", rng.normal(size=(64, 8, 3, 3)), np.zeros(64)),
            Relu("conv0.act"),
            Conv("conv1", rng.normal(size=(64, 64, 3, 3)), np.zeros(64)),
            Relu("conv1.act"),
            Conv("conv2", rng.normal(size=(64, 64, 3, 3)), np.zeros(64)),
            Relu("conv2.act"),
        ],
        (8, 16, 16),
        {"family": "pair"},
    )
    plan = CompressionPlan(entries={"conv1": ("rank", 32)})

    def pair_flops(report, names):
        return sum(r["flops"] for r in report.per_layer if r["name"] in names)

    cap_pair = pair_flops(
        count_costs(apply_plan_shapes(pair_net, plan), batch=1),
        {"conv1", "conv2"},
    )
    fact_pair = pair_flops(
        count_costs(factorization_variant(pair_net, plan), batch=1),
        {"conv1", "conv1.reproj", "conv2"},
    )
    halved = cap_pair == 18_874_368 and fact_pair == 37_748_736
    exactly_half = 2 * cap_pair == fact_pair

    vgg = build_small_vgg(num_classes=4, seed=0)
    half = CompressionPlan(
        entries={s: ("keep_ratio", 0.5) for s in vgg.sites()}
    )
    original = count_costs(vgg, batch=1).peak_activation_bytes
    cap = count_costs(apply_plan_shapes(vgg, half), batch=1).peak_activation_bytes
    fact = count_costs(
        factorization_variant(vgg, half), batch=1
    ).peak_activation_bytes
    ordered = cap < original < fact

    ok = halved and exactly_half and ordered
    _verdict(
        4,
        "cost accounting",
        ok,
        f"pair flops {cap_pair:,} = exactly half of {fact_pair:,}; "
        f"peak bytes {cap:,} < {original:,} < {fact:,}",
    )


def test_criterion_5_pca_comparison():
    t0 = time.perf_counter()
    rng = np.random.default_rng(38)
    layers = [
        Conv("conv1", rng.normal(0.0, 0.3, size=(4, 4, 3, 3)), np.zeros(4)),
        Relu("conv1.act"),
        Conv("conv2", rng.normal(0.0, 0.3, size=(4, 4, 3, 3)), np.zeros(4)),
        Relu("conv2.act"),
    ]
    net = NetworkGraph(layers, (4, 8, 8), {"family": "pair"})
    teacher = TeacherSnapshot(net)
    data_rng = np.random.default_rng(39)
    data = [
        (data_rng.random((16, 4, 8, 8)), data_rng.integers(0, 4, size=16))
        for _ in range(2)
    ]
    plan = CompressionPlan(
        entries={}, projection_steps=400, projection_lr=0.2, gamma=0.0
    )
    projections, _ = optimize_projection(
        net, ["conv1"], plan, teacher,
        lambda step: data[step % len(data)],
        ranks={"conv1": 2},
    )

    def recon(p):
        num = den = 0.0
        for x, _ in data:
            tt = teacher.targets(x, ["conv2.act"])["conv2.act"]
            _, taps = net.forward(
                Tensor(x), projections={"conv1": Tensor(p)}, record_taps=True
            )
            s = taps["conv2.act"].data
            num += float(np.sum((tt - s) ** 2))
            den += float(np.sum(tt * tt))
        return num / den

    opt_loss = recon(projections["conv1"])

    second_moment = np.zeros((4, 4))
    for x, _ in data:
        z = teacher.targets(x, ["conv1"])["conv1"]
        second_moment += np.einsum("nchw,ndhw->cd", z, z)
    _, eigvecs = np.linalg.eigh(second_moment)
    pca_loss = recon(eigvecs[:, -2:])

    rand_best = min(
        recon(random_orthonormal(4, 2, seed=1000 + k)) for k in range(20)
    )
    elapsed = time.perf_counter() - t0
    ok = opt_loss <= 1.05 * pca_loss and opt_loss < rand_best and elapsed < 300.0
    _verdict(
        5,
        "PCA comparison",
        ok,
        f"optimized {opt_loss:.4e} <= 1.05 x PCA {pca_loss:.4e} and < best "
        f"of 20 random {rand_best:.4e}; {elapsed:.1f}s < 300s",
    )


def test_criterion_6_ablation_ordering(ablation_result):
    result, elapsed = ablation_result
    arms = result["arms"]
    relax = arms["projection_relax"]["mean"]
    only = arms["projection_only"]["mean"]
    random_relax = arms["random_projection_relax"]["mean"]
    ok = relax >= only and relax >= random_relax and elapsed < 1800.0
    _verdict(
        6,
        "ablation ordering",
        ok,
        f"projection+relax {relax:.4f} >= projection-only {only:.4f} and "
        f">= random+relax {random_relax:.4f} over seeds {result['seeds']}; "
        f"{elapsed:.0f}s < 1800s",
    )


def test_criterion_7_sweep_trends(vgg_setup):
    cfg, dataset, net = vgg_setup
    # Pure reconstruction sweep (gamma 0): the plotted quantity is recon
    # error, so the per-cell optimization must target exactly that.
    plan = CompressionPlan(
        entries={},
        mode="cascaded_greedy",
        projection_steps=200,
        projection_lr=0.05,
        relaxation_epochs=0,
        gamma=0.0,
    )
    ratios = [0.125, 0.25, 0.5, 1.0]
    rows = run_sweep(net, dataset, plan, ratios=ratios)
    base_acc = evaluate_accuracy(net, dataset.eval_batches())

    worst_rho = 1.0
    for layer in sorted({r[0] for r in rows}):
        cells = [(1.0 - ratio, recon) for l, ratio, recon, _ in rows if l == layer]
        rho = scipy_stats.spearmanr(
            [c[0] for c in cells], [c[1] for c in cells]
        )[0]
        worst_rho = min(worst_rho, float(rho))

    worst_drop = max(
        base_acc - acc for _, ratio, _, acc in rows if ratio >= 0.5
    )
    ok = worst_rho > 0.9 and worst_drop < 0.01
    _verdict(
        7,
        "sweep trends",
        ok,
        f"per-layer Spearman(compression, recon) >= {worst_rho:.3f} > 0.9; "
        f"max acc drop at <= 50% compression {worst_drop:.4f} < 0.01",
    )


def test_criterion_8_determinism_persistence(tmp_path, vgg_setup):
    cfg_text = (
        "dataset.train_size = 48\n"
        "dataset.eval_size = 16\n"
        "dataset.batch_size = 16\n"
        "model.family = small_vgg\n"
        "model.width_multiplier = 0.25\n"
        "train.epochs = 3\n"
        "train.lr = 0.05\n"
        "sweep.layers = conv2\n"
        "sweep.ratios = 0.5, 1.0\n"
    )
    plan_text = (
        "mode = cascaded_greedy\n"
        "gamma = 0.0\n"
        "projection_steps = 6\n"
        "projection_lr = 0.05\n"
        "relaxation_epochs = 0\n"
        "layer.conv2.keep_ratio = 0.5\n"
        "layer.conv3.keep_ratio = 0.5\n"
    )
    cfg_path = tmp_path / "train.cfg"
    cfg_path.write_text(cfg_text, encoding="utf-8")
    plan_path = tmp_path / "plan.txt"
    plan_path.write_text(plan_text, encoding="utf-8")

    artifacts = ("metrics.csv", "baseline.ckpt", "report.json",
                 "compressed.ckpt", "sweep.csv")
    digests = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli_main(
            ["train", "--config", str(cfg_path), "--out-dir", str(out)]
        ) == 0
        assert cli_main([
            "compress", "--config", str(cfg_path), "--plan", str(plan_path),
            "--checkpoint", str(out / "baseline.ckpt"), "--out-dir", str(out),
        ]) == 0
        assert cli_main([
            "sweep", "--config", str(cfg_path), "--plan", str(plan_path),
            "--checkpoint", str(out / "baseline.ckpt"), "--out-dir", str(out),
        ]) == 0
        digests.append([(out / name).read_bytes() for name in artifacts])
    byte_identical = digests[0] == digests[1]

    _, dataset, net = vgg_setup
    path = tmp_path / "roundtrip.ckpt"
    save_checkpoint(str(path), net)
    loaded = load_checkpoint(str(path)).net
    x = dataset.eval_batches()[0][0]
    out_a, _ = net.forward(x)
    out_b, _ = loaded.forward(x)
    roundtrip_exact = out_a.data.tobytes() == out_b.data.tobytes()

    ok = byte_identical and roundtrip_exact
    _verdict(
        8,
        "determinism and persistence",
        ok,
        f"{len(artifacts)} artifacts byte-identical across runs: "
        f"{byte_identical}; checkpoint round-trip forward bit-exact: "
        f"{roundtrip_exact}",
    )
