"""Command-line surface: train, compress, eval, sweep, gradcheck, ablate.

Argument parsing happens before any numeric import so ``--threads`` can pin
the BLAS thread pools via environment variables. All artifacts are
deterministic for a fixed seed: no timestamps, stable key order, fixed float
formatting.
"""

import argparse
import os
import sys


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="caproj",
        description="Channel compression via trained orthonormal projections.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, plan=False, checkpoint=False):
        if config:
            p.add_argument("--config", required=True, help="flat key-value config file")
        if plan:
            p.add_argument("--plan", required=True, help="compression plan file")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="input checkpoint")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config/plan seed")
        p.add_argument("--threads", type=int, default=None,
                       help="pin BLAS/OpenMP thread count")
        p.add_argument("--out-dir", default=".", help="artifact directory")

    common(sub.add_parser("train", help="train the baseline network"))
    common(sub.add_parser("compress", help="compress a trained checkpoint"),
           plan=True, checkpoint=True)
    common(sub.add_parser("eval", help="evaluate a checkpoint"), checkpoint=True)
    common(sub.add_parser("sweep", help="single-layer ratio sweep"),
           plan=True, checkpoint=True)
    common(sub.add_parser("gradcheck", help="finite-difference gradient table"),
           config=False)
    common(sub.add_parser("ablate", help="four-arm ablation study"), plan=True)
    return parser


def _pin_threads(n):
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def main(argv=None):
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        _pin_threads(args.threads)

    # Numeric imports happen only after the thread pins above.
    import json

    from .checkpoint import load_checkpoint, save_checkpoint
    from .compress import compress_network, evaluate_accuracy
    from .config import TrainConfig, load_plan
    from .data import make_dataset
    from .experiments import (
        ablation_csv,
        ablation_json,
        run_ablation,
        run_sweep,
        sweep_csv,
    )
    from .gradcheck import render_table, run_gradcheck
    from .train import build_model, metrics_csv, train_baseline

    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)

    def path(name):
        return os.path.join(out_dir, name)

    if args.command == "train":
        cfg = TrainConfig.from_file(args.config)
        if args.seed is not None:
            cfg.model_seed = args.seed
            cfg.train_seed = args.seed
        dataset = make_dataset(cfg)
        net = build_model(cfg)
        rows = train_baseline(net, dataset, cfg.epochs, cfg.lr, cfg.momentum)
        _write(path("metrics.csv"), metrics_csv(rows))
        save_checkpoint(path("baseline.ckpt"), net,
                        extra={"epochs_trained": cfg.epochs})
        if rows:
            print(f"trained {cfg.epochs} epochs; eval accuracy {rows[-1][3]:.4f}")
        else:
            print("trained 0 epochs")
        return 0

    if args.command == "compress":
        cfg = TrainConfig.from_file(args.config)
        plan = load_plan(args.plan)
        if args.seed is not None:
            plan.seed = args.seed
        dataset = make_dataset(cfg)
        bundle = load_checkpoint(args.checkpoint)
        with open(args.plan, "r", encoding="utf-8") as fh:
            plan_text = fh.read()
        compressed, report, _ = compress_network(
            bundle.net, plan, dataset.train_batches,
            eval_batches=dataset.eval_batches(),
        )
        save_checkpoint(path("compressed.ckpt"), compressed,
                        plan_text=plan_text)
        _write(path("report.json"), json.dumps(report, indent=2) + "\n")
        print(f"flops {report['flops_pct']:.1f}% params {report['param_pct']:.1f}% "
              f"acc {report['acc_no_ft']:.4f} (base {report['base_acc']:.4f})")
        return 0

    if args.command == "eval":
        cfg = TrainConfig.from_file(args.config)
        dataset = make_dataset(cfg)
        bundle = load_checkpoint(args.checkpoint)
        acc = evaluate_accuracy(bundle.net, dataset.eval_batches())
        _write(path("eval.json"),
               json.dumps({"accuracy": acc}, indent=2) + "\n")
        print(f"eval accuracy {acc:.4f}")
        return 0

    if args.command == "sweep":
        cfg = TrainConfig.from_file(args.config)
        plan = load_plan(args.plan)
        if args.seed is not None:
            plan.seed = args.seed
        dataset = make_dataset(cfg)
        bundle = load_checkpoint(args.checkpoint)
        rows = run_sweep(bundle.net, dataset, plan,
                         layers=cfg.sweep_layers or None,
                         ratios=cfg.sweep_ratios)
        _write(path("sweep.csv"), sweep_csv(rows))
        print(f"swept {len(rows)} (layer, ratio) cells")
        return 0

    if args.command == "gradcheck":
        report = run_gradcheck(seed=args.seed if args.seed is not None else 0)
        table = render_table(report)
        _write(path("gradcheck.txt"), table)
        print(table, end="")
        return 0 if report["all_pass"] else 1

    if args.command == "ablate":
        cfg = TrainConfig.from_file(args.config)
        plan = load_plan(args.plan)
        dataset = make_dataset(cfg)
        seeds = [args.seed] if args.seed is not None else cfg.ablate_seeds
        result = run_ablation(cfg, dataset, plan, seeds=seeds)
        _write(path("ablation.csv"), ablation_csv(result))
        _write(path("ablation.json"), ablation_json(result))
        for arm in ("projection_relax", "random_projection_relax"):
            entry = result["arms"][arm]
            print(f"{arm}: {entry['mean']:.4f} +/- {entry['std']:.4f}")
        return 0

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
