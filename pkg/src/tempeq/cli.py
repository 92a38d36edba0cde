"""Command-line entry point: dataset generation, pretraining, evaluation and
the batch-size sweep.

Run directories live under --runs-root (or $TEMPEQ_RUNS, default ./runs) and
contain manifest.json, metrics.jsonl and ckpt_<step> checkpoint files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import time

import numpy as np

from . import evalkit, synthvid
from .encoder import load_model
from .objectives import LossWeights
from .trainloop import PRESETS, TrainConfig, Trainer


def _runs_root(args) -> str:
    return args.runs_root or os.environ.get("TEMPEQ_RUNS", "runs")


def _config_hash(config: TrainConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_manifest(run_dir: str, name: str, config: TrainConfig, dataset: str):
    manifest = {
        "run": name,
        "config": config.to_dict(),
        "seed": config.seed,
        "dataset": os.path.abspath(dataset),
        "config_hash": _config_hash(config),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(os.path.join(run_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def _parse_csv(value: str, cast=str) -> tuple:
    return tuple(cast(v) for v in value.split(",") if v)


def _load_kv_config(path: str) -> dict:
    """Flat KEY=VALUE config file; values parsed as json when possible."""
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            try:
                out[key] = json.loads(value)
            except json.JSONDecodeError:
                out[key] = value
    return out


def cmd_generate(args) -> int:
    max_speed_extent = 16 * 8
    if args.frames < max_speed_extent:
        feasible = [2 ** k for k in range(4) if 16 * 2 ** k <= args.frames]
        print(
            f"warning: {args.frames} frames cannot fit all playback speeds; "
            f"training on this dataset will drop speeds above {max(feasible)}x",
            file=sys.stderr,
        )
    rng = np.random.default_rng(args.seed)
    try:
        videos, labels = synthvid.generate_dataset(
            rng, args.classes, args.per_class, t=args.frames, h=args.size, w=args.size
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    synthvid.write_fvc(args.out, videos, labels)
    print(f"wrote {args.out}: {len(videos)} videos, {args.classes} classes")
    return 0


def resolve_train_config(args) -> TrainConfig:
    """Resolve preset / flag / config-file combinations into a TrainConfig."""
    explicit = [args.equivariance, args.objectives, args.aux]
    if args.preset and any(v is not None for v in explicit):
        raise ValueError("--preset conflicts with --equivariance/--objectives/--aux")
    if args.preset:
        if args.preset not in PRESETS:
            raise ValueError(f"unknown preset {args.preset!r}")
        config = PRESETS[args.preset]
    else:
        equi_map = {
            "temporal": ("temporal",),
            "spatial": ("spatial",),
            "both": ("spatial", "temporal"),
            "none": (),
        }
        equi = equi_map[args.equivariance or "temporal"]
        objectives = set(_parse_csv(args.objectives or "inst,equi,aux"))
        unknown = objectives - {"inst", "equi", "aux"}
        if unknown:
            raise ValueError(f"unknown objectives: {sorted(unknown)}")
        aux = _parse_csv(args.aux or "speed,rev,order")
        if set(aux) - {"speed", "rev", "order"}:
            raise ValueError(f"unknown aux tasks in {aux}")
        aux_on = "aux" in objectives
        weights = LossWeights(
            equi=1.0 if "equi" in objectives else 0.0,
            inst=1.0 if "inst" in objectives else 0.0,
            aux_speed=1.0 if aux_on and "speed" in aux else 0.0,
            aux_direction=1.0 if aux_on and "rev" in aux else 0.0,
            aux_overlap=1.0 if aux_on and "order" in aux else 0.0,
        )
        config = TrainConfig(equivariance_set=equi, weights=weights,
                             aux_tasks=aux if aux_on else ())

    overrides = {}
    if args.config:
        overrides.update(_load_kv_config(args.config))
    for key, value in (
        ("batch_size", args.batch),
        ("epochs", args.epochs),
        ("steps", args.steps),
        ("seed", args.seed),
        ("base_lr", args.lr),
    ):
        if value is not None:
            overrides[key] = value
    if overrides:
        base = config.to_dict()
        unknown = set(overrides) - set(base)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base.update(overrides)
        config = TrainConfig.from_dict(base)
    return config


def _load_split(path: str, train_frac: float):
    videos, labels = synthvid.load_fvc(path)
    return synthvid.split_train_test(videos, labels, train_frac)


def cmd_pretrain(args) -> int:
    try:
        config = resolve_train_config(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if not os.path.exists(args.data):
        print(f"error: dataset not found: {args.data}", file=sys.stderr)
        return 1
    run_dir = os.path.join(_runs_root(args), args.run)
    if os.path.exists(run_dir):
        print(f"error: run directory already exists: {run_dir}", file=sys.stderr)
        return 1

    (train_videos, _), _ = _load_split(args.data, args.train_frac)
    os.makedirs(run_dir)
    _write_manifest(run_dir, args.run, config, args.data)
    trainer = Trainer(train_videos, config, run_dir=run_dir)
    try:
        trainer.train()
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    trainer.save_checkpoint(os.path.join(run_dir, f"ckpt_{trainer.step}"))
    print(f"trained {trainer.step} steps; run directory: {run_dir}")
    return 0


def _plot_rk_bar(recalls: dict, path: str):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ks = sorted(recalls)
    plt.figure(figsize=(4, 3))
    plt.bar([str(k) for k in ks], [recalls[k] for k in ks])
    plt.xlabel("k")
    plt.ylabel("R@k")
    plt.ylim(0, 1)
    plt.tight_layout()
    plt.savefig(path)
    plt.close()


def _plot_loss_curve(metrics_path: str, out_path: str):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps, totals = [], []
    with open(metrics_path) as f:
        for line in f:
            rec = json.loads(line)
            steps.append(rec["step"])
            totals.append(rec["total"])
    plt.figure(figsize=(4, 3))
    plt.plot(steps, totals)
    plt.xlabel("step")
    plt.ylabel("total loss")
    plt.tight_layout()
    plt.savefig(out_path)
    plt.close()


def cmd_eval(args) -> int:
    if not os.path.exists(args.ckpt):
        print(f"error: checkpoint not found: {args.ckpt}", file=sys.stderr)
        return 1
    if not os.path.exists(args.data):
        print(f"error: dataset not found: {args.data}", file=sys.stderr)
        return 1
    (train_videos, train_labels), (test_videos, test_labels) = _load_split(
        args.data, args.train_frac
    )
    try:
        model, payload = load_model(args.ckpt, in_channels=train_videos.shape[-1])
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)

    train_bank = evalkit.extract_features(
        model, train_videos, train_labels, args.temporal_crops, args.spatial_crops
    )
    test_bank = evalkit.extract_features(
        model, test_videos, test_labels, args.temporal_crops, args.spatial_crops,
        stats=(train_bank.mean, train_bank.std),
    )
    train_bank.save(os.path.join(args.out, "train_bank.npz"))
    test_bank.save(os.path.join(args.out, "test_bank.npz"))

    ks = _parse_csv(args.ks, int)
    recalls = evalkit.retrieval_recall(test_bank, train_bank, ks)
    nn_acc = evalkit.nn_classify(train_bank, test_bank)
    probe_acc = evalkit.linear_probe(train_bank, test_bank)
    diag = evalkit.equivariance_diagnostic(model, test_videos, n_probes=args.probes,
                                           seed=args.seed)
    aux_acc = evalkit.aux_head_accuracies(model, test_videos, seed=args.seed)

    summary = {
        "checkpoint": os.path.abspath(args.ckpt),
        "step": payload.get("step"),
        "retrieval": {str(k): v for k, v in recalls.items()},
        "nn_accuracy": nn_acc,
        "linear_probe_accuracy": probe_acc,
        "equivariance_match_accuracy": diag["match_accuracy"],
        "aux_accuracy": aux_acc,
    }
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
    with open(os.path.join(args.out, "eval_metrics.jsonl"), "w") as f:
        f.write(json.dumps(summary) + "\n")
    _plot_rk_bar(recalls, os.path.join(args.out, "rk_bar.png"))
    metrics_path = os.path.join(os.path.dirname(args.ckpt), "metrics.jsonl")
    if os.path.exists(metrics_path):
        _plot_loss_curve(metrics_path, os.path.join(args.out, "loss_curve.png"))

    print(f"{'metric':<28}{'value':>10}")
    for k in ks:
        print(f"{'R@' + str(k):<28}{recalls[k]:>10.3f}")
    print(f"{'1-NN accuracy':<28}{nn_acc:>10.3f}")
    print(f"{'linear probe accuracy':<28}{probe_acc:>10.3f}")
    print(f"{'equi match accuracy':<28}{diag['match_accuracy']:>10.3f}")
    for name, acc in aux_acc.items():
        print(f"{'aux ' + name + ' accuracy':<28}{acc:>10.3f}")
    return 0


def cmd_sweep_batch(args) -> int:
    if not os.path.exists(args.data):
        print(f"error: dataset not found: {args.data}", file=sys.stderr)
        return 1
    sizes = _parse_csv(args.batch_sizes, int)
    (train_videos, train_labels), (test_videos, test_labels) = _load_split(
        args.data, args.train_frac
    )
    out_dir = os.path.join(_runs_root(args), args.name)
    os.makedirs(out_dir, exist_ok=True)

    rows = []
    for arm, base in (
        ("equivariance", PRESETS["k"]),
        ("distinctiveness", PRESETS["e"].replace(distinctiveness_baseline=True)),
    ):
        for batch in sizes:
            config = base.replace(batch_size=batch, steps=args.steps, seed=args.seed)
            run_dir = os.path.join(out_dir, f"{arm}_b{batch}")
            if os.path.exists(run_dir):
                shutil.rmtree(run_dir)
            os.makedirs(run_dir)
            _write_manifest(run_dir, f"{args.name}/{arm}_b{batch}", config, args.data)
            trainer = Trainer(train_videos, config, run_dir=run_dir)
            trainer.train()
            trainer.save_checkpoint(os.path.join(run_dir, f"ckpt_{trainer.step}"))

            train_bank = evalkit.extract_features(trainer.model, train_videos, train_labels)
            test_bank = evalkit.extract_features(
                trainer.model, test_videos, test_labels,
                stats=(train_bank.mean, train_bank.std),
            )
            nn_acc = evalkit.nn_classify(train_bank, test_bank)
            with open(os.path.join(run_dir, "metrics.jsonl")) as f:
                final = json.loads(f.readlines()[-1])
            row = {"arm": arm, "batch_size": batch, "nn_accuracy": nn_acc,
                   "final_loss": final["total"]}
            rows.append(row)
            print(json.dumps(row))

    with open(os.path.join(out_dir, "sweep.jsonl"), "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.figure(figsize=(4.5, 3.5))
    for arm in ("equivariance", "distinctiveness"):
        pts = sorted((r["batch_size"], r["nn_accuracy"]) for r in rows if r["arm"] == arm)
        plt.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=arm)
    plt.xscale("log", base=2)
    plt.xlabel("batch size")
    plt.ylabel("1-NN accuracy")
    plt.legend()
    plt.tight_layout()
    plt.savefig(os.path.join(out_dir, "sweep.png"))
    plt.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tempeq",
        description="Self-supervised video representation learning with "
        "temporal-transformation equivariance",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="generate a synthetic motion dataset")
    gen.add_argument("--classes", type=int, default=8)
    gen.add_argument("--per-class", type=int, default=100)
    gen.add_argument("--frames", type=int, default=128)
    gen.add_argument("--size", type=int, default=32)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", default="dataset.fvc")
    gen.set_defaults(func=cmd_generate)

    pre = sub.add_parser("pretrain", help="self-supervised pretraining")
    pre.add_argument("--data", required=True)
    pre.add_argument("--run", required=True)
    pre.add_argument("--runs-root", default=None)
    pre.add_argument("--preset", choices=sorted(PRESETS), default=None)
    pre.add_argument("--equivariance", choices=["temporal", "spatial", "both", "none"],
                     default=None)
    pre.add_argument("--objectives", default=None, help="comma list of inst,equi,aux")
    pre.add_argument("--aux", default=None, help="comma list of speed,rev,order")
    pre.add_argument("--config", default=None, help="flat KEY=VALUE config file")
    pre.add_argument("--batch", type=int, default=None)
    pre.add_argument("--epochs", type=int, default=None)
    pre.add_argument("--steps", type=int, default=None)
    pre.add_argument("--seed", type=int, default=None)
    pre.add_argument("--lr", type=float, default=None)
    pre.add_argument("--train-frac", type=float, default=0.8)
    pre.set_defaults(func=cmd_pretrain)

    ev = sub.add_parser("eval", help="frozen-feature evaluation of a checkpoint")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--ks", default="1,5,10,20")
    ev.add_argument("--temporal-crops", type=int, default=4)
    ev.add_argument("--spatial-crops", type=int, default=1)
    ev.add_argument("--probes", type=int, default=512)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--train-frac", type=float, default=0.8)
    ev.set_defaults(func=cmd_eval)

    sweep = sub.add_parser("sweep-batch", help="batch-size sweep of both arms")
    sweep.add_argument("--data", required=True)
    sweep.add_argument("--name", default="sweep")
    sweep.add_argument("--runs-root", default=None)
    sweep.add_argument("--batch-sizes", default="8,16,32,64")
    sweep.add_argument("--steps", type=int, default=200)
    sweep.add_argument("--seed", type=int, default=0)
    sweep.add_argument("--train-frac", type=float, default=0.8)
    sweep.set_defaults(func=cmd_sweep_batch)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
