"""Command-line runner: ``muse train | eval | mi-bench | count``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, DataConfig, RunConfig, fingerprint, parse_config
from .data import DataFormatError, first_per_class, load_cifar_bin, load_idx, make_digits_idx
from .infoest import mi_benchmark
from .metrics import emit_metrics
from .nn import BackboneSpec, build_backbone, count_flops, count_macs, count_params, module_counts
from .training import (
    DataSplits,
    evaluate,
    run_offline_distill,
    run_online_distill,
    run_self_distill,
    thread_limits,
)

log = logging.getLogger("musekd")

USER_ERRORS = (ConfigError, CheckpointError, DataFormatError, ValueError, KeyError, OSError)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def load_splits(cfg: DataConfig, output_dir: str | None = None) -> DataSplits:
    """Train/test datasets for a data section; test data is normalized with train statistics."""
    if cfg.format == "digits":
        root = cfg.digits_dir or str(Path(output_dir or ".") / "digits")
        p = make_digits_idx(root)
        cfg = dataclasses.replace(cfg, format="idx", **{k: str(v) for k, v in p.items()})
    if cfg.format == "idx":
        train = load_idx(cfg.train_images, cfg.train_labels, cfg.num_classes, "train")
        test = load_idx(cfg.test_images, cfg.test_labels, cfg.num_classes, "test",
                        stats=(train.mean, train.std))
    else:
        if not cfg.train_files or not cfg.test_files:
            raise ConfigError("cifar data needs data.train_files and data.test_files")
        train = load_cifar_bin(cfg.train_files, coarse=cfg.coarse, split="train")
        test = load_cifar_bin(cfg.test_files, coarse=cfg.coarse, split="test",
                              stats=(train.mean, train.std))
    if cfg.per_class is not None:
        train = first_per_class(train, cfg.per_class)
    return DataSplits(train, test)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _write_model(model, path: Path, cfg: RunConfig) -> None:
    save_checkpoint(model, path)
    sidecar = {
        "backbone": model.spec.to_dict(),
        "fingerprint": fingerprint(model.spec).hex(),
        "data": dataclasses.asdict(cfg.data),
        "output_dir": cfg.output_dir,
        "run_id": cfg.run_id,
        "seed": cfg.seed,
    }
    Path(f"{path}.json").write_text(json.dumps(sidecar, indent=2))


def run_train(cfg: RunConfig) -> int:
    if cfg.mode == "mi-bench":
        return _mi_bench(cfg.mi_bench.rhos, cfg.mi_bench.steps, cfg.seed, cfg.mi_bench.seeds,
                         cfg.mi_bench.dim, cfg.mi_bench.batch_size, cfg.mi_bench.lr, cfg.output_dir)
    if cfg.mode == "count":
        return _count(cfg.backbone)

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    data = load_splits(cfg.data, cfg.output_dir)
    settings = cfg.settings()

    if cfg.mode == "self":
        model = build_backbone(cfg.backbone, cfg.seed)
        result = run_self_distill(model, data, cfg.objective, cfg.schedule, cfg.seed, settings,
                                  run_id=cfg.run_id)
        _write_model(model, out / "model.ckpt", cfg)
        metrics = result.metrics
    elif cfg.mode == "online":
        peer_spec = cfg.peer or cfg.backbone
        peer_seed = cfg.seed + 1 if cfg.peer_seed is None else cfg.peer_seed
        net1 = build_backbone(cfg.backbone, cfg.seed)
        net2 = build_backbone(peer_spec, peer_seed)
        result = run_online_distill(net1, net2, data, cfg.objective, cfg.schedule, cfg.seed,
                                    settings, run_id=cfg.run_id, seeds=(cfg.seed, peer_seed))
        _write_model(net1, out / "net1.ckpt", cfg)
        _write_model(net2, out / "net2.ckpt", cfg)
        metrics = result.metrics
    else:
        teacher = load_checkpoint(cfg.teacher.checkpoint, cfg.teacher.backbone)
        student = build_backbone(cfg.backbone, cfg.seed)
        result = run_offline_distill(teacher, student, data, cfg.objective, cfg.schedule,
                                     cfg.seed, settings, run_id=cfg.run_id)
        _write_model(student, out / "model.ckpt", cfg)
        metrics = result.metrics

    emit_metrics(metrics, out / "metrics.csv")
    top1 = metrics.top1()
    print(f"{cfg.run_id}: final test top-1 per module: " + " ".join(f"{a:.2f}" for a in top1))
    print(f"wrote {out / 'metrics.csv'}")
    return 0


# ---------------------------------------------------------------------------
# eval / mi-bench / count
# ---------------------------------------------------------------------------


def run_eval(ckpt: str, module: int | None, config: str | None) -> int:
    sidecar_path = Path(f"{ckpt}.json")
    if not sidecar_path.exists():
        raise ConfigError(f"missing sidecar {sidecar_path}; it records the backbone spec")
    sidecar = json.loads(sidecar_path.read_text())
    spec = BackboneSpec(**sidecar["backbone"])
    model = load_checkpoint(ckpt, spec)
    k = spec.num_modules if module is None else module
    target = model.truncate(k) if k != spec.num_modules else model
    if config is not None:
        cfg = parse_config(config)
        data_cfg, out_dir = cfg.data, cfg.output_dir
    else:
        data_cfg, out_dir = DataConfig(**sidecar["data"]), sidecar.get("output_dir")
    data = load_splits(data_cfg, out_dir)
    acc = evaluate(target, data.test)
    top1 = acc[-1] if k == spec.num_modules else acc[0]
    params = count_params(model, k)
    flops = count_flops(model, up_to_module=k)
    print(f"module {k}/{spec.num_modules}: top-1 {top1:.2f}%  params {params:,}  FLOPs {flops / 1e6:.2f}M")
    return 0


def _mi_bench(rhos, steps, seed, seeds, dim, batch_size, lr, output_dir) -> int:
    rows = []
    for s in range(seed, seed + seeds):
        res = mi_benchmark(rhos, steps=steps, seed=s, dim=dim, batch_size=batch_size, lr=lr)
        losses = [r["loss"] for r in res]
        decreasing = all(a > b for a, b in zip(losses, losses[1:]))
        for r in res:
            print(f"seed {s}  rho {r['rho']:.3f}  analytic MI {r['analytic_mi']:.4f} nats  "
                  f"converged loss {r['loss']:.4f}")
        print(f"seed {s}  strictly decreasing: {'yes' if decreasing else 'no'}")
        rows.extend(dict(seed=s, **r) for r in res)
    if output_dir:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "mi_bench.csv").open("w") as fh:
            fh.write("seed,rho,analytic_mi,loss\n")
            for r in rows:
                fh.write(f"{r['seed']},{r['rho']!r},{r['analytic_mi']!r},{r['loss']!r}\n")
    return 0


def _count(spec: BackboneSpec) -> int:
    model = build_backbone(spec, seed=0)
    rows = module_counts(model)
    print(f"{spec.architecture}  classes={spec.num_classes}  input={spec.in_channels}x"
          f"{spec.input_size}x{spec.input_size}")
    print(f"{'module':>6} {'stage params':>13} {'head params':>12} {'stage MACs':>12} "
          f"{'exit params':>12} {'exit MACs':>13} {'exit FLOPs':>13}")
    for k, r in enumerate(rows, start=1):
        print(f"{k:>6} {r['stage_params']:>13,} {r['head_params']:>12,} {r['stage_macs']:>12,} "
              f"{count_params(model, k):>12,} {count_macs(model, k):>13,} {count_flops(model, up_to_module=k):>13,}")
    total, macs = count_params(model), count_macs(model)
    print(f"total params {total:,} ({total / 1e6:.2f}M)  total MACs {macs:,} ({macs / 1e6:.1f}M)  "
          f"total FLOPs {2 * macs:,} ({2 * macs / 1e6:.1f}M)")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="muse", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a config (self, online, offline, mi-bench, count)")
    p.add_argument("--config", required=True)

    p = sub.add_parser("eval", help="top-1 and cost of a checkpoint or one of its early exits")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--module", type=int, default=None, help="exit k (default: full model)")
    p.add_argument("--config", default=None, help="take the data section from this config")

    p = sub.add_parser("mi-bench", help="JSD estimator on correlated Gaussians")
    p.add_argument("--rho", type=_floats, default=[0.0, 0.5, 0.9])
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--output-dir", default=None)

    p = sub.add_parser("count", help="parameters and FLOPs per module")
    p.add_argument("--arch", required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--in-channels", type=int, default=None)
    p.add_argument("--input-size", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        with thread_limits():
            if args.command == "train":
                return run_train(parse_config(args.config))
            if args.command == "eval":
                return run_eval(args.ckpt, args.module, args.config)
            if args.command == "mi-bench":
                if args.steps < 1 or args.seeds < 1 or not args.rho:
                    raise ValueError("need at least one rho, one step and one seed")
                return _mi_bench(args.rho, args.steps, args.seed, args.seeds, args.dim,
                                 args.batch_size, args.lr, args.output_dir)
            mnist_like = args.in_channels is None and args.input_size is None and args.arch == "small-cnn-4"
            spec = BackboneSpec(
                args.arch, args.classes,
                in_channels=args.in_channels or (1 if mnist_like else 3),
                input_size=args.input_size or (28 if mnist_like else 32),
            )
            return _count(spec)
    except USER_ERRORS as exc:
        print(f"muse {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"muse {args.command}: training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
