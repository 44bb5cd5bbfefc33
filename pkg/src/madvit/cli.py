"""Command-line entry points.

Subcommands: gen-data, train, eval, sweep, visualize. Shared flags are
--config PATH, --set KEY=VALUE (repeatable), --out DIR and --seed N; file
values lose to --set, and --seed beats both. Exit codes: 0 success, 1 for a
runtime or invariant failure (one-line diagnostic), 2 for unknown flags or
config keys (plus usage).
"""

from __future__ import annotations

import argparse
import csv
import itertools
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import report
from .checkpoint import model_from_checkpoint, save_model
from .config import TrainConfig, build_config, parse_assignments, save_config
from .data import generate_synthetic_dataset, load_dataset, save_dataset, write_manifest
from .errors import ConfigKeyError, DataError, MadvitError, UsageError
from .local_cnns import export_attention_maps
from .regularizers import Mode
from .tensor import save_tensor
from .train import evaluate, train, write_drops_csv, write_metrics_csv
from .visualize import (HEAD_AGGREGATES, attention_rollout, composite_with_local_map,
                        render_heatmap)

PROG = "madvit"


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, metavar="PATH",
                        help="flat key=value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        dest="overrides", help="override one config key (repeatable)")
    parser.add_argument("--seed", type=int, default=None, metavar="N",
                        help="override the config seed")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset to disk")
    _add_config_flags(p)
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(handler=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write its artifacts")
    _add_config_flags(p)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--data", default=None, metavar="DIR",
                   help="dataset root (default: generate synthetic data)")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--data", default=None, metavar="DIR")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out", default=None, metavar="DIR",
                   help="also write metrics.csv and per-class figure here")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("sweep", help="train over a config grid")
    _add_config_flags(p)
    p.add_argument("--grid", required=True, nargs="+", metavar="KEY=SPEC",
                   help="grid per key: single value, v1,v2,..., or start:stop:step")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(handler=_cmd_sweep)

    p = sub.add_parser("visualize", help="render attention heatmaps for a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--data", default=None, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--count", type=int, default=8, metavar="N")
    p.add_argument("--head-agg", default="mean", choices=HEAD_AGGREGATES)
    p.add_argument("--mode", default="per-image", choices=("per-image", "batch"))
    p.add_argument("--dump-raw", action="store_true",
                   help="also dump raw rollout scores as tensor files")
    p.set_defaults(handler=_cmd_visualize)
    return parser


def _config_from_args(args) -> TrainConfig:
    return build_config(args.config, args.overrides, args.seed)


def _config_near_checkpoint(args) -> TrainConfig:
    """Config for checkpoint consumers: sidecar config.txt unless --config given."""
    if args.config is not None:
        return _config_from_args(args)
    sidecar = Path(args.checkpoint).with_name("config.txt")
    if not sidecar.exists():
        raise UsageError(f"no --config given and no sidecar at {sidecar}")
    return build_config(sidecar, args.overrides, args.seed)


def _load_or_generate(config: TrainConfig, data_dir, split: str):
    if data_dir is not None:
        return load_dataset(data_dir, split)
    per_class = config.train_per_class if split == "train" else config.test_per_class
    return generate_synthetic_dataset(
        num_classes=config.num_classes, per_class=per_class,
        size=config.input_size, seed=config.seed, split=split)


# -- subcommand bodies ---------------------------------------------------------

def _cmd_gen_data(args) -> int:
    config = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "test"):
        dataset = _load_or_generate(config, None, split)
        rows = save_dataset(dataset, out)
        write_manifest(rows, out / f"{split}_manifest.csv")
        print(f"{split}: {len(dataset.labels)} images under {out / split}")
    save_config(config, out / "config.txt")
    return 0


def _cmd_train(args) -> int:
    config = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_data = _load_or_generate(config, args.data, "train")
    test_data = _load_or_generate(config, args.data, "test")
    result = train(config, train_data, test_data, log=print)
    save_model(out / "model.ckpt", result.model)
    save_config(config, out / "config.txt")
    write_metrics_csv(result.history, out / "metrics.csv")
    if config.log_drops:
        write_drops_csv(result.drop_rows, out / "drops.csv")
    if result.history:
        report.training_curves(result.history, out / "curves.png")
    print(f"final test accuracy {result.final.overall_accuracy:.4f} "
          f"(mean-class {result.final.mean_class_accuracy:.4f}) "
          f"in {result.seconds:.1f}s; artifacts in {out}")
    return 0


def _cmd_eval(args) -> int:
    if not Path(args.checkpoint).exists():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    config = _config_near_checkpoint(args)
    model = model_from_checkpoint(args.checkpoint, config)
    dataset = _load_or_generate(config, args.data, args.split)
    metrics = evaluate(model, dataset)
    print(f"split={args.split} loss={metrics.loss:.4f} "
          f"acc={metrics.overall_accuracy:.4f} "
          f"mean_class_acc={metrics.mean_class_accuracy:.4f}")
    for name, value in zip(dataset.class_names, metrics.per_class_accuracy):
        print(f"  {name}: {value:.4f}")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.per_class_bars(metrics.per_class_accuracy, dataset.class_names,
                              out / "per_class.png")
    return 0


def _parse_grid_values(key: str, spec: str) -> list[str]:
    """Expand one grid entry: a bare value, v1,v2,..., or inclusive a:b:step."""
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise UsageError(f"--grid {key}: ranges look like start:stop:step, got {spec!r}")
        integral = all("." not in p and "e" not in p.lower() for p in parts)
        start, stop, step = (float(p) for p in parts)
        if step <= 0:
            raise UsageError(f"--grid {key}: step must be positive")
        values = []
        i = 0
        while start + i * step <= stop + 1e-9:
            v = start + i * step
            values.append(str(int(round(v))) if integral else repr(round(v, 12)))
            i += 1
        return values
    return spec.split(",")


def _cmd_sweep(args) -> int:
    base = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keys: list[str] = []
    value_lists: list[list[str]] = []
    for item in args.grid:
        if "=" not in item:
            raise UsageError(f"--grid entries look like KEY=SPEC, got {item!r}")
        key, spec = item.split("=", 1)
        parse_assignments([f"{key}={spec.split(',')[0].split(':')[0]}"])  # key check
        keys.append(key)
        value_lists.append(_parse_grid_values(key, spec))
    swept = [k for k, vals in zip(keys, value_lists) if len(vals) > 1]

    rows: list[dict] = []
    for combo in itertools.product(*value_lists):
        assigned = parse_assignments([f"{k}={v}" for k, v in zip(keys, combo)])
        config = replace(base, **assigned).validate()
        train_data = _load_or_generate(config, None, "train")
        test_data = _load_or_generate(config, None, "test")
        result = train(config, train_data, test_data)
        row = {k: getattr(config, k) for k in keys}
        row.update(train_loss=result.history[-1].train_loss if result.history else float("nan"),
                   train_acc=result.history[-1].train_acc if result.history else float("nan"),
                   test_acc=result.final.overall_accuracy,
                   mean_class_acc=result.final.mean_class_accuracy)
        rows.append(row)
        print("  ".join(f"{k}={row[k]}" for k in keys)
              + f"  test_acc={row['test_acc']:.4f}")

    columns = keys + ["train_loss", "train_acc", "test_acc", "mean_class_acc"]
    with open(out / "results.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                             for c in columns])
    if swept and len(swept) <= 2:
        report.sweep_figure(rows, swept, "test_acc", out / "sweep.png")
    print(f"{len(rows)} runs; results in {out / 'results.csv'}")
    return 0


def _cmd_visualize(args) -> int:
    if not Path(args.checkpoint).exists():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    config = _config_near_checkpoint(args)
    model = model_from_checkpoint(args.checkpoint, config)
    dataset = _load_or_generate(config, args.data, "test")
    count = min(args.count, len(dataset.labels))
    images = dataset.images[:count]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    batches = [images] if args.mode == "batch" else [images[i:i + 1] for i in range(count)]
    collected_attn: list[np.ndarray] = []
    collected_maps: list[np.ndarray] = []
    branch_maps: list[list[np.ndarray]] = []
    for batch in batches:
        collect: dict = {}
        model.forward(batch, Mode.INFERENCE, collect=collect)
        stacked = np.stack(collect["attention"], axis=0)  # (blocks, n, k, N, N)
        for s in range(batch.shape[0]):
            collected_attn.append(stacked[:, s])
        fused = None
        if collect["local_maps"]:
            fused = np.max(np.stack(collect["local_maps"], axis=0), axis=0)
            branch_maps.append(collect["local_maps"])
        for s in range(batch.shape[0]):
            collected_maps.append(fused[s] if fused is not None else None)
    if branch_maps:
        per_branch = [np.concatenate([chunk[b] for chunk in branch_maps], axis=0)
                      for b in range(len(branch_maps[0]))]
        export_attention_maps(per_branch, out, prefix="branch")

    panels = []
    titles = []
    for i in range(count):
        heatmap = attention_rollout(list(collected_attn[i]), args.head_agg)
        panel = render_heatmap(heatmap, images[i], out / f"rollout_{i:03d}.ppm")
        panels.append(panel)
        titles.append(f"{dataset.class_names[dataset.labels[i]]}")
        if collected_maps[i] is not None:
            composite_with_local_map(heatmap, collected_maps[i], images[i],
                                     out / f"rollout_mout_{i:03d}.ppm")
        if args.dump_raw:
            save_tensor(out / f"rollout_{i:03d}.tft", heatmap.scores)
    report.heatmap_montage(panels, out / "heatmaps.png", titles=titles)
    print(f"{count} heatmaps in {out}")
    return 0


# -- driver --------------------------------------------------------------------

def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except ConfigKeyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except (MadvitError, OSError) as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {message}", file=sys.stderr)
        return 1
