"""Command-line experiment runner.

Subcommands:

* ``constants`` — print all-fire penalty totals and the per-layer ratio CSV;
* ``train``     — train one model per (intensity, seed) and write artifacts;
* ``sweep``     — run an intensity grid, normalize by the zero baseline, and
                  write the trade-off CSV;
* ``metrics``   — compute AUC/Spearman/MI summaries from a trade-off CSV.

Experiments are configured by a plain ``key = value`` file plus flag
overrides; hyperparameter presets for the stock architecture/optimizer
combinations are built in.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields, replace

from .architectures import VGG11_POOLS_ALT, VGG11_POOLS_DEFAULT
from .errors import ConfigError, SpikepenError
from .experiment import (
    DEFAULT_LAMBDA_SWEEP,
    ExperimentConfig,
    all_fire_summary,
    normalize_energy,
    run_grid,
    run_sweep,
)
from .tradeoff import read_records_csv, summary, write_records_csv, write_summary_csv

# Stock hyperparameter presets: architecture/optimizer/surrogate rows.
PRESETS = {
    "cnn7-adam": dict(architecture="cnn7", optimizer="adam", surrogate="s3nn",
                      learning_rate=1e-3, weight_decay=1e-4, bn_weight_decay=0, alpha=0.25, tau=0.6),
    "cnn7-adam-triangle": dict(architecture="cnn7", optimizer="adam", surrogate="triangle",
                               learning_rate=1e-3, weight_decay=1e-6, bn_weight_decay=0),
    "cnn7-adam-sigmoid": dict(architecture="cnn7", optimizer="adam", surrogate="scaled_sigmoid",
                              learning_rate=1e-2, weight_decay=1e-7, bn_weight_decay=0, alpha=0.45),
    "cnn7-msgd": dict(architecture="cnn7", optimizer="msgd", surrogate="s3nn",
                      learning_rate=1e-2, weight_decay=1e-4, bn_weight_decay=0, alpha=0.35, tau=0.6),
    "vgg11-adam": dict(architecture="vgg11", optimizer="adam", surrogate="s3nn",
                       learning_rate=1e-3, weight_decay=1e-3, bn_weight_decay=0, alpha=0.25, tau=0.6),
    "vgg11-msgd": dict(architecture="vgg11", optimizer="msgd", surrogate="s3nn",
                       learning_rate=1e-2, weight_decay=1e-3, bn_weight_decay=0, alpha=0.35, tau=0.8),
    "resnet18-adam": dict(architecture="resnet18", optimizer="adam", surrogate="s3nn",
                          learning_rate=1e-3, weight_decay=1e-4, bn_weight_decay=0, alpha=0.35, tau=1.0),
    "resnet18-msgd": dict(architecture="resnet18", optimizer="msgd", surrogate="s3nn",
                          learning_rate=1e-2, weight_decay=1e-3, bn_weight_decay=0, alpha=0.35, tau=1.0),
}

_TUPLE_FIELDS = {"lambdas", "seeds"}
_CONFIG_FIELDS = {f.name: f.type for f in fields(ExperimentConfig)}


def parse_config_file(path: str) -> dict:
    """Parse ``key = value`` lines; values are JSON literals or bare strings."""
    out = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = _parse_value(key.strip(), value.strip())
    return out


def _parse_value(key: str, value: str):
    if key in _TUPLE_FIELDS:
        return tuple(float(v) if key == "lambdas" else int(v) for v in value.replace(",", " ").split())
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def _build_experiment_config(args) -> ExperimentConfig:
    settings: dict = {}
    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; available: {', '.join(sorted(PRESETS))}")
        settings.update(PRESETS[args.preset])
    if args.config:
        file_settings = parse_config_file(args.config)
        unknown = set(file_settings) - set(_CONFIG_FIELDS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        settings.update(file_settings)
    for name in _CONFIG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            settings[name] = value
    cfg = ExperimentConfig(**settings)
    if not cfg.lambdas:
        raise ConfigError("at least one penalty intensity is required")
    return cfg


def _add_experiment_flags(p: argparse.ArgumentParser):
    p.add_argument("-c", "--config", help="key = value experiment config file")
    p.add_argument("--preset", help=f"hyperparameter preset ({', '.join(sorted(PRESETS))})")
    p.add_argument("--architecture", choices=("cnn7", "vgg11", "resnet18"))
    p.add_argument("--dataset", choices=("fashion_mnist", "cifar10", "cifar100"))
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--optimizer", choices=("adam", "msgd"))
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--bn-weight-decay", dest="bn_weight_decay", type=int, choices=(0, 1))
    p.add_argument("--surrogate", choices=("s3nn", "triangle", "scaled_sigmoid"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--penalty", choices=("syn", "total", "balance"))
    p.add_argument("-p", "--exponent", dest="p", type=int, choices=(1, 2))
    p.add_argument("--raw-lambda", dest="normalized", action="store_const", const=False,
                   help="treat intensities as raw coefficients instead of normalized ones")
    p.add_argument("--lambdas", type=_lambda_list,
                   help="comma-separated intensities, or 'default' for the stock 14-value sweep")
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--augment", action="store_const", const=True)
    p.add_argument("--train-subset", dest="train_subset", type=int)
    p.add_argument("--eval-subset", dest="eval_subset", type=int)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--threads", type=int)


def _lambda_list(text: str) -> tuple[float, ...]:
    if text.strip().lower() == "default":
        return tuple(float(v) for v in DEFAULT_LAMBDA_SWEEP)
    return tuple(float(v) for v in text.replace(",", " ").split())


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = [int(v) for v in text.lower().replace("x", " ").replace(",", " ").split()]
    if len(parts) != 3:
        raise ConfigError(f"input shape must have three extents, got {text!r}")
    return tuple(parts)  # type: ignore[return-value]


def _cmd_constants(args) -> int:
    names = ("cnn7", "vgg11", "resnet18") if args.architecture == "all" else (args.architecture,)
    ratio_rows = []
    for name in names:
        shape = _parse_shape(args.input_shape) if args.input_shape else None
        pools = _int_list(args.vgg_pools) if (name == "vgg11" and args.vgg_pools) else None
        info = all_fire_summary(name, shape, num_classes=args.classes, vgg_pools=pools)
        shape_s = "x".join(str(v) for v in info["input_shape"])
        pool_s = f" pools={info['pools']}" if info["pools"] else ""
        print(
            f"{name} ({shape_s}){pool_s}: omega_syn={info['omega_syn']} "
            f"omega_total={info['omega_total']} omega_balance={info['omega_balance']}"
        )
        if name == "vgg11" and pools is None:
            alt = all_fire_summary(name, shape, num_classes=args.classes, vgg_pools=VGG11_POOLS_ALT)
            print(
                f"  note: pooling placement changes the totals; with pools after convs "
                f"{VGG11_POOLS_ALT}: omega_syn={alt['omega_syn']} omega_total={alt['omega_total']} "
                f"omega_balance={alt['omega_balance']} (default placement {VGG11_POOLS_DEFAULT} is canonical)"
            )
        if name == "cnn7":
            print("  note: cnn7 totals are reported as computed from this layer geometry")
        ratios = info["ratios"]
        for i in range(len(info["table"])):
            ratio_rows.append(
                {
                    "architecture": name,
                    "layer": i,
                    "flops_ratio": repr(float(ratios["flops"][i])),
                    "syn_ratio": repr(float(ratios["syn"][i])),
                    "total_ratio": repr(float(ratios["total"][i])),
                    "balance_ratio": repr(float(ratios["balance"][i])),
                }
            )
    if args.ratios_csv:
        with open(args.ratios_csv, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(ratio_rows[0].keys()))
            writer.writeheader()
            writer.writerows(ratio_rows)
        print(f"wrote per-layer ratios to {args.ratios_csv}")
    return 0


def _cmd_train(args) -> int:
    cfg = _build_experiment_config(args)
    records = run_grid(cfg, include_baseline=False)
    if any(r.lambda_prime == 0.0 and r.valid for r in records):
        records = normalize_energy(records)
    import os

    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, "runs.csv")
    write_records_csv(path, records)
    for r in records:
        status = "ok" if r.valid else "FAILED"
        print(
            f"lambda'={r.lambda_prime:g} seed={r.seed}: accuracy={r.accuracy:.4f} "
            f"e_snn={r.e_snn_pj:.6g} pJ dead_rate={r.dead_rate:.4f} R={r.firing_rate:.4f} [{status}]"
        )
    print(f"wrote {path}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _build_experiment_config(args)
    if args.lambdas is None and cfg.lambdas == (0.0,):
        cfg = replace(cfg, lambdas=tuple(float(v) for v in DEFAULT_LAMBDA_SWEEP))
    records, path = run_sweep(cfg)
    n_fail = sum(not r.valid for r in records)
    print(f"swept {len(records)} runs ({n_fail} failed); wrote {path}")
    return 0


def _cmd_metrics(args) -> int:
    records = read_records_csv(args.input)
    if not records:
        raise ConfigError(f"{args.input} contains no runs")
    cutoffs = tuple(int(v) for v in args.cutoffs.replace(",", " ").split())
    row = summary(records, cutoffs=cutoffs)
    write_summary_csv(args.output, [row])
    print(",".join(row.keys()))
    print(",".join(f"{v:.4f}" for v in row.values()))
    print(f"wrote {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spikepen", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("constants", help="print all-fire penalty totals per architecture")
    p.add_argument("-a", "--architecture", default="all", choices=("cnn7", "vgg11", "resnet18", "all"))
    p.add_argument("--input-shape", help="CxHxW, e.g. 3x32x32")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--vgg-pools", help="conv indices followed by a pool, e.g. 1,3,5,6")
    p.add_argument("--ratios-csv", help="write the per-layer ratio table here")
    p.set_defaults(func=_cmd_constants)

    p = sub.add_parser("train", help="train one model per (intensity, seed)")
    _add_experiment_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sweep", help="run an intensity sweep and write tradeoff.csv")
    _add_experiment_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("metrics", help="summarize a tradeoff.csv into curve metrics")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", default="metrics.csv")
    p.add_argument("--cutoffs", default="70,50")
    p.set_defaults(func=_cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SpikepenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
