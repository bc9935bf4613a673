"""Experiment orchestration: single runs, intensity sweeps, artifacts.

One run = (penalty intensity, seed) -> trained model + per-epoch CSV log +
energy JSON + checkpoint + one outcome row. A sweep runs the intensity grid
(always including the zero-intensity baseline), normalizes each run's energy
by its seed-matched baseline, and writes the trade-off CSV consumed by the
curve metrics. Sweep entries are independent and may run in worker
processes; each run is internally deterministic.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .architectures import build, penalty_constants, synapse_counts
from .data import Dataset, channel_stats, encode, load_cifar, load_fashion_mnist, subset
from .energy import energy
from .errors import ConfigError, DataError
from .penalty import PenaltyConfig
from .spiking import SurrogateKind
from .tradeoff import RunRecord, write_records_csv
from .training import LOG_COLUMNS, TrainConfig, evaluate, train

DATASETS = ("fashion_mnist", "cifar10", "cifar100")

# default intensity grid for sweeps (the zero baseline is added on top)
DEFAULT_LAMBDA_SWEEP = (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096, 8192)


@dataclass(frozen=True)
class ExperimentConfig:
    architecture: str = "cnn7"
    dataset: str = "fashion_mnist"
    data_dir: str = "data"
    output_dir: str = "runs"
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    bn_weight_decay: int = 0
    surrogate: str = "s3nn"
    alpha: float = 0.25
    tau: float = 0.6
    threshold: float = 1.0
    penalty: str = "syn"
    p: int = 1
    normalized: bool = True
    lambdas: tuple[float, ...] = (0.0,)
    seeds: tuple[int, ...] = (0, 1, 2)
    epochs: int = 150
    batch_size: int = 100
    augment: bool = False
    train_subset: int = 0  # 0 = full split
    eval_subset: int = 0
    split_seed: int = 0
    workers: int = 1
    threads: int = 0  # 0 = leave BLAS threading alone

    def train_config(self, lam: float, seed: int) -> TrainConfig:
        return TrainConfig(
            optimizer=self.optimizer,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            bn_weight_decay=self.bn_weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=seed,
            surrogate=SurrogateKind(self.surrogate, alpha=self.alpha, tau=self.tau, u_th=self.threshold),
            penalty=PenaltyConfig(self.penalty, p=self.p, lam=lam, normalized=self.normalized),
            augment=self.augment,
            flip=self.dataset.startswith("cifar"),
            threads=self.threads or None,
        )


def load_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset, tuple, int]:
    """Returns (train, val, test, input_shape, num_classes) per the config.

    With subset sizes set, training uses a seeded subsample of the train
    split and a seeded subsample of the test split serves as both the
    validation and the evaluation set (the desk-scale protocol).
    """
    if cfg.dataset == "fashion_mnist":
        train_ds, val_ds, test_ds = load_fashion_mnist(cfg.data_dir, seed=cfg.split_seed)
        shape, classes = (1, 28, 28), 10
    elif cfg.dataset == "cifar10":
        train_ds, val_ds, test_ds = load_cifar(cfg.data_dir, 10, seed=cfg.split_seed)
        shape, classes = (3, 32, 32), 10
    elif cfg.dataset == "cifar100":
        train_ds, val_ds, test_ds = load_cifar(cfg.data_dir, 100, seed=cfg.split_seed)
        shape, classes = (3, 32, 32), 100
    else:
        raise ConfigError(f"unknown dataset {cfg.dataset!r}, expected one of {DATASETS}")
    if cfg.train_subset:
        train_ds = subset(train_ds, cfg.train_subset, seed=cfg.split_seed)
    if cfg.eval_subset:
        test_ds = subset(test_ds, cfg.eval_subset, seed=cfg.split_seed)
        val_ds = test_ds
    return train_ds, val_ds, test_ds, shape, classes


def run_tag(cfg: ExperimentConfig, lam: float, seed: int) -> str:
    return f"{cfg.penalty}_p{cfg.p}_lam{lam:g}_seed{seed}"


def _write_log_csv(path: str, log: list[dict]):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(LOG_COLUMNS))
        writer.writeheader()
        for row in log:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def run_single(cfg: ExperimentConfig, lam: float, seed: int) -> RunRecord:
    """Train one model and write its artifacts; returns the outcome row.

    Accuracy, energy, firing and dead rates are measured on the evaluation
    split with the best-validation parameters in eval mode.
    """
    train_ds, val_ds, test_ds, shape, classes = load_dataset(cfg)
    graph = build(cfg.architecture, shape, num_classes=classes)
    table = synapse_counts(graph)
    stats = channel_stats(train_ds)
    tcfg = cfg.train_config(lam, seed)

    out_dir = os.path.join(cfg.output_dir, run_tag(cfg, lam, seed))
    os.makedirs(out_dir, exist_ok=True)
    result = train(
        graph, train_ds, val_ds, stats, tcfg, table=table,
        checkpoint_path=os.path.join(out_dir, "checkpoint.bin"),
    )
    _write_log_csv(os.path.join(out_dir, "epochs.csv"), result.log)

    test_x = encode(test_ds.images, stats).astype(np.dtype(tcfg.precision), copy=False)
    accuracy, spike_stats = evaluate(
        graph, result.best_state, tcfg.surrogate, test_x, test_ds.labels, cfg.batch_size, table=table
    )
    report = energy(spike_stats)
    with open(os.path.join(out_dir, "energy.json"), "w") as f:
        f.write(report.to_json())

    return RunRecord(
        lambda_prime=lam,
        seed=seed,
        accuracy=accuracy,
        energy_rate=math.nan,  # filled in after baseline normalization
        dead_rate=report.dead_rate,
        firing_rate=report.r_total,
        e_snn_pj=report.e_total_pj,
        valid=not result.failed,
    )


def _worker(args) -> RunRecord:
    cfg, lam, seed = args
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=1):
            return run_single(cfg, lam, seed)
    except ImportError:
        return run_single(cfg, lam, seed)


def run_grid(cfg: ExperimentConfig, include_baseline: bool = True) -> list[RunRecord]:
    """Run every (intensity, seed) pair; rows come back in grid order."""
    lambdas = list(cfg.lambdas)
    if include_baseline and 0.0 not in lambdas:
        lambdas = [0.0] + lambdas
    jobs = [(replace(cfg, lambdas=tuple(lambdas)), lam, seed) for lam in lambdas for seed in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            records = list(pool.map(_worker, jobs))
    else:
        records = [run_single(c, lam, seed) for c, lam, seed in jobs]
    return records


def normalize_energy(records: list[RunRecord]) -> list[RunRecord]:
    """Fill energy_rate as each run's energy over its seed's zero-intensity baseline."""
    baselines = {r.seed: r.e_snn_pj for r in records if r.lambda_prime == 0.0 and r.valid}
    if not baselines:
        raise DataError("no successful zero-intensity baseline run to normalize against")
    out = []
    for r in records:
        base = baselines.get(r.seed)
        rate = r.e_snn_pj / base if base else math.nan
        out.append(replace_record(r, energy_rate=rate))
    return out


def replace_record(r: RunRecord, **kw) -> RunRecord:
    d = r.__dict__.copy()
    d.update(kw)
    return RunRecord(**d)


def run_sweep(cfg: ExperimentConfig) -> tuple[list[RunRecord], str]:
    """Full intensity sweep with baseline normalization; writes tradeoff.csv."""
    records = normalize_energy(run_grid(cfg, include_baseline=True))
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, "tradeoff.csv")
    write_records_csv(path, records)
    return records, path


def all_fire_summary(architecture: str, input_shape=None, num_classes: int = 10, vgg_pools=None) -> dict:
    """All-fire constants and per-layer ratio table for one architecture."""
    from .architectures import VGG11_POOLS_DEFAULT
    from .energy import layer_ratios

    kwargs = {}
    if vgg_pools is not None:
        kwargs["vgg_pools"] = tuple(vgg_pools)
    graph = build(architecture, input_shape, num_classes=num_classes, **kwargs)
    table = synapse_counts(graph)
    omega_syn, omega_total, omega_balance = penalty_constants(table)
    return {
        "architecture": architecture,
        "input_shape": graph.input_shape,
        "pools": tuple(kwargs.get("vgg_pools", VGG11_POOLS_DEFAULT)) if architecture == "vgg11" else None,
        "omega_syn": omega_syn,
        "omega_total": omega_total,
        "omega_balance": omega_balance,
        "ratios": layer_ratios(table),
        "table": table,
    }
