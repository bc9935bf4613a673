"""Objective assembly, optimizers, the epoch loop, and checkpointing.

The objective is

    mean cross-entropy
    + lambda_t * batch-mean spike penalty        (lambda_t linearly ramped)
    + lambda_WD * (sum ||W||^2 + B_BN * sum ||W_BN||^2)

built on a single tape so one backward pass serves all three parts; the
penalty reaches the weights only through the spike nodes' surrogate rule.
Checkpoints are a small versioned binary container (magic, version, named
tensor table) holding parameters, optimizer state, and RNG states so a
restored run continues bit-for-bit.
"""

from __future__ import annotations

import contextlib
import json
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .architectures import ModelState, NetworkGraph, SynapseTable, forward, init_params, penalty_constants, synapse_counts
from .data import ChannelStats, Dataset, augment_batch, encode
from .energy import SpikeStats, energy
from .errors import FormatError, NumericError, ParameterError
from .penalty import PenaltyConfig, applied_lambda, layer_weights, schedule_lambda
from .spiking import SpikeRecord, SurrogateKind


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"  # adam | msgd
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    bn_weight_decay: int = 0
    batch_size: int = 100
    epochs: int = 150
    seed: int = 0
    surrogate: SurrogateKind = field(default_factory=SurrogateKind)
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_min: float = 0.0
    precision: str = "float32"
    augment: bool = False
    flip: bool = False
    threads: Optional[int] = None

    def __post_init__(self):
        if self.optimizer not in ("adam", "msgd"):
            raise ParameterError(f"optimizer must be 'adam' or 'msgd', got {self.optimizer!r}")
        if self.bn_weight_decay not in (0, 1):
            raise ParameterError(f"bn_weight_decay must be 0 or 1, got {self.bn_weight_decay}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        if self.precision not in ("float32", "float64"):
            raise ParameterError(f"precision must be float32 or float64, got {self.precision!r}")


def cosine_lr(epoch: int, t_max: int, eta_max: float, eta_min: float = 0.0) -> float:
    """Cosine annealing from eta_max at epoch 0 to eta_min at epoch t_max."""
    if not 0 <= epoch <= t_max:
        raise ParameterError(f"epoch {epoch} outside [0, {t_max}]")
    return eta_min + (eta_max - eta_min) * (1.0 + np.cos(np.pi * epoch / t_max)) / 2.0


# ---------------------------------------------------------------------------
# optimizers


class AdamState:
    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0


class MomentumState:
    def __init__(self):
        self.velocity: dict[str, np.ndarray] = {}


def adam_step(named_params, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update over (name, tensor) pairs with grads."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def msgd_step(named_params, state: MomentumState, lr, momentum=0.9):
    """Classical momentum SGD: v <- mu*v + g; w <- w - lr*v."""
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        v = state.velocity.setdefault(name, np.zeros_like(p.data))
        v *= momentum
        v += g
        p.data -= lr * v


# ---------------------------------------------------------------------------
# objective


def objective(
    tape: T.Tape,
    graph: NetworkGraph,
    state: ModelState,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    table: SynapseTable,
    lam_t: float,
    dropout_rng: Optional[np.random.Generator] = None,
) -> tuple[T.Tensor, dict, SpikeRecord]:
    """Assemble loss = CE + lam_t * penalty + weight decay on one tape."""
    record = SpikeRecord()
    logits, spikes = forward(
        graph, state, x, cfg.surrogate, mode="train", tape=tape, record=record, rng=dropout_rng
    )
    ce = T.softmax_cross_entropy(tape, logits, y)
    terms = [ce]
    coeffs = [1.0]

    penalty_value = 0.0
    if lam_t > 0.0:
        batch = x.shape[0]
        weights = layer_weights(table, cfg.penalty.kind)
        for w, s in zip(weights, spikes):
            term = T.sum_all(tape, s) if cfg.penalty.p == 1 else T.sum_all(tape, T.square(tape, s))
            c = lam_t * w / (cfg.penalty.p * batch)
            terms.append(term)
            coeffs.append(c)
            penalty_value += c * float(term.data)

    wd_value = 0.0
    if cfg.weight_decay > 0.0:
        decayed = list(state.weight_tensors())
        if cfg.bn_weight_decay:
            decayed.extend(state.bn_affine_tensors())
        for w in decayed:
            term = T.sum_all(tape, T.square(tape, w))
            terms.append(term)
            coeffs.append(cfg.weight_decay)
            wd_value += cfg.weight_decay * float(term.data)

    loss = T.scalar_mix(tape, terms, coeffs)
    parts = {"ce": float(ce.data), "penalty": penalty_value, "wd": wd_value}
    return loss, parts, record


# ---------------------------------------------------------------------------
# evaluation


def evaluate(
    graph: NetworkGraph,
    state: ModelState,
    surrogate: SurrogateKind,
    images: np.ndarray,
    labels: np.ndarray,
    batch_size: int = 100,
    table: Optional[SynapseTable] = None,
) -> tuple[float, Optional[SpikeStats]]:
    """Accuracy (and spike statistics if a table is given) in eval mode."""
    stats = SpikeStats(table) if table is not None else None
    correct = 0
    n = images.shape[0]
    for start in range(0, n, batch_size):
        xb = images[start : start + batch_size]
        yb = labels[start : start + batch_size]
        record = SpikeRecord() if stats is not None else None
        logits, _ = forward(graph, state, xb, surrogate, mode="eval", record=record)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
        if stats is not None:
            stats.update(record)
    return correct / n, stats


# ---------------------------------------------------------------------------
# checkpoint container

CHECKPOINT_MAGIC = b"SPKC"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {"float32": 0, "float64": 1, "int64": 2, "uint8": 3}
_CODE_DTYPES = {v: np.dtype(k) for k, v in _DTYPE_CODES.items()}


def _write_container(path: str, entries: dict[str, np.ndarray]):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        for name, arr in entries.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype.name not in _DTYPE_CODES:
                raise FormatError(f"unsupported checkpoint dtype {arr.dtype} for {name}")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype.name], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_container(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        entries = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", f.read(2))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim)) if ndim else ()
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
            raw = f.read(nbytes)
            if len(raw) != nbytes:
                raise FormatError(f"{path}: truncated entry {name}")
            entries[name] = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
        return entries


def _state_entries(prefix: str, state: ModelState) -> dict[str, np.ndarray]:
    out = {}
    for nid, t in state.weights.items():
        out[f"{prefix}w/{nid}"] = t.data
    for nid, t in state.bn_gamma.items():
        out[f"{prefix}bn_gamma/{nid}"] = t.data
        out[f"{prefix}bn_beta/{nid}"] = state.bn_beta[nid].data
        out[f"{prefix}bn_mean/{nid}"] = state.bn_running[nid].running_mean
        out[f"{prefix}bn_var/{nid}"] = state.bn_running[nid].running_var
    return out


def _state_from_entries(prefix: str, entries: dict[str, np.ndarray], dtype) -> ModelState:
    state = ModelState(dtype)
    for name, arr in entries.items():
        if not name.startswith(prefix):
            continue
        tail = name[len(prefix) :]
        kind, _, nid_s = tail.partition("/")
        if "/" in nid_s or not nid_s.isdigit():
            continue
        nid = int(nid_s)
        if kind == "w":
            state.weights[nid] = T.Tensor(arr.copy(), requires_grad=True)
        elif kind == "bn_gamma":
            state.bn_gamma[nid] = T.Tensor(arr.copy(), requires_grad=True)
        elif kind == "bn_beta":
            state.bn_beta[nid] = T.Tensor(arr.copy(), requires_grad=True)
    for name, arr in entries.items():
        if name.startswith(f"{prefix}bn_mean/"):
            nid = int(name.rsplit("/", 1)[1])
            bns = T.BatchNormState(arr.shape[0], dtype=arr.dtype)
            bns.running_mean[:] = arr
            bns.running_var[:] = entries[f"{prefix}bn_var/{nid}"]
            state.bn_running[nid] = bns
    return state


def save_checkpoint(
    path: str,
    state: ModelState,
    cfg: TrainConfig,
    epoch: int,
    opt_state,
    rng_states: dict,
    best_state: Optional[ModelState] = None,
    best_epoch: int = -1,
    best_val: float = 0.0,
):
    entries = _state_entries("", state)
    if best_state is not None:
        entries.update(_state_entries("best/", best_state))
    if isinstance(opt_state, AdamState):
        for name, arr in opt_state.m.items():
            entries[f"opt/m/{name}"] = arr
        for name, arr in opt_state.v.items():
            entries[f"opt/v/{name}"] = arr
        opt_meta = {"kind": "adam", "t": opt_state.t}
    else:
        for name, arr in opt_state.velocity.items():
            entries[f"opt/vel/{name}"] = arr
        opt_meta = {"kind": "msgd"}
    meta = {
        "epoch": epoch,
        "optimizer": opt_meta,
        "rng": rng_states,
        "best_epoch": best_epoch,
        "best_val": best_val,
        "has_best": best_state is not None,
        "dtype": str(np.dtype(cfg.precision)),
    }
    entries["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    _write_container(path, entries)


def load_checkpoint(path: str):
    """Returns (state, best_state, opt_state, meta)."""
    entries = _read_container(path)
    if "__meta__" not in entries:
        raise FormatError(f"{path}: checkpoint missing metadata entry")
    meta = json.loads(entries["__meta__"].tobytes().decode("utf-8"))
    dtype = np.dtype(meta.get("dtype", "float32"))
    state = _state_from_entries("", entries, dtype)
    best_state = _state_from_entries("best/", entries, dtype) if meta.get("has_best") else None
    if meta["optimizer"]["kind"] == "adam":
        opt = AdamState()
        opt.t = meta["optimizer"]["t"]
        for name, arr in entries.items():
            if name.startswith("opt/m/"):
                opt.m[name[len("opt/m/") :]] = arr.copy()
            elif name.startswith("opt/v/"):
                opt.v[name[len("opt/v/") :]] = arr.copy()
    else:
        opt = MomentumState()
        for name, arr in entries.items():
            if name.startswith("opt/vel/"):
                opt.velocity[name[len("opt/vel/") :]] = arr.copy()
    return state, best_state, opt, meta


# ---------------------------------------------------------------------------
# the epoch loop


@dataclass
class TrainResult:
    final_state: ModelState
    best_state: ModelState
    best_epoch: int
    best_val_accuracy: float
    log: list[dict]
    failed: bool
    epochs_run: int


LOG_COLUMNS = (
    "epoch", "lr", "lambda_applied", "train_loss", "train_ce", "train_penalty",
    "train_wd", "val_accuracy", "e_snn_pj", "firing_rate", "dead_rate",
)


def _rng_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    gen = np.random.default_rng(0)
    gen.bit_generator.state = state
    return gen


def train(
    graph: NetworkGraph,
    train_ds: Dataset,
    val_ds: Dataset,
    stats: ChannelStats,
    cfg: TrainConfig,
    table: Optional[SynapseTable] = None,
    resume: Optional[str] = None,
    checkpoint_path: Optional[str] = None,
) -> TrainResult:
    """Run the training loop; deterministic for a fixed seed and thread count.

    Divergence (non-finite loss or gradient) marks the run failed and stops,
    keeping the partial log. The best-validation-accuracy parameters are
    snapshotted and returned alongside the final ones.
    """
    if table is None:
        table = synapse_counts(graph)
    constants = penalty_constants(table)
    lam_full = applied_lambda(cfg.penalty, constants)
    dtype = np.dtype(cfg.precision)

    seq = np.random.SeedSequence(cfg.seed)
    init_seed, shuffle_seed, dropout_seed, augment_seed = seq.spawn(4)
    if resume is not None:
        state, best_state, opt_state, meta = load_checkpoint(resume)
        start_epoch = meta["epoch"]
        best_epoch = meta["best_epoch"]
        best_val = meta["best_val"]
        if best_state is None:
            best_state = state.copy()
        shuffle_rng = _restore_rng(meta["rng"]["shuffle"])
        dropout_rng = _restore_rng(meta["rng"]["dropout"])
        augment_rng = _restore_rng(meta["rng"]["augment"])
    else:
        state = init_params(graph, np.random.default_rng(init_seed), dtype=dtype)
        opt_state = AdamState() if cfg.optimizer == "adam" else MomentumState()
        start_epoch = 0
        best_epoch = -1
        best_val = -1.0
        best_state = state.copy()
        shuffle_rng = np.random.default_rng(shuffle_seed)
        dropout_rng = np.random.default_rng(dropout_seed)
        augment_rng = np.random.default_rng(augment_seed)

    val_x = encode(val_ds.images, stats).astype(dtype, copy=False)
    val_y = val_ds.labels
    log: list[dict] = []
    failed = False
    n = len(train_ds)

    limits = contextlib.nullcontext()
    if cfg.threads is not None:
        from threadpoolctl import threadpool_limits

        limits = threadpool_limits(limits=cfg.threads)

    epochs_run = start_epoch
    with limits:
        for epoch in range(start_epoch, cfg.epochs):
            lr = cosine_lr(epoch, cfg.epochs, cfg.learning_rate, cfg.lr_min)
            lam_t = schedule_lambda(lam_full, epoch, cfg.epochs) if lam_full > 0 else 0.0
            perm = shuffle_rng.permutation(n)
            sum_loss = sum_ce = sum_pen = sum_wd = 0.0
            batches = 0
            for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                xb = train_ds.images[idx]
                if cfg.augment:
                    xb = augment_batch(xb, augment_rng, mode="train", flip=cfg.flip)
                xb = encode(xb, stats).astype(dtype, copy=False)
                yb = train_ds.labels[idx]

                tape = T.Tape()
                loss, parts, _ = objective(
                    tape, graph, state, xb, yb, cfg, table, lam_t, dropout_rng=dropout_rng
                )
                if not np.isfinite(loss.data):
                    failed = True
                    break
                for _, p in state.trainables():
                    p.zero_grad()
                T.backward(tape, loss)
                try:
                    if cfg.optimizer == "adam":
                        adam_step(state.trainables(), opt_state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
                    else:
                        msgd_step(state.trainables(), opt_state, lr, cfg.momentum)
                except NumericError:
                    failed = True
                    break
                sum_loss += float(loss.data)
                sum_ce += parts["ce"]
                sum_pen += parts["penalty"]
                sum_wd += parts["wd"]
                batches += 1

            if batches == 0 and failed:
                break

            val_acc, spike_stats = evaluate(
                graph, state, cfg.surrogate, val_x, val_y, cfg.batch_size, table=table
            )
            report = energy(spike_stats)
            row = {
                "epoch": epoch,
                "lr": float(lr),
                "lambda_applied": float(lam_t),
                "train_loss": sum_loss / max(batches, 1),
                "train_ce": sum_ce / max(batches, 1),
                "train_penalty": sum_pen / max(batches, 1),
                "train_wd": sum_wd / max(batches, 1),
                "val_accuracy": float(val_acc),
                "e_snn_pj": float(report.e_total_pj),
                "firing_rate": float(report.r_total),
                "dead_rate": float(report.dead_rate),
            }
            log.append(row)
            if val_acc > best_val:
                best_val = val_acc
                best_epoch = epoch
                best_state = state.copy()
            epochs_run = epoch + 1
            if failed:
                break

    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path,
            state,
            cfg,
            epochs_run,
            opt_state,
            {
                "shuffle": _rng_state(shuffle_rng),
                "dropout": _rng_state(dropout_rng),
                "augment": _rng_state(augment_rng),
            },
            best_state=best_state,
            best_epoch=best_epoch,
            best_val=best_val,
        )
    return TrainResult(
        final_state=state,
        best_state=best_state,
        best_epoch=best_epoch,
        best_val_accuracy=max(best_val, 0.0),
        log=log,
        failed=failed,
        epochs_run=epochs_run,
    )
