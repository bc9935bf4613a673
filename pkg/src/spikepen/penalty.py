"""Spike-activity penalty terms: forward values, backward masks, scheduling.

Three penalty kinds weight each spike differently:

* ``syn``     — by the neuron's outgoing synapse count (psi);
* ``total``   — by 1 (a plain spike count);
* ``balance`` — by 1/d_l, so every layer contributes equally.

All kinds carry an exponent p in {1, 2} and are averaged over the batch.
On binary spikes s^p = s, so p only changes the leading 1/p factor forward;
backward, p > 1 silences the gradient below threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .architectures import SynapseTable
from .errors import ConfigError, ParameterError, StateError
from .spiking import SpikeRecord, SurrogateKind, spike_forward, surrogate_grad

PENALTY_KINDS = ("syn", "total", "balance")


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty kind, exponent, and intensity.

    ``lam`` is the user-facing intensity. With ``normalized`` set (the
    default) it is interpreted as the normalized intensity and divided by the
    kind's all-fire constant before entering the objective; otherwise it is
    applied raw.
    """

    kind: str = "syn"
    p: int = 1
    lam: float = 0.0
    normalized: bool = True

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise ParameterError(f"unknown penalty kind {self.kind!r}, expected one of {PENALTY_KINDS}")
        if self.p not in (1, 2):
            raise ParameterError(f"penalty exponent must be 1 or 2, got {self.p}")
        if self.lam < 0:
            raise ParameterError(f"penalty intensity must be non-negative, got {self.lam}")


def layer_weights(table: SynapseTable, kind: str) -> np.ndarray:
    """Per-layer spike weight: psi, 1, or 1/d depending on the kind."""
    if kind == "syn":
        return table.psi.astype(np.float64)
    if kind == "total":
        return np.ones(len(table), dtype=np.float64)
    if kind == "balance":
        return 1.0 / table.d.astype(np.float64)
    raise ParameterError(f"unknown penalty kind {kind!r}")


def _check_alignment(record: SpikeRecord, table: SynapseTable):
    if len(record) != len(table):
        raise StateError(
            f"spike record has {len(record)} layers but the synapse table has {len(table)}"
        )


def penalty_forward(record: SpikeRecord, table: SynapseTable, cfg: PenaltyConfig) -> float:
    """Penalty value averaged over the batch dimension of the record."""
    _check_alignment(record, table)
    if not record.spikes:
        return 0.0
    batch = record.spikes[0].shape[0]
    weights = layer_weights(table, cfg.kind)
    total = 0.0
    for w, s in zip(weights, record.spikes):
        # binary spikes: s**p == s for p in {1, 2}
        total += w * float(s.sum(dtype=np.float64))
    return total / (cfg.p * batch)


def penalty_backward(
    record: SpikeRecord,
    table: SynapseTable,
    cfg: PenaltyConfig,
    potentials: list[np.ndarray],
    kind: SurrogateKind,
) -> list[np.ndarray]:
    """Per-layer d(penalty)/d(membrane potential), surrogate-relaxed.

    The elementwise factor is s^(p-1) * ds/du: for p=1 the surrogate applies
    everywhere; for p=2 the gradient is exactly zero below threshold. Layer
    weights and the batch mean are included, the intensity lambda is not.
    """
    _check_alignment(record, table)
    if len(potentials) != len(table):
        raise StateError(
            f"{len(potentials)} potential arrays supplied for {len(table)} spiking layers"
        )
    batch = record.spikes[0].shape[0] if record.spikes else 1
    weights = layer_weights(table, cfg.kind)
    grads = []
    for w, s, u in zip(weights, record.spikes, potentials):
        g = surrogate_grad(kind, u)
        if cfg.p == 2:
            g = g * spike_forward(np.asarray(u, dtype=g.dtype), kind.u_th)
        grads.append((w / batch) * g)
    return grads


def normalize_lambda(lam: float, omega_all_fire: float) -> float:
    """Applied coefficient for a normalized intensity: lam / all-fire total."""
    if omega_all_fire <= 0:
        raise ConfigError(f"all-fire penalty constant must be positive, got {omega_all_fire}")
    return lam / omega_all_fire


def applied_lambda(cfg: PenaltyConfig, constants: tuple[int, int, int]) -> float:
    """Raw coefficient entering the objective for this penalty config."""
    if not cfg.normalized or cfg.lam == 0.0:
        return cfg.lam
    omega = dict(zip(PENALTY_KINDS, constants))[cfg.kind]
    return normalize_lambda(cfg.lam, omega)


def schedule_lambda(lam_applied: float, epoch: int, total_epochs: int) -> float:
    """Linear ramp: fraction (epoch+1)/total_epochs of the full coefficient."""
    if total_epochs <= 0:
        raise ParameterError(f"total_epochs must be positive, got {total_epochs}")
    if not 0 <= epoch < total_epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {total_epochs})")
    return lam_applied * (epoch + 1) / total_epochs
