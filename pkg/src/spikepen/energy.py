"""Energy accounting for spiking activity.

Each emitted spike triggers one accumulate operation per outgoing synapse in
its consumer weight layer, so energy per layer is

    E(l) = T * E_AC * mean_over_samples( psi_l * number_of_spikes_in_layer_l )

with T = 1 for the single-step neuron model and E_AC = 0.9 pJ per accumulate.
Firing rates, the dead-neuron rate, and per-layer metric ratios share the
same per-sample spike statistics, accumulated batch by batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .architectures import SynapseTable
from .errors import DataError, DimensionError
from .spiking import SpikeRecord

ENERGY_PER_ACCUMULATE_PJ = 0.9
TIME_STEPS = 1


class SpikeStats:
    """Running spike statistics over an evaluation set, one batch at a time."""

    def __init__(self, table: SynapseTable):
        self.table = table
        self.n_samples = 0
        self.spike_sums = np.zeros(len(table), dtype=np.float64)
        self.ever_fired: list[Optional[np.ndarray]] = [None] * len(table)

    def update(self, record: SpikeRecord):
        if len(record) != len(self.table):
            raise DimensionError(
                f"record has {len(record)} layers, synapse table has {len(self.table)}"
            )
        if not record.spikes:
            return
        batch = record.spikes[0].shape[0]
        self.n_samples += batch
        for i, s in enumerate(record.spikes):
            self.spike_sums[i] += float(s.sum(dtype=np.float64))
            fired = s.any(axis=0)
            if self.ever_fired[i] is None:
                self.ever_fired[i] = fired
            else:
                self.ever_fired[i] |= fired


@dataclass
class EnergyReport:
    """Per-layer and total energy, firing rates, and optional derived rates."""

    e_layer_pj: list[float]
    e_total_pj: float
    r_layer: list[float]
    r_total: float
    dead_rate: Optional[float] = None
    energy_rate: Optional[float] = None  # vs a baseline run's total energy
    n_samples: int = 0

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(
            {
                "e_total_pj": self.e_total_pj,
                "e_layer_pj": self.e_layer_pj,
                "r_total": self.r_total,
                "r_layer": self.r_layer,
                "dead_rate": self.dead_rate,
                "energy_rate": self.energy_rate,
                "n_samples": self.n_samples,
            },
            indent=indent,
        )

    @staticmethod
    def from_json(text: str) -> "EnergyReport":
        d = json.loads(text)
        return EnergyReport(
            e_layer_pj=d["e_layer_pj"],
            e_total_pj=d["e_total_pj"],
            r_layer=d["r_layer"],
            r_total=d["r_total"],
            dead_rate=d.get("dead_rate"),
            energy_rate=d.get("energy_rate"),
            n_samples=d.get("n_samples", 0),
        )

    def csv_rows(self) -> list[dict]:
        rows = []
        for i, (e, r) in enumerate(zip(self.e_layer_pj, self.r_layer)):
            rows.append({"layer": i, "e_pj": e, "firing_rate": r})
        return rows


def flops(table: SynapseTable, layer: int) -> float:
    """Accumulate-operation count of one spiking layer at full activity."""
    return float(table.d[layer] * table.psi[layer])


def flops_per_layer(table: SynapseTable) -> np.ndarray:
    return table.d.astype(np.float64) * table.psi


def firing_rates(stats: SpikeStats) -> tuple[np.ndarray, float]:
    """Per-layer mean fraction of fired neurons, and its sum over layers."""
    if stats.n_samples == 0:
        raise DataError("firing rates need at least one sample")
    r_layer = stats.spike_sums / (stats.n_samples * stats.table.d.astype(np.float64))
    return r_layer, float(r_layer.sum())


def energy(
    stats: SpikeStats,
    time_steps: int = TIME_STEPS,
    e_ac: float = ENERGY_PER_ACCUMULATE_PJ,
    baseline_total_pj: Optional[float] = None,
) -> EnergyReport:
    """Energy report from accumulated spike statistics, in picojoules."""
    if stats.n_samples == 0:
        raise DataError("energy needs at least one sample")
    mean_spikes = stats.spike_sums / stats.n_samples
    e_layer = time_steps * e_ac * stats.table.psi * mean_spikes
    r_layer, r_total = firing_rates(stats)
    total = float(e_layer.sum())
    rate = None
    if baseline_total_pj is not None and baseline_total_pj > 0:
        rate = total / baseline_total_pj
    return EnergyReport(
        e_layer_pj=[float(v) for v in e_layer],
        e_total_pj=total,
        r_layer=[float(v) for v in r_layer],
        r_total=r_total,
        dead_rate=dead_rate(stats),
        energy_rate=rate,
        n_samples=stats.n_samples,
    )


def dead_rate(stats: SpikeStats) -> float:
    """Fraction of spiking neurons that never fired on any sample seen."""
    if stats.n_samples == 0:
        raise DataError("dead rate needs at least one sample")
    total = int(stats.table.d.sum())
    if total == 0:
        return 0.0
    alive = sum(int(f.sum()) for f in stats.ever_fired if f is not None)
    return 1.0 - alive / total


def layer_ratios(table: SynapseTable) -> dict[str, np.ndarray]:
    """Per-layer fractions of each all-fire metric, for ratio plots."""
    fl = flops_per_layer(table)
    d = table.d.astype(np.float64)
    n = len(table)
    return {
        "flops": fl / fl.sum(),
        "syn": fl / fl.sum(),  # same numerator by construction
        "total": d / d.sum(),
        "balance": np.full(n, 1.0 / n),
    }
