"""spikepen: energy-penalized training of single-step spiking neural networks."""

from .architectures import (
    ARCHITECTURES,
    NetworkGraph,
    SynapseTable,
    build,
    forward,
    init_params,
    penalty_constants,
    synapse_counts,
)
from .energy import ENERGY_PER_ACCUMULATE_PJ, EnergyReport, SpikeStats, dead_rate, energy, firing_rates, layer_ratios
from .estimator import SpikingClassifier
from .penalty import PenaltyConfig, normalize_lambda, penalty_backward, penalty_forward, schedule_lambda
from .spiking import SpikeRecord, SurrogateKind, spike_forward, surrogate_grad
from .tensor import Tape, Tensor, backward
from .tradeoff import RunRecord, auc, cutoff_filter, mutual_information, spearman
from .training import TrainConfig, TrainResult, cosine_lr, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ARCHITECTURES",
    "ENERGY_PER_ACCUMULATE_PJ",
    "EnergyReport",
    "NetworkGraph",
    "PenaltyConfig",
    "RunRecord",
    "SpikeRecord",
    "SpikeStats",
    "SpikingClassifier",
    "SurrogateKind",
    "SynapseTable",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "auc",
    "backward",
    "build",
    "cosine_lr",
    "cutoff_filter",
    "dead_rate",
    "energy",
    "evaluate",
    "firing_rates",
    "forward",
    "init_params",
    "layer_ratios",
    "mutual_information",
    "normalize_lambda",
    "penalty_backward",
    "penalty_constants",
    "penalty_forward",
    "schedule_lambda",
    "spearman",
    "spike_forward",
    "surrogate_grad",
    "synapse_counts",
    "train",
]
