"""Heaviside spike activation with pluggable surrogate gradients.

The forward pass is always the hard threshold (a potential at exactly the
threshold fires). Surrogates only shape the backward pass; three rules are
supported:

* ``s3nn``: 1/(tau*u) above threshold, scaled-sigmoid derivative below;
* ``triangle``: max(1 - |u - u_th|, 0);
* ``scaled_sigmoid``: the scaled-sigmoid derivative everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ParameterError
from .tensor import Tape, Tensor, _record

SURROGATE_KINDS = ("s3nn", "triangle", "scaled_sigmoid")


@dataclass(frozen=True)
class SurrogateKind:
    """Backward rule selector plus its hyperparameters and firing threshold."""

    kind: str = "s3nn"
    alpha: float = 0.25
    tau: float = 0.6
    u_th: float = 1.0

    def __post_init__(self):
        if self.kind not in SURROGATE_KINDS:
            raise ParameterError(f"unknown surrogate kind {self.kind!r}, expected one of {SURROGATE_KINDS}")
        if not self.alpha > 0:
            raise ParameterError(f"surrogate alpha must be positive, got {self.alpha}")
        if not self.tau > 0:
            raise ParameterError(f"surrogate tau must be positive, got {self.tau}")
        if not np.isfinite(self.u_th):
            raise ParameterError(f"firing threshold must be finite, got {self.u_th}")


class SpikeRecord:
    """Binary spike tensors captured per spiking layer during one forward pass."""

    def __init__(self):
        self.layer_ids: list[int] = []
        self.spikes: list[np.ndarray] = []

    def append(self, layer_id: int, spikes: np.ndarray):
        self.layer_ids.append(layer_id)
        self.spikes.append(spikes)

    def __len__(self):
        return len(self.spikes)


def spike_forward(u: np.ndarray, u_th: float) -> np.ndarray:
    """Elementwise threshold: 1 where u >= u_th, else 0 (same dtype as u)."""
    return (u >= u_th).astype(u.dtype)


def sigma_scaled(kind: SurrogateKind, u):
    """Scaled sigmoid sigma_alpha(u) = 1 / (1 + exp((-u + u_th)/alpha))."""
    u = np.asarray(u, dtype=np.result_type(u, np.float32))
    with np.errstate(over="ignore"):  # exp overflow saturates to sigma = 0
        return 1.0 / (1.0 + np.exp((-u + kind.u_th) / kind.alpha))


def _sigma_scaled_grad(kind: SurrogateKind, u):
    s = sigma_scaled(kind, u)
    return (1.0 / kind.alpha) * s * (1.0 - s)


def surrogate_grad(kind: SurrogateKind, u):
    """ds/du under the selected surrogate rule, elementwise."""
    u = np.asarray(u, dtype=np.result_type(u, np.float32))
    if kind.kind == "triangle":
        return np.maximum(1.0 - np.abs(u - kind.u_th), 0.0)
    if kind.kind == "scaled_sigmoid":
        return _sigma_scaled_grad(kind, u)
    # s3nn: 1/(tau*u) on the fired branch. The denominator is floored at the
    # threshold (vacuous for u_th > 0) so u_th <= 0 configurations stay finite.
    floor = kind.u_th if kind.u_th > 0 else np.finfo(u.dtype).tiny
    fired = u >= kind.u_th
    fired_grad = 1.0 / (kind.tau * np.maximum(u, floor))
    return np.where(fired, fired_grad, _sigma_scaled_grad(kind, u))


def spike(
    tape: Optional[Tape],
    u: Tensor,
    kind: SurrogateKind,
    record: Optional[SpikeRecord] = None,
    layer_id: int = -1,
) -> Tensor:
    """Threshold activation on the tape; backward applies the surrogate rule.

    When a record is supplied the binary output is appended to it before any
    downstream op (dropout included) can rescale it.
    """
    out = Tensor(spike_forward(u.data, kind.u_th))
    if record is not None:
        record.append(layer_id, out.data)
    u_saved = u.data

    def bwd(g):
        if u.requires_grad:
            u.accumulate_grad((g * surrogate_grad(kind, u_saved)).astype(u.data.dtype, copy=False), fresh=True)

    return _record(tape, "spike", (u,), out, bwd)
