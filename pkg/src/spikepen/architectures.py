"""Computation graphs for the three stock spiking CNNs.

Graphs are immutable node lists in topological (construction) order; edges
are input-id tuples, which is enough to express the two-path residual blocks.
Besides building and running the graphs, this module derives the per-spiking-
layer synapse counts that the penalty and energy modules weight spikes with,
and the all-fire penalty constants used for intensity normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, GraphError
from .spiking import SpikeRecord, SurrogateKind, spike
from .tensor import BatchNormState, Tape, Tensor

ARCHITECTURES = ("cnn7", "vgg11", "resnet18")

DEFAULT_INPUT_SHAPES = {
    "cnn7": (1, 28, 28),
    "vgg11": (3, 32, 32),
    "resnet18": (3, 32, 32),
}

# Pooling placements for vgg11: pools sit after these conv indices (1-based).
# The alternate placement moves the first pool one conv later.
VGG11_POOLS_DEFAULT = (1, 3, 5, 6)
VGG11_POOLS_ALT = (2, 3, 5, 6)


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # input | conv | fc | bn | spike | dropout | avgpool | gap | flatten | add
    channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    rate: float = 0.0


@dataclass(frozen=True)
class Node:
    nid: int
    spec: LayerSpec
    inputs: tuple[int, ...]


@dataclass
class NetworkGraph:
    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    nodes: list[Node] = field(default_factory=list)
    out_shapes: list[tuple[int, ...]] = field(default_factory=list)
    spike_ids: list[int] = field(default_factory=list)

    def consumers(self) -> dict[int, list[int]]:
        cons: dict[int, list[int]] = {n.nid: [] for n in self.nodes}
        for n in self.nodes:
            for src in n.inputs:
                cons[src].append(n.nid)
        return cons


class _Builder:
    def __init__(self, name, input_shape, num_classes):
        self.g = NetworkGraph(name=name, input_shape=tuple(input_shape), num_classes=num_classes)
        self._add(LayerSpec("input"), (), tuple(input_shape))

    def _add(self, spec: LayerSpec, inputs: tuple[int, ...], out_shape) -> int:
        nid = len(self.g.nodes)
        self.g.nodes.append(Node(nid, spec, inputs))
        self.g.out_shapes.append(tuple(out_shape))
        if spec.kind == "spike":
            self.g.spike_ids.append(nid)
        return nid

    def conv(self, src, channels, kernel, stride=1, padding=0):
        c, h, w = self.g.out_shapes[src]
        oh = T.conv_output_extent(h, kernel, stride, padding)
        ow = T.conv_output_extent(w, kernel, stride, padding)
        if oh < 1 or ow < 1:
            raise DimensionError(
                f"{self.g.name}: conv(k={kernel}, s={stride}, p={padding}) on {h}x{w} input "
                f"yields non-positive output extent"
            )
        return self._add(LayerSpec("conv", channels, kernel, stride, padding), (src,), (channels, oh, ow))

    def fc(self, src, channels):
        (cin,) = self.g.out_shapes[src]
        return self._add(LayerSpec("fc", channels, 0, 1, 0), (src,), (channels,))

    def bn(self, src):
        return self._add(LayerSpec("bn"), (src,), self.g.out_shapes[src])

    def spike(self, src):
        return self._add(LayerSpec("spike"), (src,), self.g.out_shapes[src])

    def dropout(self, src, rate):
        return self._add(LayerSpec("dropout", rate=rate), (src,), self.g.out_shapes[src])

    def avgpool(self, src):
        c, h, w = self.g.out_shapes[src]
        if h % 2 or w % 2:
            raise DimensionError(f"{self.g.name}: avgpool on odd extents {h}x{w}")
        return self._add(LayerSpec("avgpool"), (src,), (c, h // 2, w // 2))

    def gap(self, src):
        c, _, _ = self.g.out_shapes[src]
        return self._add(LayerSpec("gap"), (src,), (c,))

    def flatten(self, src):
        shape = self.g.out_shapes[src]
        return self._add(LayerSpec("flatten"), (src,), (int(np.prod(shape)),))

    def residual_add(self, a, b):
        if self.g.out_shapes[a] != self.g.out_shapes[b]:
            raise GraphError(
                f"{self.g.name}: residual paths disagree: {self.g.out_shapes[a]} vs {self.g.out_shapes[b]}"
            )
        return self._add(LayerSpec("add"), (a, b), self.g.out_shapes[a])

    def bn_spike(self, src):
        return self.spike(self.bn(src))


def _build_cnn7(input_shape, num_classes):
    b = _Builder("cnn7", input_shape, num_classes)
    t = 0
    for channels, kernel, stride, rate in (
        (64, 3, 2, 0.1),
        (128, 6, 1, 0.2),
        (256, 3, 1, 0.3),
        (128, 1, 1, 0.2),
        (64, 1, 1, 0.1),
    ):
        t = b.bn_spike(b.conv(t, channels, kernel, stride, 0))
        t = b.dropout(t, rate)
    t = b.bn_spike(b.conv(t, num_classes, 1, 1, 0))
    t = b.gap(b.conv(t, num_classes, 1, 1, 0))
    return b.g


def _build_vgg11(input_shape, num_classes, pools):
    b = _Builder("vgg11", input_shape, num_classes)
    channels = (64, 128, 256, 512, 512, 512, 512, 512)
    dropout_after = {1: 0.2, 4: 0.2, 7: 0.2}
    t = 0
    for i, ch in enumerate(channels, start=1):
        t = b.bn_spike(b.conv(t, ch, 3, 1, 1))
        if i in dropout_after:
            t = b.dropout(t, dropout_after[i])
        if i in pools:
            t = b.avgpool(t)
    t = b.flatten(t)
    for _ in range(2):
        t = b.bn_spike(b.fc(t, 4096))
        t = b.dropout(t, 0.2)
    b.fc(t, num_classes)
    return b.g


def _build_resnet18(input_shape, num_classes):
    b = _Builder("resnet18", input_shape, num_classes)

    def res_a(src, ch):
        t = b.conv(b.bn_spike(src), ch, 3, 1, 1)
        t = b.conv(b.bn_spike(t), ch, 3, 1, 1)
        return b.residual_add(t, src)

    def res_b(src, ch):
        t = b.conv(b.bn_spike(src), ch, 3, 2, 1)
        t = b.conv(b.bn_spike(t), ch, 3, 1, 1)
        # skip path downsamples with a 1x1 stride-2 convolution
        skip = b.conv(b.bn_spike(src), ch, 1, 2, 0)
        return b.residual_add(t, skip)

    t = b.conv(0, 64, 3, 1, 1)
    t = res_a(res_a(t, 64), 64)
    t = res_a(res_b(t, 128), 128)
    t = res_a(res_b(t, 256), 256)
    t = res_a(res_b(t, 512), 512)
    t = b.bn_spike(t)
    b.gap(b.conv(t, num_classes, 1, 1, 0))
    return b.g


def build(
    name: str,
    input_shape: Optional[tuple[int, int, int]] = None,
    num_classes: int = 10,
    vgg_pools: tuple[int, ...] = VGG11_POOLS_DEFAULT,
) -> NetworkGraph:
    """Construct one of the stock architectures for the given input shape."""
    key = name.lower()
    if key not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {name!r}, expected one of {ARCHITECTURES}")
    if input_shape is None:
        input_shape = DEFAULT_INPUT_SHAPES[key]
    if len(input_shape) != 3 or any(int(e) < 1 for e in input_shape):
        raise ConfigError(f"input shape must be (C, H, W) with positive extents, got {input_shape}")
    input_shape = tuple(int(e) for e in input_shape)
    if key == "cnn7":
        return _build_cnn7(input_shape, num_classes)
    if key == "vgg11":
        return _build_vgg11(input_shape, num_classes, tuple(vgg_pools))
    return _build_resnet18(input_shape, num_classes)


# ---------------------------------------------------------------------------
# parameters


class ModelState:
    """Trainable tensors and batch-norm running statistics for one graph."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.weights: dict[int, Tensor] = {}
        self.bn_gamma: dict[int, Tensor] = {}
        self.bn_beta: dict[int, Tensor] = {}
        self.bn_running: dict[int, BatchNormState] = {}

    def trainables(self) -> list[tuple[str, Tensor]]:
        """Deterministically ordered (name, tensor) pairs."""
        out = []
        for nid in sorted(self.weights):
            out.append((f"w/{nid}", self.weights[nid]))
        for nid in sorted(self.bn_gamma):
            out.append((f"bn_gamma/{nid}", self.bn_gamma[nid]))
            out.append((f"bn_beta/{nid}", self.bn_beta[nid]))
        return out

    def weight_tensors(self) -> list[Tensor]:
        return [self.weights[nid] for nid in sorted(self.weights)]

    def bn_affine_tensors(self) -> list[Tensor]:
        out = []
        for nid in sorted(self.bn_gamma):
            out.extend((self.bn_gamma[nid], self.bn_beta[nid]))
        return out

    def copy(self) -> "ModelState":
        dup = ModelState(self.dtype)
        for nid, t in self.weights.items():
            dup.weights[nid] = Tensor(t.data.copy(), requires_grad=True)
        for nid, t in self.bn_gamma.items():
            dup.bn_gamma[nid] = Tensor(t.data.copy(), requires_grad=True)
            dup.bn_beta[nid] = Tensor(self.bn_beta[nid].data.copy(), requires_grad=True)
        for nid, s in self.bn_running.items():
            fresh = BatchNormState(s.running_mean.shape[0], dtype=s.running_mean.dtype)
            fresh.running_mean[:] = s.running_mean
            fresh.running_var[:] = s.running_var
            dup.bn_running[nid] = fresh
        return dup


def init_params(graph: NetworkGraph, rng: np.random.Generator, dtype=np.float32) -> ModelState:
    """He-initialized weights (std = sqrt(2/fan_in)), unit/zero BN affines."""
    state = ModelState(dtype)
    for node in graph.nodes:
        spec = node.spec
        if spec.kind == "conv":
            cin = graph.out_shapes[node.inputs[0]][0]
            fan_in = cin * spec.kernel * spec.kernel
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(spec.channels, cin, spec.kernel, spec.kernel))
            state.weights[node.nid] = Tensor(w.astype(dtype), requires_grad=True)
        elif spec.kind == "fc":
            (cin,) = graph.out_shapes[node.inputs[0]]
            w = rng.normal(0.0, np.sqrt(2.0 / cin), size=(spec.channels, cin))
            state.weights[node.nid] = Tensor(w.astype(dtype), requires_grad=True)
        elif spec.kind == "bn":
            channels = graph.out_shapes[node.nid][0]
            state.bn_gamma[node.nid] = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
            state.bn_beta[node.nid] = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
            state.bn_running[node.nid] = BatchNormState(channels, dtype=dtype)
    return state


# ---------------------------------------------------------------------------
# execution


def forward(
    graph: NetworkGraph,
    state: ModelState,
    x: np.ndarray,
    surrogate: SurrogateKind,
    mode: str = "eval",
    tape: Optional[Tape] = None,
    record: Optional[SpikeRecord] = None,
    rng: Optional[np.random.Generator] = None,
) -> tuple[Tensor, list[Tensor]]:
    """Run the graph on a batch; returns (logits, spike output tensors).

    The spike tensor list follows ``graph.spike_ids`` order so penalty terms
    can be assembled on the same tape that recorded the forward pass.
    """
    if x.ndim != 4 or tuple(x.shape[1:]) != graph.input_shape:
        raise DimensionError(f"expected input of shape (B, {graph.input_shape}), got {x.shape}")
    values: dict[int, Tensor] = {0: Tensor(np.ascontiguousarray(x, dtype=state.dtype))}
    spikes: list[Tensor] = []
    for node in graph.nodes[1:]:
        spec = node.spec
        src = values[node.inputs[0]]
        if spec.kind == "conv":
            out = T.conv2d(tape, src, state.weights[node.nid], spec.stride, spec.padding)
        elif spec.kind == "fc":
            out = T.fc(tape, src, state.weights[node.nid])
        elif spec.kind == "bn":
            out = T.batchnorm(
                tape, src, state.bn_gamma[node.nid], state.bn_beta[node.nid],
                state.bn_running[node.nid], mode=mode,
            )
        elif spec.kind == "spike":
            out = spike(tape, src, surrogate, record=record, layer_id=node.nid)
            spikes.append(out)
        elif spec.kind == "dropout":
            out = T.dropout(tape, src, spec.rate, mode, rng)
        elif spec.kind == "avgpool":
            out = T.avgpool2x2(tape, src)
        elif spec.kind == "gap":
            out = T.global_avg_pool(tape, src)
        elif spec.kind == "flatten":
            out = T.flatten(tape, src)
        elif spec.kind == "add":
            out = T.add(tape, src, values[node.inputs[1]])
        else:
            raise GraphError(f"unsupported layer kind {spec.kind!r}")
        values[node.nid] = out
    return values[len(graph.nodes) - 1], spikes


# ---------------------------------------------------------------------------
# synapse counts and all-fire constants


@dataclass
class SynapseTable:
    """Per spiking layer: outgoing synapses per neuron (psi) and neuron count (d)."""

    layer_ids: list[int]
    psi: np.ndarray  # float64
    d: np.ndarray  # int64

    def __len__(self):
        return len(self.layer_ids)


def _consumer_psi(graph: NetworkGraph, cons: dict[int, list[int]], spike_id: int) -> float:
    """Outgoing synapses per neuron of one spiking layer.

    Walks forward through dropout/flatten (transparent) and pooling until a
    weight layer is reached on every path. A conv consumer contributes
    channels * (kernel * pool_factor / stride)^2; each 2x2 pool between the
    spike and the conv scales the counted fan-out by the pool area, i.e. a
    spike is attributed to every slot of the window it feeds. An fc consumer
    contributes its output width.
    """
    total = 0.0
    stack = [(spike_id, 1)]  # (node id, accumulated pooling factor per axis)
    found = False
    while stack:
        nid, pool = stack.pop()
        for cid in cons[nid]:
            spec = graph.nodes[cid].spec
            if spec.kind == "conv":
                total += spec.channels * (spec.kernel * pool / spec.stride) ** 2
                found = True
            elif spec.kind == "fc":
                total += spec.channels
                found = True
            elif spec.kind in ("dropout", "flatten"):
                stack.append((cid, pool))
            elif spec.kind == "avgpool":
                stack.append((cid, pool * 2))
            else:
                raise GraphError(
                    f"{graph.name}: spiking layer {spike_id} feeds a {spec.kind!r} node; "
                    f"synapse counting requires a conv or fc consumer on every path"
                )
    if not found:
        raise GraphError(f"{graph.name}: spiking layer {spike_id} has no consumer weight layer")
    return total


def synapse_counts(graph: NetworkGraph) -> SynapseTable:
    """psi and d for every spiking layer, in graph order."""
    cons = graph.consumers()
    psi = np.array([_consumer_psi(graph, cons, sid) for sid in graph.spike_ids], dtype=np.float64)
    d = np.array([int(np.prod(graph.out_shapes[sid])) for sid in graph.spike_ids], dtype=np.int64)
    return SynapseTable(list(graph.spike_ids), psi, d)


def penalty_constants(table: SynapseTable) -> tuple[int, int, int]:
    """All-fire penalty totals at p=1: (synapse-weighted, unit-weighted, layer count)."""
    if len(table) == 0:
        return (0, 0, 0)
    omega_syn = int(round(float(np.sum(table.psi * table.d))))
    omega_total = int(table.d.sum())
    return omega_syn, omega_total, len(table)
