"""Dense tensors with tape-based reverse-mode differentiation.

The layer vocabulary is fixed: fully connected and 2-d convolutional layers
(both bias-free), batch normalization, 2x2 average pooling, global average
pooling, dropout, elementwise add, and a fused softmax cross-entropy loss.
Spike activations live in :mod:`spikepen.spiking` and plug into the same tape.

Forward calls append nodes to a :class:`Tape`; :func:`backward` replays the
tape in exact reverse order, accumulating gradients into ``Tensor.grad``.
Everything is plain numpy, single-threaded apart from BLAS, and deterministic
for a fixed seed.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .errors import DataError, DimensionError, ParameterError, StateError


class Tensor:
    """A dense array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray, fresh: bool = False):
        """Add g into this tensor's gradient.

        ``fresh`` asserts the caller hands over a newly allocated buffer that
        no other tensor aliases, allowing ownership transfer. Pass-through
        backward rules (add, flatten) must leave it False: they forward the
        consumer's own grad buffer, and taking ownership would let a later
        in-place accumulation corrupt the other consumer's gradient.
        """
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            if fresh and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class TapeNode:
    """One recorded operation: output tensor plus a closure undoing it."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple, output: Tensor, backward_fn: Callable[[np.ndarray], None]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of a forward pass, replayed in reverse by backward()."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def add(self, node: TapeNode):
        self.nodes.append(node)

    def __len__(self):
        return len(self.nodes)


def backward(tape: Tape, loss: Tensor):
    """Accumulate d(loss)/d(input) into every recorded tensor's ``grad``.

    The tape must contain the forward pass that produced ``loss``; nodes are
    visited strictly in reverse recording order.
    """
    if not tape.nodes:
        raise StateError("backward called before any forward pass was recorded")
    if loss.data.size != 1:
        raise DimensionError(f"loss must be scalar, got shape {loss.data.shape}")
    if not any(n.output is loss for n in tape.nodes):
        raise StateError("loss tensor was not produced on this tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        node.backward_fn(g)


def _record(tape, op, inputs, output, backward_fn):
    output.requires_grad = any(t.requires_grad for t in inputs)
    if tape is not None and output.requires_grad:
        tape.add(TapeNode(op, inputs, output, backward_fn))
    return output


# ---------------------------------------------------------------------------
# fully connected


def fc(tape: Optional[Tape], x: Tensor, w: Tensor) -> Tensor:
    """Bias-free linear map: out[b, o] = sum_i w[o, i] * x[b, i]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise DimensionError(f"fc expects 2-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"fc inner extents disagree: input {x.shape}, weight {w.shape}")
    out = Tensor(x.data @ w.data.T)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g @ w.data, fresh=True)
        if w.requires_grad:
            w.accumulate_grad(g.T @ x.data, fresh=True)

    return _record(tape, "fc", (x, w), out, bwd)


# ---------------------------------------------------------------------------
# 2-d convolution (cross-correlation, zero padding, floor-mode output sizing)


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def _im2col(x: np.ndarray, kernel: int, stride: int, padding: int):
    b, c, h, w = x.shape
    oh = conv_output_extent(h, kernel, stride, padding)
    ow = conv_output_extent(w, kernel, stride, padding)
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (B, C, OH, OW, k, k)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kernel * kernel)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(dcols: np.ndarray, x_shape, kernel: int, stride: int, padding: int, oh: int, ow: int):
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    dxp = np.zeros((b, c, hp, wp), dtype=dcols.dtype)
    d6 = dcols.reshape(b, oh, ow, c, kernel, kernel).transpose(0, 3, 4, 5, 1, 2)
    for ki in range(kernel):
        for kj in range(kernel):
            dxp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += d6[:, :, ki, kj]
    if padding > 0:
        return np.ascontiguousarray(dxp[:, :, padding : padding + h, padding : padding + w])
    return dxp


def conv2d(tape: Optional[Tape], x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of NCHW input with an OIHW weight, no bias."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d kernel must be square, got {w.shape}")
    kernel = w.shape[2]
    if kernel < 1 or stride < 1 or padding < 0:
        raise ParameterError(f"invalid conv2d geometry: kernel={kernel}, stride={stride}, padding={padding}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d channel extents disagree: input {x.shape}, weight {w.shape}")
    b, _, h, w_in = x.shape
    c_out = w.shape[0]
    oh = conv_output_extent(h, kernel, stride, padding)
    ow = conv_output_extent(w_in, kernel, stride, padding)
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"conv2d output extent non-positive: input {h}x{w_in}, kernel={kernel}, stride={stride}, padding={padding}"
        )

    cols, oh, ow = _im2col(x.data, kernel, stride, padding)
    w_mat = w.data.reshape(c_out, -1)
    out_mat = cols @ w_mat.T  # (B*OH*OW, Cout)
    out = Tensor(np.ascontiguousarray(out_mat.reshape(b, oh, ow, c_out).transpose(0, 3, 1, 2)))

    x_shape = x.data.shape

    def bwd(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * oh * ow, c_out)
        if w.requires_grad:
            w.accumulate_grad((g_mat.T @ cols).reshape(w.data.shape), fresh=True)
        if x.requires_grad:
            if stride == 1 and kernel - 1 - padding >= 0:
                # full correlation of the output grad with the flipped kernel,
                # expressed as one more im2col GEMM (much faster than scatter)
                w_flip = np.ascontiguousarray(
                    w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                ).reshape(x_shape[1], c_out * kernel * kernel)
                gcols, gh, gw = _im2col(g, kernel, 1, kernel - 1 - padding)
                dx_mat = gcols @ w_flip.T  # (B*H*W, Cin)
                dx = np.ascontiguousarray(
                    dx_mat.reshape(b, x_shape[2], x_shape[3], x_shape[1]).transpose(0, 3, 1, 2)
                )
            else:
                dcols = g_mat @ w_mat
                dx = _col2im(dcols, x_shape, kernel, stride, padding, oh, ow)
            x.accumulate_grad(dx, fresh=True)

    return _record(tape, "conv2d", (x, w), out, bwd)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Running statistics owned by one batch-norm layer."""

    __slots__ = ("running_mean", "running_var")

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)


def _bn_axes(x: np.ndarray, channels: int):
    if x.ndim == 2:
        if x.shape[1] != channels:
            raise DimensionError(f"batchnorm channel extent {channels} does not match input {x.shape}")
        return (0,), (1, channels)
    if x.ndim == 4:
        if x.shape[1] != channels:
            raise DimensionError(f"batchnorm channel extent {channels} does not match input {x.shape}")
        return (0, 2, 3), (1, channels, 1, 1)
    raise DimensionError(f"batchnorm expects 2-d or 4-d input, got {x.shape}")


def batchnorm(
    tape: Optional[Tape],
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
    momentum: float = 0.1,
    epsilon: float = 1e-5,
) -> Tensor:
    """Per-channel normalization with affine parameters.

    Train mode normalizes by batch statistics and updates the running
    estimates (exponential average with the given momentum, unbiased variance
    for the running buffer); eval mode normalizes by the running estimates.
    """
    if epsilon <= 0:
        raise ParameterError(f"batchnorm epsilon must be positive, got {epsilon}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    channels = gamma.data.shape[0]
    if beta.data.shape != gamma.data.shape:
        raise DimensionError("batchnorm gamma and beta must have identical shapes")
    axes, bshape = _bn_axes(x.data, channels)

    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = x.data.size // channels
        if n > 1:
            unbiased = var * (n / (n - 1))
        else:
            unbiased = var
        state.running_mean += momentum * (mu.astype(state.running_mean.dtype) - state.running_mean)
        state.running_var += momentum * (unbiased.astype(state.running_var.dtype) - state.running_var)
    else:
        mu = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)

    inv_std = 1.0 / np.sqrt(var + np.asarray(epsilon, dtype=x.data.dtype))
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = Tensor(gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape))

    def bwd(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=axes), fresh=True)
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=axes), fresh=True)
        if x.requires_grad:
            gs = g * gamma.data.reshape(bshape)
            if mode == "train":
                m = x.data.size // channels
                # d/dx through the batch statistics (biased variance)
                mean_gs = gs.sum(axis=axes, keepdims=True) / m
                mean_gs_xhat = (gs * xhat).sum(axis=axes, keepdims=True) / m
                dx = inv_std.reshape(bshape) * (gs - mean_gs - xhat * mean_gs_xhat)
            else:
                dx = gs * inv_std.reshape(bshape)
            x.accumulate_grad(dx.astype(x.data.dtype, copy=False), fresh=True)

    return _record(tape, "batchnorm", (x, gamma, beta), out, bwd)


# ---------------------------------------------------------------------------
# pooling


def avgpool2x2(tape: Optional[Tape], x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; spatial extents must be even."""
    if x.data.ndim != 4:
        raise DimensionError(f"avgpool2x2 expects 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avgpool2x2 requires even spatial extents, got {h}x{w}")
    out = Tensor(x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)))

    def bwd(g):
        if x.requires_grad:
            quarter = np.asarray(0.25, dtype=x.data.dtype)
            x.accumulate_grad(np.repeat(np.repeat(g * quarter, 2, axis=2), 2, axis=3), fresh=True)

    return _record(tape, "avgpool2x2", (x,), out, bwd)


def global_avg_pool(tape: Optional[Tape], x: Tensor) -> Tensor:
    """Mean over all spatial positions, per channel: (B,C,H,W) -> (B,C)."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-d input, got {x.shape}")
    _, _, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def bwd(g):
        if x.requires_grad:
            scale = np.asarray(1.0 / (h * w), dtype=x.data.dtype)
            x.accumulate_grad(np.broadcast_to((g * scale)[:, :, None, None], x.data.shape).copy(), fresh=True)

    return _record(tape, "global_avg_pool", (x,), out, bwd)


# ---------------------------------------------------------------------------
# dropout


def dropout(tape: Optional[Tape], x: Tensor, rate: float, mode: str, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: train mode zeroes with probability ``rate`` and
    scales survivors by 1/(1-rate); eval mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in train mode requires a random generator")
    rand_dtype = x.data.dtype if x.data.dtype in (np.float32, np.float64) else np.float64
    keep = rng.random(x.data.shape, dtype=rand_dtype) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.data.dtype)
    mask = keep.astype(x.data.dtype) * scale
    out = Tensor(x.data * mask)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask, fresh=True)

    return _record(tape, "dropout", (x,), out, bwd)


# ---------------------------------------------------------------------------
# structural ops


def add(tape: Optional[Tape], a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add requires identical shapes, got {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _record(tape, "add", (a, b), out, bwd)


def flatten(tape: Optional[Tape], x: Tensor) -> Tensor:
    """Collapse all trailing axes: (B, ...) -> (B, prod(...))."""
    b = x.shape[0]
    out = Tensor(x.data.reshape(b, -1))
    in_shape = x.data.shape

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(in_shape))

    return _record(tape, "flatten", (x,), out, bwd)


def square(tape: Optional[Tape], x: Tensor) -> Tensor:
    out = Tensor(x.data * x.data)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(2.0 * x.data * g, fresh=True)

    return _record(tape, "square", (x,), out, bwd)


def sum_all(tape: Optional[Tape], x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.full(x.data.shape, g, dtype=x.data.dtype), fresh=True)

    return _record(tape, "sum_all", (x,), out, bwd)


def scalar_mix(tape: Optional[Tape], terms: list[Tensor], coeffs: list[float]) -> Tensor:
    """Weighted sum of scalar tensors: out = sum_i coeffs[i] * terms[i]."""
    if len(terms) != len(coeffs):
        raise DimensionError("scalar_mix needs one coefficient per term")
    if not terms:
        raise ParameterError("scalar_mix needs at least one term")
    for t in terms:
        if t.data.size != 1:
            raise DimensionError(f"scalar_mix terms must be scalars, got shape {t.data.shape}")
    dtype = terms[0].data.dtype
    total = np.zeros((), dtype=dtype)
    for t, c in zip(terms, coeffs):
        total = total + np.asarray(c, dtype=dtype) * t.data.reshape(())
    out = Tensor(total)

    def bwd(g):
        for t, c in zip(terms, coeffs):
            if t.requires_grad:
                t.accumulate_grad(np.asarray(g * c, dtype=dtype).reshape(t.data.shape))  # reshape may view

    return _record(tape, "scalar_mix", tuple(terms), out, bwd)


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(tape: Optional[Tape], logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects 2-d logits, got {logits.shape}")
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch size {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    probs = ez / denom
    nll = np.log(denom[:, 0]) - z[np.arange(b), labels]
    out = Tensor(np.asarray(nll.mean(), dtype=logits.data.dtype))

    def bwd(g):
        if logits.requires_grad:
            d = probs.copy()
            d[np.arange(b), labels] -= 1.0
            logits.accumulate_grad((g / b) * d, fresh=True)

    return _record(tape, "softmax_cross_entropy", (logits,), out, bwd)
