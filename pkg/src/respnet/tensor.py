"""Minimal 64-bit tensor with reverse-mode gradients for 1D conv nets.

Tensors are numpy-backed, normally shaped ``(batch, channels, length)``.
Parameters (biases, batch-norm affine vectors) are rank 1 and losses are
rank 0. Every differentiable op records a :class:`Node` on its output when
any input requires a gradient; :func:`backward` replays the recorded nodes in
reverse creation order.
"""

from __future__ import annotations

import itertools
import weakref
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from respnet.errors import (
    DegenerateBatch,
    EmptyOutput,
    MissingGrad,
    NoTape,
    ShapeMismatch,
)

DTYPE = np.float64

_seq = itertools.count()


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        # no forced C-order: activations are kept channel-major behind an (N, C, L) view
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


Tensor1D = Tensor


class Node:
    """One recorded differentiable operation."""

    __slots__ = ("op", "parents", "backward_fn", "seq", "output")

    def __init__(self, op: str, parents: Sequence[Tensor], backward_fn: Callable, output: Tensor):
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.output = weakref.ref(output)


class GradTape:
    """Ordered record of the operations a scalar loss depends on.

    Built by walking parent links from the loss; ``nodes`` is sorted in
    execution order, so reversing it is a valid backward schedule.
    """

    def __init__(self, loss: Tensor):
        if loss._node is None:
            raise NoTape("loss was not produced by a recorded operation")
        seen: dict[int, Node] = {}
        stack = [loss._node]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen[id(node)] = node
            for parent in node.parents:
                if parent._node is not None and id(parent._node) not in seen:
                    stack.append(parent._node)
        self.nodes = sorted(seen.values(), key=lambda n: n.seq)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def _needs_grad(*tensors: Optional[Tensor]) -> bool:
    return any(t is not None and t.requires_grad for t in tensors)


def _record(op: str, out_data: np.ndarray, parents: Sequence[Optional[Tensor]], backward_fn: Callable) -> Tensor:
    # backward_fn(grad_out) returns one gradient (or None) per parent
    live = [p for p in parents if p is not None]
    out = Tensor(out_data, requires_grad=_needs_grad(*live))
    if out.requires_grad:
        mask = [p is not None for p in parents]

        def _bw(g):
            grads = backward_fn(g)
            return [gr for gr, keep in zip(grads, mask) if keep]

        out._node = Node(op, live, _bw, out)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape."""
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = GradTape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        out = node.output()
        if out is None or id(out) not in grads:
            continue
        g_out = grads[id(out)]
        for parent, g in zip(node.parents, node.backward_fn(g_out)):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                holders[key] = parent
    for key, tensor in holders.items():
        g = grads[key]
        # grads are never mutated in place, so sharing arrays is safe
        tensor.grad = g if tensor.grad is None else tensor.grad + g


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ShapeMismatch(f"invalid convolution geometry {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeMismatch(f"invalid channel counts {self}")

    def conv_length(self, length: int) -> int:
        span = self.dilation * (self.kernel_size - 1) + 1
        return (length + 2 * self.padding - span) // self.stride + 1

    def transposed_length(self, length: int, output_padding: int = 0) -> int:
        return (
            (length - 1) * self.stride
            - 2 * self.padding
            + self.dilation * (self.kernel_size - 1)
            + 1
            + output_padding
        )


def _tap_range(j: int, k_dil: int, stride: int, pad: int, length: int, n_cols: int) -> tuple[int, int, int]:
    """Columns ``[lo, hi)`` whose tap ``j`` lands inside the unpadded signal, and its first index."""
    off = j * k_dil - pad
    lo = max(0, -(off // stride))
    hi = min(n_cols, (length - 1 - off) // stride + 1) if length - 1 - off >= 0 else 0
    return lo, max(lo, hi), lo * stride + off


def _gather(x: np.ndarray, k: int, d: int, s: int, p: int, n_cols: int) -> np.ndarray:
    """(N, C, L) -> im2col matrix (C*k, N*n_cols) with implicit zero padding ``p``."""
    xt = x.transpose(1, 0, 2)
    c, n, length = xt.shape
    cols = np.empty((c, k, n, n_cols), dtype=DTYPE)
    for j in range(k):
        lo, hi, start = _tap_range(j, d, s, p, length, n_cols)
        cols[:, j, :, :lo] = 0.0
        cols[:, j, :, hi:] = 0.0
        if hi > lo:
            cols[:, j, :, lo:hi] = xt[:, :, start : start + (hi - lo - 1) * s + 1 : s]
    return cols.reshape(c * k, n * n_cols)


def _scatter(cols: np.ndarray, c: int, n: int, length: int, k: int, d: int, s: int, p: int, n_cols: int) -> np.ndarray:
    """Adjoint of :func:`_gather`; returns an (N, C, L) view of a channel-major buffer."""
    cols = cols.reshape(c, k, n, n_cols)
    out = np.zeros((c, n, length), dtype=DTYPE)
    for j in range(k):
        lo, hi, start = _tap_range(j, d, s, p, length, n_cols)
        if hi > lo:
            out[:, :, start : start + (hi - lo - 1) * s + 1 : s] += cols[:, j, :, lo:hi]
    return out.transpose(1, 0, 2)


def _channel_major(a: np.ndarray) -> np.ndarray:
    """(N, C, L) -> (C, N*L); free when ``a`` is already stored channel-major."""
    n, c, length = a.shape
    return a.transpose(1, 0, 2).reshape(c, n * length)


def _check_conv(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec, transposed: bool):
    if x.ndim != 3:
        raise ShapeMismatch(f"expected (N, C, L) input, got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if transposed:
        expected = (spec.in_channels, spec.out_channels, spec.kernel_size)
    else:
        expected = (spec.out_channels, spec.in_channels, spec.kernel_size)
    if weight.shape != expected:
        raise ShapeMismatch(f"weight shape {weight.shape} != {expected}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({spec.out_channels},)")


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """Strided, dilated, zero-padded 1D cross-correlation.

    ``weight`` has shape ``(out_channels, in_channels, kernel_size)``.
    """
    _check_conv(x, weight, bias, spec, transposed=False)
    n, c, length = x.shape
    k, s, d, p = spec.kernel_size, spec.stride, spec.dilation, spec.padding
    lout = spec.conv_length(length)
    if lout < 1:
        raise EmptyOutput(f"conv output length {lout} for input length {length}")
    cols = _gather(x.data, k, d, s, p, lout)
    w2 = weight.data.reshape(spec.out_channels, c * k)
    y = (w2 @ cols).reshape(spec.out_channels, n, lout).transpose(1, 0, 2)
    if bias is not None:
        y = y + bias.data[None, :, None]

    def _bw(g):
        g2 = _channel_major(g)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _scatter(w2.T @ g2, c, n, length, k, d, s, p, lout)
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    return _record("conv1d", y, (x, weight, bias), _bw)


def transposed_conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor],
    spec: ConvSpec,
    output_padding: int = 0,
) -> Tensor:
    """Adjoint of :func:`conv1d` (learned upsampling).

    ``weight`` has shape ``(in_channels, out_channels, kernel_size)``, i.e. the
    same array a forward conv mapping ``out_channels -> in_channels`` would use.
    ``output_padding`` appends samples on the right so that the adjoint matches
    a forward conv whose input length was not exactly recoverable.
    """
    _check_conv(x, weight, bias, spec, transposed=True)
    if not 0 <= output_padding < max(spec.stride, spec.dilation):
        raise ShapeMismatch(f"output_padding {output_padding} out of range")
    n, cin, lin = x.shape
    cout = spec.out_channels
    k, s, d, p = spec.kernel_size, spec.stride, spec.dilation, spec.padding
    lout = spec.transposed_length(lin, output_padding)
    if lout < 1:
        raise EmptyOutput(f"transposed conv output length {lout} for input length {lin}")
    w2 = weight.data.reshape(cin, cout * k)
    xf = _channel_major(x.data)
    y = _scatter(w2.T @ xf, cout, n, lout, k, d, s, p, lin)
    if bias is not None:
        y = y + bias.data[None, :, None]

    def _bw(g):
        gcols = _gather(g, k, d, s, p, lin)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (w2 @ gcols).reshape(cin, n, lin).transpose(1, 0, 2)
        if weight.requires_grad:
            gw = (xf @ gcols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    return _record("transposed_conv1d", y, (x, weight, bias), _bw)


# ---------------------------------------------------------------------------
# normalisation and pointwise ops

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_norm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalisation over the (batch, length) axes.

    In training mode the biased batch variance normalises the input and the
    running statistics are updated in place (unbiased variance, as is
    conventional). Evaluation mode uses the running statistics only.
    """
    if x.ndim != 3:
        raise ShapeMismatch(f"expected (N, C, L) input, got {x.shape}")
    c = x.shape[1]
    for t in (gamma, beta, running_mean, running_var):
        if t.shape != (c,):
            raise ShapeMismatch(f"batch-norm parameter shape {t.shape} != ({c},)")
    m = x.shape[0] * x.shape[2]
    g_ = gamma.data[None, :, None]
    if training:
        if m < 2:
            raise DegenerateBatch(f"batch norm needs N*L >= 2, got {m}")
        mean = x.data.mean(axis=(0, 2))
        centered = x.data - mean[None, :, None]
        var = np.mean(centered * centered, axis=(0, 2))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std[None, :, None]
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mean
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * var * (m / (m - 1))
    else:
        inv_std = 1.0 / np.sqrt(running_var.data + eps)
        xhat = (x.data - running_mean.data[None, :, None]) * inv_std[None, :, None]
    y = g_ * xhat + beta.data[None, :, None]

    def _bw(g):
        gx = None
        if x.requires_grad:
            gxhat = g * g_
            if training:
                s1 = gxhat.sum(axis=(0, 2), keepdims=True)
                s2 = (gxhat * xhat).sum(axis=(0, 2), keepdims=True)
                gx = (inv_std[None, :, None] / m) * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std[None, :, None]
        ggamma = (g * xhat).sum(axis=(0, 2)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2)) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _record("batch_norm1d", y, (x, gamma, beta), _bw)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky slope must lie in (0, 1), got {slope}")
    factor = np.where(x.data > 0, 1.0, slope)
    y = x.data * factor

    def _bw(g):
        return (g * factor,)

    return _record("leaky_relu", y, (x,), _bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeMismatch("concat_channels expects (N, C, L) tensors")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ShapeMismatch(f"cannot concatenate {a.shape} and {b.shape} on channels")
    ca = a.shape[1]
    buf = np.empty((ca + b.shape[1], a.shape[0], a.shape[2]), dtype=DTYPE)
    buf[:ca] = a.data.transpose(1, 0, 2)
    buf[ca:] = b.data.transpose(1, 0, 2)
    y = buf.transpose(1, 0, 2)

    def _bw(g):
        return g[:, :ca], g[:, ca:]

    return _record("concat_channels", y, (a, b), _bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"cannot add {a.shape} and {b.shape}")

    def _bw(g):
        return g, g

    return _record("add", a.data + b.data, (a, b), _bw)


def smooth_l1_loss(pred: Tensor, target, beta: float = 1.0, reduction: str = "mean") -> Tensor:
    """Smooth L1 between ``pred`` and ``target``; quadratic below ``beta``."""
    target_t = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target_t.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target_t.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    diff = target_t.data - pred.data
    absd = np.abs(diff)
    small = absd < beta
    per = np.where(small, 0.5 * diff * diff / beta, absd - 0.5 * beta)
    scale = 1.0 / diff.size if reduction == "mean" else 1.0
    loss = np.asarray(per.sum() * scale)

    def _bw(g):
        dd = np.where(small, diff / beta, np.sign(diff)) * (g * scale)
        return -dd, dd

    return _record("smooth_l1_loss", loss, (pred, target_t), _bw)


# ---------------------------------------------------------------------------
# optimiser


def sgd_momentum_step(
    params: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]],
    velocities: dict[str, np.ndarray],
    lr: float,
    momentum: float,
) -> None:
    """In-place heavy-ball update ``v = mu*v + g; p = p - lr*v``; clears grads.

    Only tensors with ``requires_grad`` are updated. Missing velocity buffers
    are created as zeros.
    """
    items = list(params.items()) if isinstance(params, Mapping) else list(params)
    trainable = [(name, t) for name, t in items if t.requires_grad]
    for name, t in trainable:
        if t.grad is None:
            raise MissingGrad(f"parameter {name!r} has no gradient")
    for name, t in trainable:
        v = velocities.get(name)
        if v is None:
            v = np.zeros_like(t.data)
        elif v.shape != t.shape:
            raise ShapeMismatch(f"velocity for {name!r} has shape {v.shape}, expected {t.shape}")
        else:
            v *= momentum
        v += t.grad
        velocities[name] = v
        t.data -= lr * v
        t.grad = None
