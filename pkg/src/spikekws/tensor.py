"""Dense tensor arithmetic, layer primitives, and a reverse-mode tape.

Everything runs on plain float64 numpy arrays. A :class:`Tensor` wraps one
array plus an optional handle onto the active recording :class:`Tape`;
time-major ``(T, B, D)`` is the canonical layout for all layer inputs, so
the recorded graph is already time-unrolled and a single reverse sweep
performs BPTT. Tapes are single-use: one forward pass, one backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Raised when an operand's dimensions violate an op contract."""


class ConfigError(ValueError):
    """Raised for invalid layer or run configuration."""


class TapeError(RuntimeError):
    """Raised for misuse of the recording tape."""


def _as_f64(data) -> Array:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """Real-valued dense tensor, optionally attached to a tape node."""

    __slots__ = ("data", "node")

    def __init__(self, data, node: Optional["Node"] = None):
        self.data = _as_f64(data)
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape})"


class SpikeTensor(Tensor):
    """Tensor whose every element is exactly 0.0 or 1.0.

    Produced only by spike functions and by ingestion of binned event
    data; the constructor enforces binarity.
    """

    def __init__(self, data, node: Optional["Node"] = None):
        super().__init__(data, node)
        d = self.data
        if not bool(((d == 0.0) | (d == 1.0)).all()):
            raise ValueError("SpikeTensor requires all elements in {0, 1}")


class Parameter(Tensor):
    """Trainable leaf tensor; receives ``.grad`` after a backward pass."""

    __slots__ = ("grad", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(data)
        self.grad: Optional[Array] = None
        self.name = name


class Node:
    """One recorded op: parent handles plus a vector-Jacobian closure."""

    __slots__ = ("tape", "parents", "vjp", "grad")

    def __init__(self, tape: "Tape", parents: tuple, vjp: Callable):
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.grad: Optional[Array] = None


class Tape:
    """Append-only record of ops for one forward pass.

    Entering the tape as a context manager activates recording; ops
    executed inside append nodes in topological (recording) order.
    ``backward`` replays the nodes exactly once, in reverse, and is an
    error to call twice on the same tape.
    """

    current: Optional["Tape"] = None

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[int, tuple[Parameter, Node]] = {}
        self._consumed = False
        self._outer: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        self._outer = Tape.current
        Tape.current = self
        return self

    def __exit__(self, *exc):
        Tape.current = self._outer
        return False

    def add(self, parents: tuple, vjp: Callable) -> Node:
        node = Node(self, parents, vjp)
        self.nodes.append(node)
        return node

    def leaf(self, p: Parameter) -> Node:
        entry = self._leaves.get(id(p))
        if entry is None:
            node = Node(self, (), None)
            self.nodes.append(node)
            self._leaves[id(p)] = (p, node)
            return node
        return entry[1]

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _track(x: Tensor) -> Optional[Node]:
    """Node handle for ``x`` on the active tape, if it participates."""
    t = Tape.current
    if t is None:
        return None
    if isinstance(x, Parameter):
        return t.leaf(x)
    if x.node is not None and x.node.tape is t:
        return x.node
    return None


def _record(parent_nodes: Sequence[Optional[Node]], vjp: Callable) -> Optional[Node]:
    t = Tape.current
    if t is None or all(n is None for n in parent_nodes):
        return None
    return t.add(tuple(parent_nodes), vjp)


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse sweep: propagate dLoss into every recorded parameter.

    ``loss`` must be a scalar recorded on ``tape``. Parameter gradients
    accumulate into ``Parameter.grad``. A tape supports exactly one
    backward pass.
    """
    if tape._consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if loss.node is None or loss.node.tape is not tape:
        raise TapeError("loss is not recorded on this tape")
    if loss.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape._consumed = True
    loss.node.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is None or node.vjp is None:
            continue
        grads = node.vjp(node.grad)
        for parent, g in zip(node.parents, grads):
            if parent is None or g is None:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
    for p, leaf in tape._leaves.values():
        if leaf.grad is None:
            continue
        p.grad = leaf.grad if p.grad is None else p.grad + leaf.grad


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum ``g`` back down to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    na, nb = _track(a), _track(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    out.node = _record((na, nb), vjp)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data
    na, nb = _track(a), _track(b)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    binary = isinstance(a, SpikeTensor) and isinstance(b, SpikeTensor)
    out = SpikeTensor(out_data) if binary else Tensor(out_data)
    out.node = _record((na, nb), vjp)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    na = _track(a)
    out.node = _record((na,), lambda g: (g * c,))
    return out


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    out_data = x.data.reshape(shape)
    out = SpikeTensor(out_data) if isinstance(x, SpikeTensor) else Tensor(out_data)
    out.node = _record((_track(x),), lambda g: (g.reshape(old),))
    return out


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape
    out_data = x.data[idx]
    out = SpikeTensor(out_data) if isinstance(x, SpikeTensor) else Tensor(out_data)

    def vjp(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    out.node = _record((_track(x),), vjp)
    return out


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    binary = all(isinstance(p, SpikeTensor) for p in parts)
    out = SpikeTensor(out_data) if binary else Tensor(out_data)
    out.node = _record(tuple(_track(p) for p in parts), vjp)
    return out


def sum_axis(x: Tensor, axis: int = 0) -> Tensor:
    out = Tensor(x.data.sum(axis=axis))
    n = x.shape[axis]
    ax = axis

    def vjp(g):
        return (np.repeat(np.expand_dims(g, ax), n, axis=ax),)

    out.node = _record((_track(x),), vjp)
    return out


def _window_sum(arr: Array, w: int) -> Array:
    """Centered sliding sum of width 2w+1 over axis 0, zero-padded ends."""
    t = arr.shape[0]
    pad = np.zeros((w,) + arr.shape[1:])
    padded = np.concatenate([pad, arr, pad], axis=0)
    prefix = np.concatenate(
        [np.zeros((1,) + arr.shape[1:]), np.cumsum(padded, axis=0)], axis=0
    )
    return prefix[2 * w + 1 : 2 * w + 1 + t] - prefix[:t]


def window_sum_time(x: Tensor, w: int) -> Tensor:
    """out[t] = sum of x over time steps [t-w, t+w], zeros past the ends."""
    if w < 1:
        raise ConfigError(f"window radius must be >= 1, got {w}")
    out = Tensor(_window_sum(x.data, w))
    # the centered window sum is self-adjoint under zero padding
    out.node = _record((_track(x),), lambda g: (_window_sum(g, w),))
    return out


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Parameter, bias: Optional[Parameter] = None) -> Tensor:
    """Fully connected map over the last axis: out = x @ weight + bias."""
    din, dout = weight.shape
    if x.shape[-1] != din:
        raise ShapeError(
            f"linear: input channel axis has size {x.shape[-1]}, weight expects {din}"
        )
    out_data = x.data @ weight.data
    if bias is not None:
        out_data = out_data + bias.data
    xd, wd = x.data, weight.data
    nx, nw = _track(x), _track(weight)
    nb = _track(bias) if bias is not None else None

    def vjp(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, din).T @ g.reshape(-1, dout)
        gb = g.reshape(-1, dout).sum(axis=0) if bias is not None else None
        return gx, gw, gb

    out = Tensor(out_data)
    out.node = _record((nx, nw, nb), vjp)
    return out


def conv1d_pointwise(x: Tensor, weight: Parameter, bias: Optional[Parameter] = None) -> Tensor:
    """Kernel-1 channel mix per time step; identical to ``linear``."""
    return linear(x, weight, bias)


def conv1d_depthwise(x: Tensor, kernel: Parameter, bias: Optional[Parameter] = None) -> Tensor:
    """Per-channel temporal convolution over axis 0 with same-length output.

    ``kernel`` is (D, k) with odd k; out-of-range time steps contribute 0.
    """
    d, k = kernel.shape
    if k % 2 == 0:
        raise ConfigError(f"depthwise kernel width must be odd, got {k}")
    if x.shape[-1] != d:
        raise ShapeError(
            f"depthwise conv: input has {x.shape[-1]} channels, kernel expects {d}"
        )
    t = x.shape[0]
    c = (k - 1) // 2
    pad = np.zeros((c,) + x.shape[1:])
    xp = np.concatenate([pad, x.data, pad], axis=0)
    out_data = np.zeros_like(x.data)
    kd = kernel.data
    for j in range(k):
        out_data += xp[j : j + t] * kd[:, j]
    if bias is not None:
        out_data = out_data + bias.data
    nx, nk = _track(x), _track(kernel)
    nb = _track(bias) if bias is not None else None

    def vjp(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        for j in range(k):
            gxp[j : j + t] += g * kd[:, j]
            gk[:, j] = (xp[j : j + t] * g).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0) if bias is not None else None
        return gxp[c : c + t], gk, gb

    out = Tensor(out_data)
    out.node = _record((nx, nk, nb), vjp)
    return out


def conv_depthwise_heads(x: Tensor, kernel: Parameter, bias: Optional[Parameter] = None) -> Tensor:
    """Per-head temporal filter on a (T, B, H, Dh) tensor.

    One length-k kernel per head, shared across that head's channels
    (unit extent over the head axis); same zero padding as
    ``conv1d_depthwise``.
    """
    h, k = kernel.shape
    if k % 2 == 0:
        raise ConfigError(f"depthwise kernel width must be odd, got {k}")
    if x.ndim != 4 or x.shape[2] != h:
        raise ShapeError(
            f"head conv: input head axis has size {x.shape[2] if x.ndim == 4 else '?'},"
            f" kernel expects {h}"
        )
    t = x.shape[0]
    c = (k - 1) // 2
    pad = np.zeros((c,) + x.shape[1:])
    xp = np.concatenate([pad, x.data, pad], axis=0)
    kd = kernel.data
    out_data = np.zeros_like(x.data)
    for j in range(k):
        out_data += xp[j : j + t] * kd[None, None, :, None][..., j]
    if bias is not None:
        out_data = out_data + bias.data[None, None, :, None]
    nx, nk = _track(x), _track(kernel)
    nb = _track(bias) if bias is not None else None

    def vjp(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        for j in range(k):
            gxp[j : j + t] += g * kd[None, None, :, None][..., j]
            gk[:, j] = np.einsum("tbhd,tbhd->h", xp[j : j + t], g)
        gb = g.sum(axis=(0, 1, 3)) if bias is not None else None
        return gxp[c : c + t], gk, gb

    out = Tensor(out_data)
    out.node = _record((nx, nk, nb), vjp)
    return out


def conv2d_depthwise_heads(
    x: Tensor,
    kernel: Parameter,
    dw_bias: Optional[Parameter],
    mix_weight: Parameter,
    mix_bias: Optional[Parameter] = None,
) -> Tensor:
    """Depthwise temporal filter per (head, channel), then a pointwise
    cross-channel mix over the merged D = H*Dh axis; shape preserved."""
    t, b, h, dh = x.shape
    y = conv_depthwise_heads(x, kernel, dw_bias)
    y = reshape(y, (t, b, h * dh))
    y = linear(y, mix_weight, mix_bias)
    return reshape(y, (t, b, h, dh))


@dataclass
class BatchNormState:
    """Per-channel batch-norm parameters and running statistics."""

    gamma: Parameter
    beta: Parameter
    running_mean: Optional[Array] = None
    running_var: Optional[Array] = None
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, name: str = "bn", eps: float = 1e-5, momentum: float = 0.1):
        return cls(
            gamma=Parameter(np.ones(channels), name=f"{name}.gamma"),
            beta=Parameter(np.zeros(channels), name=f"{name}.beta"),
            eps=eps,
            momentum=momentum,
        )

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None and self.running_var is not None

    def params(self):
        return [self.gamma, self.beta]


def batchnorm(x: Tensor, state: BatchNormState) -> Tensor:
    """Normalize per channel over the joint (T, B) axes.

    Train mode uses batch statistics and updates the running estimates
    with ``state.momentum``; eval mode is the pure affine map from the
    running statistics.
    """
    if x.ndim != 3:
        raise ShapeError(f"batchnorm expects a (T, B, D) tensor, got {x.shape}")
    d = x.shape[-1]
    if state.gamma.shape != (d,):
        raise ShapeError(f"batchnorm: {d} channels but state holds {state.gamma.shape[0]}")
    nx, ng, nb = _track(x), _track(state.gamma), _track(state.beta)
    gamma, beta = state.gamma.data, state.beta.data

    if state.mode == "eval":
        if not state.initialized:
            raise ConfigError("eval-mode batchnorm before any statistics were recorded")
        ivar = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * ivar
        out = Tensor(xhat * gamma + beta)

        def vjp_eval(g):
            gflat = g.reshape(-1, d)
            return (
                g * (gamma * ivar),
                (gflat * xhat.reshape(-1, d)).sum(axis=0),
                gflat.sum(axis=0),
            )

        out.node = _record((nx, ng, nb), vjp_eval)
        return out

    n = x.shape[0] * x.shape[1]
    if n < 2:
        raise ConfigError("train-mode batchnorm requires at least 2 samples per channel")
    mean = x.data.reshape(-1, d).mean(axis=0)
    var = x.data.reshape(-1, d).var(axis=0)
    ivar = 1.0 / np.sqrt(var + state.eps)
    xc = x.data - mean
    xhat = xc * ivar
    out = Tensor(xhat * gamma + beta)

    m = state.momentum
    unbiased = var * n / max(n - 1, 1)
    if not state.initialized:
        state.running_mean = np.zeros(d)
        state.running_var = np.ones(d)
    state.running_mean = (1 - m) * state.running_mean + m * mean
    state.running_var = (1 - m) * state.running_var + m * unbiased

    def vjp_train(g):
        gflat = g.reshape(-1, d)
        gxhat = g * gamma
        gxf = gxhat.reshape(-1, d)
        xhf = xhat.reshape(-1, d)
        # standard batch-norm backward over the joint (T, B) axes
        gx = (ivar / n) * (n * gxf - gxf.sum(axis=0) - xhf * (gxf * xhf).sum(axis=0))
        return (
            gx.reshape(x.shape),
            (gflat * xhf).sum(axis=0),
            gflat.sum(axis=0),
        )

    out.node = _record((nx, ng, nb), vjp_train)
    return out


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    out = Tensor(x.data * keep)
    out.node = _record((_track(x),), lambda g: (g * keep,))
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    out.node = _record((_track(x),), vjp)
    return out


def nll_accumulated(yhat: Tensor, labels: Array) -> Tensor:
    """Mean over the batch of -log(yhat[label] / sum_i yhat[i]).

    ``yhat`` is the (B, Y) tensor of per-class scores accumulated over
    time; entries must be positive (softmax sums are).
    """
    b, y = yhat.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= y:
        raise ValueError(f"label out of range [0, {y})")
    rows = np.arange(b)
    totals = yhat.data.sum(axis=1)
    picked = yhat.data[rows, labels]
    # a collapsed class score yields an inf loss, the divergence sentinel
    with np.errstate(divide="ignore"):
        loss = float(np.mean(np.log(totals) - np.log(picked)))
    out = Tensor(loss)

    def vjp(g):
        gy = np.zeros((b, y))
        gy += (1.0 / totals)[:, None]
        gy[rows, labels] -= 1.0 / picked
        return (gy * (g / b),)

    out.node = _record((_track(yhat),), vjp)
    return out
