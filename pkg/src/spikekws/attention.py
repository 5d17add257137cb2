"""Temporal spiking attention: windowed and global branches plus a
convolutional value branch, fused into one multi-view module.

Both attention branches aggregate binary queries and keys by summation
over time (the whole sequence, or a sliding window of radius w), scale
the integer sums down, re-spike them, and gate the value stream with the
resulting binary map. No query-key matrix product appears anywhere, so
the cost of the global branch is linear in sequence length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .neuron import LifParams, SurrogateParams, lif_sequence, spike_gate
from .tensor import (
    BatchNormState,
    Parameter,
    ShapeError,
    SpikeTensor,
    Tensor,
    add,
    batchnorm,
    conv_depthwise_heads,
    dropout,
    linear,
    mul,
    reshape,
    scale,
    sum_axis,
    window_sum_time,
)


@dataclass(frozen=True)
class AttentionConfig:
    hidden_d: int
    heads_h: int
    window_radius_w: int
    time_steps_t: int

    def __post_init__(self):
        if self.hidden_d % self.heads_h != 0:
            raise ValueError(
                f"hidden size {self.hidden_d} not divisible by {self.heads_h} heads"
            )
        if self.window_radius_w < 1:
            raise ValueError(f"window radius must be >= 1, got {self.window_radius_w}")
        if 2 * self.window_radius_w + 1 > 2 * self.time_steps_t:
            raise ValueError(
                f"window span {2 * self.window_radius_w + 1} exceeds twice the "
                f"sequence length {self.time_steps_t}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_d // self.heads_h


def default_window_radius(time_steps: int) -> int:
    """Scale the window with sequence length: radius = T/5, rounded."""
    return max(1, round(time_steps / 5))


def global_attn_scale(cfg: AttentionConfig) -> float:
    """1/sqrt(Dh * T): damps whole-sequence integer accumulations."""
    return 1.0 / math.sqrt(cfg.head_dim * cfg.time_steps_t)


def window_attn_scale(cfg: AttentionConfig) -> float:
    """1/sqrt(Dh * (2w + 1)): damps windowed integer accumulations."""
    return 1.0 / math.sqrt(cfg.head_dim * (2 * cfg.window_radius_w + 1))


@dataclass
class TemporalMask:
    """Per-(batch, time step) validity flags; padding is always a suffix."""

    valid: np.ndarray  # (B, T) bool

    def __post_init__(self):
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.ndim != 2:
            raise ShapeError(f"mask must be (B, T), got {self.valid.shape}")
        counts = self.valid.sum(axis=1)
        prefix = np.arange(self.valid.shape[1])[None, :] < counts[:, None]
        if not np.array_equal(self.valid, prefix):
            raise ValueError("mask rows must be a prefix of valid steps")

    @classmethod
    def from_lengths(cls, lengths, t: int) -> "TemporalMask":
        lengths = np.asarray(lengths)
        return cls(valid=np.arange(t)[None, :] < lengths[:, None])

    @classmethod
    def all_valid(cls, b: int, t: int) -> "TemporalMask":
        return cls(valid=np.ones((b, t), dtype=bool))

    @property
    def batch(self) -> int:
        return self.valid.shape[0]

    @property
    def steps(self) -> int:
        return self.valid.shape[1]

    def time_major(self) -> np.ndarray:
        """(T, B, 1) float view for broadcasting against (T, B, D)."""
        return self.valid.T[:, :, None].astype(np.float64)


def apply_temporal_mask(x: Tensor, mask: TemporalMask) -> Tensor:
    """Zero every entry at an invalid time step; valid steps untouched."""
    if x.shape[0] != mask.steps or x.shape[1] != mask.batch:
        raise ShapeError(
            f"mask ({mask.batch} samples, {mask.steps} steps) does not match "
            f"tensor {x.shape}"
        )
    m = SpikeTensor(np.broadcast_to(mask.time_major(), x.shape[:2] + (1,)).copy())
    return mul(x, m)


@dataclass
class ForwardCtx:
    """Per-forward runtime switches threaded through every layer."""

    training: bool = False
    rng: Optional[np.random.Generator] = None
    probe: Optional[object] = None
    smooth: bool = False


_EVAL = ForwardCtx()


def _probe(ctx: ForwardCtx, name, group, per_input_ops, data, *,
           kind="ac", count=None, nnz=None):
    if ctx.probe is not None:
        ctx.probe.record(
            name, group, per_input_ops, data, kind=kind, count=count, nnz=nnz
        )


class ProjectionBlock:
    """Pointwise channel mix, batch norm, then a spiking neuron.

    The same unit serves both the kernel-1 convolution and the fully
    connected flavor; they are the same per-timestep map.
    """

    def __init__(self, d_in: int, d_out: int, *, name: str, rng: np.random.Generator,
                 lif: LifParams, sg: SurrogateParams, dropout_p: float = 0.0,
                 group: str = "conv"):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (d_in, d_out)),
                                name=f"{name}.w")
        self.bias = Parameter(np.zeros(d_out), name=f"{name}.b")
        self.bn: Optional[BatchNormState] = BatchNormState.create(d_out, name=name)
        self.lif = lif
        self.sg = sg
        self.dropout_p = dropout_p
        self.name = name
        self.group = group

    def params(self):
        out = [self.weight, self.bias]
        if self.bn is not None:
            out += self.bn.params()
        return out

    def forward(self, x: Tensor, ctx: ForwardCtx = _EVAL) -> Tensor:
        _probe(ctx, self.name, self.group, self.weight.shape[1], x.data)
        y = linear(x, self.weight, self.bias)
        if self.bn is not None:
            y = batchnorm(y, self.bn)
        y = dropout(y, self.dropout_p, ctx.rng, ctx.training)
        return lif_sequence(y, self.lif, self.sg, smooth=ctx.smooth)

    __call__ = forward


def qkv(x_s: Tensor, wq: ProjectionBlock, wk: ProjectionBlock, wv: ProjectionBlock,
        ctx: ForwardCtx = _EVAL):
    """Three independent projection blocks over the same spiking input."""
    return wq(x_s, ctx), wk(x_s, ctx), wv(x_s, ctx)


def _split_heads(x: Tensor, cfg: AttentionConfig) -> Tensor:
    t, b, d = x.shape
    if d != cfg.hidden_d:
        raise ShapeError(f"expected {cfg.hidden_d} channels, got {d}")
    return reshape(x, (t, b, cfg.heads_h, cfg.head_dim))


def _merge_heads(x: Tensor) -> Tensor:
    t, b, h, dh = x.shape
    return reshape(x, (t, b, h * dh))


def attend_global(q_m: Tensor, k_m: Tensor, v_s: Tensor, cfg: AttentionConfig,
                  lif: LifParams = LifParams(), sg: SurrogateParams = SurrogateParams(),
                  ctx: ForwardCtx = _EVAL, *, beta: Optional[float] = None,
                  name: str = "attn.global") -> Tensor:
    """Whole-sequence branch: per head, sum masked queries and keys over
    all time steps, scale, re-spike, and broadcast the single-step map
    across time onto the value stream."""
    t = q_m.shape[0]
    q4, k4, v4 = (_split_heads(x, cfg) for x in (q_m, k_m, v_s))
    _probe(ctx, f"{name}.q_sum", "attention", 1, q4.data)
    _probe(ctx, f"{name}.k_sum", "attention", 1, k4.data)
    qhat = sum_axis(q4, axis=0)
    khat = sum_axis(k4, axis=0)
    _probe(ctx, f"{name}.score_add", "attention", 1, qhat.data)
    beta_ = beta if beta is not None else global_attn_scale(cfg)
    s_attn = scale(add(qhat, khat), beta_)
    gate = spike_gate(s_attn, lif, sg, smooth=ctx.smooth)
    _probe(ctx, f"{name}.gate", "attention", 1, gate.data,
           count=t * gate.size, nnz=t * int(np.count_nonzero(gate.data)))
    out = mul(gate, v4)
    return _merge_heads(out)


def attend_windowed(q_m: Tensor, k_m: Tensor, v_s: Tensor, cfg: AttentionConfig,
                    lif: LifParams = LifParams(), sg: SurrogateParams = SurrogateParams(),
                    ctx: ForwardCtx = _EVAL, *, beta: Optional[float] = None,
                    name: str = "attn.window") -> Tensor:
    """Sliding-window branch: same aggregation restricted to the 2w+1
    steps around each position, producing a per-timestep map."""
    w = cfg.window_radius_w
    q4, k4, v4 = (_split_heads(x, cfg) for x in (q_m, k_m, v_s))
    _probe(ctx, f"{name}.q_sum", "attention", 2 * w + 1, q4.data)
    _probe(ctx, f"{name}.k_sum", "attention", 2 * w + 1, k4.data)
    qsum = window_sum_time(q4, w)
    ksum = window_sum_time(k4, w)
    _probe(ctx, f"{name}.score_add", "attention", 1, qsum.data)
    beta_ = beta if beta is not None else window_attn_scale(cfg)
    s_local = scale(add(qsum, ksum), beta_)
    gate = spike_gate(s_local, lif, sg, smooth=ctx.smooth)
    _probe(ctx, f"{name}.gate", "attention", 1, gate.data)
    out = mul(gate, v4)
    return _merge_heads(out)


class ValueConvBranch:
    """Depthwise temporal filter per head, cross-channel pointwise mix,
    batch norm, then a spiking neuron over the merged channels."""

    KERNEL_T = 9

    def __init__(self, cfg: AttentionConfig, *, name: str, rng: np.random.Generator,
                 lif: LifParams, sg: SurrogateParams, dropout_p: float = 0.0):
        d, h = cfg.hidden_d, cfg.heads_h
        kb = 1.0 / math.sqrt(self.KERNEL_T)
        mb = 1.0 / math.sqrt(d)
        self.kernel = Parameter(rng.uniform(-kb, kb, (h, self.KERNEL_T)),
                                name=f"{name}.dw.w")
        self.dw_bias = Parameter(np.zeros(h), name=f"{name}.dw.b")
        self.mix_weight = Parameter(rng.uniform(-mb, mb, (d, d)), name=f"{name}.mix.w")
        self.mix_bias = Parameter(np.zeros(d), name=f"{name}.mix.b")
        self.bn: Optional[BatchNormState] = BatchNormState.create(d, name=name)
        self.cfg = cfg
        self.lif = lif
        self.sg = sg
        self.dropout_p = dropout_p
        self.name = name

    def params(self):
        out = [self.kernel, self.dw_bias, self.mix_weight, self.mix_bias]
        if self.bn is not None:
            out += self.bn.params()
        return out

    def forward(self, v_s: Tensor, ctx: ForwardCtx = _EVAL) -> Tensor:
        cfg = self.cfg
        v4 = _split_heads(v_s, cfg)
        if v4.shape[2] != self.kernel.shape[0]:
            raise ShapeError(
                f"value branch configured for {self.kernel.shape[0]} heads, "
                f"input has {v4.shape[2]}"
            )
        _probe(ctx, f"{self.name}.dw", "attention", self.KERNEL_T, v4.data)
        y = conv_depthwise_heads(v4, self.kernel, self.dw_bias)
        y = _merge_heads(y)
        _probe(ctx, f"{self.name}.mix", "attention", cfg.hidden_d, y.data)
        y = linear(y, self.mix_weight, self.mix_bias)
        if self.bn is not None:
            y = batchnorm(y, self.bn)
        y = dropout(y, self.dropout_p, ctx.rng, ctx.training)
        return lif_sequence(y, self.lif, self.sg, smooth=ctx.smooth)

    __call__ = forward


class MultiViewAttention:
    """Shared Q/K/V projections feeding a windowed branch, a global
    branch, and the value-convolution branch; the two attention maps are
    fused first, then combined with the convolutional view."""

    def __init__(self, cfg: AttentionConfig, *, name: str, rng: np.random.Generator,
                 lif: LifParams = LifParams(), sg: SurrogateParams = SurrogateParams(),
                 dropout_p: float = 0.0):
        d = cfg.hidden_d
        mk = dict(rng=rng, lif=lif, sg=sg, dropout_p=dropout_p, group="attention")
        self.wq = ProjectionBlock(d, d, name=f"{name}.q", **mk)
        self.wk = ProjectionBlock(d, d, name=f"{name}.k", **mk)
        self.wv = ProjectionBlock(d, d, name=f"{name}.v", **mk)
        self.vbranch = ValueConvBranch(cfg, name=f"{name}.vconv", rng=rng,
                                       lif=lif, sg=sg, dropout_p=dropout_p)
        self.w_dual = ProjectionBlock(d, d, name=f"{name}.dual", **mk)
        self.w_out = ProjectionBlock(d, d, name=f"{name}.out", **mk)
        self.cfg = cfg
        self.lif = lif
        self.sg = sg
        self.name = name

    def params(self):
        out = []
        for m in (self.wq, self.wk, self.wv, self.vbranch, self.w_dual, self.w_out):
            out += m.params()
        return out

    def forward(self, x_s: Tensor, mask: Optional[TemporalMask] = None,
                ctx: ForwardCtx = _EVAL) -> Tensor:
        q, k, v = qkv(x_s, self.wq, self.wk, self.wv, ctx)
        if mask is not None:
            q = apply_temporal_mask(q, mask)
            k = apply_temporal_mask(k, mask)
        b1 = attend_windowed(q, k, v, self.cfg, self.lif, self.sg, ctx,
                             name=f"{self.name}.window")
        b2 = attend_global(q, k, v, self.cfg, self.lif, self.sg, ctx,
                           name=f"{self.name}.global")
        b3 = self.vbranch(v, ctx)
        fused = self.w_dual(add(b1, b2), ctx)
        return self.w_out(add(fused, b3), ctx)

    __call__ = forward
