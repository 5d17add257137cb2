"""Network assembly: embedding front end, transformer blocks with the
split-and-refine channel MLP, classification head, loss, and the binary
checkpoint format.

Residual connections add spike trains elementwise, so tensors between
blocks carry small integers rather than strict binaries; every
projection block re-binarizes through its spiking neuron.
"""

from __future__ import annotations

import io
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .attention import (
    AttentionConfig,
    ForwardCtx,
    MultiViewAttention,
    ProjectionBlock,
    TemporalMask,
)
from .neuron import LifParams, SurrogateParams, lif_sequence
from .tensor import (
    BatchNormState,
    ConfigError,
    Parameter,
    ShapeError,
    Tensor,
    add,
    batchnorm,
    conv1d_depthwise,
    dropout,
    linear,
    mul,
    nll_accumulated,
    slice_axis,
    softmax,
    sum_axis,
    concat,
)

CHECKPOINT_MAGIC = b"SPKC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    blocks_n: int = 1
    heads_h: int = 8
    hidden_d: int = 128
    input_neurons_n: int = 140
    window_radius_w: int = 20
    time_steps_t: int = 100
    expansion_alpha: float = 4.0
    classes_y: int = 20
    dropout_p: float = 0.1
    input_kind: str = "spike"

    def __post_init__(self):
        if self.blocks_n < 1:
            raise ConfigError(f"need at least one block, got {self.blocks_n}")
        if self.classes_y < 2:
            raise ConfigError(f"need at least two classes, got {self.classes_y}")
        hidden = self.expansion_alpha * self.hidden_d
        if hidden != int(hidden) or int(hidden) % 2 != 0:
            raise ConfigError(
                f"expansion {self.expansion_alpha} x {self.hidden_d} must be an "
                "even channel count (two equal halves)"
            )
        if self.input_kind not in ("spike", "analog"):
            raise ConfigError(f"input_kind must be spike|analog, got {self.input_kind}")
        # delegates D % H, window bounds to the attention config
        self.attention()

    def attention(self) -> AttentionConfig:
        return AttentionConfig(
            hidden_d=self.hidden_d,
            heads_h=self.heads_h,
            window_radius_w=self.window_radius_w,
            time_steps_t=self.time_steps_t,
        )

    @property
    def mlp_hidden(self) -> int:
        return int(self.expansion_alpha * self.hidden_d)


class Embedder:
    """Front end: pointwise channel lift, depthwise temporal conv (k=7),
    BN + spiking neuron, then a residual linear re-projection. The
    residual sum of two spike trains lands in {0, 1, 2}."""

    KERNEL_T = 7

    def __init__(self, cfg: ModelConfig, *, rng: np.random.Generator,
                 lif: LifParams, sg: SurrogateParams):
        n, d = cfg.input_neurons_n, cfg.hidden_d
        pb = 1.0 / math.sqrt(n)
        kb = 1.0 / math.sqrt(self.KERNEL_T)
        lb = 1.0 / math.sqrt(d)
        self.pconv_w = Parameter(rng.uniform(-pb, pb, (n, d)), name="embed.pconv.w")
        self.pconv_b = Parameter(np.zeros(d), name="embed.pconv.b")
        self.dconv_k = Parameter(rng.uniform(-kb, kb, (d, self.KERNEL_T)),
                                 name="embed.dconv.w")
        self.dconv_b = Parameter(np.zeros(d), name="embed.dconv.b")
        self.bn1: Optional[BatchNormState] = BatchNormState.create(d, name="embed.bn1")
        self.lin_w = Parameter(rng.uniform(-lb, lb, (d, d)), name="embed.lin.w")
        self.lin_b = Parameter(np.zeros(d), name="embed.lin.b")
        self.bn2: Optional[BatchNormState] = BatchNormState.create(d, name="embed.bn2")
        self.lif = lif
        self.sg = sg
        self.dropout_p = cfg.dropout_p
        self.analog_input = cfg.input_kind == "analog"

    def params(self):
        out = [self.pconv_w, self.pconv_b, self.dconv_k, self.dconv_b]
        if self.bn1 is not None:
            out += self.bn1.params()
        out += [self.lin_w, self.lin_b]
        if self.bn2 is not None:
            out += self.bn2.params()
        return out

    def forward(self, x: Tensor, ctx: ForwardCtx) -> Tensor:
        # a real-valued front end is the only place dense MACs can occur
        front = "mac" if self.analog_input else "ac"
        if ctx.probe is not None:
            ctx.probe.record("embed.pconv", "conv", self.pconv_w.shape[1], x.data,
                             kind=front)
        y = linear(x, self.pconv_w, self.pconv_b)
        if ctx.probe is not None:
            ctx.probe.record("embed.dconv", "conv", self.KERNEL_T, y.data, kind=front)
        y = conv1d_depthwise(y, self.dconv_k, self.dconv_b)
        if self.bn1 is not None:
            y = batchnorm(y, self.bn1)
        y = dropout(y, self.dropout_p, ctx.rng, ctx.training)
        x1 = lif_sequence(y, self.lif, self.sg, smooth=ctx.smooth)

        if ctx.probe is not None:
            ctx.probe.record("embed.lin", "conv", self.lin_w.shape[1], x1.data)
        y = linear(x1, self.lin_w, self.lin_b)
        if self.bn2 is not None:
            y = batchnorm(y, self.bn2)
        y = dropout(y, self.dropout_p, ctx.rng, ctx.training)
        x2 = lif_sequence(y, self.lif, self.sg, smooth=ctx.smooth)
        return add(x2, x1)

    __call__ = forward


class SplitConvMlp:
    """Inverted-bottleneck channel mixer with selective temporal
    refinement: project, expand, split the hidden channels in half,
    run a depthwise k=31 conv over one half, concatenate, compress."""

    KERNEL_T = 31

    def __init__(self, cfg: ModelConfig, *, name: str, rng: np.random.Generator,
                 lif: LifParams, sg: SurrogateParams):
        d, hidden = cfg.hidden_d, cfg.mlp_hidden
        half = hidden // 2
        kb = 1.0 / math.sqrt(self.KERNEL_T)
        self.pc = ProjectionBlock(d, d, name=f"{name}.pc", rng=rng, lif=lif, sg=sg,
                                  dropout_p=cfg.dropout_p)
        self.expand = ProjectionBlock(d, hidden, name=f"{name}.expand", rng=rng,
                                      lif=lif, sg=sg, dropout_p=cfg.dropout_p)
        self.dc_k = Parameter(rng.uniform(-kb, kb, (half, self.KERNEL_T)),
                              name=f"{name}.dc.w")
        self.dc_b = Parameter(np.zeros(half), name=f"{name}.dc.b")
        self.dc_bn: Optional[BatchNormState] = BatchNormState.create(half, name=f"{name}.dc")
        self.compress = ProjectionBlock(hidden, d, name=f"{name}.compress", rng=rng,
                                        lif=lif, sg=sg, dropout_p=cfg.dropout_p)
        self.hidden = hidden
        self.lif = lif
        self.sg = sg
        self.dropout_p = cfg.dropout_p
        self.name = name

    def params(self):
        out = self.pc.params() + self.expand.params() + [self.dc_k, self.dc_b]
        if self.dc_bn is not None:
            out += self.dc_bn.params()
        return out + self.compress.params()

    def forward(self, x: Tensor, ctx: ForwardCtx) -> Tensor:
        half = self.hidden // 2
        y = self.pc(x, ctx)
        y = self.expand(y, ctx)
        h1 = slice_axis(y, -1, 0, half)
        h2 = slice_axis(y, -1, half, self.hidden)
        if ctx.probe is not None:
            ctx.probe.record(f"{self.name}.dc", "conv", self.KERNEL_T, h1.data)
        r = conv1d_depthwise(h1, self.dc_k, self.dc_b)
        if self.dc_bn is not None:
            r = batchnorm(r, self.dc_bn)
        r = dropout(r, self.dropout_p, ctx.rng, ctx.training)
        h1 = lif_sequence(r, self.lif, self.sg, smooth=ctx.smooth)
        merged = concat([h1, h2], axis=-1)
        return self.compress(merged, ctx)

    __call__ = forward


class TransformerBlock:
    def __init__(self, cfg: ModelConfig, index: int, *, rng: np.random.Generator,
                 lif: LifParams, sg: SurrogateParams):
        name = f"block{index}"
        self.attn = MultiViewAttention(cfg.attention(), name=f"{name}.attn", rng=rng,
                                       lif=lif, sg=sg, dropout_p=cfg.dropout_p)
        self.mlp = SplitConvMlp(cfg, name=f"{name}.mlp", rng=rng, lif=lif, sg=sg)

    def params(self):
        return self.attn.params() + self.mlp.params()

    def forward(self, x: Tensor, mask: Optional[TemporalMask], ctx: ForwardCtx) -> Tensor:
        y = add(self.attn(x, mask, ctx), x)
        return add(self.mlp(y, ctx), y)

    __call__ = forward


class SpikingTransformer:
    """The full classifier: embedder, n transformer blocks with residual
    spike addition, and a per-timestep linear head producing class
    scores (T, B, Y)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0,
                 lif: LifParams = LifParams(), sg: SurrogateParams = SurrogateParams()):
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.lif = lif
        self.sg = sg
        self.embed = Embedder(cfg, rng=rng, lif=lif, sg=sg)
        self.blocks = [
            TransformerBlock(cfg, i, rng=rng, lif=lif, sg=sg)
            for i in range(cfg.blocks_n)
        ]
        hb = 1.0 / math.sqrt(cfg.hidden_d)
        self.head_w = Parameter(rng.uniform(-hb, hb, (cfg.hidden_d, cfg.classes_y)),
                                name="head.w")
        self.head_b = Parameter(np.zeros(cfg.classes_y), name="head.b")
        self.bn_folded = False

    # -- parameter / state bookkeeping ------------------------------------

    def parameters(self) -> list[Parameter]:
        out = self.embed.params()
        for b in self.blocks:
            out += b.params()
        out += [self.head_w, self.head_b]
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        named = {}
        for p in self.parameters():
            if p.name in named:
                raise ConfigError(f"duplicate parameter name {p.name}")
            named[p.name] = p
        return named

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def _bn_states(self) -> list[tuple[str, "BatchNormState"]]:
        out = []

        def grab(owner, attr):
            bn = getattr(owner, attr)
            if bn is not None:
                out.append((bn.gamma.name.rsplit(".", 1)[0], bn))

        grab(self.embed, "bn1")
        grab(self.embed, "bn2")
        for b in self.blocks:
            a = b.attn
            for blockette in (a.wq, a.wk, a.wv, a.vbranch, a.w_dual, a.w_out):
                grab(blockette, "bn")
            m = b.mlp
            grab(m.pc, "bn")
            grab(m.expand, "bn")
            grab(m, "dc_bn")
            grab(m.compress, "bn")
        return out

    def train(self) -> "SpikingTransformer":
        if self.bn_folded:
            raise ConfigError("cannot train a model with folded batch norm")
        for _, bn in self._bn_states():
            bn.mode = "train"
        return self

    def eval(self) -> "SpikingTransformer":
        for _, bn in self._bn_states():
            bn.mode = "eval"
        return self

    # -- forward -----------------------------------------------------------

    def forward(self, x: Tensor, mask: Optional[TemporalMask] = None,
                ctx: Optional[ForwardCtx] = None) -> Tensor:
        ctx = ctx or ForwardCtx()
        cfg = self.config
        if x.ndim != 3 or x.shape[-1] != cfg.input_neurons_n:
            raise ShapeError(
                f"expected input (T, B, {cfg.input_neurons_n}), got {x.shape}"
            )
        y = self.embed(x, ctx)
        for block in self.blocks:
            y = block(y, mask, ctx)
        if ctx.probe is not None:
            ctx.probe.record("head", "conv", cfg.classes_y, y.data)
        return linear(y, self.head_w, self.head_b)

    __call__ = forward


def classify(scores: Tensor, mask: Optional[TemporalMask] = None):
    """Per-step softmax, accumulation over (valid) time steps, argmax.

    Returns (per-step probabilities (T, B, Y), accumulated scores (B, Y),
    predicted class indices (B,)); ties resolve to the lowest index.
    """
    probs = softmax(scores, axis=-1)
    if mask is not None:
        gated = mul(probs, Tensor(mask.time_major()))
    else:
        gated = probs
    yhat = sum_axis(gated, axis=0)
    pred = np.argmax(yhat.data, axis=1)
    return probs, yhat, pred


def cross_entropy_loss(yhat: Tensor, labels) -> Tensor:
    """Mean −log(yhat_label / Σ_i yhat_i) over the batch; differentiable."""
    return nll_accumulated(yhat, np.asarray(labels))


# ---------------------------------------------------------------------------
# checkpoint format: magic "SPKC", version u32, length-prefixed config JSON,
# tensor count u32, then per tensor (u16 name length, name, u8 ndim,
# u32 dims..., f32 little-endian data); trailing CRC32 of everything after
# the 8-byte header. Batch-norm running statistics ride along as tensors so
# a restored model can run eval mode immediately.
# ---------------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def _named_state(model: SpikingTransformer) -> list[tuple[str, np.ndarray]]:
    items = [(p.name, p.data) for p in model.parameters()]
    for name, bn in model._bn_states():
        if bn.initialized:
            items.append((f"{name}.running_mean", bn.running_mean))
            items.append((f"{name}.running_var", bn.running_var))
    return items


def _pack_tensor(name: str, data: np.ndarray) -> bytes:
    enc = name.encode()
    parts = [struct.pack("<H", len(enc)), enc, struct.pack("<B", data.ndim)]
    parts += [struct.pack("<I", dim) for dim in data.shape]
    parts.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: SpikingTransformer, path) -> None:
    items = _named_state(model)
    body = io.BytesIO()
    cfg = json.dumps(asdict(model.config)).encode()
    body.write(struct.pack("<I", len(cfg)))
    body.write(cfg)
    body.write(struct.pack("<I", len(items)))
    for name, data in items:
        body.write(_pack_tensor(name, data))
    payload = body.getvalue()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path) -> SpikingTransformer:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    payload, (crc,) = blob[8:-4], struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: checksum mismatch, file corrupt")

    buf = io.BytesIO(payload)

    def read(fmt):
        size = struct.calcsize(fmt)
        raw = buf.read(size)
        if len(raw) != size:
            raise CheckpointError(f"{path}: truncated checkpoint")
        return struct.unpack(fmt, raw)

    (cfg_len,) = read("<I")
    cfg = ModelConfig(**json.loads(buf.read(cfg_len).decode()))
    model = SpikingTransformer(cfg, seed=0)
    params = model.named_parameters()
    bn_by_prefix = dict(model._bn_states())
    (count,) = read("<I")
    for _ in range(count):
        (name_len,) = read("<H")
        name = buf.read(name_len).decode()
        (ndim,) = read("<B")
        shape = tuple(read("<I")[0] for _ in range(ndim))
        n_items = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(buf.read(4 * n_items), dtype="<f4").astype(np.float64)
        data = data.reshape(shape)
        if name.endswith(".running_mean") or name.endswith(".running_var"):
            prefix, stat = name.rsplit(".", 1)
            bn = bn_by_prefix.get(prefix)
            if bn is None:
                raise CheckpointError(f"{path}: unknown batch-norm state {name}")
            setattr(bn, stat, data)
        else:
            p = params.get(name)
            if p is None:
                raise CheckpointError(f"{path}: unknown parameter {name}")
            if p.shape != shape:
                raise CheckpointError(
                    f"{path}: parameter {name} has shape {shape}, model expects {p.shape}"
                )
            p.data = data
    model.eval()
    return model
