"""Synaptic-operation accounting and 45nm energy estimation.

Every layer is described by the dense multiply-accumulate count it would
perform on real-valued input (its FLOPs). On binary input the hardware
only accumulates where a spike arrived, so the charged operation count
is SOPs = input firing rate x FLOPs, costed at 0.9 pJ per accumulate;
real-valued layers pay the full 4.6 pJ multiply-accumulate price. Batch
norm must be folded into the preceding weights before profiling so the
affine map rides along for free.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import ForwardCtx, TemporalMask
from .tensor import BatchNormState, ConfigError, Tensor

E_MAC_PJ = 4.6
E_AC_PJ = 0.9


@dataclass
class LayerCost:
    name: str
    group: str  # "conv" | "attention"
    op_kind: str  # "mac" | "ac"
    flops: int
    input_firing_rate: float
    sops: int

    @property
    def energy_mj(self) -> float:
        if self.op_kind == "mac":
            return self.flops * E_MAC_PJ * 1e-9
        return self.sops * E_AC_PJ * 1e-9


@dataclass
class EnergyReport:
    layers: list[LayerCost] = field(default_factory=list)
    e_mac_pj: float = E_MAC_PJ
    e_ac_pj: float = E_AC_PJ

    @property
    def mac_flops(self) -> int:
        return sum(l.flops for l in self.layers if l.op_kind == "mac")

    @property
    def total_sops(self) -> int:
        return sum(l.sops for l in self.layers if l.op_kind == "ac")

    def group_sops(self, group: str) -> int:
        return sum(l.sops for l in self.layers if l.op_kind == "ac" and l.group == group)

    @property
    def total_mj(self) -> float:
        return energy_mj(self.mac_flops, self.total_sops)

    def to_records(self) -> list[dict]:
        return [
            {
                "name": l.name,
                "group": l.group,
                "op_kind": l.op_kind,
                "flops": l.flops,
                "input_firing_rate": l.input_firing_rate,
                "sops": l.sops,
                "energy_mj": l.energy_mj,
            }
            for l in self.layers
        ]


def energy_mj(mac_flops: float, sops: float) -> float:
    """Millijoules for a MAC count plus an accumulate count at 45nm."""
    return (mac_flops * E_MAC_PJ + sops * E_AC_PJ) * 1e-9


def measure_firing_rate(x) -> float:
    """Fraction of nonzero entries."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.size == 0:
        return 0.0
    return float(np.count_nonzero(data) / data.size)


class Probe:
    """Forward-pass recorder: layers report their dense op count and the
    nonzero structure of their input; the probe turns that into per-layer
    costs. One probe per instrumented pass."""

    def __init__(self):
        self.costs: list[LayerCost] = []

    def record(self, name: str, group: str, per_input_ops: int, data: np.ndarray,
               *, kind: str = "ac", count: Optional[int] = None,
               nnz: Optional[int] = None) -> None:
        count = data.size if count is None else count
        nnz = int(np.count_nonzero(data)) if nnz is None else nnz
        flops = count * per_input_ops
        fr = nnz / count if count else 0.0
        sops = nnz * per_input_ops if kind == "ac" else 0
        self.costs.append(
            LayerCost(name=name, group=group, op_kind=kind, flops=flops,
                      input_firing_rate=fr, sops=sops)
        )


def layer_flops(desc: dict) -> int:
    """Dense MAC count for one layer descriptor.

    Kinds: linear/pconv {t, b, d_in, d_out}; dconv1d {t, b, d, k};
    dconv2d_heads {t, b, h, d_h} (9-tap temporal filter plus the D x D
    pointwise mix); bn_folded contributes nothing.
    """
    kind = desc.get("kind")
    if kind in ("linear", "pconv"):
        return desc["t"] * desc["b"] * desc["d_in"] * desc["d_out"]
    if kind == "dconv1d":
        return desc["t"] * desc["b"] * desc["d"] * desc["k"]
    if kind == "dconv2d_heads":
        d = desc["h"] * desc["d_h"]
        return desc["t"] * desc["b"] * (desc["h"] * desc["d_h"] * 9 + d * d)
    if kind == "bn_folded":
        return 0
    raise ValueError(f"unknown layer kind: {kind!r}")


def fold_bn(weight: np.ndarray, bias: Optional[np.ndarray], bn: BatchNormState,
            *, axis: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Fuse an eval-mode batch norm into the preceding weights.

    w' = gamma * w / sqrt(var + eps); b' = gamma * (b - mean) / sqrt(var
    + eps) + beta. ``axis`` names the weight axis indexed by output
    channel (last for dense maps, first for depthwise kernels).
    """
    if bn.mode != "eval":
        raise ConfigError("fold_bn requires an eval-mode batch norm")
    if not bn.initialized:
        raise ConfigError("fold_bn requires recorded running statistics")
    scale = bn.gamma.data / np.sqrt(bn.running_var + bn.eps)
    shape = [1] * weight.ndim
    shape[axis] = scale.size
    w = weight * scale.reshape(shape)
    b = np.zeros_like(scale) if bias is None else bias
    b = scale * (b - bn.running_mean) + bn.beta.data
    return w, b


def fold_model(model) -> None:
    """Fold every batch norm of a SpikingTransformer into the weights it
    follows, in place; the model becomes eval-only."""
    if model.bn_folded:
        return
    model.eval()

    def fold_into(weight, bias, owner, attr, *, axis=-1):
        bn = getattr(owner, attr)
        weight.data, bias.data = fold_bn(weight.data, bias.data, bn, axis=axis)
        setattr(owner, attr, None)

    emb = model.embed
    fold_into(emb.dconv_k, emb.dconv_b, emb, "bn1", axis=0)
    fold_into(emb.lin_w, emb.lin_b, emb, "bn2")
    for block in model.blocks:
        a = block.attn
        for pb in (a.wq, a.wk, a.wv, a.w_dual, a.w_out):
            fold_into(pb.weight, pb.bias, pb, "bn")
        vb = a.vbranch
        fold_into(vb.mix_weight, vb.mix_bias, vb, "bn")
        m = block.mlp
        for pb in (m.pc, m.expand, m.compress):
            fold_into(pb.weight, pb.bias, pb, "bn")
        fold_into(m.dc_k, m.dc_b, m, "dc_bn", axis=0)
    model.bn_folded = True


def estimate_energy(model, x: Tensor, mask: Optional[TemporalMask] = None) -> EnergyReport:
    """One instrumented eval forward; requires folded batch norm."""
    if not model.bn_folded:
        raise ConfigError("estimate_energy requires folded batch norm (fold_model)")
    probe = Probe()
    model.forward(x, mask, ForwardCtx(probe=probe))
    return EnergyReport(layers=probe.costs)


def format_report(report: EnergyReport) -> str:
    """Human-readable per-layer table plus group and grand totals."""
    lines = []
    header = f"{'layer':<28} {'grp':<10} {'kind':<5} {'flops':>12} {'fr':>8} {'sops':>12} {'energy_mJ':>12}"
    lines.append(header)
    lines.append("-" * len(header))
    for l in report.layers:
        lines.append(
            f"{l.name:<28} {l.group:<10} {l.op_kind:<5} {l.flops:>12} "
            f"{l.input_firing_rate:>8.4f} {l.sops:>12} {l.energy_mj:>12.6f}"
        )
    lines.append("-" * len(header))
    lines.append(f"MAC flops: {report.mac_flops}")
    lines.append(f"SOPs total: {report.total_sops}  "
                 f"(conv {report.group_sops('conv')}, "
                 f"attention {report.group_sops('attention')})")
    lines.append(f"estimated energy: {report.total_mj:.6f} mJ "
                 f"({report.e_mac_pj} pJ/MAC, {report.e_ac_pj} pJ/AC)")
    return "\n".join(lines)
