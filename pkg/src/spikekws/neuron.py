"""Leaky integrate-and-fire dynamics with a hard reset.

The forward recurrence per time step is

    H[t] = V[t-1] - (V[t-1] - v_reset) / tau + X[t]
    S[t] = 1 if H[t] >= v_th else 0
    V[t] = H[t] * (1 - S[t]) + v_reset * S[t]

Backward replaces the Heaviside derivative with the arctan surrogate and
detaches the reset gate (dV/dH = 1 - S), the standard stabilization for
surrogate-gradient BPTT. A smooth twin mode swaps the step function for
the sigmoid-like primitive whose exact derivative is the surrogate; the
twin is fully differentiable, which is what the finite-difference checks
exercise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Array, SpikeTensor, Tensor, _record, _track


@dataclass(frozen=True)
class LifParams:
    """Membrane constants; defaults are the standard operating point."""

    tau: float = 2.0
    v_th: float = 1.0
    v_reset: float = 0.5

    def __post_init__(self):
        if self.tau < 1.0:
            raise ValueError(f"tau must be >= 1 (leak in (0, 1]), got {self.tau}")
        if self.v_reset >= self.v_th:
            raise ValueError(
                f"v_reset ({self.v_reset}) must lie below v_th ({self.v_th})"
            )


@dataclass
class LifState:
    """Membrane potential carried across time steps, one entry per unit."""

    v: Array

    @classmethod
    def initial(cls, shape: tuple, p: LifParams) -> "LifState":
        return cls(v=np.full(shape, p.v_reset))


@dataclass(frozen=True)
class SurrogateParams:
    """Sharpness of the arctan surrogate used in place of the step derivative."""

    alpha: float = 5.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"surrogate alpha must be positive, got {self.alpha}")


def surrogate_grad(u, sg: SurrogateParams = SurrogateParams()):
    """dS/dH stand-in evaluated at u = H - v_th.

    alpha / (2 * (1 + ((pi/2) * alpha * u)^2)); even, peaked at u = 0,
    and integrates to 1 over the real line.
    """
    z = (np.pi / 2.0) * sg.alpha * np.asarray(u, dtype=np.float64)
    return sg.alpha / (2.0 * (1.0 + z * z))


def smooth_spike(u, sg: SurrogateParams = SurrogateParams()):
    """Antiderivative of ``surrogate_grad``: a [0, 1] sigmoid-like ramp."""
    z = (np.pi / 2.0) * sg.alpha * np.asarray(u, dtype=np.float64)
    return np.arctan(z) / np.pi + 0.5


def lif_step(x_t: Tensor, state: LifState, p: LifParams) -> tuple[SpikeTensor, LifState]:
    """Advance one time step; pure numpy, no tape involvement."""
    v = state.v
    h = v - (v - p.v_reset) / p.tau + x_t.data
    s = (h >= p.v_th).astype(np.float64)
    v_next = h * (1.0 - s) + p.v_reset * s
    return SpikeTensor(s), LifState(v=v_next)


def lif_sequence(
    x: Tensor,
    p: LifParams = LifParams(),
    sg: SurrogateParams = SurrogateParams(),
    *,
    smooth: bool = False,
) -> Tensor:
    """Fold the step dynamics over axis 0 from a v_reset-initialized state.

    Recorded as a single tape node whose backward runs the full reverse
    recurrence. ``smooth=True`` selects the twin dynamics (soft spikes,
    reset gate differentiated exactly); the hard path emits a
    SpikeTensor and uses the surrogate with a detached reset.
    """
    t = x.shape[0]
    leak = 1.0 - 1.0 / p.tau
    v = np.full(x.shape[1:], p.v_reset)
    hs = np.empty_like(x.data)
    ss = np.empty_like(x.data)
    for i in range(t):
        h = v - (v - p.v_reset) / p.tau + x.data[i]
        if smooth:
            s = smooth_spike(h - p.v_th, sg)
            v = h * (1.0 - s) + p.v_reset * s
        else:
            s = (h >= p.v_th).astype(np.float64)
            v = h * (1.0 - s) + p.v_reset * s
        hs[i] = h
        ss[i] = s

    def vjp(g):
        gx = np.empty_like(g)
        gv = np.zeros(x.shape[1:])
        for i in range(t - 1, -1, -1):
            h, s = hs[i], ss[i]
            if smooth:
                gs = g[i] + gv * (p.v_reset - h)
                gh = gs * surrogate_grad(h - p.v_th, sg) + gv * (1.0 - s)
            else:
                # reset gate detached: dV/dH = 1 - S, surrogate only on S
                gh = g[i] * surrogate_grad(h - p.v_th, sg) + gv * (1.0 - s)
            gx[i] = gh
            gv = gh * leak
        return (gx,)

    out = Tensor(ss) if smooth else SpikeTensor(ss)
    out.node = _record((_track(x),), vjp)
    return out


def spike_gate(
    x: Tensor,
    p: LifParams = LifParams(),
    sg: SurrogateParams = SurrogateParams(),
    *,
    smooth: bool = False,
) -> Tensor:
    """Single-step neuron on a fresh membrane: fires where the one-step
    potential v_reset + x reaches v_th.

    Used for attention scores, where each entry is its own one-step
    drive rather than a point in an ongoing sequence.
    """
    u = x.data + p.v_reset - p.v_th
    if smooth:
        s = smooth_spike(u, sg)
        out = Tensor(s)
    else:
        s = (u >= 0.0).astype(np.float64)
        out = SpikeTensor(s)

    def vjp(g):
        return (g * surrogate_grad(u, sg),)

    out.node = _record((_track(x),), vjp)
    return out
