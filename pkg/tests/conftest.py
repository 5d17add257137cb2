"""Shared test utilities: scalar reduction and finite-difference checks."""

import numpy as np
import pytest

from spikekws.tensor import Tape, Tensor, mul, sum_axis, zero_grads


def scalar_loss(out, weights):
    """Differentiable weighted sum of all entries of ``out``."""
    t = mul(out, Tensor(weights))
    while t.ndim > 0:
        t = sum_axis(t, 0)
    return t


def max_rel_error(analytic, numeric, floor=1e-3):
    """Largest |a - n| / max(|a|, |n|, floor) over all entries.

    The floor keeps finite-difference roundoff on near-zero gradients
    from dominating the comparison.
    """
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def fd_gradients(forward, params, h=1e-4):
    """Central finite differences of the scalar ``forward()`` w.r.t. each
    Parameter in ``params``, perturbing one entry at a time."""
    grads = []
    for p in params:
        g = np.zeros(p.data.shape)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = forward()
            flat[i] = orig - h
            down = forward()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def tape_gradients(make_loss, params):
    """Analytic gradients of ``make_loss()`` (run under a fresh tape)."""
    zero_grads(params)
    with Tape() as tape:
        loss = make_loss()
    tape.backward(loss)
    return [np.zeros(p.shape) if p.grad is None else p.grad for p in params]


def check_gradients(make_loss, params, h=1e-4, tol=1e-4, floor=1e-3):
    """Assert tape gradients match central finite differences."""
    analytic = tape_gradients(make_loss, params)

    def value():
        return make_loss().item()

    numeric = fd_gradients(value, params, h=h)
    worst = max(
        max_rel_error(a, n, floor=floor) for a, n in zip(analytic, numeric)
    )
    assert worst < tol, f"gradient mismatch: max relative error {worst:.3e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(42)
