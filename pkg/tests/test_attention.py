"""Attention branches against straight-line brute-force oracles."""

import numpy as np
import pytest

from spikekws.attention import (
    AttentionConfig,
    ForwardCtx,
    MultiViewAttention,
    ProjectionBlock,
    TemporalMask,
    apply_temporal_mask,
    attend_global,
    attend_windowed,
    default_window_radius,
    global_attn_scale,
    qkv,
    window_attn_scale,
)
from spikekws.energy import Probe
from spikekws.neuron import LifParams, SurrogateParams, lif_sequence
from spikekws.tensor import ShapeError, SpikeTensor, Tensor

P = LifParams()
SG = SurrogateParams()


def random_spikes(rng, shape, p=0.4):
    return SpikeTensor((rng.random(shape) < p).astype(float))


def gate_oracle(score, p=P):
    """One-step neuron: fires where v_reset + score reaches v_th."""
    return (p.v_reset + score >= p.v_th).astype(float)


def global_oracle(q, k, v, cfg, beta=None):
    """Materialize the whole-sequence aggregation with plain loops."""
    t, b, d = q.shape
    h, dh = cfg.heads_h, cfg.head_dim
    beta = global_attn_scale(cfg) if beta is None else beta
    q4 = q.reshape(t, b, h, dh)
    k4 = k.reshape(t, b, h, dh)
    v4 = v.reshape(t, b, h, dh)
    out = np.zeros_like(v4)
    for bi in range(b):
        for hi in range(h):
            for di in range(dh):
                qs = sum(q4[ti, bi, hi, di] for ti in range(t))
                ks = sum(k4[ti, bi, hi, di] for ti in range(t))
                gate = gate_oracle(beta * (qs + ks))
                for ti in range(t):
                    out[ti, bi, hi, di] = gate * v4[ti, bi, hi, di]
    return out.reshape(t, b, d)


def windowed_oracle(q, k, v, cfg, beta=None):
    """Materialize the sliding-window aggregation with plain loops."""
    t, b, d = q.shape
    h, dh, w = cfg.heads_h, cfg.head_dim, cfg.window_radius_w
    beta = window_attn_scale(cfg) if beta is None else beta
    q4 = q.reshape(t, b, h, dh)
    k4 = k.reshape(t, b, h, dh)
    v4 = v.reshape(t, b, h, dh)
    out = np.zeros_like(v4)
    for ti in range(t):
        lo, hi = max(0, ti - w), min(t, ti + w + 1)
        for bi in range(b):
            for hj in range(h):
                for di in range(dh):
                    qs = q4[lo:hi, bi, hj, di].sum()
                    ks = k4[lo:hi, bi, hj, di].sum()
                    gate = gate_oracle(beta * (qs + ks))
                    out[ti, bi, hj, di] = gate * v4[ti, bi, hj, di]
    return out.reshape(t, b, d)


class TestConfig:
    def test_divisibility(self):
        with pytest.raises(ValueError):
            AttentionConfig(hidden_d=10, heads_h=3, window_radius_w=1, time_steps_t=8)

    def test_window_bound(self):
        with pytest.raises(ValueError):
            AttentionConfig(hidden_d=8, heads_h=2, window_radius_w=9, time_steps_t=8)

    def test_default_radius_tracks_length(self):
        assert default_window_radius(100) == 20
        assert default_window_radius(250) == 50
        assert default_window_radius(10) == 2


class TestScales:
    def test_global_scale_example(self):
        cfg = AttentionConfig(hidden_d=16, heads_h=16, window_radius_w=1, time_steps_t=100)
        assert global_attn_scale(cfg) == pytest.approx(0.1)

    def test_window_scale_example(self):
        cfg = AttentionConfig(hidden_d=128, heads_h=8, window_radius_w=20, time_steps_t=100)
        assert window_attn_scale(cfg) == pytest.approx(0.039043, abs=1e-6)


class TestTemporalMask:
    def test_prefix_enforced(self):
        with pytest.raises(ValueError):
            TemporalMask(valid=np.array([[True, False, True]]))

    def test_all_valid_is_identity(self, rng):
        x = random_spikes(rng, (5, 2, 4))
        out = apply_temporal_mask(x, TemporalMask.all_valid(2, 5))
        np.testing.assert_array_equal(out.data, x.data)

    def test_all_invalid_zeroes_everything(self, rng):
        x = random_spikes(rng, (5, 2, 4))
        out = apply_temporal_mask(x, TemporalMask.from_lengths([0, 0], 5))
        assert not out.data.any()

    def test_prefix_filter(self, rng):
        x = random_spikes(rng, (5, 1, 3))
        out = apply_temporal_mask(x, TemporalMask.from_lengths([3], 5))
        np.testing.assert_array_equal(out.data[:3], x.data[:3])
        assert not out.data[3:].any()

    def test_shape_mismatch(self, rng):
        x = random_spikes(rng, (5, 2, 3))
        with pytest.raises(ShapeError):
            apply_temporal_mask(x, TemporalMask.all_valid(2, 4))


def make_block(rng, d_in, d_out, name="blk"):
    block = ProjectionBlock(d_in, d_out, name=name,
                            rng=rng, lif=P, sg=SG)
    # put batch norm in a known eval state so forwards are pure
    block.bn.running_mean = np.zeros(d_out)
    block.bn.running_var = np.ones(d_out) - block.bn.eps
    block.bn.mode = "eval"
    return block


class TestQkv:
    def test_shapes_and_binarity(self, rng):
        x = random_spikes(rng, (6, 2, 4))
        blocks = [make_block(rng, 4, 4, n) for n in "qkv"]
        for out in qkv(x, *blocks):
            assert out.shape == (6, 2, 4)
            assert isinstance(out, SpikeTensor)

    def test_identity_weights_reduce_to_neuron(self, rng):
        # identity mix, neutral batch norm: the block is exactly the neuron
        x = SpikeTensor((rng.random((8, 2, 3)) < 0.6).astype(float))
        drive = Tensor(x.data * 1.2)
        block = make_block(rng, 3, 3)
        block.weight.data = np.eye(3) * 1.2
        block.bias.data = np.zeros(3)
        out = block(x)
        np.testing.assert_array_equal(out.data, lif_sequence(drive, P).data)


class TestGlobalBranch:
    def test_zero_queries_and_keys_gate_nothing(self, rng):
        cfg = AttentionConfig(8, 2, 2, 6)
        z = SpikeTensor(np.zeros((6, 2, 8)))
        v = random_spikes(rng, (6, 2, 8))
        out = attend_global(z, z, v, cfg)
        assert not out.data.any()

    def test_matches_bruteforce(self, rng):
        for trial in range(60):
            t = int(rng.integers(3, 17))
            b = int(rng.integers(1, 3))
            h = int(rng.choice([1, 2]))
            dh = int(rng.integers(1, 5))
            cfg = AttentionConfig(h * dh, h, int(rng.choice([1, 2])), t)
            q = random_spikes(rng, (t, b, h * dh))
            k = random_spikes(rng, (t, b, h * dh))
            v = random_spikes(rng, (t, b, h * dh))
            out = attend_global(q, k, v, cfg)
            np.testing.assert_array_equal(out.data, global_oracle(q.data, k.data, v.data, cfg))


class TestWindowedBranch:
    def test_window_sums_hand_case(self):
        # all-ones queries, T=3, w=1: sums [2, 3, 2]
        cfg = AttentionConfig(1, 1, 1, 3)
        ones = SpikeTensor(np.ones((3, 1, 1)))
        probe = Probe()
        out = attend_windowed(ones, ones, ones, cfg,
                              ctx=ForwardCtx(probe=probe), beta=1.0)
        # drive = 1 * (qsum + ksum) = [4, 6, 4] -> all gates open
        np.testing.assert_array_equal(out.data.ravel(), [1, 1, 1])
        from spikekws.tensor import window_sum_time

        sums = window_sum_time(Tensor(np.ones((3, 1, 1))), 1)
        np.testing.assert_array_equal(sums.data.ravel(), [2, 3, 2])

    def test_matches_bruteforce(self, rng):
        for trial in range(60):
            t = int(rng.integers(3, 17))
            b = int(rng.integers(1, 3))
            h = int(rng.choice([1, 2]))
            dh = int(rng.integers(1, 5))
            cfg = AttentionConfig(h * dh, h, int(rng.choice([1, 2])), t)
            q = random_spikes(rng, (t, b, h * dh))
            k = random_spikes(rng, (t, b, h * dh))
            v = random_spikes(rng, (t, b, h * dh))
            out = attend_windowed(q, k, v, cfg)
            np.testing.assert_array_equal(
                out.data, windowed_oracle(q.data, k.data, v.data, cfg)
            )

    def test_covering_window_reduces_to_global(self, rng):
        """w >= T-1 plus the global scale makes the per-step maps equal
        the broadcast global map exactly."""
        for trial in range(50):
            t = int(rng.integers(2, 10))
            h = int(rng.choice([1, 2]))
            dh = int(rng.integers(1, 4))
            cfg = AttentionConfig(h * dh, h, t - 1 if t > 1 else 1, t)
            q = random_spikes(rng, (t, 2, h * dh))
            k = random_spikes(rng, (t, 2, h * dh))
            v = random_spikes(rng, (t, 2, h * dh))
            swa = attend_windowed(q, k, v, cfg, beta=global_attn_scale(cfg))
            glob = attend_global(q, k, v, cfg)
            np.testing.assert_array_equal(swa.data, glob.data)


class TestMaskInvariance:
    def test_padding_leaves_prefix_bit_identical(self, rng):
        t0, t1, b, d, h, w = 20, 30, 3, 8, 2, 3
        cfg = AttentionConfig(d, h, w, t0)  # scales held at the configured T
        q = random_spikes(rng, (t0, b, d))
        k = random_spikes(rng, (t0, b, d))
        v = random_spikes(rng, (t0, b, d))
        mask0 = TemporalMask.all_valid(b, t0)
        qm, km = apply_temporal_mask(q, mask0), apply_temporal_mask(k, mask0)
        base_g = attend_global(qm, km, v, cfg).data
        base_w = attend_windowed(qm, km, v, cfg).data

        pad = np.zeros((t1 - t0, b, d))
        ext = lambda s: SpikeTensor(np.concatenate([s.data, pad], axis=0))
        mask1 = TemporalMask.from_lengths([t0] * b, t1)
        # V stays unmasked; fresh spikes may appear in its padding region
        v_ext = SpikeTensor(np.concatenate(
            [v.data, (rng.random((t1 - t0, b, d)) < 0.4).astype(float)], axis=0))
        qm1 = apply_temporal_mask(ext(q), mask1)
        km1 = apply_temporal_mask(ext(k), mask1)
        ext_g = attend_global(qm1, km1, v_ext, cfg).data
        ext_w = attend_windowed(qm1, km1, v_ext, cfg).data
        np.testing.assert_array_equal(ext_g[:t0], base_g)
        np.testing.assert_array_equal(ext_w[:t0], base_w)


class TestLinearComplexity:
    def test_accumulate_ops_scale_linearly(self, rng):
        def ops_at(t):
            cfg = AttentionConfig(16, 2, 2, t)
            q = random_spikes(rng, (t, 2, 16))
            k = random_spikes(rng, (t, 2, 16))
            v = random_spikes(rng, (t, 2, 16))
            probe = Probe()
            attend_global(q, k, v, cfg, ctx=ForwardCtx(probe=probe))
            return sum(c.flops for c in probe.costs)

        for t in (64, 128, 256):
            ratio = ops_at(2 * t) / ops_at(t)
            assert 1.9 <= ratio <= 2.1


class TestHeadIndependence:
    def test_head_permutation_permutes_outputs(self, rng):
        t, b, h, dh = 10, 2, 4, 3
        cfg = AttentionConfig(h * dh, h, 2, t)
        q = random_spikes(rng, (t, b, h * dh))
        k = random_spikes(rng, (t, b, h * dh))
        v = random_spikes(rng, (t, b, h * dh))
        perm = rng.permutation(h)
        channel_perm = np.concatenate([np.arange(dh) + p * dh for p in perm])

        def permute(s):
            return SpikeTensor(s.data[:, :, channel_perm])

        for fn in (attend_global, attend_windowed):
            base = fn(q, k, v, cfg).data
            swapped = fn(permute(q), permute(k), permute(v), cfg).data
            np.testing.assert_array_equal(swapped, base[:, :, channel_perm])


class TestMultiView:
    def _make(self, rng, cfg, dropout_p=0.0):
        mva = MultiViewAttention(cfg, name="attn", rng=rng, lif=P, sg=SG,
                                 dropout_p=dropout_p)
        d = cfg.hidden_d
        for block in (mva.wq, mva.wk, mva.wv, mva.w_dual, mva.w_out):
            block.bn.running_mean = np.zeros(d)
            block.bn.running_var = np.ones(d) - block.bn.eps
            block.bn.mode = "eval"
        mva.vbranch.bn.running_mean = np.zeros(d)
        mva.vbranch.bn.running_var = np.ones(d) - mva.vbranch.bn.eps
        mva.vbranch.bn.mode = "eval"
        return mva

    def test_output_shape_and_binarity(self, rng):
        cfg = AttentionConfig(8, 2, 2, 12)
        mva = self._make(rng, cfg)
        x = random_spikes(rng, (12, 2, 8))
        out = mva(x, TemporalMask.from_lengths([12, 9], 12))
        assert out.shape == (12, 2, 8)
        assert isinstance(out, SpikeTensor)

    def test_branch_sum_is_small_integer(self, rng):
        from spikekws.tensor import add

        cfg = AttentionConfig(8, 2, 2, 10)
        q = random_spikes(rng, (10, 1, 8))
        k = random_spikes(rng, (10, 1, 8))
        v = random_spikes(rng, (10, 1, 8), p=0.7)
        s = add(attend_windowed(q, k, v, cfg), attend_global(q, k, v, cfg))
        assert set(np.unique(s.data)) <= {0.0, 1.0, 2.0}

    def test_matches_straightline_reimplementation(self, rng):
        """Tiny instance against a from-first-principles recomputation."""
        cfg = AttentionConfig(4, 2, 2, 8)
        mva = self._make(rng, cfg)
        x = random_spikes(rng, (8, 1, 4), p=0.5)
        out = mva(x, None).data

        def run_block(block, data):
            drive = data @ block.weight.data + block.bias.data
            ivar = 1.0 / np.sqrt(block.bn.running_var + block.bn.eps)
            drive = (drive - block.bn.running_mean) * ivar * block.bn.gamma.data
            drive = drive + block.bn.beta.data
            v, spikes = np.full(drive.shape[1:], P.v_reset), np.zeros_like(drive)
            for t in range(drive.shape[0]):
                h = v - (v - P.v_reset) / P.tau + drive[t]
                spikes[t] = (h >= P.v_th).astype(float)
                v = h * (1 - spikes[t]) + P.v_reset * spikes[t]
            return spikes

        q = run_block(mva.wq, x.data)
        k = run_block(mva.wk, x.data)
        v = run_block(mva.wv, x.data)
        b1 = windowed_oracle(q, k, v, cfg)
        b2 = global_oracle(q, k, v, cfg)
        # value branch: per-head temporal filter, pointwise mix, BN, neuron
        t, b, d = v.shape
        h, dh = cfg.heads_h, cfg.head_dim
        v4 = v.reshape(t, b, h, dh)
        filtered = np.zeros_like(v4)
        kern = mva.vbranch.kernel.data
        for ti in range(t):
            for j in range(9):
                src = ti + j - 4
                if 0 <= src < t:
                    filtered[ti] += v4[src] * kern[:, j][None, :, None]
        filtered += mva.vbranch.dw_bias.data[None, None, :, None]
        mixed = filtered.reshape(t, b, d) @ mva.vbranch.mix_weight.data
        mixed += mva.vbranch.mix_bias.data
        bn = mva.vbranch.bn
        mixed = (mixed - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
        mixed = mixed * bn.gamma.data + bn.beta.data
        vmem, b3 = np.full((b, d), P.v_reset), np.zeros((t, b, d))
        for ti in range(t):
            hcur = vmem - (vmem - P.v_reset) / P.tau + mixed[ti]
            b3[ti] = (hcur >= P.v_th).astype(float)
            vmem = hcur * (1 - b3[ti]) + P.v_reset * b3[ti]
        fused = run_block(mva.w_dual, b1 + b2)
        expect = run_block(mva.w_out, fused + b3)
        np.testing.assert_array_equal(out, expect)

    def test_binarity_fuzz(self, rng):
        cfg = AttentionConfig(6, 2, 1, 6)
        mva = self._make(rng, cfg)
        for _ in range(100):
            x = random_spikes(rng, (6, 2, 6), p=float(rng.uniform(0.1, 0.9)))
            out = mva(x, None)
            assert set(np.unique(out.data)) <= {0.0, 1.0}


class TestValueBranchReduction:
    def test_delta_kernel_identity_mix_reduces_to_neuron(self, rng):
        cfg = AttentionConfig(6, 2, 1, 8)
        mva = MultiViewAttention(cfg, name="a", rng=rng, lif=P, sg=SG)
        vb = mva.vbranch
        vb.kernel.data = np.zeros((2, 9))
        vb.kernel.data[:, 4] = 1.0
        vb.dw_bias.data[:] = 0.0
        vb.mix_weight.data = np.eye(6) * 1.2
        vb.mix_bias.data[:] = 0.0
        vb.bn.running_mean = np.zeros(6)
        vb.bn.running_var = np.ones(6) - vb.bn.eps
        vb.bn.mode = "eval"
        v = random_spikes(rng, (8, 2, 6), p=0.6)
        out = vb(v)
        assert isinstance(out, SpikeTensor)
        expect = lif_sequence(Tensor(v.data * 1.2), P)
        np.testing.assert_array_equal(out.data, expect.data)
