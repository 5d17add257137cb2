"""Operation accounting, energy totals, and batch-norm folding."""

import numpy as np
import pytest

from spikekws.energy import (
    EnergyReport,
    LayerCost,
    Probe,
    energy_mj,
    estimate_energy,
    fold_bn,
    fold_model,
    layer_flops,
    measure_firing_rate,
)
from spikekws.model import ModelConfig, SpikingTransformer
from spikekws.neuron import lif_sequence
from spikekws.tensor import BatchNormState, ConfigError, Parameter, SpikeTensor, Tensor, linear


class TestFiringRate:
    def test_all_zero(self):
        assert measure_firing_rate(np.zeros((4, 4))) == 0.0

    def test_all_one(self):
        assert measure_firing_rate(np.ones((4, 4))) == 1.0

    def test_three_of_twelve(self):
        x = np.zeros(12)
        x[:3] = 1.0
        assert measure_firing_rate(x) == 0.25


class TestLayerFlops:
    def test_linear_hand_value(self):
        desc = {"kind": "linear", "t": 100, "b": 1, "d_in": 140, "d_out": 128}
        assert layer_flops(desc) == 1_792_000

    def test_depthwise_hand_value(self):
        desc = {"kind": "dconv1d", "t": 100, "b": 1, "d": 128, "k": 7}
        assert layer_flops(desc) == 89_600

    def test_zero_size_layer(self):
        assert layer_flops({"kind": "linear", "t": 0, "b": 1, "d_in": 3, "d_out": 4}) == 0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            layer_flops({"kind": "wat"})

    def test_folded_bn_is_free(self):
        assert layer_flops({"kind": "bn_folded"}) == 0


class TestEnergyTotals:
    def test_published_anchor_within_rounding(self):
        # printed totals: 0.005 GFLOPs (MAC) + 0.020 GSOPs -> 0.042 mJ
        total = energy_mj(0.005e9, 0.020e9)
        assert abs(total - 0.042) / 0.042 < 0.05

    def test_zero_firing_rate_leaves_mac_terms(self):
        report = EnergyReport(layers=[
            LayerCost("front", "conv", "mac", flops=1000, input_firing_rate=0.7, sops=0),
            LayerCost("mid", "conv", "ac", flops=500, input_firing_rate=0.0, sops=0),
        ])
        assert report.total_mj == pytest.approx(1000 * 4.6e-9)

    def test_report_total_is_exact_combination(self, rng):
        layers = []
        for i in range(10):
            flops = int(rng.integers(1, 10_000))
            fr = float(rng.random())
            layers.append(LayerCost(f"l{i}", "conv", "ac", flops=flops,
                                    input_firing_rate=fr, sops=int(fr * flops)))
        report = EnergyReport(layers=layers)
        assert report.total_mj == pytest.approx(
            energy_mj(0, sum(l.sops for l in layers)), rel=1e-12
        )


class TestProbeAccounting:
    def test_two_layer_toy_matches_bruteforce_counter(self, rng):
        """SOPs from the probe equal a per-element nonzero accumulation
        count on a spikes -> linear -> neuron -> linear toy."""
        t, b, d1, d2, d3 = 6, 2, 5, 4, 3
        x = SpikeTensor((rng.random((t, b, d1)) < 0.4).astype(float))
        w1 = Parameter(rng.normal(size=(d1, d2)), name="w1")
        w2 = Parameter(rng.normal(size=(d2, d3)), name="w2")
        probe = Probe()
        probe.record("fc1", "conv", d2, x.data)
        h = lif_sequence(linear(x, w1, None))
        probe.record("fc2", "conv", d3, h.data)
        linear(h, w2, None)

        def brute_count(data, dout):
            ops = 0
            for value in data.ravel():
                if value != 0.0:
                    ops += dout  # one accumulate per output it feeds
            return ops

        assert probe.costs[0].sops == brute_count(x.data, d2)
        assert probe.costs[1].sops == brute_count(h.data, d3)

    def test_full_rate_degenerates_to_flops(self):
        probe = Probe()
        probe.record("dense", "conv", 7, np.ones((3, 4)))
        cost = probe.costs[0]
        assert cost.input_firing_rate == 1.0
        assert cost.sops == cost.flops

    def test_sop_relation_per_layer(self, rng):
        probe = Probe()
        for i in range(20):
            data = (rng.random((8, 8)) < rng.random()).astype(float)
            probe.record(f"l{i}", "conv", int(rng.integers(1, 9)), data)
        for cost in probe.costs:
            assert abs(cost.sops - cost.input_firing_rate * cost.flops) <= 1.0

    def test_energy_monotone_in_firing_rate(self):
        """More input spikes never cost less."""
        per_ops = 11
        totals = []
        for nnz in range(0, 65, 8):
            data = np.zeros(64)
            data[:nnz] = 1.0
            probe = Probe()
            probe.record("l", "conv", per_ops, data)
            totals.append(EnergyReport(layers=probe.costs).total_mj)
        assert all(a <= b for a, b in zip(totals, totals[1:]))


class TestFoldBn:
    def _bn(self, d, gamma=None, mean=None, var=None, eps=1e-5):
        bn = BatchNormState.create(d, eps=eps)
        if gamma is not None:
            bn.gamma.data = np.asarray(gamma, dtype=float)
        bn.running_mean = np.zeros(d) if mean is None else np.asarray(mean, dtype=float)
        bn.running_var = np.ones(d) if var is None else np.asarray(var, dtype=float)
        bn.mode = "eval"
        return bn

    def test_identity_stats_leave_weights(self):
        bn = self._bn(2, eps=0.0)
        w, b = fold_bn(np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2), bn)
        np.testing.assert_array_equal(w, [[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(b, [0.0, 0.0])

    def test_hand_fold(self):
        bn = self._bn(1, gamma=[2.0], mean=[1.0], var=[1.0], eps=0.0)
        w, b = fold_bn(np.array([[1.0]]), np.zeros(1), bn)
        assert w.ravel()[0] == pytest.approx(2.0)
        assert b.ravel()[0] == pytest.approx(-2.0)

    def test_train_mode_rejected(self):
        bn = BatchNormState.create(2)
        with pytest.raises(ConfigError):
            fold_bn(np.eye(2), np.zeros(2), bn)

    def test_random_layer_equivalence(self, rng):
        from spikekws.tensor import batchnorm

        for _ in range(100):
            din, dout = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            w = Parameter(rng.normal(size=(din, dout)))
            bias = Parameter(rng.normal(size=dout))
            bn = self._bn(dout, gamma=rng.uniform(0.5, 2.0, dout),
                          mean=rng.normal(size=dout),
                          var=rng.uniform(0.2, 3.0, dout))
            bn.beta.data = rng.normal(size=dout)
            x = Tensor(rng.normal(size=(4, 2, din)))
            fused = batchnorm(linear(x, w, bias), bn)
            fw, fb = fold_bn(w.data, bias.data, bn)
            folded = linear(x, Parameter(fw), Parameter(fb))
            assert np.abs(folded.data - fused.data).max() < 1e-5


class TestModelFolding:
    def _model(self, rng):
        cfg = ModelConfig(blocks_n=1, heads_h=2, hidden_d=8, input_neurons_n=6,
                          window_radius_w=2, time_steps_t=10, expansion_alpha=2.0,
                          classes_y=3, dropout_p=0.0)
        model = SpikingTransformer(cfg, seed=4).train()
        for _ in range(3):
            x = SpikeTensor((rng.random((10, 4, 6)) < 0.3).astype(float))
            model.forward(x)
        model.eval()
        return model, cfg

    def test_folded_forward_matches_unfused(self, rng):
        model, cfg = self._model(rng)
        x = SpikeTensor((rng.random((10, 2, 6)) < 0.3).astype(float))
        before = model.forward(x).data
        fold_model(model)
        after = model.forward(x).data
        assert np.abs(after - before).max() < 1e-5

    def test_profile_requires_folding(self, rng):
        model, cfg = self._model(rng)
        x = SpikeTensor((rng.random((10, 1, 6)) < 0.3).astype(float))
        with pytest.raises(ConfigError):
            estimate_energy(model, x)
        fold_model(model)
        report = estimate_energy(model, x)
        assert report.total_mj > 0
        assert report.mac_flops == 0  # spike input: everything accumulates

    def test_analog_front_end_charged_as_mac(self, rng):
        cfg = ModelConfig(blocks_n=1, heads_h=2, hidden_d=8, input_neurons_n=6,
                          window_radius_w=2, time_steps_t=10, expansion_alpha=2.0,
                          classes_y=3, dropout_p=0.0, input_kind="analog")
        model = SpikingTransformer(cfg, seed=4).train()
        for _ in range(3):
            model.forward(Tensor(rng.normal(size=(10, 4, 6))))
        model.eval()
        fold_model(model)
        report = estimate_energy(model, Tensor(rng.normal(size=(10, 1, 6))))
        macs = [l for l in report.layers if l.op_kind == "mac"]
        assert {l.name for l in macs} == {"embed.pconv", "embed.dconv"}
        assert report.mac_flops == 10 * 1 * 6 * 8 + 10 * 1 * 8 * 7

    def test_grouping_covers_everything(self, rng):
        model, cfg = self._model(rng)
        fold_model(model)
        x = SpikeTensor((rng.random((10, 1, 6)) < 0.3).astype(float))
        report = estimate_energy(model, x)
        both = report.group_sops("conv") + report.group_sops("attention")
        assert both == report.total_sops
        assert report.group_sops("attention") > 0
