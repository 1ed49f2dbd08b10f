import numpy as np
import pytest
import torch
import torch.nn.functional as F

from spikebar.crossbar import AdcModel, CrossbarConfig, cell_level_conv
from spikebar.layers import (CrossbarConv2d, CrossbarLinear, FrozenDropout,
                             LifLayer, RunContext, SewBlock, adcless_conv2d,
                             adcless_linear, iand, maxpool2,
                             quantize_weights_ste)
from spikebar.quant import QuantizedTensor
from spikebar.tensor_ops import compute_n_groups, grouped_conv


def rand_instance(rng, n=1, cin=4, cout=8, k=3, h=6, w=6, bits=4):
    ql = 2 ** (bits - 1) - 1
    x = rng.integers(0, 2, size=(n, cin, h, w))
    wgt = rng.integers(-ql - 1, ql + 1, size=(cout, cin, k, k))
    return x, wgt


class TestAdclessConv:
    def test_single_group_ideal_equals_plain_conv(self):
        rng = np.random.default_rng(0)
        x, w = rand_instance(rng, cin=2, cout=4, k=1, h=4, w=4)
        xt = torch.tensor(x, dtype=torch.float32)
        qt = torch.tensor(w, dtype=torch.float32)
        out = adcless_conv2d(xt, qt, 4, "split", 512, AdcModel("ideal"))
        assert compute_n_groups(2, 1, 1, 512) == 1
        np.testing.assert_array_equal(out.numpy().astype(np.int64),
                                      grouped_conv(x, w))

    def test_all_zero_spikes_split_gives_zero(self):
        rng = np.random.default_rng(1)
        _, w = rand_instance(rng)
        x = torch.zeros(1, 4, 6, 6)
        out = adcless_conv2d(x, torch.tensor(w, dtype=torch.float32), 4,
                             "split", 32, AdcModel("sa1"))
        assert not out.abs().any()

    @pytest.mark.parametrize("mapping", ["shared", "split"])
    @pytest.mark.parametrize("xbar", [32, 64, 128])
    def test_matches_cell_level_oracle(self, mapping, xbar):
        rng = np.random.default_rng(xbar + (0 if mapping == "shared" else 1))
        for _ in range(10):
            x, w = rand_instance(rng)
            cfg = CrossbarConfig(xbar=xbar, nb_w=4, mapping=mapping, adc=AdcModel("sa1"))
            ref = cell_level_conv(x, QuantizedTensor(w, 0.1, 4), cfg, padding=1)
            got = adcless_conv2d(torch.tensor(x, dtype=torch.float32),
                                 torch.tensor(w, dtype=torch.float32),
                                 4, mapping, xbar, AdcModel("sa1"), padding=1)
            np.testing.assert_array_equal(got.numpy().astype(np.int64), ref)

    def test_hp_readout_matches_oracle_to_float_tolerance(self):
        rng = np.random.default_rng(2)
        x, w = rand_instance(rng)
        cfg = CrossbarConfig(xbar=32, nb_w=4, mapping="split", adc=AdcModel("hp", 5))
        ref = cell_level_conv(x, QuantizedTensor(w, 0.1, 4), cfg)
        got = adcless_conv2d(torch.tensor(x, dtype=torch.float32),
                             torch.tensor(w, dtype=torch.float32),
                             4, "split", 32, AdcModel("hp", 5))
        np.testing.assert_allclose(got.numpy(), ref, rtol=1e-5, atol=1e-5)

    def test_ideal_override_equals_quantized_conv(self):
        rng = np.random.default_rng(3)
        x, w = rand_instance(rng, cin=8, cout=4)
        xt = torch.tensor(x, dtype=torch.float32)
        qt = torch.tensor(w, dtype=torch.float32)
        for mapping in ("shared", "split"):
            out = adcless_conv2d(xt, qt, 4, mapping, 32, AdcModel("ideal"), padding=1)
            want = F.conv2d(xt, qt, padding=1)
            assert torch.equal(out, want)

    def test_ps_dynamic_range(self):
        rng = np.random.default_rng(4)
        x, w = rand_instance(rng)
        ctx = RunContext(record_ps=True)
        for mapping, lo in (("shared", -1.0), ("split", 0.0)):
            ctx.ps_extrema.clear()
            adcless_conv2d(torch.tensor(x, dtype=torch.float32),
                           torch.tensor(w, dtype=torch.float32),
                           4, mapping, 32, AdcModel("sa1"), ctx=ctx)
            assert ctx.ps_extrema
            assert all(lo <= mn and mx <= 1.0 for mn, mx in ctx.ps_extrema)

    def test_rejects_non_binary_input(self):
        w = torch.zeros(2, 2, 1, 1)
        with pytest.raises(ValueError, match="binary"):
            adcless_conv2d(torch.full((1, 2, 2, 2), 2.0), w, 4, "split", 32,
                           AdcModel("sa1"))


class TestAdclessLinear:
    def test_identity_weights_pass_spike_counts(self):
        q = torch.eye(4).view(4, 4)
        x = torch.tensor([[1.0, 0.0, 1.0, 1.0]])
        out = adcless_linear(x, q, 4, "split", 32, AdcModel("ideal"))
        assert torch.equal(out, x)

    def test_zero_weights(self):
        out = adcless_linear(torch.ones(2, 8), torch.zeros(3, 8), 4, "split",
                             32, AdcModel("sa1"))
        assert not out.abs().any()

    def test_random_instance_matches_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.integers(0, 2, size=(3, 64))
        w = rng.integers(-8, 8, size=(10, 64))
        cfg = CrossbarConfig(xbar=32, nb_w=4, mapping="split", adc=AdcModel("sa1"))
        ref = cell_level_conv(x.reshape(3, 64, 1, 1),
                              QuantizedTensor(w.reshape(10, 64, 1, 1), 0.1, 4), cfg)
        got = adcless_linear(torch.tensor(x, dtype=torch.float32),
                             torch.tensor(w, dtype=torch.float32),
                             4, "split", 32, AdcModel("sa1"))
        np.testing.assert_array_equal(got.numpy().astype(np.int64),
                                      ref.reshape(3, 10))


class TestIand:
    def test_truth_table(self):
        for s in (0.0, 1.0):
            for d in (0.0, 1.0):
                out = iand(torch.tensor([s]), torch.tensor([d]))
                assert out.item() == s * (1 - d)

    def test_skip_zero_dominates(self):
        assert iand(torch.tensor([0.0]), torch.tensor([1.0])).item() == 0.0

    def test_operand_order_flag(self):
        s, d = torch.tensor([1.0]), torch.tensor([0.0])
        assert iand(s, d, negate_direct=False).item() == 0.0

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            iand(torch.tensor([0.5]), torch.tensor([1.0]))


class TestMaxpool:
    def test_all_ones_window(self):
        assert maxpool2(torch.ones(1, 1, 2, 2)).item() == 1.0

    def test_all_zeros_window(self):
        assert maxpool2(torch.zeros(1, 1, 2, 2)).item() == 0.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(6)
        x = rng.integers(0, 2, size=(2, 3, 6, 8))
        got = maxpool2(torch.tensor(x, dtype=torch.float32)).numpy()
        want = np.zeros((2, 3, 3, 4))
        for n in range(2):
            for c in range(3):
                for i in range(3):
                    for j in range(4):
                        want[n, c, i, j] = x[n, c, 2 * i:2 * i + 2,
                                             2 * j:2 * j + 2].max()
        np.testing.assert_array_equal(got, want)

    def test_odd_extent_rejected(self):
        with pytest.raises(ValueError, match="even"):
            maxpool2(torch.zeros(1, 1, 3, 4))


class TestFrozenDropout:
    def test_p_zero_is_identity(self):
        layer = FrozenDropout(0.0)
        layer.train()
        x = torch.ones(2, 3)
        assert torch.equal(layer(x), x)

    def test_p_one_zeroes(self):
        layer = FrozenDropout(1.0)
        layer.train()
        assert not layer(torch.ones(2, 3)).any()

    def test_mask_frozen_across_steps(self):
        torch.manual_seed(0)
        layer = FrozenDropout(0.5)
        layer.train()
        layer.reset_state()
        a = layer(torch.ones(4, 8))
        b = layer(torch.ones(4, 8))
        assert torch.equal(a, b)
        layer.reset_state()
        c = layer(torch.ones(4, 8))
        assert not torch.equal(a, c)  # new sequence, new mask

    def test_identity_at_inference(self):
        layer = FrozenDropout(0.9)
        layer.eval()
        x = torch.ones(2, 2)
        assert torch.equal(layer(x), x)


class TestLifLayer:
    def test_matches_functional_reference(self):
        from spikebar.lif import LifParams, LifState, lif_step
        rng = np.random.default_rng(7)
        for reset in ("soft", "hard"):
            ctx = RunContext(stage="fp")
            layer = LifLayer(v_th=1.0, leak=0.5, reset=reset, ctx=ctx)
            params = LifParams(v_th=1.0, leak=0.5, reset=reset)
            state = LifState.zeros((5,))
            layer.reset_state()
            with torch.no_grad():
                for _ in range(20):
                    d = rng.normal(size=5)
                    torch_spikes = layer(torch.tensor(d, dtype=torch.float64))
                    np_spikes, state = lif_step(state, params, d)
                    np.testing.assert_allclose(torch_spikes.numpy(), np_spikes)
                    np.testing.assert_allclose(layer.u.numpy(), state.u)

    def test_spikes_are_binary_and_alpha_free_forward(self):
        ctx_a = RunContext(stage="fp", alpha=2.0)
        ctx_b = RunContext(stage="fp", alpha=50.0)
        out = []
        for ctx in (ctx_a, ctx_b):
            torch.manual_seed(1)
            layer = LifLayer(v_th=0.5, ctx=ctx)
            layer.reset_state()
            with torch.no_grad():
                seq = [layer(torch.randn(6)) for _ in range(8)]
            out.append(torch.stack(seq))
        assert torch.equal(out[0], out[1])  # surrogate width never alters forward
        assert set(torch.unique(out[0]).tolist()) <= {0.0, 1.0}

    def test_state_quantization_tracks_source_scale(self):
        ctx = RunContext(stage="qat")
        conv = CrossbarConv2d(1, 1, 1, bits=4, ctx=ctx)
        layer = LifLayer(v_th=1.0, leak=1.0, ctx=ctx, source=conv)
        conv.last_scale = 0.25
        layer.reset_state()
        with torch.no_grad():
            layer(torch.tensor([0.3]))
        assert layer.u.item() == pytest.approx(0.25)  # snapped to 1 * scale


class TestCrossbarModules:
    def test_qat_conv_is_scaled_integer_conv(self):
        torch.manual_seed(2)
        ctx = RunContext(stage="qat")
        conv = CrossbarConv2d(3, 5, 3, padding=1, bits=4, ctx=ctx)
        x = (torch.rand(2, 3, 6, 6) > 0.5).float()
        out = conv(x)
        q, scale = conv.quantized_weight()
        assert torch.equal(out, F.conv2d(x, q, padding=1) * scale)
        assert float(q.detach().abs().max()) <= 8

    def test_scale_override_identity(self):
        ctx = RunContext(stage="qat")
        conv = CrossbarLinear(4, 2, bits=8, ctx=ctx)
        with torch.no_grad():
            conv.weight.copy_(torch.tensor([[1., 2., -3., 0.],
                                            [4., -5., 6., 7.]]))
        conv.scale_override = 1.0
        x = (torch.rand(3, 4) > 0.5).float()
        out = conv(x)
        assert torch.equal(out, F.linear(x, conv.weight))

    def test_adcless_stage_respects_override(self):
        torch.manual_seed(3)
        ctx = RunContext(stage="adcless", adc_override="ideal")
        conv = CrossbarConv2d(4, 4, 3, padding=1, bits=4, adc="sa1", ctx=ctx)
        x = (torch.rand(1, 4, 6, 6) > 0.5).float()
        ideal_out = conv(x)
        ctx.adc_override = None
        sa_out = conv(x)
        q, scale = conv.quantized_weight()
        assert torch.equal(ideal_out, F.conv2d(x, q, padding=1) * scale)
        assert not torch.equal(ideal_out, sa_out)

    def test_hp_layer_not_remapped_by_sa_override(self):
        ctx = RunContext(stage="adcless", adc_override="sa1")
        from spikebar.layers import _resolve_adc
        assert _resolve_adc("hp5", ctx) == "hp5"
        assert _resolve_adc("sa1", ctx) == "sa1"
        ctx.adc_override = "hp5"
        assert _resolve_adc("sa1", ctx) == "hp5"
        ctx.adc_override = "ideal"
        assert _resolve_adc("hp5", ctx) == "ideal"


class TestSewBlock:
    def test_binary_closure(self):
        torch.manual_seed(4)
        ctx = RunContext(stage="adcless")
        block = SewBlock(4, ctx=ctx)
        block.reset_state()
        x = (torch.rand(2, 4, 6, 6) > 0.3).float()
        with torch.no_grad():
            for _ in range(4):
                out = block(x)
                assert set(torch.unique(out).tolist()) <= {0.0, 1.0}

    def test_inactive_direct_path_passes_skip(self):
        ctx = RunContext(stage="fp")
        block = SewBlock(2, v_th=100.0, ctx=ctx)  # threshold never reached
        block.reset_state()
        x = (torch.rand(1, 2, 4, 4) > 0.5).float()
        with torch.no_grad():
            assert torch.equal(block(x), x)
