"""Differentiable layer semantics of crossbar-mapped spiking networks.

The central piece is :func:`adcless_conv2d`: weights already on the integer
grid are split into channel groups sized to the array, sliced into binary
planes, each plane runs as a grouped convolution over the binary spikes, the
per-group partial sums pass through the configured ADC readout, planes are
shift-added and the group contributions summed. With the readout forced ideal
the whole construction collapses to an ordinary integer convolution, so the
only error the layer introduces is the partial-sum quantization.

All integer work is carried in float32 tensors; the magnitudes involved
(<= array rows * max cell value) stay far below the 2**24 exact-integer limit.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .crossbar import AdcModel
from .functions import (BitPlaneSplit, HeavisidePartialSum, QuantizeSTE,
                        SignPartialSum, SpikeThreshold, UniformAdcSTE,
                        smooth_heaviside)
from .quant import ZERO_SCALE_EPS, quant_levels, quantize_leak
from .tensor_ops import compute_n_groups

STATE_Q_MIN = -2048
STATE_Q_MAX = 2047


@dataclass
class RunContext:
    """Mutable runtime knobs shared by every layer of one network."""
    stage: str = "fp"                    # fp | qat | adcless
    xbar: int = 32
    mapping: str = "split"
    adc_override: Optional[str] = None   # remaps sa1-designated layers; 'ideal' remaps all
    alpha: float = 10.0
    smooth: bool = False                 # smooth spike primitive for gradient checks
    record_activity: bool = False
    record_ps: bool = False
    ps_extrema: list = field(default_factory=list)


def assert_binary(x, what):
    if x.numel() and bool(((x != 0) & (x != 1)).any()):
        raise ValueError(f"{what} expects binary spike values")


def _resolve_adc(layer_adc, ctx):
    if ctx.adc_override == "ideal":
        return "ideal"
    if ctx.adc_override is not None and layer_adc == "sa1":
        return ctx.adc_override
    return layer_adc


def quantize_weights_ste(weight, bits, scale_override=None):
    """Dynamic per-tensor scale plus straight-through grid rounding."""
    ql = quant_levels(bits)
    if scale_override is not None:
        scale = float(scale_override)
    else:
        peak = float(weight.detach().abs().max())
        scale = peak / ql if peak > 0 else ZERO_SCALE_EPS
    q = QuantizeSTE.apply(weight, scale, -ql - 1, ql)
    return q, scale


def _apply_ps_readout(ps, adc, mapping, n_wl, alpha, ctx):
    if adc.kind == "ideal":
        out = ps
    elif adc.kind == "sa1":
        fn = SignPartialSum if mapping == "shared" else HeavisidePartialSum
        out = fn.apply(ps, alpha)
    else:
        levels = (1 << adc.bits) - 1
        step = n_wl / levels
        out = UniformAdcSTE.apply(ps, step, levels)
    if ctx is not None and ctx.record_ps:
        ctx.ps_extrema.append((float(out.detach().min()), float(out.detach().max())))
    return out


def adcless_conv2d(x, q, bits, mapping, xbar, adc, alpha=10.0, stride=1,
                   padding=0, ctx=None):
    """Grouped bit-plane convolution with per-group partial-sum readout.

    ``q`` must already live on the signed ``bits`` grid (integer-valued
    tensor); the result is the integer activation before weight rescaling.
    """
    assert_binary(x, "crossbar convolution input")
    out_ch, in_ch, kh, kw = q.shape
    n_groups = compute_n_groups(in_ch, kh, kw, xbar)
    n_wl = (in_ch // n_groups) * kh * kw
    pos_planes, neg_planes = BitPlaneSplit.apply(q, bits)

    def plane_pass(plane):
        w = torch.cat(torch.chunk(plane, n_groups, dim=1), dim=0)
        ps = F.conv2d(x, w, stride=stride, padding=padding, groups=n_groups)
        return _apply_ps_readout(ps, adc, mapping, n_wl, alpha, ctx)

    if mapping == "shared":
        acc = None
        signed = pos_planes - neg_planes
        for i in range(bits):
            term = (2 ** i) * plane_pass(signed[i])
            acc = term if acc is None else acc + term
    else:
        acc_pos = acc_neg = None
        for i in range(bits):
            term = (2 ** i) * plane_pass(pos_planes[i])
            acc_pos = term if acc_pos is None else acc_pos + term
        for i in range(bits):
            term = (2 ** i) * plane_pass(neg_planes[i])
            acc_neg = term if acc_neg is None else acc_neg + term
        acc = acc_pos - acc_neg

    parts = torch.chunk(acc, n_groups, dim=1)
    out = parts[0]
    for part in parts[1:]:
        out = out + part
    return out


def adcless_linear(x, q, bits, mapping, xbar, adc, alpha=10.0, ctx=None):
    """Fully-connected case: the convolution specialized to a 1x1 view."""
    out = adcless_conv2d(x.view(*x.shape, 1, 1), q.view(*q.shape, 1, 1), bits,
                         mapping, xbar, adc, alpha=alpha, ctx=ctx)
    return out.view(x.shape[0], -1)


class CrossbarConv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1,
                 padding=0, bits=4, adc="sa1", ctx=None):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.bits = bits
        self.adc = adc
        self.ctx = ctx if ctx is not None else RunContext()
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels,
                                               kernel_size, kernel_size))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.scale_override = None
        self.last_scale = 1.0
        self.last_input_rate = None

    def quantized_weight(self):
        return quantize_weights_ste(self.weight, self.bits, self.scale_override)

    def forward(self, x):
        ctx = self.ctx
        if ctx.record_activity:
            self.last_input_rate = float(x.detach().mean())
        if ctx.stage == "fp":
            self.last_scale = 1.0
            return F.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        q, scale = self.quantized_weight()
        self.last_scale = scale
        adc_name = _resolve_adc(self.adc, ctx) if ctx.stage == "adcless" else "ideal"
        if adc_name == "ideal":
            out = F.conv2d(x, q, stride=self.stride, padding=self.padding)
        else:
            out = adcless_conv2d(x, q, self.bits, ctx.mapping, ctx.xbar,
                                 AdcModel.from_name(adc_name), alpha=ctx.alpha,
                                 stride=self.stride, padding=self.padding, ctx=ctx)
        return out * scale


class CrossbarLinear(nn.Module):
    def __init__(self, in_features, out_features, bits=4, adc="ideal", ctx=None):
        super().__init__()
        self.bits = bits
        self.adc = adc
        self.ctx = ctx if ctx is not None else RunContext()
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.scale_override = None
        self.last_scale = 1.0
        self.last_input_rate = None

    def quantized_weight(self):
        return quantize_weights_ste(self.weight, self.bits, self.scale_override)

    def forward(self, x):
        ctx = self.ctx
        if ctx.record_activity:
            self.last_input_rate = float(x.detach().mean())
        if ctx.stage == "fp":
            self.last_scale = 1.0
            return F.linear(x, self.weight)
        q, scale = self.quantized_weight()
        self.last_scale = scale
        adc_name = _resolve_adc(self.adc, ctx) if ctx.stage == "adcless" else "ideal"
        if adc_name == "ideal":
            out = F.linear(x, q)
        else:
            out = adcless_linear(x, q, self.bits, ctx.mapping, ctx.xbar,
                                 AdcModel.from_name(adc_name), alpha=ctx.alpha, ctx=ctx)
        return out * scale


def _quantize_scalar_state(value, scale):
    q = math.floor(abs(value) / scale + 0.5) * (1 if value >= 0 else -1)
    return max(min(q, STATE_Q_MAX), STATE_Q_MIN) * scale


class LifLayer(nn.Module):
    """Stateful spiking nonlinearity over the time loop.

    In the quantized stages the membrane potential and threshold live on the
    12-bit grid scaled by the upstream layer's weight scale, and the leak is
    the nearest power of two. The reset computed from this step's potential is
    subtracted at the next step.
    """

    def __init__(self, v_th=1.0, leak=1.0, reset="soft", ctx=None, source=None,
                 hard_reset_unscaled=False):
        super().__init__()
        if reset not in ("hard", "soft"):
            raise ValueError(f"reset must be 'hard' or 'soft', got {reset!r}")
        self.v_th = float(v_th)
        self.leak = float(leak)
        self.leak_code = quantize_leak(leak)
        self.reset = reset
        self.hard_reset_unscaled = hard_reset_unscaled
        self.ctx = ctx if ctx is not None else RunContext()
        self.source = source
        self.u = None
        self.r = None
        self.spikes_fired = 0.0
        self.neuron_steps = 0

    def reset_state(self):
        self.u = None
        self.r = None

    def reset_counters(self):
        self.spikes_fired = 0.0
        self.neuron_steps = 0

    def forward(self, drive):
        ctx = self.ctx
        quantized = ctx.stage != "fp"
        lam = self.leak_code.value if quantized else self.leak
        if self.u is None:
            self.u = torch.zeros_like(drive)
            self.r = torch.zeros_like(drive)
        u_new = lam * self.u + drive - self.r
        if quantized and self.source is not None:
            scale = self.source.last_scale
            u_new = QuantizeSTE.apply(u_new, scale, STATE_Q_MIN, STATE_Q_MAX) * scale
            v_eff = _quantize_scalar_state(self.v_th, scale)
        else:
            v_eff = self.v_th
        gap = u_new - v_eff
        if ctx.smooth:
            spike = smooth_heaviside(gap, ctx.alpha)
        else:
            spike = SpikeThreshold.apply(gap, ctx.alpha)
        if self.reset == "soft":
            r_new = v_eff * spike
        elif self.hard_reset_unscaled:
            r_new = u_new * spike
        else:
            r_new = lam * u_new * spike
        self.u = u_new
        self.r = r_new
        if ctx.record_activity:
            self.spikes_fired += float(spike.detach().sum())
            self.neuron_steps += spike.numel()
        return spike


def iand(skip, direct, negate_direct=True):
    """Binary residual merge: the negated path gates the other one off."""
    assert_binary(skip, "iand skip input")
    assert_binary(direct, "iand direct input")
    if skip.shape != direct.shape:
        raise ValueError(f"iand shapes differ: {tuple(skip.shape)} vs {tuple(direct.shape)}")
    if negate_direct:
        return skip * (1 - direct)
    return direct * (1 - skip)


def maxpool2(x):
    """2x2 max pooling; spike-preserving (output stays binary)."""
    assert_binary(x, "maxpool2 input")
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ValueError(f"maxpool2 needs even spatial extents, got {tuple(x.shape[-2:])}")
    return F.max_pool2d(x, 2)


class SewBlock(nn.Module):
    """Residual block with two conv+LIF stages merged by the binary IAND."""

    def __init__(self, channels, bits=4, adc="sa1", v_th=1.0, leak=1.0,
                 reset="soft", ctx=None, negate_direct=True):
        super().__init__()
        self.negate_direct = negate_direct
        self.conv1 = CrossbarConv2d(channels, channels, 3, padding=1,
                                    bits=bits, adc=adc, ctx=ctx)
        self.lif1 = LifLayer(v_th, leak, reset, ctx=ctx, source=self.conv1)
        self.conv2 = CrossbarConv2d(channels, channels, 3, padding=1,
                                    bits=bits, adc=adc, ctx=ctx)
        self.lif2 = LifLayer(v_th, leak, reset, ctx=ctx, source=self.conv2)

    def reset_state(self):
        self.lif1.reset_state()
        self.lif2.reset_state()

    def forward(self, x):
        direct = self.lif2(self.conv2(self.lif1(self.conv1(x))))
        return iand(x, direct, self.negate_direct)


class FrozenDropout(nn.Module):
    """Dropout with one unscaled mask per sequence.

    The mask is sampled on the first step after a state reset and reused for
    every remaining step, keeping spike statistics stationary over time; at
    inference the layer is the identity. No 1/(1-p) rescaling, so binary
    inputs stay binary.
    """

    def __init__(self, p):
        super().__init__()
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"dropout rate must be in [0, 1], got {p}")
        self.p = p
        self.mask = None

    def reset_state(self):
        self.mask = None

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        if self.mask is None or self.mask.shape != x.shape:
            self.mask = (torch.rand_like(x) >= self.p).to(x.dtype)
        return x * self.mask
