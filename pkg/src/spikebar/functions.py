"""Autograd building blocks: exact forward nonlinearities, surrogate backward.

The forward passes are the hardware operations (threshold comparator, 1-bit
partial-sum readout, grid rounding, bit-plane slicing); the backward passes
substitute the smooth multipliers used during hardware-aware training:
``1/(1 + alpha*x^2)`` for the binary nonlinearities, ``1/scale`` straight
through the quantizer, and bit-mask gating through the plane slicer.
"""

import math

import torch
from torch.autograd import Function


def surrogate_window(x, alpha):
    """Backward multiplier shared by the spike and partial-sum nonlinearities."""
    if alpha <= 0:
        raise ValueError(f"surrogate width must be positive, got {alpha}")
    return 1.0 / (1.0 + alpha * x * x)


def heaviside_surrogate(u_minus_vth, alpha):
    """Surrogate derivative of the firing threshold at (u - v_th)."""
    return surrogate_window(u_minus_vth, alpha)


def binary_ps_surrogate(x, alpha):
    """Surrogate derivative of the sign/threshold partial-sum readout."""
    return surrogate_window(x, alpha)


def smooth_heaviside(x, alpha):
    """Smooth primitive whose exact derivative is the surrogate window.

    Used only to make finite-difference gradient checks well-posed; inference
    never calls this.
    """
    root = math.sqrt(alpha)
    return 0.5 + torch.atan(root * x) / root


def round_half_away(x):
    """Round halves away from zero (torch.round rounds halves to even)."""
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


class SpikeThreshold(Function):
    """Fires 1 when the argument is >= 0; surrogate-window backward."""

    @staticmethod
    def forward(ctx, x, alpha):
        ctx.save_for_backward(x)
        ctx.alpha = alpha
        return (x >= 0).to(x.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        (x,) = ctx.saved_tensors
        return grad_output * surrogate_window(x, ctx.alpha), None


class SignPartialSum(Function):
    """Shared-column readout: sign(x) with sign(0)=0."""

    @staticmethod
    def forward(ctx, x, alpha):
        ctx.save_for_backward(x)
        ctx.alpha = alpha
        return torch.sign(x)

    @staticmethod
    def backward(ctx, grad_output):
        (x,) = ctx.saved_tensors
        return grad_output * surrogate_window(x, ctx.alpha), None


class HeavisidePartialSum(Function):
    """Split-rail readout: 1 when x > 0, else 0."""

    @staticmethod
    def forward(ctx, x, alpha):
        ctx.save_for_backward(x)
        ctx.alpha = alpha
        return (x > 0).to(x.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        (x,) = ctx.saved_tensors
        return grad_output * surrogate_window(x, ctx.alpha), None


class QuantizeSTE(Function):
    """Round to the signed grid; backward is the 1/scale pass-through."""

    @staticmethod
    def forward(ctx, x, scale, q_min, q_max):
        ctx.scale = scale
        return torch.clamp(round_half_away(x / scale), q_min, q_max)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output / ctx.scale, None, None, None


class UniformAdcSTE(Function):
    """Multi-bit uniform ADC transfer (round to step, clamp, dequantize).

    Backward passes the gradient through inside the conversion range and
    zeroes it where the converter clipped.
    """

    @staticmethod
    def forward(ctx, x, step, levels):
        code = torch.clamp(round_half_away(x / step), -levels, levels)
        ctx.save_for_backward((torch.abs(x) <= step * levels).to(x.dtype))
        return code * step

    @staticmethod
    def backward(ctx, grad_output):
        (in_range,) = ctx.saved_tensors
        return grad_output * in_range, None, None


class BitPlaneSplit(Function):
    """Slice an integer grid into LSB-first binary planes of its positive and
    negative magnitudes.

    Returns two stacked tensors of shape (planes, *grid.shape). The backward
    pass masks each plane's gradient with the bits actually programmed, so
    gradient flows only through active cells; negative-magnitude cells push
    the weight the opposite way.
    """

    @staticmethod
    def forward(ctx, q, n_planes):
        qi = q.detach().to(torch.int64)
        pos = torch.clamp(qi, min=0)
        neg = torch.clamp(-qi, min=0)
        pos_planes = torch.stack([((pos >> i) & 1).to(q.dtype) for i in range(n_planes)])
        neg_planes = torch.stack([((neg >> i) & 1).to(q.dtype) for i in range(n_planes)])
        ctx.save_for_backward(pos_planes, neg_planes)
        return pos_planes, neg_planes

    @staticmethod
    def backward(ctx, grad_pos, grad_neg):
        pos_planes, neg_planes = ctx.saved_tensors
        grad_q = (grad_pos * pos_planes).sum(dim=0) - (grad_neg * neg_planes).sum(dim=0)
        return grad_q, None


def slicing_grad_mask(plane_grads, mapped_bits):
    """Gate plane gradients with the programmed cell bits (elementwise)."""
    if plane_grads.shape != mapped_bits.shape:
        raise ValueError(
            f"gradient shape {tuple(plane_grads.shape)} != bit mask shape "
            f"{tuple(mapped_bits.shape)}")
    return plane_grads * mapped_bits
