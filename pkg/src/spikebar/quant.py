"""Symmetric integer quantization for weights, spiking states and leaks.

One real scale per tensor: values quantize to round(x/S) clamped to the
signed ``bits``-wide grid [-q_l-1, q_l] with q_l = 2**(bits-1) - 1. Rounding
is half-away-from-zero everywhere so results are reproducible bit for bit.
Leak factors snap to powers of two (shift-friendly) and membrane state uses
a fixed 12-bit grid scaled by the upstream layer's weight scale.
"""

from dataclasses import dataclass

import numpy as np

# scale returned for an all-zero tensor; quantized output is all zeros anyway
ZERO_SCALE_EPS = 1e-8

STATE_BITS = 12


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer value grid plus its per-tensor real scale factor."""
    values: np.ndarray
    scale: float
    bits: int

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        ql = quant_levels(self.bits)
        v = self.values
        if v.size and (v.min() < -ql - 1 or v.max() > ql):
            raise ValueError(
                f"values outside the {self.bits}-bit grid [{-ql - 1}, {ql}]")

    def dequantize(self):
        return self.values.astype(np.float64) * self.scale


@dataclass(frozen=True)
class LeakCode:
    """Leak factor 2**(-n) as a hardware right-shift amount."""
    n: int

    def __post_init__(self):
        if self.n not in (0, 1, 2):
            raise ValueError(f"leak shift exponent must be in {{0,1,2}}, got {self.n}")

    @property
    def value(self):
        return 2.0 ** (-self.n)


def quant_levels(bits):
    """Positive clamp bound of a signed ``bits``-wide symmetric grid."""
    if bits < 2:
        raise ValueError(f"need at least 2 bits for a signed grid, got {bits}")
    return 2 ** (bits - 1) - 1


def scale_of(x, bits):
    """Per-tensor scale: max absolute element over the positive grid bound."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot derive a scale from an empty tensor")
    peak = float(np.max(np.abs(x)))
    if peak == 0.0:
        return ZERO_SCALE_EPS
    return peak / quant_levels(bits)


def round_half_away(x):
    """Round halves away from zero (numpy's default rounds halves to even)."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x, scale, bits):
    """Quantize a real tensor onto the signed grid for the given scale."""
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    ql = quant_levels(bits)
    x = np.asarray(x, dtype=np.float64)
    q = round_half_away(x / scale)
    q = np.clip(q, -ql - 1, ql).astype(np.int64)
    return QuantizedTensor(q, float(scale), bits)


def dequantize(q):
    return q.dequantize()


def ste_grad(scale):
    """Straight-through backward multiplier of the quantizer (1/scale)."""
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return 1.0 / scale


def quantize_leak(lam):
    """Snap a leak factor in (0, 1] to the nearest representable 2**(-n).

    Ties break toward the smaller shift (larger leak factor).
    """
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"leak factor must be in (0, 1], got {lam}")
    best = min(range(3), key=lambda n: (abs(lam - 2.0 ** (-n)), n))
    return LeakCode(best)


def quantize_state(u, weight_scale):
    """Quantize membrane state/threshold on the 12-bit grid of the upstream
    layer's weight scale."""
    return quantize(u, weight_scale, STATE_BITS)
