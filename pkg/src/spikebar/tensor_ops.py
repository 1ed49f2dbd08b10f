"""Deterministic integer tensor arithmetic for crossbar-mapped layers.

Everything here operates on plain numpy arrays with exact integer semantics:
convolutions accumulate in int64 and fail hard if a result would not fit the
declared 32-bit accumulator, reductions happen in a fixed canonical order,
and bit-plane extraction is LSB-first so plane ``i`` carries weight ``2**i``.
"""

from dataclasses import dataclass
from math import ceil

import numpy as np

ACC_BITS = 32
_ACC_MIN = -(2 ** (ACC_BITS - 1))
_ACC_MAX = 2 ** (ACC_BITS - 1) - 1


class ShapeError(ValueError):
    """Operand shapes are inconsistent; message names the offending axis."""


class RangeError(ValueError):
    """An element does not fit the declared bit-width."""


class AccumulatorOverflow(ArithmeticError):
    """A reduction escaped the declared 32-bit accumulator range."""


@dataclass(frozen=True)
class BitPlane:
    """One bit-sliced plane of a nonnegative integer tensor.

    ``index`` is the LSB-first plane position, so the source reconstructs as
    ``sum(2**(i*sb) * plane_i)`` for slice width ``sb``.
    """
    index: int
    cells: np.ndarray


def _check_acc_range(out, what):
    if out.size and (out.min() < _ACC_MIN or out.max() > _ACC_MAX):
        raise AccumulatorOverflow(
            f"{what} exceeds the {ACC_BITS}-bit accumulator range")


def conv_output_size(extent, kernel, stride, padding):
    return (extent + 2 * padding - kernel) // stride + 1


def pad_nchw(x, padding):
    """Zero-pad H and W of an NCHW tensor (zero = no spike)."""
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def im2col(x, kh, kw, stride, padding):
    """Extract sliding patches of an NCHW tensor.

    Returns an array of shape (N, C*kh*kw, Ho*Wo) where the patch axis is
    ordered channel-major then row-major within the kernel window, matching
    the flattened kernel layout used by :func:`grouped_conv`.
    """
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(
            f"kernel {kh}x{kw} with stride {stride}, padding {padding} does not fit "
            f"input extent {h}x{w} (axis H/W)")
    xp = pad_nchw(x, padding)
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=np.int64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def grouped_conv(x, w, groups=1, stride=1, padding=0):
    """Grouped cross-correlation in exact integer arithmetic.

    ``x`` is (N, Cin, H, W) and ``w`` is (Cout, Cin/groups, kh, kw); group g
    convolves the g-th input-channel slice with the g-th output-channel slice.
    Output dtype is int64 but the result is checked against the 32-bit
    accumulator bound.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"expected NCHW input and OIHW kernel, got {x.shape} and {w.shape}")
    if not (np.issubdtype(x.dtype, np.integer) and np.issubdtype(w.dtype, np.integer)):
        raise TypeError("grouped_conv operates on integer tensors only")
    n, cin, h, wth = x.shape
    cout, cper, kh, kw = w.shape
    if cin % groups != 0:
        raise ShapeError(f"input channel axis {cin} not divisible by groups={groups}")
    if cout % groups != 0:
        raise ShapeError(f"output channel axis {cout} not divisible by groups={groups}")
    if cper != cin // groups:
        raise ShapeError(
            f"kernel channel axis {cper} != input channels per group {cin // groups}")

    x = x.astype(np.int64, copy=False)
    w = w.astype(np.int64, copy=False)
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wth, kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)           # (N, Cin*kh*kw, P)
    cols = cols.reshape(n, groups, cper * kh * kw, ho * wo)
    wg = w.reshape(groups, cout // groups, cper * kh * kw)
    # einsum over the patch axis keeps a single canonical reduction order
    out = np.einsum("ngkp,gok->ngop", cols, wg, dtype=np.int64)
    out = out.reshape(n, cout, ho, wo)
    _check_acc_range(out, "grouped_conv accumulation")
    return out


def chunk(t, n, axis):
    """Split a tensor into ``n`` equal parts along ``axis``.

    The extent must be divisible by ``n``; this never pads silently.
    """
    t = np.asarray(t)
    extent = t.shape[axis]
    if n < 1:
        raise ValueError(f"chunk count must be >= 1, got {n}")
    if extent % n != 0:
        raise ShapeError(f"axis {axis} extent {extent} not divisible by {n}")
    return [np.ascontiguousarray(part) for part in np.split(t, n, axis=axis)]


def concat(parts, axis):
    return np.concatenate(parts, axis=axis)


def bit_planes(t, nb, sb=1):
    """Decompose a nonnegative integer tensor into LSB-first bit planes.

    Produces ``nb // sb`` planes of ``sb``-bit cells; the weighted sum
    ``sum(2**(i*sb) * plane_i)`` reconstructs the input exactly.
    """
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.integer):
        raise TypeError("bit_planes operates on integer tensors")
    if nb < 1 or sb < 1 or nb % sb != 0:
        raise ValueError(f"slice width sb={sb} must divide nb={nb}")
    if t.size and t.min() < 0:
        raise RangeError("bit_planes requires a nonnegative tensor")
    if t.size and t.max() >= (1 << nb):
        raise RangeError(f"element {t.max()} does not fit in {nb} bits")
    t = t.astype(np.int64, copy=False)
    mask = (1 << sb) - 1
    return [BitPlane(i, ((t >> (i * sb)) & mask).astype(np.int64))
            for i in range(nb // sb)]


def planes_to_tensor(planes, sb=1):
    """Inverse of :func:`bit_planes` (shift-add reconstruction)."""
    total = np.zeros_like(planes[0].cells)
    for p in planes:
        total = total + (p.cells << (p.index * sb))
    return total


def compute_n_groups(in_ch, kh, kw, xbar):
    """Number of channel groups needed so one group's patch fits one array.

    Starts at ceil(in_ch*kh*kw / xbar) and grows until it divides in_ch,
    since a grouped convolution needs equal channel slices. Fails if no
    divisor of in_ch satisfies the bound (a group cannot be finer than one
    channel).
    """
    if min(in_ch, kh, kw, xbar) < 1:
        raise ValueError("in_ch, kh, kw and xbar must all be positive")
    n_groups = ceil(in_ch * kh * kw / xbar)
    while in_ch % n_groups != 0:
        n_groups += 1
        if n_groups > in_ch:
            raise ShapeError(
                f"cannot split {in_ch} channels of a {kh}x{kw} kernel into groups "
                f"fitting {xbar} wordlines")
    return n_groups
