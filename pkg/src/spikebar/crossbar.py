"""Cell-level crossbar simulation: programming, wordline drive, ADC sampling.

Weights are bit-sliced into binary cells and programmed under one of two
mapping schemes: ``shared`` keeps positive and negative magnitudes in the same
column on paired rows (the bitline sees their signed difference), ``split``
puts them on adjacent column rails that are subtracted after sampling. Each
bitline is read by an ADC model: a 1-bit sense amplifier (sign of the shared
bitline, or a 0/1 threshold per split rail), a multi-bit uniform converter, or
an ideal pass-through. Shift-add recombines the planes.

Devices are ideal binary conductances here; resistance ratios and peripheral
costs belong to the cost model, not to functional simulation.

For the shared scheme an array holds up to ``xbar`` wordline *pairs* (two
cell rows per logical input behind one access device), so a channel group
sized for ``xbar`` wordlines fits a single array under either scheme and
produces exactly one partial sum per bitline.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .quant import QuantizedTensor, round_half_away
from .tensor_ops import (ShapeError, bit_planes, compute_n_groups,
                         conv_output_size, pad_nchw)

MAPPINGS = ("shared", "split")
ADC_KINDS = ("sa1", "hp", "ideal")


@dataclass(frozen=True)
class AdcModel:
    """Bitline sampling model.

    ``sa1`` is the sense-amplifier 1-bit readout, ``hp`` a uniform ``bits``
    converter over [0, full_scale] (full scale defaults to the worst-case
    bitline sum of the driven wordlines), ``ideal`` passes the value through.
    """
    kind: str = "sa1"
    bits: Optional[int] = None
    full_scale: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ADC_KINDS:
            raise ValueError(f"unknown ADC kind {self.kind!r}")
        if self.kind == "hp" and (self.bits is None or self.bits < 1):
            raise ValueError("hp ADC needs a resolution of at least 1 bit")

    @classmethod
    def from_name(cls, name):
        """Parse CLI-style names: sa1, ideal, hp<bits> (e.g. hp5)."""
        if name in ("sa1", "ideal"):
            return cls(name)
        if name.startswith("hp"):
            return cls("hp", bits=int(name[2:]))
        raise ValueError(f"unknown ADC model name {name!r}")

    @property
    def name(self):
        return f"hp{self.bits}" if self.kind == "hp" else self.kind


@dataclass(frozen=True)
class CrossbarConfig:
    xbar: int = 32
    nb_w: int = 4
    sb_w: int = 1
    mapping: str = "split"
    adc: AdcModel = field(default_factory=AdcModel)

    def __post_init__(self):
        if self.mapping not in MAPPINGS:
            raise ValueError(f"unknown mapping {self.mapping!r}")
        if self.sb_w < 1 or self.nb_w % self.sb_w != 0:
            raise ValueError(f"cell width {self.sb_w} must divide weight width {self.nb_w}")
        if self.xbar < 1:
            raise ValueError("array size must be positive")

    @property
    def n_planes(self):
        return self.nb_w // self.sb_w


@dataclass
class CellArray:
    """One programmed array plus the metadata to interpret its bitlines."""
    cells: np.ndarray          # physical rows x columns, sb_w-bit ints
    row_sign: np.ndarray       # +1 charge / -1 discharge per physical row
    col_plane: np.ndarray      # bit-plane index per column
    col_sign: np.ndarray       # +1 positive rail / -1 negative rail
    col_out: np.ndarray        # logical output index per column
    wordlines: int             # logical inputs driven into this array
    rows_per_input: int        # 2 for shared mapping, 1 for split
    row_start: int             # first logical input row of this block
    group: int = 0


@dataclass
class CrossbarProgram:
    """A weight matrix programmed into one or more cell arrays."""
    config: CrossbarConfig
    in_features: int
    out_features: int
    arrays: list

    def reconstruct(self):
        """Signed shift-add recombination of every array; inverse of program()."""
        w = np.zeros((self.in_features, self.out_features), dtype=np.int64)
        sb = self.config.sb_w
        for arr in self.arrays:
            signed = arr.row_sign[:, None].astype(np.int64) * arr.cells.astype(np.int64)
            # collapse physical row pairs onto their logical input row
            logical = signed.reshape(arr.wordlines, arr.rows_per_input, -1).sum(axis=1)
            weight = (arr.col_sign.astype(np.int64) << (arr.col_plane.astype(np.int64) * sb))
            for c in range(arr.cells.shape[1]):
                w[arr.row_start:arr.row_start + arr.wordlines, arr.col_out[c]] += \
                    logical[:, c] * weight[c]
        return w


def _signed_planes(values, nb, sb):
    """LSB-first plane pairs of the positive and negative magnitudes."""
    pos = np.maximum(values, 0)
    neg = np.maximum(-values, 0)
    pos_planes = [p.cells for p in bit_planes(pos, nb, sb)]
    neg_planes = [p.cells for p in bit_planes(neg, nb, sb)]
    return pos_planes, neg_planes


def _program(wq, config):
    if wq.values.ndim != 2:
        raise ShapeError(f"expected a 2D weight matrix, got shape {wq.values.shape}")
    if wq.bits != config.nb_w:
        raise ValueError(f"weight width {wq.bits} != configured nb_w {config.nb_w}")
    n_in, n_out = wq.values.shape
    planes = config.n_planes
    shared = config.mapping == "shared"
    pos_planes, neg_planes = _signed_planes(wq.values, config.nb_w, config.sb_w)

    rails = 1 if shared else 2
    cols_per_out = planes * rails
    outs_per_array = config.xbar // cols_per_out
    if outs_per_array < 1:
        raise ShapeError(
            f"{cols_per_out} columns per output exceed array width {config.xbar}")
    inputs_per_array = config.xbar  # wordlines; shared pairs cell rows internally
    rows_per_input = 2 if shared else 1

    arrays = []
    for row_start in range(0, n_in, inputs_per_array):
        rows = min(inputs_per_array, n_in - row_start)
        for out_start in range(0, n_out, outs_per_array):
            outs = min(outs_per_array, n_out - out_start)
            ncols = outs * cols_per_out
            cells = np.zeros((rows * rows_per_input, ncols), dtype=np.uint8)
            col_plane = np.zeros(ncols, dtype=np.int16)
            col_sign = np.ones(ncols, dtype=np.int8)
            col_out = np.zeros(ncols, dtype=np.int32)
            if shared:
                row_sign = np.tile(np.array([1, -1], dtype=np.int8), rows)
            else:
                row_sign = np.ones(rows, dtype=np.int8)
            for o in range(outs):
                out = out_start + o
                for i in range(planes):
                    pcol = pos_planes[i][row_start:row_start + rows, out]
                    ncol = neg_planes[i][row_start:row_start + rows, out]
                    if shared:
                        c = o * planes + i
                        cells[0::2, c] = pcol
                        cells[1::2, c] = ncol
                        col_plane[c] = i
                        col_out[c] = out
                    else:
                        cp = o * cols_per_out + i
                        cn = o * cols_per_out + planes + i
                        cells[:, cp] = pcol
                        cells[:, cn] = ncol
                        col_plane[cp] = col_plane[cn] = i
                        col_sign[cn] = -1
                        col_out[cp] = col_out[cn] = out
            arrays.append(CellArray(cells, row_sign, col_plane, col_sign, col_out,
                                    wordlines=rows, rows_per_input=rows_per_input,
                                    row_start=row_start))
    return CrossbarProgram(config, n_in, n_out, arrays)


def program_shared_column(wq, config):
    """Map signed weights with positive/negative magnitudes on paired rows of
    the same column; the bitline carries their signed difference."""
    if config.mapping != "shared":
        raise ValueError("config.mapping must be 'shared'")
    return _program(wq, config)


def program_split_columns(wq, config):
    """Map positive and negative magnitudes on adjacent column rails, one row
    per logical input; rails are subtracted after sampling."""
    if config.mapping != "split":
        raise ValueError("config.mapping must be 'split'")
    return _program(wq, config)


def program(wq, config):
    return _program(wq, config)


def bitline_mac(array, spikes):
    """Integer dot product of one array's bitlines with a binary spike vector.

    For the shared mapping the returned value is already the signed
    positive-minus-negative sum per column.
    """
    spikes = np.asarray(spikes, dtype=np.int64)
    if spikes.shape != (array.wordlines,):
        raise ShapeError(
            f"spike vector length {spikes.shape} != wordlines ({array.wordlines},)")
    drive = np.repeat(spikes, array.rows_per_input) * array.row_sign.astype(np.int64)
    return drive @ array.cells.astype(np.int64)


def _hp_sample(x, bits, full_scale):
    if full_scale is None or full_scale <= 0:
        raise ValueError("hp ADC needs a positive full-scale range")
    levels = (1 << bits) - 1
    step = full_scale / levels
    code = np.clip(round_half_away(np.asarray(x, dtype=np.float64) / step),
                   -levels, levels)
    return code * step


def adc_sample(bitline, model, mapping, full_scale=None):
    """Sample bitline values with the given ADC model.

    ``sa1`` yields sign(x) for the shared mapping and the 0/1 threshold h(x)
    per split rail (both zero at zero). ``hp`` quantizes uniformly over
    [0, full_scale] (symmetric extension for signed shared bitlines) and
    returns the dequantized value. ``ideal`` is the identity.
    """
    x = np.asarray(bitline)
    if model.kind == "ideal":
        return x
    if model.kind == "sa1":
        if mapping == "shared":
            return np.sign(x).astype(np.int64)
        return (x > 0).astype(np.int64)
    fs = model.full_scale if model.full_scale is not None else full_scale
    return _hp_sample(x, model.bits, fs)


def shift_add(per_plane):
    """Recombine LSB-first per-plane values: sum of 2**i * plane_i."""
    total = None
    for i, plane in enumerate(per_plane):
        term = np.asarray(plane) * (2 ** i)
        total = term if total is None else total + term
    return total


def ideal_adc_bits(n_wl, sb_w=1):
    """ADC resolution preserving the full bitline range: log2(N_WL)+sb_W-1."""
    if n_wl < 1 or (n_wl & (n_wl - 1)) != 0:
        raise ValueError(f"wordline count must be a power of two, got {n_wl}")
    return int(math.log2(n_wl)) + sb_w - 1


def simulate_matvec(prog, spikes, adc=None):
    """Run one spike vector through a programmed matrix.

    Per array: bitline MAC, ADC sample per column, shift-add of the plane
    columns of each output (split rails subtract); partial sums from separate
    row blocks accumulate after sampling. With the ideal ADC this equals the
    direct integer matrix-vector product.
    """
    spikes = np.asarray(spikes, dtype=np.int64)
    if spikes.shape != (prog.in_features,):
        raise ShapeError(
            f"spike vector length {spikes.shape} != in_features ({prog.in_features},)")
    model = adc if adc is not None else prog.config.adc
    out = np.zeros(prog.out_features, dtype=np.float64)
    for arr in prog.arrays:
        mac = bitline_mac(arr, spikes[arr.row_start:arr.row_start + arr.wordlines])
        fs = arr.wordlines * ((1 << prog.config.sb_w) - 1)
        sampled = adc_sample(mac, model, prog.config.mapping, full_scale=fs)
        contrib = sampled * arr.col_sign * np.exp2(arr.col_plane * prog.config.sb_w)
        np.add.at(out, arr.col_out, contrib)
    if model.kind == "hp":
        return out
    return out.astype(np.int64)


def _mac_many(array, spike_rows):
    """bitline_mac vectorized over a batch of spike vectors (oracle helper)."""
    drive = (np.repeat(spike_rows, array.rows_per_input, axis=1)
             * array.row_sign.astype(np.int64))
    return drive @ array.cells.astype(np.int64)


def cell_level_conv(x, wq, config, stride=1, padding=0, adc=None):
    """Convolution evaluated entirely through crossbar primitives.

    The kernel is split into channel groups sized to the array, each group is
    programmed under the configured mapping, every output position's spike
    patch drives the wordlines, bitlines are sampled and shift-added, and the
    per-group partial activations are summed. This is the reference the
    layer-level algorithm is checked against.
    """
    x = np.asarray(x, dtype=np.int64)
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("crossbar wordlines take binary spikes only")
    values = wq.values
    n, cin, h, w = x.shape
    cout, _, kh, kw = values.shape
    model = adc if adc is not None else config.adc
    n_groups = compute_n_groups(cin, kh, kw, config.xbar)
    cpg = cin // n_groups
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = pad_nchw(x, padding)

    out = np.zeros((n, cout, ho * wo), dtype=np.float64)
    for g in range(n_groups):
        wmat = values[:, g * cpg:(g + 1) * cpg].reshape(cout, -1).T  # rows x outs
        prog = _program(QuantizedTensor(wmat, wq.scale, wq.bits), config)
        patches = np.empty((n, ho * wo, cpg * kh * kw), dtype=np.int64)
        p = 0
        for i in range(ho):
            for j in range(wo):
                win = xp[:, g * cpg:(g + 1) * cpg,
                         i * stride:i * stride + kh, j * stride:j * stride + kw]
                patches[:, p] = win.reshape(n, -1)
                p += 1
        flat = patches.reshape(n * ho * wo, -1)
        acc = np.zeros((n * ho * wo, cout), dtype=np.float64)
        for arr in prog.arrays:
            mac = _mac_many(arr, flat[:, arr.row_start:arr.row_start + arr.wordlines])
            fs = arr.wordlines * ((1 << config.sb_w) - 1)
            sampled = adc_sample(mac, model, config.mapping, full_scale=fs)
            contrib = sampled * arr.col_sign * np.exp2(arr.col_plane * config.sb_w)
            np.add.at(acc.T, arr.col_out, contrib.T)
        out += acc.reshape(n, ho * wo, cout).transpose(0, 2, 1)
    out = out.reshape(n, cout, ho, wo)
    if model.kind == "hp":
        return out
    return out.astype(np.int64)


# ---------------------------------------------------------------------------
# dump / load

PROGRAM_MAGIC = b"SBXPROG1"
PROGRAM_VERSION = 1


def program_to_entries(prog, prefix=""):
    """Flatten a program into (meta, arrays) entries for a container file."""
    meta = {
        "config": {"xbar": prog.config.xbar, "nb_w": prog.config.nb_w,
                   "sb_w": prog.config.sb_w, "mapping": prog.config.mapping,
                   "adc": prog.config.adc.name},
        "in_features": prog.in_features,
        "out_features": prog.out_features,
        "arrays": [],
    }
    arrays = {}
    for k, arr in enumerate(prog.arrays):
        meta["arrays"].append({
            "wordlines": arr.wordlines, "rows_per_input": arr.rows_per_input,
            "row_start": arr.row_start, "group": arr.group,
        })
        arrays[f"{prefix}a{k}_cells"] = arr.cells
        arrays[f"{prefix}a{k}_row_sign"] = arr.row_sign
        arrays[f"{prefix}a{k}_col_plane"] = arr.col_plane
        arrays[f"{prefix}a{k}_col_sign"] = arr.col_sign
        arrays[f"{prefix}a{k}_col_out"] = arr.col_out
    return meta, arrays


def program_from_entries(meta, arrays, prefix=""):
    cfg = CrossbarConfig(xbar=meta["config"]["xbar"], nb_w=meta["config"]["nb_w"],
                         sb_w=meta["config"]["sb_w"], mapping=meta["config"]["mapping"],
                         adc=AdcModel.from_name(meta["config"]["adc"]))
    cell_arrays = []
    for k, am in enumerate(meta["arrays"]):
        cell_arrays.append(CellArray(
            cells=arrays[f"{prefix}a{k}_cells"],
            row_sign=arrays[f"{prefix}a{k}_row_sign"],
            col_plane=arrays[f"{prefix}a{k}_col_plane"],
            col_sign=arrays[f"{prefix}a{k}_col_sign"],
            col_out=arrays[f"{prefix}a{k}_col_out"],
            wordlines=am["wordlines"], rows_per_input=am["rows_per_input"],
            row_start=am["row_start"], group=am["group"]))
    return CrossbarProgram(cfg, meta["in_features"], meta["out_features"], cell_arrays)
