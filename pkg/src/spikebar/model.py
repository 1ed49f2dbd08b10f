"""Declarative network specs and the spiking module graph built from them.

A spec is a JSON document listing layers in evaluation order; the validator
walks the shapes and the binary-spike domain through the graph so every
crossbar-mapped layer provably receives what its readout can handle, and
enforces the boundary-layer rule (first and last crossbar layers carry 8-bit
weights behind a multi-bit or ideal readout) unless a layer opts out
explicitly.

The temporal section of the graph runs once per time-step; an ``accumulate``
entry sums the binary activations over the sequence, and everything after it
(the readout head) runs once on the accumulated counts.
"""

import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import container
from .layers import (CrossbarConv2d, CrossbarLinear, FrozenDropout, LifLayer,
                     RunContext, SewBlock, maxpool2)
from .quant import quant_levels

SPEC_VERSION = 1
CHECKPOINT_MAGIC = b"SBCKPT01"
CHECKPOINT_VERSION = 1

LAYER_KINDS = ("conv", "lif", "sew", "maxpool", "dropout", "accumulate",
               "flatten", "linear")
ADC_NAMES = ("sa1", "hp5", "ideal")
STAGES = ("fp", "qat", "adcless")


class SpecError(ValueError):
    """A network spec that cannot be built as written."""


@dataclass
class NetworkSpec:
    """Parsed, validated layer graph description."""
    name: str
    in_channels: int
    height: int
    width: int
    timesteps: int
    classes: int
    reset: str
    alpha: float
    xbar: int
    mapping: str
    iand_negate_direct: bool
    layers: list

    @classmethod
    def from_dict(cls, d):
        if d.get("version", SPEC_VERSION) != SPEC_VERSION:
            raise SpecError(f"unsupported spec version {d.get('version')}")
        try:
            inp = d["input"]
            spec = cls(
                name=d.get("name", "net"),
                in_channels=int(inp["channels"]),
                height=int(inp["height"]),
                width=int(inp["width"]),
                timesteps=int(d["timesteps"]),
                classes=int(d["classes"]),
                reset=d.get("reset", "soft"),
                alpha=float(d.get("surrogate_alpha", 10.0)),
                xbar=int(d.get("xbar", 32)),
                mapping=d.get("mapping", "split"),
                iand_negate_direct=bool(d.get("iand_negate_direct", True)),
                layers=list(d["layers"]),
            )
        except KeyError as exc:
            raise SpecError(f"spec is missing required field {exc}") from None
        spec.validate()
        return spec

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return {
            "version": SPEC_VERSION,
            "name": self.name,
            "input": {"channels": self.in_channels, "height": self.height,
                      "width": self.width},
            "timesteps": self.timesteps,
            "classes": self.classes,
            "reset": self.reset,
            "surrogate_alpha": self.alpha,
            "xbar": self.xbar,
            "mapping": self.mapping,
            "iand_negate_direct": self.iand_negate_direct,
            "layers": self.layers,
        }

    def crossbar_layer_indices(self):
        return [i for i, entry in enumerate(self.layers)
                if entry["kind"] in ("conv", "linear", "sew")]

    def validate(self):
        if self.reset not in ("hard", "soft"):
            raise SpecError(f"reset must be hard or soft, got {self.reset!r}")
        if self.mapping not in ("shared", "split"):
            raise SpecError(f"unknown mapping {self.mapping!r}")
        if self.timesteps < 1 or self.classes < 2:
            raise SpecError("need at least one time-step and two classes")
        if not self.layers:
            raise SpecError("spec has no layers")

        shape = (self.in_channels, self.height, self.width)
        binary = True       # generated spike data is binary by construction
        seen_accumulate = False
        xbar_idx = self.crossbar_layer_indices()
        if not xbar_idx:
            raise SpecError("spec has no crossbar-mapped layers")
        boundary = {xbar_idx[0], xbar_idx[-1]}

        for i, entry in enumerate(self.layers):
            kind = entry.get("kind")
            if kind not in LAYER_KINDS:
                raise SpecError(f"layer {i}: unknown kind {kind!r}")
            adc = entry.get("adc")
            if adc is not None and adc not in ADC_NAMES:
                raise SpecError(f"layer {i}: unknown adc {adc!r}")
            if kind in ("conv", "linear", "sew"):
                adc = adc or ("sa1" if kind == "sew" else "ideal")
                if adc != "ideal" and not binary:
                    raise SpecError(
                        f"layer {i} ({kind}): a {adc} readout needs binary spike "
                        "input, but this point of the graph carries accumulated "
                        "values; use adc='ideal' here")
                if i in boundary and not entry.get("boundary_override", False):
                    bits = entry.get("bits", 4)
                    if bits != 8 or adc == "sa1":
                        raise SpecError(
                            f"layer {i} ({kind}): first/last crossbar layers take "
                            "8-bit weights with an hp5 or ideal readout; set "
                            "boundary_override=true to deviate deliberately")
            if kind == "conv":
                c, h, w = shape
                kk = int(entry.get("kernel", 3))
                stride = int(entry.get("stride", 1))
                pad = int(entry.get("padding", 0))
                ho = (h + 2 * pad - kk) // stride + 1
                wo = (w + 2 * pad - kk) // stride + 1
                if ho < 1 or wo < 1:
                    raise SpecError(f"layer {i}: kernel does not fit {h}x{w}")
                shape = (int(entry["out_channels"]), ho, wo)
                binary = False
            elif kind == "lif":
                binary = True
            elif kind == "sew":
                if not binary:
                    raise SpecError(f"layer {i}: sew block needs binary input")
                c, h, w = shape
                if int(entry.get("channels", c)) != c:
                    raise SpecError(
                        f"layer {i}: sew channels {entry.get('channels')} != "
                        f"incoming channels {c}")
            elif kind == "maxpool":
                c, h, w = shape
                if not binary:
                    raise SpecError(f"layer {i}: maxpool preserves spikes only "
                                    "over binary input")
                if h % 2 or w % 2:
                    raise SpecError(f"layer {i}: maxpool needs even extents, "
                                    f"got {h}x{w}")
                shape = (c, h // 2, w // 2)
            elif kind == "dropout":
                p = float(entry.get("p", 0.0))
                if not 0 <= p <= 1:
                    raise SpecError(f"layer {i}: dropout rate {p} outside [0,1]")
            elif kind == "accumulate":
                if seen_accumulate:
                    raise SpecError("only one accumulate node is supported")
                seen_accumulate = True
                binary = False
            elif kind == "flatten":
                if isinstance(shape, tuple):
                    shape = int(np.prod(shape))
            elif kind == "linear":
                feats = shape if isinstance(shape, int) else int(np.prod(shape))
                shape = int(entry["out_features"])
                binary = False
        if not seen_accumulate:
            raise SpecError("spec needs an accumulate node before the readout")
        final = shape if isinstance(shape, int) else int(np.prod(shape))
        if final != self.classes:
            raise SpecError(f"readout width {final} != declared classes {self.classes}")


class SpikingNet(nn.Module):
    """Executable module graph for one network spec."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        self.ctx = RunContext(stage="fp", xbar=spec.xbar, mapping=spec.mapping,
                              alpha=spec.alpha)
        temporal, readout = [], []
        section = temporal
        shape = (spec.in_channels, spec.height, spec.width)
        for entry in spec.layers:
            kind = entry["kind"]
            if kind == "accumulate":
                section = readout
                continue
            if kind == "conv":
                c = shape[0]
                layer = CrossbarConv2d(
                    c, int(entry["out_channels"]), int(entry.get("kernel", 3)),
                    stride=int(entry.get("stride", 1)),
                    padding=int(entry.get("padding", 0)),
                    bits=int(entry.get("bits", 4)),
                    adc=entry.get("adc", "hp5"), ctx=self.ctx)
                kk, stride, pad = (int(entry.get("kernel", 3)),
                                   int(entry.get("stride", 1)),
                                   int(entry.get("padding", 0)))
                shape = (int(entry["out_channels"]),
                         (shape[1] + 2 * pad - kk) // stride + 1,
                         (shape[2] + 2 * pad - kk) // stride + 1)
            elif kind == "lif":
                source = next((m for m in reversed(section)
                               if isinstance(m, (CrossbarConv2d, CrossbarLinear))),
                              None)
                layer = LifLayer(v_th=float(entry.get("v_th", 1.0)),
                                 leak=float(entry.get("leak", 1.0)),
                                 reset=spec.reset, ctx=self.ctx, source=source)
            elif kind == "sew":
                layer = SewBlock(shape[0], bits=int(entry.get("bits", 4)),
                                 adc=entry.get("adc", "sa1"),
                                 v_th=float(entry.get("v_th", 1.0)),
                                 leak=float(entry.get("leak", 1.0)),
                                 reset=spec.reset, ctx=self.ctx,
                                 negate_direct=spec.iand_negate_direct)
            elif kind == "maxpool":
                layer = _MaxPool()
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif kind == "dropout":
                layer = FrozenDropout(float(entry.get("p", 0.0)))
            elif kind == "flatten":
                layer = nn.Flatten()
                shape = int(np.prod(shape))
            elif kind == "linear":
                feats = shape if isinstance(shape, int) else int(np.prod(shape))
                layer = CrossbarLinear(feats, int(entry["out_features"]),
                                       bits=int(entry.get("bits", 4)),
                                       adc=entry.get("adc", "ideal"), ctx=self.ctx)
                shape = int(entry["out_features"])
            else:
                raise SpecError(f"unhandled layer kind {kind!r}")
            section.append(layer)
        self.temporal = nn.ModuleList(temporal)
        self.readout = nn.ModuleList(readout)

    # -- configuration -----------------------------------------------------
    def configure(self, stage=None, xbar=None, adc_override=None, smooth=None,
                  record_activity=None, record_ps=None):
        if stage is not None:
            if stage not in STAGES:
                raise SpecError(f"unknown stage {stage!r}")
            self.ctx.stage = stage
        if xbar is not None:
            self.ctx.xbar = xbar
        if adc_override is not None:
            self.ctx.adc_override = None if adc_override == "spec" else adc_override
        if smooth is not None:
            self.ctx.smooth = smooth
        if record_activity is not None:
            self.ctx.record_activity = record_activity
        if record_ps is not None:
            self.ctx.record_ps = record_ps
            if record_ps:
                self.ctx.ps_extrema.clear()

    def reset_state(self):
        for module in self.modules():
            if module is not self and hasattr(module, "reset_state"):
                module.reset_state()

    def reset_counters(self):
        for module in self.modules():
            if isinstance(module, LifLayer):
                module.reset_counters()
        for module in self.modules():
            if isinstance(module, (CrossbarConv2d, CrossbarLinear)):
                module.last_input_rate = None

    # -- execution ----------------------------------------------------------
    def forward(self, x_seq):
        """x_seq is (N, T, C, H, W); returns the readout logits (N, classes)."""
        if x_seq.dim() != 5:
            raise ValueError(f"expected (N,T,C,H,W) input, got {tuple(x_seq.shape)}")
        self.reset_state()
        acc = None
        for t in range(x_seq.shape[1]):
            h = x_seq[:, t]
            for layer in self.temporal:
                h = layer(h)
            acc = h if acc is None else acc + h
        z = acc
        for layer in self.readout:
            z = layer(z)
        return z

    # -- metrics ------------------------------------------------------------
    def spike_stats(self):
        """Fired-spike counts and neuron-step totals over the LIF layers."""
        fired = 0.0
        neuron_steps = 0
        per_layer = []
        for name, module in self.named_modules():
            if isinstance(module, LifLayer):
                fired += module.spikes_fired
                neuron_steps += module.neuron_steps
                per_layer.append((name, module.spikes_fired, module.neuron_steps))
        return fired, neuron_steps, per_layer

    def input_rates(self):
        """Mean input spike rate seen by each crossbar layer (last run)."""
        rates = {}
        for name, module in self.named_modules():
            if isinstance(module, (CrossbarConv2d, CrossbarLinear)):
                rates[name] = module.last_input_rate
        return rates

    def crossbar_modules(self):
        return [(n, m) for n, m in self.named_modules()
                if isinstance(m, (CrossbarConv2d, CrossbarLinear))]


class _MaxPool(nn.Module):
    def forward(self, x):
        return maxpool2(x)


def build_model(spec):
    return SpikingNet(spec)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model, stage, seed=None, extra=None):
    """Persist the model: float master weights plus, for quantized stages,
    the integer grid / scale / bits each crossbar layer deploys with."""
    spec = model.spec
    meta = {"stage": stage, "spec": spec.to_dict(), "seed": seed,
            "extra": extra or {}, "layers": []}
    arrays = {}
    for idx, (name, module) in enumerate(model.crossbar_modules()):
        key = f"w{idx}"
        arrays[key] = module.weight.detach().numpy().astype(np.float64)
        entry = {"name": name, "key": key, "bits": module.bits, "adc": module.adc}
        if stage in ("qat", "adcless"):
            with torch.no_grad():
                q, scale = module.quantized_weight()
            arrays[key + "_q"] = q.numpy().astype(np.int64)
            entry["scale"] = scale
        meta["layers"].append(entry)
    # LIF parameters travel with the graph
    lif_meta = []
    for name, module in model.named_modules():
        if isinstance(module, LifLayer):
            lif_meta.append({"name": name, "v_th": module.v_th, "leak": module.leak,
                             "leak_code": module.leak_code.n, "reset": module.reset})
    meta["lif"] = lif_meta
    container.write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, meta, arrays)


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns (model, stage, meta)."""
    version, meta, arrays = container.read_container(path, CHECKPOINT_MAGIC,
                                                     CHECKPOINT_VERSION)
    spec = NetworkSpec.from_dict(meta["spec"])
    model = build_model(spec)
    with torch.no_grad():
        for idx, (name, module) in enumerate(model.crossbar_modules()):
            entry = meta["layers"][idx]
            if entry["name"] != name:
                raise container.ContainerError(
                    f"{path}: checkpoint layer {entry['name']!r} does not match "
                    f"spec layer {name!r}")
            module.weight.copy_(torch.tensor(arrays[entry["key"]],
                                             dtype=torch.float32))
    return model, meta["stage"], meta
