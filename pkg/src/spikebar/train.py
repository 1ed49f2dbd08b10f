"""Three-stage hardware-aware training and the shared evaluation metrics.

The stages run consecutively, each initialized from the previous checkpoint:
full-precision surrogate-gradient training from scratch, then re-training
with the quantized forward (integer weight grids, 12-bit states, power-of-two
leaks, straight-through gradients), and finally fine-tuning against the full
crossbar forward (bit-plane grouping, binary partial sums, slicing-masked
gradients). Readout is cross-entropy over the time-accumulated output of the
final linear layer; the optimizer is momentum SGD with a cosine-decayed rate.
"""

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import batch_indices
from .model import STAGES, build_model, load_checkpoint, save_checkpoint

STAGE_ORDER = {"fp": None, "qat": "fp", "adcless": "qat"}


class TrainingError(RuntimeError):
    pass


@dataclass
class StageConfig:
    stage: str
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    alpha: float = 10.0
    seed: int = 0
    xbar: Optional[int] = None       # adcless stage: fixed array preset

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown training stage {self.stage!r}")
        if self.alpha <= 0:
            raise ValueError("surrogate width must be positive")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def avg_spikes(spike_counts, neurons, timesteps):
    """Fired-spike percentage per neuron per time-step."""
    if neurons <= 0 or timesteps <= 0:
        raise ValueError("neurons and timesteps must be positive")
    return spike_counts * 100.0 / (neurons * timesteps)


def accuracy(logits, labels):
    """Top-1 percentage; argmax ties break toward the lowest class index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    pred = np.argmax(logits, axis=1)
    return float((pred == labels).mean() * 100.0)


def _to_torch_batch(spikes, labels, idx):
    x = torch.tensor(spikes[idx], dtype=torch.float32)
    y = torch.tensor(labels[idx], dtype=torch.long)
    return x, y


def _cosine_lr(base_lr, epoch, total_epochs):
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / max(total_epochs, 1)))


def _configure_for(model, cfg):
    model.configure(stage=cfg.stage, adc_override="spec",
                    xbar=cfg.xbar if cfg.xbar is not None else model.spec.xbar,
                    record_activity=False, record_ps=False)
    model.ctx.alpha = cfg.alpha


def train_step(model, x, y, optimizer):
    """One optimizer step; returns the batch loss."""
    optimizer.zero_grad()
    logits = model(x)
    loss = F.cross_entropy(logits, y)
    if not torch.isfinite(loss):
        raise TrainingError(
            f"non-finite loss {loss.item()} (stage={model.ctx.stage}); check the "
            "learning rate and input scaling")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def evaluate(model, dataset, split="val", stage=None, adc_override=None,
             xbar=None, batch_size=64):
    """Accuracy and spike-activity metrics of one dataset split.

    ``adc_override`` remaps the sa1-designated layers ('ideal' remaps every
    crossbar layer); ``xbar`` picks the array preset for the crossbar forward.
    """
    spikes, labels = dataset.split(split)
    was_training = model.training
    model.eval()
    model.configure(stage=stage if stage is not None else model.ctx.stage,
                    adc_override=adc_override if adc_override is not None else "spec",
                    xbar=xbar, record_activity=True)
    model.reset_counters()
    logits_all = []
    with torch.no_grad():
        for idx in batch_indices(len(labels), batch_size):
            x, _ = _to_torch_batch(spikes, labels, idx)
            logits_all.append(model(x).numpy())
    model.configure(record_activity=False)
    if was_training:
        model.train()
    logits = np.concatenate(logits_all) if logits_all else np.zeros((0, 1))
    fired, neuron_steps, per_layer = model.spike_stats()
    t = dataset.timesteps
    neurons = neuron_steps // t if t else 0
    return {
        "accuracy": accuracy(logits, labels),
        "avg_spikes": avg_spikes(fired, neurons, t) if neurons else 0.0,
        "samples": int(len(labels)),
        "input_rates": model.input_rates(),
        "per_layer_spikes": per_layer,
        "logits": logits,
    }


def train_stage(model, dataset, cfg, log=None):
    """Run one stage over the train split; returns per-epoch metric rows."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    _configure_for(model, cfg)
    model.train()
    spikes, labels = dataset.split("train")
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr,
                                momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay)
    rows = []
    for epoch in range(cfg.epochs):
        lr = _cosine_lr(cfg.lr, epoch, cfg.epochs)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        losses = []
        for idx in batch_indices(len(labels), cfg.batch_size, rng):
            x, y = _to_torch_batch(spikes, labels, idx)
            losses.append(train_step(model, x, y, optimizer))
        metrics = evaluate(model, dataset, "val", stage=cfg.stage,
                           xbar=cfg.xbar, batch_size=max(cfg.batch_size, 64))
        _configure_for(model, cfg)
        row = {"epoch": epoch, "lr": lr,
               "train_loss": float(np.mean(losses)) if losses else float("nan"),
               "val_accuracy": metrics["accuracy"],
               "val_avg_spikes": metrics["avg_spikes"]}
        rows.append(row)
        if log:
            log(f"[{cfg.stage}] epoch {epoch}: loss={row['train_loss']:.4f} "
                f"val_acc={row['val_accuracy']:.2f}% "
                f"avg_spikes={row['val_avg_spikes']:.2f}%")
    return rows


def write_metrics_csv(rows, path):
    if not rows:
        raise ValueError("no metric rows to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in row.items()})


def check_stage_chain(stage, init_stage):
    """The model feeding each stage must come from the stage before it."""
    needed = STAGE_ORDER[stage]
    if needed is None:
        return
    if init_stage != needed:
        raise TrainingError(
            f"stage {stage!r} must be initialized from a {needed!r} checkpoint, "
            f"got {init_stage!r}")


def pipeline(spec, dataset, cfg_fp, cfg_qat, cfg_adcless, outdir, log=None):
    """FP -> quantized -> crossbar fine-tuning with checkpoint chaining.

    Writes one checkpoint and one metrics CSV per stage under ``outdir`` and
    returns a three-entry report evaluated on the test split.
    """
    import os

    os.makedirs(outdir, exist_ok=True)
    report = []
    model = build_model(spec)
    prev_stage = None
    for cfg in (cfg_fp, cfg_qat, cfg_adcless):
        check_stage_chain(cfg.stage, prev_stage)
        rows = train_stage(model, dataset, cfg, log=log)
        ckpt = os.path.join(outdir, f"{cfg.stage}.ckpt")
        save_checkpoint(ckpt, model, cfg.stage, seed=cfg.seed)
        write_metrics_csv(rows, os.path.join(outdir, f"{cfg.stage}_metrics.csv"))
        test = evaluate(model, dataset, "test", stage=cfg.stage, xbar=cfg.xbar)
        report.append({"stage": cfg.stage, "checkpoint": ckpt,
                       "test_accuracy": test["accuracy"],
                       "test_avg_spikes": test["avg_spikes"],
                       "val_accuracy": rows[-1]["val_accuracy"] if rows else None})
        if log:
            log(f"[{cfg.stage}] test_acc={test['accuracy']:.2f}% "
                f"avg_spikes={test['avg_spikes']:.2f}%")
        prev_stage = cfg.stage
    return report
