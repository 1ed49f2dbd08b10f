"""Synthetic spatio-temporal spike datasets and their on-disk container.

Samples are class-conditioned binary spike movies: each class is an oriented
stripe grating whose on/off event channels flicker stochastically over the
sequence, with per-sample phase/position jitter and background noise. The
pattern is only present on a random subset of the time-steps, so integrating
over the membrane potential genuinely helps. Generation is a single pass over
one seeded generator, so a (seed, shape) pair always produces the same bytes.
"""

from dataclasses import dataclass

import numpy as np

from . import container

DATASET_MAGIC = b"SBSPIKE1"
DATASET_VERSION = 1

STRIPE_PERIOD = 6
STRIPE_THICKNESS = 2


@dataclass
class SpikeDataset:
    spikes: np.ndarray       # (N, T, C, H, W) uint8, values in {0,1}
    labels: np.ndarray       # (N,) int64
    classes: int
    n_train: int
    n_val: int
    n_test: int
    seed: int

    @property
    def timesteps(self):
        return self.spikes.shape[1]

    @property
    def shape(self):
        return self.spikes.shape[2:]

    def split(self, name):
        bounds = {"train": (0, self.n_train),
                  "val": (self.n_train, self.n_train + self.n_val),
                  "test": (self.n_train + self.n_val,
                           self.n_train + self.n_val + self.n_test)}
        if name not in bounds:
            raise ValueError(f"unknown split {name!r}")
        lo, hi = bounds[name]
        return self.spikes[lo:hi], self.labels[lo:hi]

    def save(self, path):
        n, t, c, h, w = self.spikes.shape
        packed = np.packbits(self.spikes.reshape(-1))
        meta = {"samples": n, "timesteps": t, "channels": c, "height": h,
                "width": w, "classes": self.classes, "n_train": self.n_train,
                "n_val": self.n_val, "n_test": self.n_test, "seed": self.seed}
        container.write_container(path, DATASET_MAGIC, DATASET_VERSION, meta,
                                  {"spikes": packed, "labels": self.labels})

    @classmethod
    def load(cls, path):
        _, meta, arrays = container.read_container(path, DATASET_MAGIC,
                                                   DATASET_VERSION)
        shape = (meta["samples"], meta["timesteps"], meta["channels"],
                 meta["height"], meta["width"])
        count = int(np.prod(shape))
        spikes = np.unpackbits(arrays["spikes"], count=count).reshape(shape)
        ds = cls(spikes=spikes.astype(np.uint8),
                 labels=arrays["labels"].astype(np.int64),
                 classes=meta["classes"], n_train=meta["n_train"],
                 n_val=meta["n_val"], n_test=meta["n_test"], seed=meta["seed"])
        return ds


def _stripe_mask(label, classes, height, width, phase, dx, dy):
    theta = np.pi * label / classes
    ii, jj = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    proj = np.cos(theta) * (ii + dy) + np.sin(theta) * (jj + dx)
    return ((np.floor(proj) + phase) % STRIPE_PERIOD) < STRIPE_THICKNESS


def generate_spike_dataset(classes=4, samples=2500, timesteps=10, channels=2,
                           height=16, width=16, seed=0, rate=0.45, noise=0.06,
                           jitter=2, presence=0.8,
                           split=(0.8, 0.1, 0.1)):
    """Build a class-balanced dataset with an 80/10/10 split by default."""
    if channels < 1 or channels > 2:
        raise ValueError("datasets carry one or two event channels")
    if height < STRIPE_PERIOD or width < STRIPE_PERIOD:
        raise ValueError(f"spatial extent must be at least {STRIPE_PERIOD}")
    rng = np.random.default_rng(seed)
    labels = np.arange(samples, dtype=np.int64) % classes
    labels = labels[rng.permutation(samples)]

    spikes = np.zeros((samples, timesteps, channels, height, width), dtype=np.uint8)
    for n in range(samples):
        phase = int(rng.integers(0, STRIPE_PERIOD))
        dx = int(rng.integers(-jitter, jitter + 1))
        dy = int(rng.integers(-jitter, jitter + 1))
        mask_on = _stripe_mask(labels[n], classes, height, width, phase, dx, dy)
        active = rng.random(timesteps) < presence
        p = rate * mask_on[None] * active[:, None, None] + noise
        spikes[n, :, 0] = rng.random((timesteps, height, width)) < p
        if channels == 2:
            mask_off = _stripe_mask(labels[n], classes, height, width,
                                    phase + STRIPE_PERIOD // 2, dx, dy)
            p2 = 0.5 * rate * mask_off[None] * active[:, None, None] + noise
            spikes[n, :, 1] = rng.random((timesteps, height, width)) < p2

    n_train = int(round(samples * split[0]))
    n_val = int(round(samples * split[1]))
    n_test = samples - n_train - n_val
    return SpikeDataset(spikes=spikes, labels=labels, classes=classes,
                        n_train=n_train, n_val=n_val, n_test=n_test, seed=seed)


def batch_indices(n, batch_size, rng=None):
    """Deterministic batch order; shuffled when a generator is given."""
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
