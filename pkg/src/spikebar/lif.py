"""Leaky integrate-and-fire dynamics in real and integer-only arithmetic.

Both domains share the same update rule: the membrane integrates the drive on
top of the leaked potential, fires when it reaches the threshold (the
comparator is ``u >= v_th``), and the reset amount computed from the
post-update potential is subtracted at the *next* step. The integer domain is
the deployment semantics of the digital neuron: leak is an arithmetic right
shift and the potential saturates at the signed 12-bit bounds after every
step; one step corresponds to one hardware clock cycle.
"""

import csv
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .quant import STATE_BITS, LeakCode

INT_U_MIN = -(2 ** (STATE_BITS - 1))        # -2048
INT_U_MAX = 2 ** (STATE_BITS - 1) - 1       # 2047


@dataclass(frozen=True)
class LifParams:
    v_th: float
    leak: Union[float, LeakCode] = 1.0
    reset: str = "soft"
    # Hard reset subtracts the leaked potential (formula form). Setting this
    # subtracts the unleaked potential instead; the two coincide for leak=1.
    hard_reset_unscaled: bool = False

    def __post_init__(self):
        if self.v_th <= 0:
            raise ValueError(f"threshold must be positive, got {self.v_th}")
        if self.reset not in ("hard", "soft"):
            raise ValueError(f"reset must be 'hard' or 'soft', got {self.reset!r}")
        lam = self.leak_value
        if not 0.0 < lam <= 1.0:
            raise ValueError(f"leak must lie in (0, 1], got {lam}")

    @property
    def leak_value(self):
        return self.leak.value if isinstance(self.leak, LeakCode) else float(self.leak)

    @property
    def leak_shift(self):
        if not isinstance(self.leak, LeakCode):
            raise TypeError("integer dynamics need a LeakCode leak")
        return self.leak.n


@dataclass
class LifState:
    """Membrane potential plus the pending reset from the previous step."""
    u: np.ndarray
    r: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape, dtype=np.float64):
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))


def _reset_amount(u_new, spikes, params, leaked):
    if params.reset == "soft":
        return params.v_th * spikes
    if params.hard_reset_unscaled:
        return u_new * spikes
    return leaked(u_new) * spikes


def lif_step(state, params, drive):
    """One real-valued step; returns (spikes, new_state)."""
    drive = np.asarray(drive, dtype=np.float64)
    if drive.shape != state.u.shape:
        raise ValueError(f"drive shape {drive.shape} != state shape {state.u.shape}")
    lam = params.leak_value
    u_new = lam * state.u + drive - state.r
    spikes = (u_new >= params.v_th).astype(np.int64)
    r_new = _reset_amount(u_new, spikes, params, lambda u: lam * u)
    return spikes, LifState(u_new, r_new.astype(np.float64), state.t + 1)


def lif_step_int(state, params, drive):
    """One integer-only step (12-bit saturating state, shift leak)."""
    drive = np.asarray(drive, dtype=np.int64)
    if drive.shape != state.u.shape:
        raise ValueError(f"drive shape {drive.shape} != state shape {state.u.shape}")
    n = params.leak_shift
    v_th = int(params.v_th)
    u_new = (state.u >> n) + drive - state.r
    u_new = np.clip(u_new, INT_U_MIN, INT_U_MAX)
    spikes = (u_new >= v_th).astype(np.int64)
    r_new = _reset_amount(u_new, spikes, params, lambda u: u >> n)
    return spikes, LifState(u_new, r_new.astype(np.int64), state.t + 1)


@dataclass
class TraceRecord:
    t: int
    drive: int
    u_mem: int
    spike: int


def trace(params, drives):
    """Replay the integer neuron over a drive sequence, one record per step."""
    records = []
    state = LifState.zeros((), dtype=np.int64)
    for t, d in enumerate(drives):
        spikes, state = lif_step_int(state, params, np.asarray(int(d)))
        records.append(TraceRecord(t, int(d), int(state.u), int(spikes)))
    return records


def write_trace_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "umem", "spike"])
        for rec in records:
            writer.writerow([rec.t, rec.u_mem, rec.spike])
