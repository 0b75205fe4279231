"""Energy accounting and the simulated GPU power backend.

The monitor contract mirrors a polling power tracker: ``start_epoch`` opens a
measurement, ``sample`` takes one instantaneous reading in watts, and
``end_epoch`` closes it and returns the per-epoch energy record. Time is
simulated: the monitor is told how much work was done through ``observe`` and
derives the epoch duration from the throughput model, so runs are reproducible
and fast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, runtime_checkable

import numpy as np

from .core import EpochEnergyRecord, Mode, SM2Error


class MeasurementError(SM2Error):
    pass


def energy_per_epoch(power_samples: Sequence[float], duration_s: float) -> float:
    """Energy in watt-hours: mean sampled power times epoch duration in hours."""
    n = len(power_samples)
    if n == 0:
        raise MeasurementError("no power samples recorded for the epoch")
    if not duration_s > 0:
        raise ValueError(f"epoch duration must be positive, got {duration_s}")
    return math.fsum(power_samples) / n * duration_s / 3600.0


@dataclass(frozen=True)
class SimPowerModel:
    p_idle: float = 60.0
    p_max: float = 300.0
    gamma: float = 1.4
    b_sat: float = 512.0
    s_max: float = 20000.0
    kappa: float = 0.35
    noise_seed: int = 0
    noise_rel: float = 0.01

    def __post_init__(self):
        if not 0 < self.p_idle < self.p_max:
            raise ValueError("need 0 < p_idle < p_max")
        if not 0 <= self.kappa < 1:
            raise ValueError("kappa must lie in [0, 1)")
        if self.b_sat <= 0 or self.s_max <= 0 or self.gamma <= 0:
            raise ValueError("b_sat, s_max and gamma must be positive")
        if not 0 <= self.noise_rel < 1:
            raise ValueError("noise_rel must lie in [0, 1)")

    def utilization(self, batch_size: int) -> float:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        return min(1.0, batch_size / self.b_sat)

    def power(self, batch_size: int) -> float:
        """Noiseless instantaneous power draw at this batch size."""
        u = self.utilization(batch_size)
        return self.p_idle + (self.p_max - self.p_idle) * u ** self.gamma

    def throughput(self, batch_size: int) -> float:
        u = self.utilization(batch_size)
        return self.s_max * u * (1.0 - self.kappa * u)

    def duration(self, batch_size: int, n_samples: int) -> float:
        return n_samples / self.throughput(batch_size)


class JitterStream:
    """Deterministic multiplicative jitter in [1 - rel, 1 + rel].

    Backed by the counter-based Philox generator, so the k-th draw depends only
    on (seed, k) and is identical across platforms.
    """

    def __init__(self, seed: int, rel: float):
        self.seed = seed
        self.rel = rel
        self.counter = 0
        self._gen = np.random.Generator(np.random.Philox(key=seed))

    def next(self) -> float:
        self.counter += 1
        if self.rel == 0:
            return 1.0
        return 1.0 + self.rel * (2.0 * self._gen.random() - 1.0)

    def state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}


def sim_power(model: SimPowerModel, batch_size: int, jitter: Optional[JitterStream] = None) -> float:
    p = model.power(batch_size)
    if jitter is None:
        return p
    return p * jitter.next()


def sim_epoch_energy(model: SimPowerModel, batch_size: int, n_samples: int) -> tuple:
    """Noiseless (duration_s, energy_wh) for one epoch of ``n_samples`` samples."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    duration = model.duration(batch_size, n_samples)
    return duration, model.power(batch_size) * duration / 3600.0


@runtime_checkable
class PowerMonitor(Protocol):
    poll_interval_s: float

    def start_epoch(self, config_id: int, epoch_index: int, *, round: int, mode: Mode,
                    batch_size: int) -> None: ...

    def observe(self, n_samples: int) -> None: ...

    def sample(self) -> float: ...

    def end_epoch(self) -> EpochEnergyRecord: ...

    @property
    def elapsed_s(self) -> float: ...


class SimulatedMonitor:
    """Simulated-time power monitor driven by a :class:`SimPowerModel`.

    Samples are taken every ``poll_interval_s`` of simulated time; at least one
    sample is always taken per epoch.
    """

    def __init__(self, model: SimPowerModel = SimPowerModel(), poll_interval_s: float = 0.1):
        if poll_interval_s <= 0:
            raise ValueError("poll_interval_s must be positive")
        self.model = model
        self.poll_interval_s = poll_interval_s
        self.jitter = JitterStream(model.noise_seed, model.noise_rel)
        self._open = None
        self._elapsed = 0.0

    @property
    def elapsed_s(self) -> float:
        """Simulated seconds spent in closed epochs so far."""
        return self._elapsed

    def start_epoch(self, config_id, epoch_index, *, round, mode, batch_size):
        if self._open is not None:
            raise MeasurementError("an epoch is already being measured; execution is sequential")
        self._open = {"config_id": config_id, "epoch_index": epoch_index, "round": round,
                      "mode": Mode(mode), "batch_size": batch_size, "n_samples": 0, "samples": []}

    def observe(self, n_samples: int) -> None:
        if self._open is None:
            raise MeasurementError("observe() outside of an epoch")
        self._open["n_samples"] += int(n_samples)
        # poll every time simulated time crosses another interval
        due = self._due_samples()
        while len(self._open["samples"]) < due:
            self.sample()

    def _due_samples(self) -> int:
        n = self._open["n_samples"]
        if n == 0:
            return 0
        duration = self.model.duration(self._open["batch_size"], n)
        return max(1, math.ceil(duration / self.poll_interval_s - 1e-9))

    def sample(self) -> float:
        if self._open is None:
            raise MeasurementError("sample() outside of an epoch")
        watts = sim_power(self.model, self._open["batch_size"], self.jitter)
        self._open["samples"].append(watts)
        return watts

    def end_epoch(self) -> EpochEnergyRecord:
        rec = self._open
        if rec is None:
            raise MeasurementError("end_epoch() without start_epoch()")
        if rec["n_samples"] == 0:
            self._open = None
            raise MeasurementError(f"config {rec['config_id']} processed no samples this epoch")
        if not rec["samples"]:
            self.sample()
        duration = self.model.duration(rec["batch_size"], rec["n_samples"])
        self._open = None
        self._elapsed += duration
        return EpochEnergyRecord(
            config_id=rec["config_id"], round=rec["round"], epoch_index=rec["epoch_index"],
            mode=rec["mode"], power_samples=list(rec["samples"]), duration_s=duration,
            energy_wh=energy_per_epoch(rec["samples"], duration),
        )
