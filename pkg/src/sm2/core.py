"""Shared domain types and the append-only run ledger."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timedelta, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence, Union


class SM2Error(Exception):
    """Base class for every error raised by this package."""


class ConfigError(SM2Error):
    pass


class OrderingError(SM2Error):
    """An event would precede an already-recorded event of the same config."""


class LedgerError(SM2Error):
    pass


class Status(str, Enum):
    ACTIVE = "Active"
    DROPPED = "Dropped"
    FINAL = "Final"


class Mode(str, Enum):
    EXPLORATORY = "Exploratory"
    THOROUGH = "Thorough"


class Polarity(str, Enum):
    HIGHER_IS_BETTER = "HigherIsBetter"
    LOWER_IS_BETTER = "LowerIsBetter"


@dataclass
class HyperConfig:
    config_id: int
    batch_size: int
    current_lr: float
    status: Status = Status.ACTIVE
    dropped_in_round: Optional[int] = None
    diverged: bool = False

    def drop(self, round_index: int) -> None:
        if self.status is not Status.ACTIVE:
            raise LedgerError(f"config {self.config_id} is {self.status.value}, cannot drop")
        self.status = Status.DROPPED
        self.dropped_in_round = round_index

    def finalize(self) -> None:
        if self.status is not Status.ACTIVE:
            raise LedgerError(f"config {self.config_id} is {self.status.value}, cannot finalize")
        self.status = Status.FINAL


@dataclass(frozen=True)
class RunBudget:
    max_rounds: int = 5
    exploratory_epochs_per_round: int = 1
    thorough_epochs_per_round: int = 5
    final_thorough_epochs: int = 10
    exploration_fraction: float = 0.25
    total_epoch_cap: int = 1000

    def __post_init__(self):
        if not 0.0 < self.exploration_fraction <= 1.0:
            raise ConfigError(f"exploration_fraction must be in (0, 1], got {self.exploration_fraction}")
        for name in ("max_rounds", "exploratory_epochs_per_round", "thorough_epochs_per_round",
                     "final_thorough_epochs", "total_epoch_cap"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


# ---------------------------------------------------------------------------
# Ledger events
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunStarted:
    fingerprint: str
    seed: int
    label: str
    configs: list  # [{"config_id", "batch_size", "initial_lr"}]
    settings: dict
    timestamp: str = ""
    type: str = field(default="RunStarted", init=False)


@dataclass(frozen=True)
class EpochEnergyRecord:
    config_id: int
    round: int
    epoch_index: int
    mode: Mode
    power_samples: list
    duration_s: float
    energy_wh: float
    timestamp: str = ""
    type: str = field(default="EpochEnergyRecord", init=False)

    def __post_init__(self):
        if len(self.power_samples) < 1:
            raise LedgerError("an epoch energy record needs at least one power sample")
        if self.duration_s <= 0 or any(p <= 0 for p in self.power_samples):
            raise LedgerError("power samples and duration must be positive")


@dataclass(frozen=True)
class EpochMetricsRecord:
    config_id: int
    round: int
    epoch_index: int
    mode: Mode
    performance: float
    metric_polarity: Polarity
    selected_lr: float
    loss_trace: list = field(default_factory=list)  # [(lr, mean_loss or None for divergence)]
    timestamp: str = ""
    type: str = field(default="EpochMetricsRecord", init=False)

    def __post_init__(self):
        if not math.isfinite(self.performance):
            raise LedgerError("performance must be finite")
        if self.mode is Mode.THOROUGH and self.loss_trace:
            raise LedgerError("thorough epochs carry no exploration loss trace")


@dataclass(frozen=True)
class ExplorationTrace:
    config_id: int
    round: int
    epoch_index: int
    lrs: list
    mean_losses: list  # None marks a diverged candidate
    curvature: list  # None marks infinite curvature
    window_size: int
    selected_window: list  # [start, stop) over curvature indices, or [] on fallback
    selected_lr: float
    fallback: bool
    timestamp: str = ""
    type: str = field(default="ExplorationTrace", init=False)


@dataclass(frozen=True)
class HalvingDecision:
    round: int
    weights: dict
    entries: list  # per config: raw + normalized attributes, score, placeholder flag
    ranking: list  # config ids best-first after tie-breaks
    dropped: list
    survivors: list
    timestamp: str = ""
    type: str = field(default="HalvingDecision", init=False)


@dataclass(frozen=True)
class FinalSelection:
    config_id: int
    batch_size: int
    total_epochs: int
    energy_wh: float
    final_lr: float
    performance: float
    metric_polarity: Polarity
    model_digest: str
    truncated: bool
    rounds: int
    timestamp: str = ""
    type: str = field(default="FinalSelection", init=False)


LedgerEvent = Union[RunStarted, EpochEnergyRecord, EpochMetricsRecord, ExplorationTrace,
                    HalvingDecision, FinalSelection]

EVENT_TYPES = {cls.__name__: cls for cls in (RunStarted, EpochEnergyRecord, EpochMetricsRecord,
                                             ExplorationTrace, HalvingDecision, FinalSelection)}

_ENUM_FIELDS = {"mode": Mode, "metric_polarity": Polarity}


def _encode(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    if isinstance(value, dict):
        return {k: _encode(v) for k, v in value.items()}
    return value


def event_to_dict(event: LedgerEvent) -> dict:
    out = {"type": event.type, "timestamp": event.timestamp}
    for f in fields(event):
        if f.name in ("type", "timestamp"):
            continue
        out[f.name] = _encode(getattr(event, f.name))
    return out


def event_from_dict(data: dict) -> LedgerEvent:
    data = dict(data)
    cls = EVENT_TYPES.get(data.pop("type", None))
    if cls is None:
        raise LedgerError(f"unknown ledger event type in {data!r}")
    kwargs = {}
    for f in fields(cls):
        if f.name == "type" or f.name not in data:
            continue
        value = data[f.name]
        if f.name in _ENUM_FIELDS:
            value = _ENUM_FIELDS[f.name](value)
        elif f.name == "loss_trace":
            value = [[lr, loss] for lr, loss in value]
        kwargs[f.name] = value
    return cls(**kwargs)


def iso_timestamp(origin: datetime, seconds: float) -> str:
    return (origin + timedelta(seconds=seconds)).isoformat(timespec="microseconds")


DEFAULT_CLOCK_ORIGIN = datetime(2024, 1, 1, tzinfo=timezone.utc)


class RunLedger:
    """Append-only event log, optionally mirrored line-by-line to a JSON-lines file.

    Events are validated at append time: per-config ordering of (round, epoch),
    and lifecycle rules (a config can be dropped exactly once, and only an
    undropped config can be selected as final).
    """

    def __init__(self, path: Optional[Path] = None):
        self._events: list = []
        self._last_position: dict = {}
        self._dropped: dict = {}
        self._final: Optional[int] = None
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def __len__(self) -> int:
        return len(self._events)

    def __iter__(self) -> Iterator[LedgerEvent]:
        return iter(self._events)

    def __getitem__(self, index):
        return self._events[index]

    @property
    def events(self) -> tuple:
        return tuple(self._events)

    def of_type(self, cls) -> list:
        return [e for e in self._events if isinstance(e, cls)]

    def append(self, event: LedgerEvent) -> "RunLedger":
        self._check(event)
        self._events.append(event)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(event_to_dict(event), sort_keys=False) + "\n")
                fh.flush()
        return self

    def _check(self, event: LedgerEvent) -> None:
        if isinstance(event, (EpochEnergyRecord, EpochMetricsRecord, ExplorationTrace)):
            key = (event.round, event.epoch_index)
            last = self._last_position.get((event.type, event.config_id))
            if last is not None and key < last:
                raise OrderingError(
                    f"{event.type} for config {event.config_id} at (round={event.round}, "
                    f"epoch={event.epoch_index}) precedes recorded {last}")
            if event.config_id in self._dropped and event.round > self._dropped[event.config_id]:
                raise LedgerError(f"config {event.config_id} was dropped in round "
                                  f"{self._dropped[event.config_id]}")
            self._last_position[(event.type, event.config_id)] = key
        elif isinstance(event, HalvingDecision):
            for cid in event.dropped:
                if cid in self._dropped:
                    raise LedgerError(f"config {cid} already dropped in round {self._dropped[cid]}")
                self._dropped[cid] = event.round
        elif isinstance(event, FinalSelection):
            if event.config_id in self._dropped:
                raise LedgerError(f"dropped config {event.config_id} cannot be final")
            if self._final is not None:
                raise LedgerError("ledger already holds a final selection")
            self._final = event.config_id

    @classmethod
    def read(cls, path: Path) -> "RunLedger":
        ledger = cls()
        with Path(path).open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    ledger.append(event_from_dict(json.loads(line)))
                except (json.JSONDecodeError, TypeError) as exc:
                    raise LedgerError(f"{path}:{lineno}: {exc}") from exc
        return ledger


def ledger_append(ledger: RunLedger, event: LedgerEvent) -> RunLedger:
    return ledger.append(event)


def ledger_total_energy(ledger: Union[RunLedger, Sequence[LedgerEvent]]) -> float:
    """Sum of energy over every epoch record, exploratory epochs included."""
    return math.fsum(e.energy_wh for e in ledger if isinstance(e, EpochEnergyRecord))


def as_plain(obj: Any) -> Any:
    """Dataclass/enum tree to JSON-ready builtins."""
    if hasattr(obj, "__dataclass_fields__"):
        return _encode(asdict(obj))
    return _encode(obj)
