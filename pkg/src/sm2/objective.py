"""Attribute normalization, the weighted objective, and the halving rule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .core import Polarity


@dataclass(frozen=True)
class ObjectiveWeights:
    alpha: float = 0.75
    beta: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class RawAttributes:
    config_id: int
    performance: float
    polarity: Polarity
    energy_wh: float
    selected_lr: float
    placeholder: bool = False


@dataclass(frozen=True)
class AttributeVector:
    config_id: int
    P: float
    E: float
    LR: float


def _rescale(values: Sequence[float], invert: bool = False) -> list:
    lo, hi = min(values), max(values)
    if hi == lo:
        # non-discriminating attribute: nobody is penalized
        return [1.0] * len(values)
    if invert:
        return [(hi - v) / (hi - lo) for v in values]
    return [(v - lo) / (hi - lo) for v in values]


def normalize_attributes(raw: Sequence[RawAttributes]) -> list:
    """Min-max rescale each attribute over the given configs, oriented so 1 is best."""
    if not raw:
        raise ValueError("nothing to normalize")
    if len(raw) == 1:
        return [AttributeVector(raw[0].config_id, 1.0, 1.0, 1.0)]
    polarities = {r.polarity for r in raw}
    if len(polarities) != 1:
        raise ValueError("all configs must report the same metric polarity")
    lower_better = polarities.pop() is Polarity.LOWER_IS_BETTER
    p = _rescale([r.performance for r in raw], invert=lower_better)
    e = _rescale([r.energy_wh for r in raw], invert=True)
    lr = _rescale([r.selected_lr for r in raw])
    return [AttributeVector(r.config_id, pi, ei, li) for r, pi, ei, li in zip(raw, p, e, lr)]


def objective_score(attrs: AttributeVector, w: ObjectiveWeights) -> float:
    return w.alpha * attrs.P + (1.0 - w.alpha) * (w.beta * attrs.E + (1.0 - w.beta) * attrs.LR)


def rank(scored: Sequence[tuple]) -> list:
    """Order (config_id, score, E) entries best-first.

    Ties on score go to the more efficient config (higher E), then to the
    lower config id.
    """
    return [cid for cid, _, _ in sorted(scored, key=lambda t: (-t[1], -t[2], t[0]))]


def halve(scored: Sequence[tuple], active_count: int = None) -> list:
    """Config ids to drop: the ``floor(n / 2)`` lowest-ranked of ``(config_id, score, E)``."""
    n = len(scored) if active_count is None else active_count
    if n != len(scored):
        raise ValueError(f"active_count {n} does not match {len(scored)} scored configs")
    if n < 2:
        raise ValueError("halving needs at least two active configs")
    order = rank(scored)
    return order[n - n // 2:]
