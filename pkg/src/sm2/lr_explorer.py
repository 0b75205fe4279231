"""Cyclical learning-rate exploration and stable-LR selection.

During an exploratory epoch, batch ``i`` is trained at grid learning rate
``i mod K``. Each grid rate advances its own copy of the model (all copies
start from the same state), so a rate that diverges cannot contaminate the
losses recorded for the others. Per-rate mean losses are then differenced
twice over the grid index, and a sliding window over that curvature picks the
largest learning rate still sitting in a calm stretch of the loss curve.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .core import ConfigError
from .trainer import DivergenceError, Trainer

INF = math.inf


class Spacing(str, Enum):
    LOG = "Log"
    LINEAR = "Linear"


@dataclass(frozen=True)
class LrGrid:
    lr_min: float = 0.001
    lr_max: float = 1.0
    count: int = 20
    spacing: Spacing = Spacing.LOG

    def __post_init__(self):
        if not 0 < self.lr_min < self.lr_max:
            raise ConfigError("need 0 < lr_min < lr_max")
        if self.count < 4:
            raise ConfigError("the LR grid needs at least 4 points")

    @property
    def values(self) -> np.ndarray:
        if Spacing(self.spacing) is Spacing.LOG:
            v = np.geomspace(self.lr_min, self.lr_max, self.count)
        else:
            v = np.linspace(self.lr_min, self.lr_max, self.count)
        v[0], v[-1] = self.lr_min, self.lr_max
        return v

    def contains(self, lr: float) -> bool:
        return self.lr_min * (1 - 1e-12) <= lr <= self.lr_max * (1 + 1e-12)


@dataclass
class CurvatureAnalysis:
    lrs: list
    mean_loss_per_lr: list
    curvature: list
    window_size: int
    window_scores: list
    threshold: Optional[float]
    selected_window: Optional[tuple]  # (start, stop) over curvature indices
    selected_lr: float
    fallback: bool = False
    diverged: list = field(default_factory=list)


def cyclical_losses(trainer: Trainer, batches: Sequence[tuple], grid: LrGrid,
                    divergence_factor: float = 4.0, branches_out: Optional[list] = None) -> list:
    """Mean pre-step loss per grid learning rate, in grid order.

    A rate is marked divergent (``inf``) once its loss turns non-finite or
    exceeds ``divergence_factor`` times the reference loss, the median of the
    first ``K`` losses (every branch's first batch is seen from the same
    starting state, so these are untouched samples); that branch stops. The trainer is left on whatever branch ran
    last, so callers restore their own snapshot afterwards. When
    ``branches_out`` is a list it receives each rate's final snapshot.
    """
    k = grid.count
    batches = list(batches)
    if len(batches) < k:
        raise ConfigError(
            f"exploration produced {len(batches)} batches but the LR grid has {k} points; "
            "raise the exploration fraction, use more data, or shrink the grid")
    lrs = grid.values
    start = trainer.snapshot()
    states = [start] * k
    reference = None
    losses = [[] for _ in range(k)]
    dead = [False] * k
    for i, batch in enumerate(batches):
        j = i % k
        if i == k:
            finite = [g[0] for g in losses if math.isfinite(g[0])]
            reference = statistics.median(finite) if finite else None
        if dead[j]:
            continue
        trainer.restore(states[j])
        try:
            loss = trainer.train_batches([batch], [float(lrs[j])])[0]
        except DivergenceError:
            loss = INF
        if not math.isfinite(loss) or (reference and loss > divergence_factor * reference):
            loss = INF
            dead[j] = True
        losses[j].append(loss)
        states[j] = trainer.snapshot()
    if branches_out is not None:
        branches_out[:] = states
    return [INF if any(v == INF for v in group) else math.fsum(group) / len(group) for group in losses]


def loss_curvature(mean_loss_per_lr: Sequence[float]) -> list:
    """Central second difference over grid index; any infinite operand gives inf."""
    L = list(mean_loss_per_lr)
    if len(L) < 3:
        raise ValueError("curvature needs at least 3 losses")
    out = []
    for j in range(1, len(L) - 1):
        a, b, c = L[j - 1], L[j], L[j + 1]
        if not (math.isfinite(a) and math.isfinite(b) and math.isfinite(c)):
            out.append(INF)
        else:
            out.append(c - 2.0 * b + a)
    return out


def window_scores(curvature: Sequence[float], window: int) -> list:
    scores = []
    for s in range(len(curvature) - window + 1):
        chunk = curvature[s:s + window]
        if any(not math.isfinite(c) for c in chunk):
            scores.append(INF)
        else:
            scores.append(math.fsum(abs(c) for c in chunk) / window)
    return scores


def select_stable_lr(mean_loss_per_lr: Sequence[float], grid: LrGrid, window: int = 5) -> CurvatureAnalysis:
    """Pick the calm curvature window with the largest mean LR.

    Window ``[s, s + w)`` over curvature indices covers the curvature centred
    on grid points ``s + 1 .. s + w``; the selected LR is the largest of those.
    Calm means a mean absolute curvature at or below the median over all
    finite windows. With no finite window, fall back to ``lr_min``.
    """
    lrs = [float(v) for v in grid.values]
    k = len(lrs)
    if len(mean_loss_per_lr) != k:
        raise ValueError(f"expected {k} losses, got {len(mean_loss_per_lr)}")
    if k - 2 < window:
        raise ConfigError(f"window size {window} needs at least {window + 2} grid points")
    curv = loss_curvature(mean_loss_per_lr)
    scores = window_scores(curv, window)
    finite = [s for s in scores if math.isfinite(s)]
    diverged = [i for i, v in enumerate(mean_loss_per_lr) if not math.isfinite(v)]
    if not finite:
        return CurvatureAnalysis(lrs, list(mean_loss_per_lr), curv, window, scores, None, None,
                                 grid.lr_min, fallback=True, diverged=diverged)
    tau = statistics.median(finite)
    best = None
    best_mean = -INF
    for s, score in enumerate(scores):
        if score <= tau:
            mean_lr = math.fsum(lrs[s + 1:s + window + 1]) / window
            if mean_lr > best_mean:  # strict: ties keep the lower index
                best, best_mean = s, mean_lr
    return CurvatureAnalysis(lrs, list(mean_loss_per_lr), curv, window, scores, tau,
                             (best, best + window), lrs[best + window], diverged=diverged)
