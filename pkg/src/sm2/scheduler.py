"""The successive-halving loop with exploratory and thorough phases.

Each round first runs one isolated exploratory epoch per active config on the
exploration partition (cyclical LR test, held-out evaluation, energy
measurement; model state restored afterwards), scores the configs, drops the
worse half, then gives the survivors their thorough epochs on the full
training split. Once a single config remains it keeps re-exploring its
learning rate each round and trains for the extended epoch count until a stop
condition fires.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .core import (DEFAULT_CLOCK_ORIGIN, ConfigError, EpochEnergyRecord, EpochMetricsRecord, ExplorationTrace,
                   FinalSelection, HalvingDecision, HyperConfig, Mode, Polarity, RunBudget,
                   RunLedger, RunStarted, SM2Error, Status, as_plain, iso_timestamp,
                   ledger_total_energy)
from .dataio import Dataset, MicroBatchStore, build_store, count_batches, iter_batches
from .energy import PowerMonitor
from .lr_explorer import CurvatureAnalysis, LrGrid, cyclical_losses, select_stable_lr
from .objective import (ObjectiveWeights, RawAttributes, halve, normalize_attributes,
                        objective_score, rank)
from .trainer import DivergenceError, Trainer

log = logging.getLogger(__name__)


class RunAbort(SM2Error):
    exit_code = 3


class AllDivergedAbort(RunAbort):
    exit_code = 3


class FinalDivergedAbort(RunAbort):
    exit_code = 4


@dataclass(frozen=True)
class StopCondition:
    max_rounds: Optional[int] = None
    epoch_cap: Optional[int] = None
    plateau: bool = True
    plateau_patience: int = 2
    plateau_min_delta: float = 1e-4

    def __post_init__(self):
        if self.max_rounds is None and self.epoch_cap is None and not self.plateau:
            raise ValueError("at least one stop condition must be armed")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")

    @classmethod
    def default_for(cls, n_configs: int, **kw) -> "StopCondition":
        return cls(max_rounds=math.ceil(math.log2(max(n_configs, 1))) + 2, **kw)


@dataclass
class RunHistory:
    rounds_completed: int = 0
    max_epochs: int = 0
    final_performance: list = field(default_factory=list)  # higher-is-better, one per round


def should_stop(history: RunHistory, condition: StopCondition) -> bool:
    if condition.max_rounds is not None and history.rounds_completed >= condition.max_rounds:
        return True
    if condition.epoch_cap is not None and history.max_epochs >= condition.epoch_cap:
        return True
    if condition.plateau:
        perf = history.final_performance
        stale = 0
        for i in range(1, len(perf)):
            if perf[i] - max(perf[:i]) < condition.plateau_min_delta:
                stale += 1
            else:
                stale = 0
        return stale >= condition.plateau_patience
    return False


@dataclass(frozen=True)
class Settings:
    budget: RunBudget = RunBudget()
    weights: ObjectiveWeights = ObjectiveWeights()
    grid: LrGrid = LrGrid()
    window: int = 5
    divergence_factor: float = 4.0
    stop: Optional[StopCondition] = None
    store_capacity: Optional[int] = None
    reshuffle_each_epoch: bool = False
    seed: int = 0


@dataclass
class RoundPlan:
    round: int
    active: list
    exploratory_epochs: int
    thorough_epochs: int
    modes: tuple = (Mode.EXPLORATORY, Mode.THOROUGH)


@dataclass
class ExplorationResult:
    config_id: int
    analysis: CurvatureAnalysis
    performance: Optional[float]
    polarity: Polarity
    energy: EpochEnergyRecord
    metrics: Optional[EpochMetricsRecord]


@dataclass
class RunResult:
    final_config_id: int
    final_snapshot: bytes
    total_energy_wh: float
    truncated: bool
    round_energy_wh: list
    configs: list
    history: RunHistory


def _oriented(perf: float, polarity: Polarity) -> float:
    return perf if polarity is Polarity.HIGHER_IS_BETTER else -perf


def _observed(batches, monitor: PowerMonitor):
    for x, y in batches:
        monitor.observe(len(x))
        yield x, y


class Engine:
    """One run of the halving loop over a fixed dataset and set of trainers."""

    def __init__(self, configs: Sequence[HyperConfig], trainers: Mapping[int, Trainer],
                 monitor: PowerMonitor, ledger: RunLedger, dataset: Dataset, settings: Settings,
                 out_dir: Optional[Path] = None, clock_origin=DEFAULT_CLOCK_ORIGIN):
        if not configs:
            raise ValueError("need at least one configuration")
        self.configs = list(configs)
        self.by_id = {c.config_id: c for c in self.configs}
        if len(self.by_id) != len(self.configs):
            raise ValueError("config ids must be unique")
        self.trainers = dict(trainers)
        self.monitor = monitor
        self.ledger = ledger
        self.dataset = dataset
        self.settings = settings
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.clock_origin = clock_origin
        self.store = build_store(dataset, [c.batch_size for c in self.configs], settings.store_capacity)
        self.epochs = {c.config_id: 0 for c in self.configs}
        self.history = RunHistory()
        self.round_energy: list = []
        self.holdout = dataset.holdout()
        self._last_perf: dict = {}

    # -- plumbing -------------------------------------------------------------
    def _stamp(self, event):
        return dataclasses.replace(event, timestamp=iso_timestamp(self.clock_origin, self.monitor.elapsed_s))

    def _append(self, event):
        event = self._stamp(event)
        self.ledger.append(event)
        if isinstance(event, EpochEnergyRecord):
            while len(self.round_energy) <= event.round:
                self.round_energy.append(0.0)
            self.round_energy[event.round] += event.energy_wh
        return event

    def _thorough_store(self, round_index: int, local_epoch: int) -> MicroBatchStore:
        if not self.settings.reshuffle_each_epoch:
            return self.store
        rng = np.random.default_rng([self.settings.seed, round_index, local_epoch])
        order = self.dataset.train_idx[rng.permutation(len(self.dataset.train_idx))]
        return build_store(self.dataset, self.store.candidates, self.settings.store_capacity, order)

    def check_partition(self) -> None:
        frac = self.settings.budget.exploration_fraction
        for c in self.configs:
            n = count_batches(self.store, c.batch_size, frac)
            if n < self.settings.grid.count:
                raise ConfigError(
                    f"batch size {c.batch_size} yields {n} exploration batches but the LR grid has "
                    f"{self.settings.grid.count} points; use more data, a larger "
                    "exploration_fraction or a smaller grid")

    # -- phases ---------------------------------------------------------------
    def run_exploratory(self, config: HyperConfig, round_index: int) -> ExplorationResult:
        trainer = self.trainers[config.config_id]
        s = self.settings
        epoch = self.epochs[config.config_id]
        before = trainer.snapshot()
        self.monitor.start_epoch(config.config_id, epoch, round=round_index, mode=Mode.EXPLORATORY,
                                 batch_size=config.batch_size)
        batches = _observed(iter_batches(self.store, config.batch_size, s.budget.exploration_fraction),
                            self.monitor)
        branches: list = []
        means = cyclical_losses(trainer, batches, s.grid, s.divergence_factor, branches)
        analysis = select_stable_lr(means, s.grid, s.window)
        performance, polarity = None, None
        if not analysis.fallback:
            trainer.restore(branches[analysis.selected_window[1]])
            performance, polarity = trainer.evaluate(*self.holdout)
            if not math.isfinite(performance):
                performance = None
        else:
            trainer.restore(before)
            _, polarity = trainer.evaluate(*self.holdout)
        trainer.restore(before)
        config.current_lr = analysis.selected_lr
        energy = self._append(self.monitor.end_epoch())
        trace = ExplorationTrace(
            config_id=config.config_id, round=round_index, epoch_index=epoch,
            lrs=analysis.lrs, mean_losses=analysis.mean_loss_per_lr, curvature=analysis.curvature,
            window_size=analysis.window_size,
            selected_window=list(analysis.selected_window) if analysis.selected_window else [],
            selected_lr=analysis.selected_lr, fallback=analysis.fallback)
        self._append(trace)
        metrics = None
        if performance is not None:
            metrics = self._append(EpochMetricsRecord(
                config_id=config.config_id, round=round_index, epoch_index=epoch,
                mode=Mode.EXPLORATORY, performance=performance, metric_polarity=polarity,
                selected_lr=analysis.selected_lr,
                loss_trace=[[lr, loss] for lr, loss in zip(analysis.lrs, analysis.mean_loss_per_lr)]))
        if self.out_dir is not None:
            from .report import write_exploration_csv
            write_exploration_csv(self.out_dir / f"explore_round{round_index}_config{config.config_id}.csv",
                                  analysis)
        self.epochs[config.config_id] += 1
        return ExplorationResult(config.config_id, analysis, performance, polarity, energy, metrics)

    def run_thorough(self, config: HyperConfig, round_index: int, epochs: int) -> list:
        trainer = self.trainers[config.config_id]
        records = []
        for local in range(epochs):
            epoch = self.epochs[config.config_id]
            store = self._thorough_store(round_index, local)
            self.monitor.start_epoch(config.config_id, epoch, round=round_index, mode=Mode.THOROUGH,
                                     batch_size=config.batch_size)
            batches = _observed(iter_batches(store, config.batch_size), self.monitor)
            diverged = None
            try:
                trainer.train_batches(batches, config.current_lr)
            except DivergenceError as exc:
                diverged = exc
                for _ in batches:  # the epoch's remaining samples are still charged
                    pass
            energy = self._append(self.monitor.end_epoch())
            self.epochs[config.config_id] += 1
            if diverged is not None:
                config.diverged = True
                if config.status is Status.FINAL:
                    raise FinalDivergedAbort(
                        f"final config {config.config_id} diverged in thorough training at lr "
                        f"{config.current_lr}: {diverged}")
                log.warning("config %s diverged in thorough training: %s", config.config_id, diverged)
                records.append((energy, None))
                break
            perf, polarity = trainer.evaluate(*self.holdout)
            if not math.isfinite(perf):
                config.diverged = True
                records.append((energy, None))
                break
            metrics = self._append(EpochMetricsRecord(
                config_id=config.config_id, round=round_index, epoch_index=epoch,
                mode=Mode.THOROUGH, performance=perf, metric_polarity=polarity,
                selected_lr=config.current_lr))
            self._last_perf[config.config_id] = (perf, polarity)
            records.append((energy, metrics))
        return records

    # -- scoring --------------------------------------------------------------
    def _raw_attributes(self, results: Sequence[ExplorationResult], round_index: int) -> list:
        ok = [r for r in results if r.performance is not None and not r.analysis.fallback]
        flagged = [r for r in results if r not in ok]
        if flagged and not ok and round_index == 0:
            raise AllDivergedAbort("every configuration diverged during the first exploration")
        polarity = results[0].polarity
        perfs = [r.performance for r in ok]
        if perfs:
            worst_perf = min(perfs) if polarity is Polarity.HIGHER_IS_BETTER else max(perfs)
        else:
            worst_perf = 0.0
        worst_energy = max(r.energy.energy_wh for r in results)
        raw = []
        for r in results:
            if r in ok:
                raw.append(RawAttributes(r.config_id, r.performance, polarity, r.energy.energy_wh,
                                         r.analysis.selected_lr))
            else:
                raw.append(RawAttributes(r.config_id, worst_perf, polarity, worst_energy,
                                         self.settings.grid.lr_min, placeholder=True))
        return raw

    def _score(self, results, round_index: int) -> tuple:
        raw = self._raw_attributes(results, round_index)
        attrs = normalize_attributes(raw)
        w = self.settings.weights
        scores = [objective_score(a, w) for a in attrs]
        scored = [(a.config_id, s, a.E) for a, s in zip(attrs, scores)]
        entries = [
            {"config_id": r.config_id, "batch_size": self.by_id[r.config_id].batch_size,
             "raw": {"performance": r.performance, "polarity": r.polarity.value,
                     "energy_wh": r.energy_wh, "selected_lr": r.selected_lr},
             "normalized": {"P": a.P, "E": a.E, "LR": a.LR},
             "score": s, "placeholder": r.placeholder}
            for r, a, s in zip(raw, attrs, scores)
        ]
        return scored, entries

    # -- main loop ------------------------------------------------------------
    def plan(self, round_index: int) -> RoundPlan:
        active = [c.config_id for c in self.configs if c.status in (Status.ACTIVE, Status.FINAL)]
        b = self.settings.budget
        single = len(active) == 1
        return RoundPlan(round_index, active, b.exploratory_epochs_per_round,
                         b.final_thorough_epochs if single else b.thorough_epochs_per_round)

    def run(self, run_info: Optional[dict] = None) -> RunResult:
        s = self.settings
        stop = s.stop or StopCondition.default_for(len(self.configs))
        self.check_partition()
        info = run_info or {}
        self._append_header(info)
        if len(self.configs) == 1:
            self.configs[0].finalize()
        round_index = 0
        truncated = False
        last_ranking: list = []
        while True:
            plan = self.plan(round_index)
            results = []
            for cid in plan.active:
                cfg = self.by_id[cid]
                for _ in range(plan.exploratory_epochs):
                    res = self.run_exploratory(cfg, round_index)
                results.append(res)
            if len(plan.active) > 1:
                scored, entries = self._score(results, round_index)
                dropped = halve(scored, len(scored))
                ranking = rank(scored)
                survivors = [cid for cid in ranking if cid not in dropped]
                last_ranking = survivors
                for cid in dropped:
                    self.by_id[cid].drop(round_index)
                self._append(HalvingDecision(
                    round=round_index, weights={"alpha": s.weights.alpha, "beta": s.weights.beta},
                    entries=entries, ranking=ranking, dropped=dropped, survivors=survivors))
                if len(survivors) == 1:
                    self.by_id[survivors[0]].finalize()
            else:
                res = results[0]
                if res.analysis.fallback and self.by_id[res.config_id].status is Status.FINAL and round_index == 0:
                    raise AllDivergedAbort("the only configuration diverged during exploration")
            for cid in plan.active:
                cfg = self.by_id[cid]
                if cfg.status is Status.DROPPED:
                    continue
                self.run_thorough(cfg, round_index, plan.thorough_epochs)
            self.history.rounds_completed = round_index + 1
            remaining = [c for c in self.configs if c.status in (Status.ACTIVE, Status.FINAL)]
            self.history.max_epochs = max(self.epochs[c.config_id] for c in remaining)
            final = [c for c in remaining if c.status is Status.FINAL]
            if final and final[0].config_id in self._last_perf:
                perf, pol = self._last_perf[final[0].config_id]
                self.history.final_performance.append(_oriented(perf, pol))
            log.info("round %d done: %d active, %.6f Wh", round_index, len(remaining), self.round_energy[round_index])
            if should_stop(self.history, stop):
                if not final:
                    truncated = True
                    best = last_ranking[0] if last_ranking else remaining[0].config_id
                    self.by_id[best].finalize()
                break
            round_index += 1
        return self._finish(truncated)

    def _append_header(self, info: dict) -> None:
        s = self.settings
        self._append(RunStarted(
            fingerprint=info.get("fingerprint", ""), seed=s.seed, label=info.get("label", "sm2"),
            configs=[{"config_id": c.config_id, "batch_size": c.batch_size, "initial_lr": c.current_lr}
                     for c in self.configs],
            settings=info.get("settings", as_plain(s))))

    def _finish(self, truncated: bool) -> RunResult:
        final = next(c for c in self.configs if c.status is Status.FINAL)
        trainer = self.trainers[final.config_id]
        if final.config_id in self._last_perf:
            perf, pol = self._last_perf[final.config_id]
        else:
            perf, pol = trainer.evaluate(*self.holdout)
        total = ledger_total_energy(self.ledger)
        self._append(FinalSelection(
            config_id=final.config_id, batch_size=final.batch_size,
            total_epochs=self.epochs[final.config_id], energy_wh=total, final_lr=final.current_lr,
            performance=perf, metric_polarity=pol, model_digest=trainer.digest(),
            truncated=truncated, rounds=self.history.rounds_completed))
        return RunResult(final.config_id, trainer.snapshot(), total, truncated, list(self.round_energy),
                         self.configs, self.history)


def initial_configs(batch_sizes: Sequence[int], initial_lr: float) -> list:
    return [HyperConfig(config_id=i, batch_size=int(b), current_lr=float(initial_lr))
            for i, b in enumerate(batch_sizes)]


def run(configs, trainers, monitor, ledger, dataset, settings, out_dir=None,
        run_info: Optional[dict] = None) -> RunResult:
    return Engine(configs, trainers, monitor, ledger, dataset, settings, out_dir).run(run_info)


class VanillaEngine(Engine):
    """Single fixed config, thorough epochs only; the energy baseline."""

    def run(self, run_info: Optional[dict] = None, n_halving_rounds: int = 3) -> RunResult:
        if len(self.configs) != 1:
            raise ValueError("a vanilla run trains exactly one configuration")
        stop = self.settings.stop or StopCondition.default_for(2 ** n_halving_rounds)
        self._append_header(run_info or {})
        cfg = self.configs[0]
        cfg.finalize()
        b = self.settings.budget
        round_index = 0
        while True:
            epochs = b.thorough_epochs_per_round if round_index < n_halving_rounds else b.final_thorough_epochs
            self.run_thorough(cfg, round_index, epochs)
            self.history.rounds_completed = round_index + 1
            self.history.max_epochs = self.epochs[cfg.config_id]
            if cfg.config_id in self._last_perf:
                self.history.final_performance.append(_oriented(*self._last_perf[cfg.config_id]))
            if should_stop(self.history, stop):
                break
            round_index += 1
        return self._finish(False)


def replay_thorough(ledger: RunLedger, make_trainer: Callable[[], Trainer], dataset: Dataset,
                    settings: Settings) -> str:
    """Retrain the final config from scratch using only its thorough epochs.

    Returns the model digest, which must equal the one recorded in the
    ledger's final selection when exploration was properly isolated.
    """
    final = ledger.of_type(FinalSelection)
    if not final:
        raise SM2Error("ledger has no final selection")
    final = final[0]
    header = ledger.of_type(RunStarted)[0]
    candidates = [c["batch_size"] for c in header.configs]
    store = build_store(dataset, candidates, settings.store_capacity)
    trainer = make_trainer()
    epochs = [e for e in ledger.of_type(EpochEnergyRecord)
              if e.config_id == final.config_id and e.mode is Mode.THOROUGH]
    lrs = {(m.round, m.epoch_index): m.selected_lr for m in ledger.of_type(EpochMetricsRecord)
           if m.config_id == final.config_id and m.mode is Mode.THOROUGH}
    local = {}
    for e in epochs:
        j = local.get(e.round, 0)
        local[e.round] = j + 1
        if settings.reshuffle_each_epoch:
            rng = np.random.default_rng([settings.seed, e.round, j])
            order = dataset.train_idx[rng.permutation(len(dataset.train_idx))]
            epoch_store = build_store(dataset, candidates, settings.store_capacity, order)
        else:
            epoch_store = store
        trainer.train_batches(iter_batches(epoch_store, final.batch_size), lrs[(e.round, e.epoch_index)])
    return trainer.digest()
