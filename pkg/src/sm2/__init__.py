"""Energy-aware hyperparameter search: successive halving over batch size and
learning rate, scored on performance, energy per epoch and stable learning rate."""

__version__ = "0.1.0"

from .core import (EpochEnergyRecord, EpochMetricsRecord, HyperConfig, Mode, Polarity, RunBudget,
                   RunLedger, Status, ledger_append, ledger_total_energy)
from .energy import SimPowerModel, SimulatedMonitor, energy_per_epoch, sim_epoch_energy, sim_power
from .lr_explorer import LrGrid, cyclical_losses, loss_curvature, select_stable_lr
from .objective import AttributeVector, ObjectiveWeights, halve, normalize_attributes, objective_score
from .report import compare, emit_traces, parity, summarize
from .scheduler import Engine, Settings, StopCondition, run, should_stop

__all__ = [
    "AttributeVector", "Engine", "EpochEnergyRecord", "EpochMetricsRecord", "HyperConfig", "LrGrid",
    "Mode", "ObjectiveWeights", "Polarity", "RunBudget", "RunLedger", "Settings", "SimPowerModel",
    "SimulatedMonitor", "Status", "StopCondition", "compare", "cyclical_losses", "emit_traces",
    "energy_per_epoch", "halve", "ledger_append", "ledger_total_energy", "loss_curvature",
    "normalize_attributes", "objective_score", "parity", "run", "select_stable_lr", "should_stop",
    "sim_epoch_energy", "sim_power", "summarize",
]
