"""Run configuration file schema and the builders that turn it into engine objects.

The file is YAML (JSON also parses) with sections ``run``, ``budget``,
``objective``, ``energy``, ``lr_grid``, ``trainer``, ``data`` and
``batch_candidates``. Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .core import ConfigError, RunBudget
from .dataio import (CsvSchema, Dataset, LinearRegressionSpec, QuadraticBowlSpec, TwoGaussiansSpec,
                     generate_synthetic, load_csv)
from .energy import SimPowerModel
from .lr_explorer import LrGrid, Spacing
from .objective import ObjectiveWeights
from .scheduler import Settings, StopCondition
from .trainer import BuiltinLearnerSpec, LearnerKind

DEFAULT_BATCH_CANDIDATES = [8, 16, 32, 64, 128, 256, 512, 1024]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class StopSection(_Section):
    max_rounds: Optional[int] = Field(None, ge=1)
    epoch_cap: Optional[int] = Field(None, ge=1)
    plateau: bool = True
    plateau_patience: int = Field(2, ge=1)
    plateau_min_delta: float = Field(1e-4, ge=0.0)


class RunSection(_Section):
    seed: int = 0
    out: Optional[str] = None
    label: str = "sm2"
    initial_lr: Optional[float] = Field(None, gt=0)
    stop: StopSection = StopSection()


class BudgetSection(_Section):
    exploratory_epochs_per_round: int = Field(1, ge=1)
    thorough_epochs_per_round: int = Field(5, ge=1)
    final_thorough_epochs: int = Field(10, ge=1)
    exploration_fraction: float = Field(0.25, gt=0.0, le=1.0)
    total_epoch_cap: int = Field(1000, ge=1)


class ObjectiveSection(_Section):
    alpha: float = Field(0.75, ge=0.0, le=1.0)
    beta: float = Field(0.5, ge=0.0, le=1.0)


class EnergySection(_Section):
    p_idle: float = Field(60.0, gt=0)
    p_max: float = Field(300.0, gt=0)
    gamma: float = Field(1.4, gt=0)
    b_sat: float = Field(512.0, gt=0)
    s_max: float = Field(20000.0, gt=0)
    kappa: float = Field(0.35, ge=0.0, lt=1.0)
    noise_seed: int = 0
    noise_rel: float = Field(0.01, ge=0.0, lt=1.0)
    poll_interval_s: float = Field(0.1, gt=0)

    @model_validator(mode="after")
    def _idle_below_max(self):
        if not self.p_idle < self.p_max:
            raise ValueError("p_idle must be below p_max")
        return self


class LrGridSection(_Section):
    lr_min: float = Field(0.001, gt=0)
    lr_max: float = Field(1.0, gt=0)
    count: int = Field(20, ge=4)
    spacing: Literal["Log", "Linear"] = "Log"
    window: int = Field(5, ge=1)
    divergence_factor: float = Field(4.0, gt=1.0)

    @model_validator(mode="after")
    def _consistent(self):
        if not self.lr_min < self.lr_max:
            raise ValueError("lr_min must be below lr_max")
        if self.count - 2 < self.window:
            raise ValueError(f"window {self.window} needs count >= {self.window + 2}")
        return self


class TrainerSection(_Section):
    kind: Literal["LinearRegression", "LogisticClassifier", "TinyMLP"] = "LogisticClassifier"
    hidden_dims: List[int] = [16]
    init_scale: float = Field(0.1, gt=0)
    seed: Optional[int] = None

    @field_validator("hidden_dims")
    @classmethod
    def _positive(cls, v):
        if any(h < 1 for h in v):
            raise ValueError("hidden dims must be >= 1")
        return v


class DataSection(_Section):
    kind: Literal["TwoGaussians", "LinearRegression", "QuadraticBowl", "csv"] = "TwoGaussians"
    n_samples: int = Field(100_000, ge=2)
    input_dim: int = Field(8, ge=1)
    output_dim: int = Field(1, ge=1)
    noise_sigma: float = Field(0.1, ge=0.0)
    separation: float = Field(2.0, ge=0.0)
    condition_number: float = Field(10.0, ge=1.0)
    lambda_max: float = Field(1.0, gt=0.0)
    path: Optional[str] = None
    target_columns: List[str] = ["target"]
    task: Literal["regression", "classification"] = "regression"
    delimiter: str = ","
    holdout_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    store_capacity: Optional[int] = Field(None, ge=1)
    reshuffle_each_epoch: bool = False

    @model_validator(mode="after")
    def _csv_needs_path(self):
        if self.kind == "csv" and not self.path:
            raise ValueError("data.kind 'csv' requires data.path")
        return self


class RunConfigFile(_Section):
    run: RunSection = RunSection()
    budget: BudgetSection = BudgetSection()
    objective: ObjectiveSection = ObjectiveSection()
    energy: EnergySection = EnergySection()
    lr_grid: LrGridSection = LrGridSection()
    trainer: TrainerSection = TrainerSection()
    data: DataSection = DataSection()
    batch_candidates: List[int] = DEFAULT_BATCH_CANDIDATES

    @field_validator("batch_candidates")
    @classmethod
    def _divisible(cls, v):
        if not v:
            raise ValueError("at least one batch candidate is required")
        if any(b < 1 for b in v):
            raise ValueError("batch candidates must be >= 1")
        if len(set(v)) != len(v):
            raise ValueError("batch candidates must be distinct")
        smallest = min(v)
        for b in v:
            if b % smallest:
                raise ValueError(f"batch candidate {b} is not a multiple of the smallest candidate "
                                 f"{smallest} (micro-batch concatenation needs divisibility)")
        return v


# fields whose defaults follow the reference experimental setup
REFERENCE_DEFAULTS = {
    ("budget", "exploratory_epochs_per_round"), ("budget", "thorough_epochs_per_round"),
    ("budget", "final_thorough_epochs"), ("budget", "exploration_fraction"),
    ("objective", "alpha"), ("objective", "beta"),
    ("lr_grid", "lr_min"), ("lr_grid", "lr_max"), ("lr_grid", "count"),
    ("batch_candidates",),
}


def _format_errors(exc: ValidationError, source: str) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        msg = err["msg"]
        if err["type"] == "extra_forbidden":
            msg = "unknown key"
        parts.append(f"{source}: {loc}: {msg}")
    return "\n".join(parts)


def parse_config(text: str, source: str = "<config>") -> RunConfigFile:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: not valid YAML/JSON: {exc}") from exc
    if data is None:
        raise ConfigError(f"{source}: configuration file is empty")
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping of sections")
    try:
        return RunConfigFile.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc, source)) from None


def load_config(path) -> RunConfigFile:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = parse_config(text, str(path))
    if cfg.data.kind == "csv":
        data_path = Path(cfg.data.path)
        if not data_path.is_absolute():
            data_path = path.parent / data_path
        if not data_path.exists():
            raise ConfigError(f"{path}: data.path: file not found: {data_path}")
        cfg = cfg.model_copy(update={"data": cfg.data.model_copy(update={"path": str(data_path)})})
    return cfg


def load_power_model(path) -> EnergySection:
    """Energy section from a standalone file (either bare or under an ``energy`` key)."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read power model {path}: {exc}") from exc
    if isinstance(data, dict) and set(data) == {"energy"}:
        data = data["energy"]
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: power model must be a mapping")
    try:
        return EnergySection.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc, f"{path} (energy)")) from None


def effective_yaml(cfg: RunConfigFile, raw_text: Optional[str] = None) -> str:
    """Fully-defaulted config, each leaf annotated with where its value came from."""
    given = yaml.safe_load(raw_text) if raw_text else {}
    given = given if isinstance(given, dict) else {}
    dumped = cfg.model_dump(mode="json")
    lines = []

    def origin(key: tuple) -> str:
        node = given
        for k in key:
            if not isinstance(node, dict) or k not in node:
                return "reference setup default" if key in REFERENCE_DEFAULTS else "artifact default"
            node = node[k]
        return "set in file"

    def emit(node, key: tuple, indent: int):
        pad = "  " * indent
        for k, v in node.items():
            sub = key + (k,)
            if isinstance(v, dict):
                lines.append(f"{pad}{k}:")
                emit(v, sub, indent + 1)
            else:
                rendered = json.dumps(v)
                lines.append(f"{pad}{k}: {rendered}  # {origin(sub)}")

    emit(dumped, (), 0)
    grid = build_grid(cfg)
    lines.append("# lr grid: " + ", ".join(f"{v:.6g}" for v in grid.values))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_grid(cfg: RunConfigFile) -> LrGrid:
    g = cfg.lr_grid
    return LrGrid(g.lr_min, g.lr_max, g.count, Spacing(g.spacing))


def build_power_model(section: EnergySection) -> SimPowerModel:
    return SimPowerModel(p_idle=section.p_idle, p_max=section.p_max, gamma=section.gamma,
                         b_sat=section.b_sat, s_max=section.s_max, kappa=section.kappa,
                         noise_seed=section.noise_seed, noise_rel=section.noise_rel)


def build_dataset(cfg: RunConfigFile, seed: int) -> Dataset:
    d = cfg.data
    if d.kind == "csv":
        schema = CsvSchema(d.target_columns, d.task, d.delimiter)
        return load_csv(d.path, schema, seed=seed, holdout_fraction=d.holdout_fraction)
    if d.kind == "TwoGaussians":
        spec = TwoGaussiansSpec(d.n_samples, d.input_dim, d.separation)
    elif d.kind == "LinearRegression":
        spec = LinearRegressionSpec(d.n_samples, d.input_dim, d.output_dim, d.noise_sigma)
    else:
        spec = QuadraticBowlSpec(d.n_samples, d.input_dim, d.condition_number, d.lambda_max)
    try:
        return generate_synthetic(spec, seed, d.holdout_fraction)
    except ValueError as exc:
        raise ConfigError(f"data: {exc}") from exc


def build_learner_spec(cfg: RunConfigFile, dataset: Dataset, seed: int) -> BuiltinLearnerSpec:
    t = cfg.trainer
    kind = LearnerKind(t.kind)
    if kind is LearnerKind.LOGISTIC_CLASSIFIER:
        if dataset.task != "classification":
            raise ConfigError("trainer.kind LogisticClassifier needs a classification dataset")
        out = max(2, int(dataset.targets.max()) + 1)
    else:
        if dataset.task != "regression":
            raise ConfigError(f"trainer.kind {t.kind} needs a regression dataset")
        out = dataset.targets.shape[1]
    return BuiltinLearnerSpec(kind, dataset.input_dim, out, tuple(t.hidden_dims), t.init_scale,
                              seed if t.seed is None else t.seed)


def build_settings(cfg: RunConfigFile, seed: int, n_configs: int) -> Settings:
    b = cfg.budget
    budget = RunBudget(
        max_rounds=cfg.run.stop.max_rounds or StopCondition.default_for(n_configs).max_rounds,
        exploratory_epochs_per_round=b.exploratory_epochs_per_round,
        thorough_epochs_per_round=b.thorough_epochs_per_round,
        final_thorough_epochs=b.final_thorough_epochs,
        exploration_fraction=b.exploration_fraction, total_epoch_cap=b.total_epoch_cap)
    st = cfg.run.stop
    stop = StopCondition(max_rounds=budget.max_rounds,
                         epoch_cap=st.epoch_cap if st.epoch_cap is not None else b.total_epoch_cap,
                         plateau=st.plateau, plateau_patience=st.plateau_patience,
                         plateau_min_delta=st.plateau_min_delta)
    return Settings(budget=budget, weights=ObjectiveWeights(cfg.objective.alpha, cfg.objective.beta),
                    grid=build_grid(cfg), window=cfg.lr_grid.window,
                    divergence_factor=cfg.lr_grid.divergence_factor, stop=stop,
                    store_capacity=cfg.data.store_capacity,
                    reshuffle_each_epoch=cfg.data.reshuffle_each_epoch, seed=seed)


def fingerprint(cfg: RunConfigFile, seed: int) -> str:
    """Identity of the experiment (data, learner, seed), shared by baseline and tuned runs."""
    payload = {"data": cfg.data.model_dump(mode="json"), "trainer": cfg.trainer.model_dump(mode="json"),
               "seed": seed}
    payload["data"].pop("store_capacity", None)
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def with_overrides(cfg: RunConfigFile, *, seed: Optional[int] = None, alpha: Optional[float] = None,
                   energy: Optional[EnergySection] = None) -> RunConfigFile:
    update = {}
    if seed is not None:
        update["run"] = cfg.run.model_copy(update={"seed": seed})
    if alpha is not None:
        try:
            update["objective"] = ObjectiveSection(alpha=alpha, beta=cfg.objective.beta)
        except ValidationError as exc:
            raise ConfigError(_format_errors(exc, "--alpha")) from None
    if energy is not None:
        update["energy"] = energy
    return cfg.model_copy(update=update)
