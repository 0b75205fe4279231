"""Datasets, synthetic generators and the micro-batch store.

Training data is chunked once into micro-batches of the smallest candidate
batch size. Larger batch sizes are served by concatenating consecutive
micro-batches, so every candidate sees the same samples in the same order and
only the grouping differs. Residency of micro-batches is capped and serviced
first-in-first-out, standing in for a device-memory budget.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.linalg import hadamard

from .core import ConfigError


class DataParseError(ConfigError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray  # (N, m) float for regression, (N,) int for classification
    train_idx: np.ndarray  # seed-shuffled training order
    holdout_idx: np.ndarray
    task: str  # "regression" | "classification"
    provenance: dict = field(default_factory=dict)
    lambda_max: Optional[float] = None
    hessian: Optional[np.ndarray] = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.inputs)):
            raise ConfigError("dataset inputs contain NaN or Inf")
        if self.task == "regression" and not np.all(np.isfinite(self.targets)):
            raise ConfigError("dataset targets contain NaN or Inf")
        n = len(self.inputs)
        both = np.concatenate([self.train_idx, self.holdout_idx])
        if len(both) != n or len(np.unique(both)) != n:
            raise ConfigError("train/holdout splits must be disjoint and cover the dataset")

    @property
    def n_samples(self) -> int:
        return len(self.inputs)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def holdout(self) -> tuple:
        return self.inputs[self.holdout_idx], self.targets[self.holdout_idx]

    def train(self) -> tuple:
        return self.inputs[self.train_idx], self.targets[self.train_idx]


def split_indices(n: int, holdout_fraction: float, seed: int) -> tuple:
    if not 0.0 < holdout_fraction < 1.0:
        raise ConfigError("holdout_fraction must be in (0, 1)")
    rng = np.random.default_rng([seed, 0x5EED])
    order = rng.permutation(n)
    n_hold = max(1, int(round(n * holdout_fraction)))
    if n_hold >= n:
        raise ConfigError("dataset too small for a holdout split")
    return order[n_hold:], np.sort(order[:n_hold])


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearRegressionSpec:
    n_samples: int = 4096
    input_dim: int = 4
    output_dim: int = 1
    noise_sigma: float = 0.0


@dataclass(frozen=True)
class TwoGaussiansSpec:
    n_samples: int = 4096
    input_dim: int = 4
    separation: float = 2.0
    positive_fraction: float = 0.5


@dataclass(frozen=True)
class QuadraticBowlSpec:
    n_samples: int = 4096
    input_dim: int = 2
    condition_number: float = 10.0
    lambda_max: float = 1.0


def generate_synthetic(spec, seed: int, holdout_fraction: float = 0.1) -> Dataset:
    if not isinstance(spec, (LinearRegressionSpec, TwoGaussiansSpec, QuadraticBowlSpec)):
        raise ValueError(f"unknown synthetic spec {spec!r}")
    rng = np.random.default_rng(seed)
    if spec.n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    if spec.input_dim < 1:
        raise ValueError("input_dim must be >= 1")
    lam_max = hess = None

    if isinstance(spec, LinearRegressionSpec):
        if spec.output_dim < 1:
            raise ValueError("output_dim must be >= 1")
        x = rng.standard_normal((spec.n_samples, spec.input_dim))
        w = rng.standard_normal((spec.input_dim, spec.output_dim))
        b = rng.standard_normal(spec.output_dim)
        y = x @ w + b + spec.noise_sigma * rng.standard_normal((spec.n_samples, spec.output_dim))
        task = "regression"
        provenance = {"kind": "LinearRegression", "weights": w.tolist(), "bias": b.tolist()}
    elif isinstance(spec, TwoGaussiansSpec):
        labels = (rng.random(spec.n_samples) < spec.positive_fraction).astype(np.int64)
        direction = np.zeros(spec.input_dim)
        direction[0] = 1.0
        centers = np.where(labels[:, None] == 1, 0.5, -0.5) * spec.separation * direction
        x = centers + rng.standard_normal((spec.n_samples, spec.input_dim))
        y = labels
        task = "classification"
        provenance = {"kind": "TwoGaussians"}
    elif isinstance(spec, QuadraticBowlSpec):
        x, y, lam_max, hess, provenance = _quadratic_bowl(spec, rng)
        task = "regression"

    train_idx, holdout_idx = split_indices(spec.n_samples, holdout_fraction, seed)
    provenance = {**provenance, "spec": type(spec).__name__, "params": vars(spec), "seed": seed}
    return Dataset(x, y, train_idx, holdout_idx, task, provenance, lam_max, hess)


def _quadratic_bowl(spec: QuadraticBowlSpec, rng):
    """Noise-free least squares whose design has an exactly known spectrum.

    Columns are scaled Hadamard columns (orthogonal, zero mean), so for the
    loss 0.5 * mean((x.w + b - y)^2) the Hessian over (w, b) is exactly
    diag(lambdas, 1) on the full set, and nearly so on any batch.
    """
    if spec.condition_number < 1:
        raise ValueError("condition_number must be >= 1")
    if spec.input_dim < 2:
        raise ValueError("a bowl needs input_dim >= 2")
    d = spec.input_dim
    m = 1
    while m < d + 1:
        m *= 2
    if spec.n_samples % m:
        raise ValueError(f"QuadraticBowl n_samples must be a multiple of {m}")
    lambdas = spec.lambda_max * np.geomspace(1.0 / spec.condition_number, 1.0, d)
    h = hadamard(m)[:, 1:d + 1].astype(float)
    rows = np.tile(h, (spec.n_samples // m, 1))
    rows = rows[rng.permutation(len(rows))]
    x = rows * np.sqrt(lambdas)
    w_true = rng.standard_normal(d)
    b_true = float(rng.standard_normal())
    y = (x @ w_true + b_true)[:, None]
    aug = np.hstack([x, np.ones((len(x), 1))])
    hess = aug.T @ aug / len(x)
    lam = float(max(lambdas.max(), 1.0))
    provenance = {"kind": "QuadraticBowl", "lambdas": lambdas.tolist()}
    return x, y, lam, hess, provenance


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    target_columns: Sequence[str]
    task: str = "regression"
    delimiter: str = ","


def load_csv(path, schema: CsvSchema, seed: int = 0, holdout_fraction: float = 0.1) -> Dataset:
    """Read a headed numeric CSV; targets are the named columns, inputs all others."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"data file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataParseError("empty file, expected a header row", 1) from None
        header = [h.strip() for h in header]
        missing = [c for c in schema.target_columns if c not in header]
        if missing:
            raise DataParseError(f"target column(s) {missing} not in header {header}", 1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
            values = []
            for name, cell in zip(header, row):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataParseError(f"non-numeric value {cell!r} in column {name!r}", lineno) from None
                if not np.isfinite(v):
                    raise DataParseError(f"non-finite value {cell!r} in column {name!r}", lineno)
                values.append(v)
            rows.append(values)
    if not rows:
        raise DataParseError("no data rows")
    table = np.asarray(rows, dtype=float)
    t_cols = [header.index(c) for c in schema.target_columns]
    x_cols = [i for i in range(len(header)) if i not in t_cols]
    if not x_cols:
        raise ConfigError("CSV has no input columns")
    x = table[:, x_cols]
    if schema.task == "classification":
        if len(t_cols) != 1:
            raise ConfigError("classification needs exactly one target column")
        y = table[:, t_cols[0]]
        if np.any(y != np.round(y)) or np.any(y < 0):
            raise ConfigError("classification labels must be non-negative integers")
        y = y.astype(np.int64)
    else:
        y = table[:, t_cols]
    train_idx, holdout_idx = split_indices(len(x), holdout_fraction, seed)
    return Dataset(x, y, train_idx, holdout_idx, schema.task,
                   {"kind": "csv", "path": str(path), "targets": list(schema.target_columns)})


def write_csv(dataset: Dataset, path, target_names: Optional[Sequence[str]] = None) -> CsvSchema:
    x, y = dataset.inputs, dataset.targets
    y2 = y[:, None] if y.ndim == 1 else y
    target_names = list(target_names or [f"y{i}" for i in range(y2.shape[1])])
    header = [f"x{i}" for i in range(x.shape[1])] + target_names
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for xi, yi in zip(x, y2):
            w.writerow([repr(float(v)) for v in xi] + [repr(v.item()) for v in yi])
    return CsvSchema(target_columns=target_names, task=dataset.task)


# ---------------------------------------------------------------------------
# Micro-batch store
# ---------------------------------------------------------------------------


class MicroBatchStore:
    """Micro-batches of the smallest candidate size with FIFO-capped residency."""

    def __init__(self, inputs: np.ndarray, targets: np.ndarray, order: np.ndarray,
                 micro_batch_size: int, candidates: Sequence[int], capacity: Optional[int] = None):
        self.inputs = inputs
        self.targets = targets
        self.micro_batch_size = micro_batch_size
        self.candidates = tuple(sorted(candidates))
        n_blocks = len(order) // micro_batch_size  # drop-last
        self.blocks = [order[i * micro_batch_size:(i + 1) * micro_batch_size] for i in range(n_blocks)]
        if capacity is not None and capacity < 1:
            raise ConfigError("capacity must be >= 1")
        self.capacity = capacity
        self._resident: dict = {}
        self._fifo: deque = deque()
        self.peak_resident = 0
        self.loads = 0
        self.eviction_log: list = []

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def resident_count(self) -> int:
        return len(self._resident)

    def _load(self, block: int, pinned: set) -> tuple:
        if block in self._resident:
            return self._resident[block]
        while self.capacity is not None and len(self._resident) >= self.capacity:
            victim = next((b for b in self._fifo if b not in pinned), None)
            if victim is None:
                raise ConfigError("store capacity is smaller than one effective batch")
            self._fifo.remove(victim)
            del self._resident[victim]
            self.eviction_log.append(victim)
        idx = self.blocks[block]
        data = (self.inputs[idx], self.targets[idx])
        self._resident[block] = data
        self._fifo.append(block)
        self.loads += 1
        self.peak_resident = max(self.peak_resident, len(self._resident))
        return data


def build_store(dataset: Dataset, batch_candidates: Sequence[int], capacity: Optional[int] = None,
                order: Optional[np.ndarray] = None) -> MicroBatchStore:
    cands = list(batch_candidates)
    if not cands or any(int(c) != c or c < 1 for c in cands):
        raise ConfigError("batch candidates must be positive integers")
    micro = min(cands)
    bad = [c for c in cands if c % micro]
    if bad:
        raise ConfigError(f"batch candidate {bad[0]} is not a multiple of the smallest candidate {micro}")
    order = dataset.train_idx if order is None else order
    if len(order) < micro:
        raise ConfigError(f"dataset has {len(order)} training samples, fewer than batch size {micro}")
    return MicroBatchStore(dataset.inputs, dataset.targets, np.asarray(order), micro, cands, capacity)


def iter_batches(store: MicroBatchStore, effective_batch: int, fraction: float = 1.0) -> Iterator[tuple]:
    """Yield (inputs, targets) batches of ``effective_batch`` samples.

    ``fraction`` restricts the pass to the leading share of micro-batches,
    which is how the exploration partition is served.
    """
    if effective_batch not in store.candidates:
        raise ConfigError(f"batch size {effective_batch} is not a configured candidate")
    k = effective_batch // store.micro_batch_size
    if store.capacity is not None and k > store.capacity:
        raise ConfigError(f"batch size {effective_batch} needs {k} resident micro-batches, "
                          f"capacity is {store.capacity}")
    n_blocks = int(store.n_blocks * fraction) if fraction < 1.0 else store.n_blocks
    for start in range(0, n_blocks - k + 1, k):
        group = range(start, start + k)
        pinned = set(group)
        parts = [store._load(b, pinned) for b in group]
        if k == 1:
            yield parts[0]
        else:
            yield np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def count_batches(store: MicroBatchStore, effective_batch: int, fraction: float = 1.0) -> int:
    k = effective_batch // store.micro_batch_size
    n_blocks = int(store.n_blocks * fraction) if fraction < 1.0 else store.n_blocks
    return n_blocks // k
