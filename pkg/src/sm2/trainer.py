"""Trainer contract and built-in NumPy learners.

Built-ins train with plain SGD (no momentum) so that a snapshot holds nothing
beyond parameters, the step counter and the RNG state. Any object exposing the
:class:`Trainer` methods can be scheduled instead.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .core import Polarity, SM2Error

SNAPSHOT_MAGIC = b"SM2S"
SNAPSHOT_VERSION = 1


class DivergenceError(SM2Error):
    def __init__(self, batch_index: int, loss: float):
        self.batch_index = batch_index
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at batch {batch_index}")


class SnapshotError(SM2Error):
    pass


@runtime_checkable
class Trainer(Protocol):
    kind: str

    def train_batches(self, batches: Sequence[tuple], lrs) -> list: ...

    def evaluate(self, inputs: np.ndarray, targets: np.ndarray) -> tuple: ...

    def snapshot(self) -> bytes: ...

    def restore(self, snap: bytes) -> None: ...

    def reseed(self, seed: int) -> None: ...

    def digest(self) -> str: ...


class LearnerKind(str, Enum):
    LINEAR_REGRESSION = "LinearRegression"
    LOGISTIC_CLASSIFIER = "LogisticClassifier"
    TINY_MLP = "TinyMLP"


@dataclass(frozen=True)
class BuiltinLearnerSpec:
    kind: LearnerKind
    input_dim: int
    output_dim: int = 1
    hidden_dims: tuple = (16,)
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("learner dimensions must be >= 1")
        if self.kind is LearnerKind.LOGISTIC_CLASSIFIER and self.output_dim < 2:
            raise ValueError("the classifier needs output_dim >= 2 classes")


def _lr_sequence(lrs, n: int) -> list:
    if np.isscalar(lrs):
        seq = [float(lrs)] * n
    else:
        seq = [float(v) for v in lrs]
        if len(seq) != n:
            raise ValueError(f"got {len(seq)} learning rates for {n} batches")
    if any(not (v > 0 and math.isfinite(v)) for v in seq):
        raise ValueError("learning rates must be positive and finite")
    return seq


class NumpyLearner:
    """Shared SGD machinery; subclasses define parameter shapes, loss and metric."""

    kind: str = ""
    polarity: Polarity = Polarity.LOWER_IS_BETTER

    def __init__(self, spec: BuiltinLearnerSpec):
        self.spec = spec
        self.step = 0
        self.rng = np.random.default_rng(spec.seed)
        self.params = self._init_params(self.rng)

    # -- per-model hooks ----------------------------------------------------
    def _init_params(self, rng) -> dict:
        raise NotImplementedError

    def loss_and_grad(self, params: dict, x: np.ndarray, y: np.ndarray) -> tuple:
        raise NotImplementedError

    def metric(self, params: dict, x: np.ndarray, y: np.ndarray) -> float:
        raise NotImplementedError

    # -- contract -----------------------------------------------------------
    def train_batches(self, batches, lrs) -> list:
        """One SGD step per batch; returns the loss measured before each step."""
        batches = list(batches)
        seq = _lr_sequence(lrs, len(batches))
        losses = []
        for i, ((x, y), lr) in enumerate(zip(batches, seq)):
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = self.loss_and_grad(self.params, x, y)
            if not math.isfinite(loss):
                raise DivergenceError(i, loss)
            for name, g in grads.items():
                self.params[name] -= lr * g
            self.step += 1
            losses.append(loss)
        return losses

    def evaluate(self, inputs, targets) -> tuple:
        if len(inputs) == 0:
            raise ValueError("evaluation set is empty")
        with np.errstate(over="ignore", invalid="ignore"):
            return float(self.metric(self.params, inputs, targets)), self.polarity

    def loss(self, inputs, targets) -> float:
        with np.errstate(over="ignore", invalid="ignore"):
            return float(self.loss_and_grad(self.params, inputs, targets)[0])

    def reseed(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()

    def snapshot(self) -> bytes:
        names = sorted(self.params)
        meta = {
            "kind": self.kind,
            "step": self.step,
            "rng": self.rng.bit_generator.state,
            "arrays": [[n, list(self.params[n].shape)] for n in names],
        }
        head = json.dumps(meta, sort_keys=True).encode()
        body = b"".join(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes() for n in names)
        return SNAPSHOT_MAGIC + struct.pack("<HI", SNAPSHOT_VERSION, len(head)) + head + body

    def restore(self, snap: bytes) -> None:
        meta, arrays = _decode_snapshot(snap)
        if meta["kind"] != self.kind:
            raise SnapshotError(f"snapshot holds a {meta['kind']}, cannot restore into {self.kind}")
        if set(arrays) != set(self.params) or any(arrays[k].shape != self.params[k].shape for k in arrays):
            raise SnapshotError("snapshot parameter shapes do not match this learner")
        self.params = arrays
        self.step = meta["step"]
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = meta["rng"]

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in sorted(self.params)])

    def unflatten(self, flat: np.ndarray) -> dict:
        out, pos = {}, 0
        for n in sorted(self.params):
            size = self.params[n].size
            out[n] = flat[pos:pos + size].reshape(self.params[n].shape).copy()
            pos += size
        return out


def _decode_snapshot(snap: bytes) -> tuple:
    if not isinstance(snap, (bytes, bytearray)) or snap[:4] != SNAPSHOT_MAGIC:
        raise SnapshotError("not a trainer snapshot")
    try:
        version, head_len = struct.unpack_from("<HI", snap, 4)
    except struct.error as exc:
        raise SnapshotError("truncated snapshot header") from exc
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(f"snapshot version {version} unsupported (expected {SNAPSHOT_VERSION})")
    start = 10
    try:
        meta = json.loads(snap[start:start + head_len])
    except (ValueError, UnicodeDecodeError) as exc:
        raise SnapshotError("corrupt snapshot metadata") from exc
    pos = start + head_len
    arrays = {}
    for name, shape in meta["arrays"]:
        size = int(np.prod(shape)) * 8
        chunk = snap[pos:pos + size]
        if len(chunk) != size:
            raise SnapshotError("truncated snapshot body")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        pos += size
    if pos != len(snap):
        raise SnapshotError("trailing bytes in snapshot")
    return meta, arrays


class LinearRegression(NumpyLearner):
    """Affine map trained on 0.5 * mean squared error; scored by R^2."""

    kind = LearnerKind.LINEAR_REGRESSION.value
    polarity = Polarity.HIGHER_IS_BETTER

    def _init_params(self, rng):
        s = self.spec
        return {"W": s.init_scale * rng.standard_normal((s.input_dim, s.output_dim)),
                "b": np.zeros(s.output_dim)}

    def predict(self, params, x):
        return x @ params["W"] + params["b"]

    def loss_and_grad(self, params, x, y):
        y = y.reshape(len(x), -1)
        r = self.predict(params, x) - y
        n = len(x)
        loss = 0.5 * float(np.sum(r * r)) / n
        return loss, {"W": x.T @ r / n, "b": r.sum(axis=0) / n}

    def metric(self, params, x, y):
        y = y.reshape(len(x), -1)
        ss_res = float(np.sum((self.predict(params, x) - y) ** 2))
        ss_tot = float(np.sum((y - y.mean(axis=0)) ** 2))
        if ss_tot == 0.0:
            return 1.0 if ss_res == 0.0 else 0.0
        return 1.0 - ss_res / ss_tot


class LogisticClassifier(NumpyLearner):
    """Softmax regression on integer labels; scored by accuracy."""

    kind = LearnerKind.LOGISTIC_CLASSIFIER.value
    polarity = Polarity.HIGHER_IS_BETTER

    def _init_params(self, rng):
        s = self.spec
        return {"W": s.init_scale * rng.standard_normal((s.input_dim, s.output_dim)),
                "b": np.zeros(s.output_dim)}

    def logits(self, params, x):
        return x @ params["W"] + params["b"]

    def loss_and_grad(self, params, x, y):
        z = self.logits(params, x)
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        n = len(x)
        y = np.asarray(y, dtype=np.int64).ravel()
        loss = -float(logp[np.arange(n), y].sum()) / n
        d = np.exp(logp)
        d[np.arange(n), y] -= 1.0
        d /= n
        return loss, {"W": x.T @ d, "b": d.sum(axis=0)}

    def metric(self, params, x, y):
        pred = np.argmax(self.logits(params, x), axis=1)
        return float(np.mean(pred == np.asarray(y).ravel()))


class TinyMLP(NumpyLearner):
    """tanh MLP regressor on 0.5 * MSE; scored by mean squared error."""

    kind = LearnerKind.TINY_MLP.value
    polarity = Polarity.LOWER_IS_BETTER

    def _init_params(self, rng):
        s = self.spec
        dims = [s.input_dim, *s.hidden_dims, s.output_dim]
        params = {}
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            params[f"W{i}"] = s.init_scale * rng.standard_normal((a, b))
            params[f"b{i}"] = np.zeros(b)
        return params

    @property
    def n_layers(self):
        return len(self.spec.hidden_dims) + 1

    def _forward(self, params, x):
        acts = [x]
        h = x
        for i in range(self.n_layers):
            h = h @ params[f"W{i}"] + params[f"b{i}"]
            if i < self.n_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        return acts

    def loss_and_grad(self, params, x, y):
        acts = self._forward(params, x)
        y = y.reshape(len(x), -1)
        n = len(x)
        r = acts[-1] - y
        loss = 0.5 * float(np.sum(r * r)) / n
        grads = {}
        delta = r / n
        for i in reversed(range(self.n_layers)):
            grads[f"W{i}"] = acts[i].T @ delta
            grads[f"b{i}"] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ params[f"W{i}"].T) * (1.0 - acts[i] ** 2)
        return loss, grads

    def metric(self, params, x, y):
        y = y.reshape(len(x), -1)
        return float(np.mean((self._forward(params, x)[-1] - y) ** 2))


_LEARNERS = {
    LearnerKind.LINEAR_REGRESSION: LinearRegression,
    LearnerKind.LOGISTIC_CLASSIFIER: LogisticClassifier,
    LearnerKind.TINY_MLP: TinyMLP,
}


def make_learner(spec: BuiltinLearnerSpec) -> NumpyLearner:
    return _LEARNERS[LearnerKind(spec.kind)](spec)


def train_batches(trainer: Trainer, batches, lrs) -> list:
    return trainer.train_batches(batches, lrs)


def evaluate(trainer: Trainer, inputs, targets) -> tuple:
    return trainer.evaluate(inputs, targets)


def snapshot(trainer: Trainer) -> bytes:
    return trainer.snapshot()


def restore(trainer: Trainer, snap: bytes) -> None:
    trainer.restore(snap)
