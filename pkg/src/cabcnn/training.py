"""Cross-entropy, Adam, batch assembly and the early-stopping training loop."""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateError, NumericError, ShapeError
from .layers import INFER, TRAIN
from .model import Model
from .tensor import Tensor, clamp_min, log, mean, neg, pick

log_ = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

Sample = tuple[np.ndarray, int]


@dataclass
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 15
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    T_seconds: int = 30

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be at least 1")
        if self.T_seconds < 1:
            raise ConfigError("T_seconds must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    seconds: float


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy(pred: Tensor, label) -> Tensor:
    """``-log(max(p[label], 1e-12))``; batches of shape (B, m) are averaged."""
    if pred.ndim == 1:
        m = pred.shape[0]
        labels = np.array([label], dtype=np.int64)
        pred = pred.reshape(1, m)
    else:
        m = pred.shape[1]
        labels = np.asarray(label, dtype=np.int64).reshape(-1)
        if labels.size != pred.shape[0]:
            raise ShapeError(f"{labels.size} labels for a batch of {pred.shape[0]}")
    if labels.min() < 0 or labels.max() >= m:
        raise ValueError(f"label out of range [0, {m}): {labels.tolist()}")
    return neg(mean(log(clamp_min(pick(pred, labels), PROB_FLOOR))))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is not None and not np.all(np.isfinite(g)):
            name = p.name or f"#{i}"
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return state


# ---------------------------------------------------------------------------
# batching and evaluation
# ---------------------------------------------------------------------------

def make_batches(samples: Sequence[Sample], batch_size: int, rng) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffle, group, and cut every batch to its shortest member."""
    if not samples:
        raise DegenerateError("cannot batch an empty sample list")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    order = gen.permutation(len(samples))
    batches = []
    for start in range(0, len(order), batch_size):
        members = [samples[i] for i in order[start:start + batch_size]]
        shortest = min(len(a) for a, _ in members)
        x = np.stack([np.asarray(a[:shortest], dtype=np.float64) for a, _ in members])
        y = np.array([label for _, label in members], dtype=np.int64)
        batches.append((x, y))
    return batches


def predict_proba(model: Model, samples: Sequence[Sample] | Sequence[np.ndarray]) -> np.ndarray:
    """Infer-mode class probabilities, one full-length clip at a time."""
    out = []
    for s in samples:
        arr = s[0] if isinstance(s, tuple) else s
        out.append(model(np.asarray(arr, dtype=np.float64)[None, :], INFER).data[0])
    return np.array(out)


def evaluate(model: Model, samples: Sequence[Sample]) -> tuple[float, float]:
    """Mean cross-entropy and accuracy in infer mode."""
    if not samples:
        raise DegenerateError("cannot evaluate an empty sample list")
    probs = predict_proba(model, samples)
    labels = np.array([y for _, y in samples])
    chosen = np.maximum(probs[np.arange(len(labels)), labels], PROB_FLOOR)
    loss = float(-np.log(chosen).mean())
    acc = float((probs.argmax(axis=1) == labels).mean())
    return loss, acc


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------

class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True when to stop."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError("patience must be at least 1")
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch: int | None = None
        self.best_state: dict | None = None
        self.wait = 0

    def update(self, epoch: int, val_loss: float, state_fn: Callable[[], dict] | None = None) -> bool:
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_state = state_fn() if state_fn else None
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord]
    best_epoch: int


def train_epoch(model: Model, batches, adam: AdamState, rng: np.random.Generator) -> float:
    params = [t for _, t in model.parameters()]
    total, count = 0.0, 0
    for x, y in batches:
        model.zero_grad()
        loss = cross_entropy(model(x, TRAIN, rng), y)
        if not np.isfinite(loss.data):
            raise NumericError("training loss became non-finite")
        loss.backward()
        adam_step(params, [p.grad for p in params], adam)
        total += loss.item() * len(y)
        count += len(y)
    return total / count


def train(
    model: Model,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    cfg: TrainConfig,
    callback: Callable[[EpochRecord, Model], None] | None = None,
) -> TrainResult:
    """Adam + early stopping on validation loss; restores the best epoch."""
    if not train_set:
        raise DegenerateError("training set is empty")
    if not val_set:
        raise DegenerateError("validation set is empty")
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon)
    for name, t in model.parameters():
        t.name = name
    stopper = EarlyStopping(cfg.patience)
    history: list[EpochRecord] = []

    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        batches = make_batches(train_set, cfg.batch_size, rng)
        train_loss = train_epoch(model, batches, adam, rng)
        val_loss, val_acc = evaluate(model, val_set)
        if not np.isfinite(val_loss):
            raise NumericError(f"validation loss is non-finite at epoch {epoch}")
        record = EpochRecord(epoch, train_loss, val_loss, val_acc, time.perf_counter() - started)
        history.append(record)
        log_.info(
            "epoch %d train_loss=%.4f val_loss=%.4f val_acc=%.4f (%.1fs)",
            epoch, train_loss, val_loss, val_acc, record.seconds,
        )
        if callback is not None:
            callback(record, model)
        if stopper.update(epoch, val_loss, model.state):
            break

    model.load_state(stopper.best_state)
    return TrainResult(model, history, stopper.best_epoch)


def write_history(path: str | os.PathLike, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "val_acc", "seconds"])
        for r in history:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_acc), f"{r.seconds:.3f}"])
