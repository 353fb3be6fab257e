"""Sequential model graph, cross-entropy training with Adam/SGD, evaluation
and fine-tuning."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from ..dataset import EpochSet, SplitPair, one_hot
from .layers import (Conv2D, Dense, Dropout, Flatten, Layer, LSTM, MaxPool2D, ReLU, SequenceFlatten,
                     ShapeError, Softmax, BatchNorm, layer_from_config)


class DivergenceError(ArithmeticError):
    pass


class Optimizer(str, Enum):
    ADAM = "adam"
    SGD = "sgd"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 50
    optimizer: Optimizer = Optimizer.ADAM
    loss: str = "categorical_crossentropy"
    seed: int = 0
    patience: int | None = 10      # early stop on train loss; None disables
    min_delta: float = 1e-6        # smaller drops are float32 summation noise, not improvement
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.loss != "categorical_crossentropy":
            raise ValueError(f"unsupported loss {self.loss!r}")
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))


class ModelGraph:
    """Ordered layers, their parameters, head size, history and seed."""

    def __init__(self, layers, input_shape, n_classes: int, seed: int = 0, dtype=np.float32):
        self.layers: list[Layer] = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.n_classes = int(n_classes)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.history: list[dict] = []
        self.provenance: list[dict] = []
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0]))
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.build(shape, rng, self.dtype)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer!r}) with input {shape}: {exc}") from None
        if shape != (self.n_classes,):
            raise ShapeError(f"model output shape {shape} does not match head size {self.n_classes}")

    # -- introspection ----------------------------------------------------
    def architecture(self) -> dict:
        return {"input_shape": list(self.input_shape), "n_classes": self.n_classes, "seed": self.seed,
                "layers": [l.config() for l in self.layers]}

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield (i, name), layer.params[name]

    def named_state(self):
        for i, layer in enumerate(self.layers):
            for name in sorted(getattr(layer, "state", {})):
                yield (i, name), layer.state[name]

    def n_params(self) -> int:
        return int(sum(p.size for _, p in self.named_params()))

    def param_hash(self) -> str:
        h = hashlib.sha256(json.dumps(self.architecture(), sort_keys=True).encode())
        for _, p in self.named_params():
            h.update(np.ascontiguousarray(p).astype(p.dtype.newbyteorder("<")).tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "ModelGraph":
        """Copy with parameters cast to ``dtype`` (float64 mirror for gradient checks)."""
        m = self.copy()
        m.dtype = np.dtype(dtype)
        for layer in m.layers:
            layer.params = {k: v.astype(m.dtype) for k, v in layer.params.items()}
            if hasattr(layer, "state"):
                layer.state = {k: v.astype(m.dtype) for k, v in layer.state.items()}
        return m

    def summary(self) -> str:
        lines, shape = [], self.input_shape
        for layer in self.layers:
            lines.append(f"{layer!r:<48} {str(shape):>18} -> {layer.output_shape}")
            shape = layer.output_shape
        lines.append(f"parameters: {self.n_params()}")
        return "\n".join(lines)

    # -- passes -------------------------------------------------------------
    def _check_input(self, x):
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"input batch shape {x.shape} does not match model input (N,)+{self.input_shape}; "
                             f"first layer {self.layers[0]!r} expects {self.input_shape}")

    def logits(self, x, train_mode=False, rng=None):
        x = np.asarray(x, dtype=self.dtype)
        self._check_input(x)
        body = self.layers[:-1] if isinstance(self.layers[-1], Softmax) else self.layers
        for layer in body:
            x = layer.forward(x, train_mode, rng)
        return x

    def forward(self, x, train_mode: bool = False, rng=None):
        z = self.logits(x, train_mode, rng)
        if isinstance(self.layers[-1], Softmax):
            return self.layers[-1].forward(z)
        return z

    def backward_from_logits(self, grad):
        body = self.layers[:-1] if isinstance(self.layers[-1], Softmax) else self.layers
        for layer in reversed(body):
            grad = layer.backward(grad)
        return grad

    def __repr__(self):
        return f"ModelGraph({len(self.layers)} layers, input={self.input_shape}, classes={self.n_classes})"


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(probs_or_logp, targets, from_log=False) -> float:
    logp = probs_or_logp if from_log else np.log(np.clip(probs_or_logp, 1e-300, None))
    return float(-(targets * logp).sum(axis=-1).mean())


def loss_and_grads(model: ModelGraph, x, targets, train_mode=True, rng=None):
    """Mean categorical cross-entropy and fills ``layer.grads`` for every layer.

    Softmax and cross-entropy are fused: d loss / d logits = (p - y) / N.
    Returns (loss, probabilities, gradient w.r.t. input).
    """
    targets = np.asarray(targets, dtype=model.dtype)
    z = model.logits(x, train_mode, rng)
    if z.shape != targets.shape:
        raise ShapeError(f"targets shape {targets.shape} does not match model output {z.shape}")
    logp = _log_softmax(z)
    p = np.exp(logp)
    loss = float(-(targets * logp).sum(axis=-1).mean())
    dx = model.backward_from_logits(((p - targets) / z.shape[0]).astype(model.dtype))
    return loss, p, dx


def backward(model: ModelGraph, batch, one_hot_targets, train_mode=False, rng=None) -> dict:
    """Parameter gradients keyed by (layer index, name)."""
    loss_and_grads(model, batch, one_hot_targets, train_mode, rng)
    return {(i, n): model.layers[i].grads[n] for (i, n), _ in model.named_params()}


def forward(model: ModelGraph, batch, train_mode=False, rng=None):
    return model.forward(batch, train_mode, rng)


# ---------------------------------------------------------------------------
# data helpers
# ---------------------------------------------------------------------------

def as_image_batch(data) -> np.ndarray:
    """epochs x time x channels -> epochs x time x channels x 1."""
    data = data.data if isinstance(data, EpochSet) else np.asarray(data)
    if data.ndim == 3:
        data = data[..., None]
    return data


def _xy(epochs, n_classes):
    if isinstance(epochs, EpochSet):
        return as_image_batch(epochs), one_hot(epochs.labels, n_classes), epochs.labels
    x, labels = epochs
    labels = np.asarray(labels)
    return as_image_batch(x), one_hot(labels, n_classes), labels


def predict_proba(model: ModelGraph, x, chunk: int = 64) -> np.ndarray:
    x = as_image_batch(x)
    return np.concatenate([model.forward(x[i:i + chunk]) for i in range(0, len(x), chunk)], axis=0) \
        if len(x) else np.zeros((0, model.n_classes), model.dtype)


def evaluate(model: ModelGraph, test, chunk: int = 64) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) on an EpochSet or an (x, labels) pair."""
    x, y, labels = _xy(test, model.n_classes)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    logp = np.concatenate([_log_softmax(model.logits(x[i:i + chunk])) for i in range(0, len(x), chunk)])
    loss = float(-(y * logp).sum(axis=-1).mean())
    acc = float((logp.argmax(axis=1) == labels).mean())
    return loss, acc


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class _Adam:
    def __init__(self, model, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p) for k, p in model.named_params()}
        self.v = {k: np.zeros_like(p) for k, p in model.named_params()}

    def step(self, model):
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        for (i, n), p in model.named_params():
            g = model.layers[i].grads[n]
            m, v = self.m[(i, n)], self.v[(i, n)]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p -= (c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)).astype(p.dtype)


class _SGD:
    def __init__(self, model, cfg):
        self.cfg = cfg

    def step(self, model):
        for (i, n), p in model.named_params():
            p -= (self.cfg.lr * model.layers[i].grads[n]).astype(p.dtype)


def _streams(seed: int):
    ss = np.random.SeedSequence([int(seed), 1])
    shuffle, dropout = ss.spawn(2)
    return np.random.default_rng(shuffle), np.random.default_rng(dropout)


def train(model: ModelGraph, split: SplitPair | tuple, cfg: TrainConfig = TrainConfig(),
          phase: str = "train") -> ModelGraph:
    """Train in place and return the model. ``split`` is a SplitPair or a
    ((x_train, y_train), (x_test, y_test)) pair; labels are class indices."""
    train_set, test_set = (split.train, split.test) if isinstance(split, SplitPair) else split
    x, y, labels = _xy(train_set, model.n_classes)
    if len(labels) == 0:
        raise ValueError("empty training set")
    if labels.max() >= model.n_classes:
        raise ValueError(f"label {labels.max()} does not fit a {model.n_classes}-class head")
    has_test = test_set is not None and len(_xy(test_set, model.n_classes)[2]) > 0
    x = x.astype(model.dtype, copy=False)
    opt = _Adam(model, cfg) if cfg.optimizer == Optimizer.ADAM else _SGD(model, cfg)
    shuffle_rng, drop_rng = _streams(cfg.seed)
    best, stale = np.inf, 0
    start = len(model.history)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(x))
        tot_loss, correct = 0.0, 0
        for b in range(0, len(x), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            loss, p, _ = loss_and_grads(model, x[idx], y[idx], True, drop_rng)
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became {loss} at epoch {epoch}, batch {b // cfg.batch_size} "
                                      f"(lr={cfg.lr}, optimizer={cfg.optimizer.value})")
            tot_loss += loss * len(idx)
            correct += int((p.argmax(axis=1) == labels[idx]).sum())
            opt.step(model)
        bad = next((k for k, v in model.named_params() if not np.isfinite(v).all()), None)
        if bad is not None:
            raise DivergenceError(f"parameter {bad} became non-finite at epoch {epoch} "
                                  f"(lr={cfg.lr}, optimizer={cfg.optimizer.value})")
        rec = {"epoch": start + epoch, "phase": phase, "train_loss": tot_loss / len(x),
               "train_acc": correct / len(x)}
        if has_test:
            rec["test_loss"], rec["test_acc"] = evaluate(model, test_set)
        model.history.append(rec)
        if cfg.patience is not None:
            if rec["train_loss"] < best - cfg.min_delta:
                best, stale = rec["train_loss"], 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    return model


def fine_tune(pretrained: ModelGraph, new_split: SplitPair | tuple, cfg: TrainConfig = TrainConfig()) -> ModelGraph:
    """Continue training a copy of ``pretrained`` on a new participant's data."""
    train_set = new_split.train if isinstance(new_split, SplitPair) else new_split[0]
    if isinstance(train_set, EpochSet):
        x, labels = as_image_batch(train_set), train_set.labels
    else:
        x, labels = as_image_batch(train_set[0]), np.asarray(train_set[1])
    if tuple(x.shape[1:]) != pretrained.input_shape:
        raise ShapeError(f"new data shape {x.shape[1:]} does not match pretrained input {pretrained.input_shape}")
    if len(labels) and labels.max() >= pretrained.n_classes:
        raise ShapeError(f"new task needs more than the pretrained {pretrained.n_classes} classes")
    model = pretrained.copy()
    model.provenance.append({"source_hash": pretrained.param_hash(), "source_epochs": len(pretrained.history)})
    return train(model, new_split, cfg, phase="finetune:" + model.provenance[-1]["source_hash"][:12])


HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "test_acc")


def write_history(model: ModelGraph, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in model.history:
            w.writerow([r["epoch"], f"{r['train_loss']:.6f}", f"{r['train_acc']:.6f}",
                        f"{r['test_acc']:.6f}" if "test_acc" in r else ""])
    return path


# ---------------------------------------------------------------------------
# reference architectures
# ---------------------------------------------------------------------------

def cnn_trunk(filters=8, kernel=5, batchnorm=False, padding="same"):
    layers = [Conv2D(filters, kernel, kernel, padding=padding)]
    layers += [BatchNorm()] if batchnorm else []
    layers += [ReLU(), MaxPool2D(2, 2), Conv2D(2 * filters, 3, 3, padding=padding)]
    layers += [BatchNorm()] if batchnorm else []
    layers += [ReLU(), MaxPool2D(2, 2)]
    return layers


def build_cnn(input_shape, n_classes, filters=8, kernel=5, dense_units=64, dropout=0.3,
              batchnorm=False, seed=0, dtype=np.float32) -> ModelGraph:
    layers = cnn_trunk(filters, kernel, batchnorm) + [
        Flatten(), Dropout(dropout), Dense(dense_units), ReLU(), Dense(n_classes), Softmax()]
    return ModelGraph(layers, input_shape, n_classes, seed, dtype)


def build_cnn_lstm(input_shape, n_classes, filters=8, kernel=5, lstm_units=32, dropout=0.0,
                   batchnorm=False, seed=0, dtype=np.float32) -> ModelGraph:
    layers = cnn_trunk(filters, kernel, batchnorm) + [SequenceFlatten()]
    layers += [Dropout(dropout)] if dropout > 0 else []
    layers += [LSTM(lstm_units), Dense(n_classes), Softmax()]
    return ModelGraph(layers, input_shape, n_classes, seed, dtype)


FAMILIES = {"cnn": build_cnn, "cnn_lstm": build_cnn_lstm}


def build_model(family: str, input_shape, n_classes, seed=0, **kw) -> ModelGraph:
    try:
        builder = FAMILIES[family]
    except KeyError:
        raise ValueError(f"unknown architecture family {family!r}; choose from {sorted(FAMILIES)}") from None
    return builder(input_shape, n_classes, seed=seed, **kw)


def model_from_architecture(arch: dict, dtype=np.float32) -> ModelGraph:
    layers = [layer_from_config(c) for c in arch["layers"]]
    return ModelGraph(layers, arch["input_shape"], arch["n_classes"], arch.get("seed", 0), dtype)
