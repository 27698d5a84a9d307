"""Linear heads over frozen representations, an MLP comparator, and metrics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Task
from .ndcore import (Network, ShapeError, cross_entropy, fit_supervised, forward, init_network,
                     load_checkpoint, mlp, save_checkpoint, squared_error)


@dataclass
class HeadConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-2
    seed: int = 0


@dataclass
class Head:
    """``net`` maps inputs to K logits, or to one standardized regression output."""

    net: Network
    task: Task
    target_mean: float = 0.0
    target_std: float = 1.0


def _fit(net: Network, x: np.ndarray, y: np.ndarray, task: Task, cfg: HeadConfig,
         rng: np.random.Generator) -> Head:
    if task.is_classification:
        fit_supervised(net, x, y, cross_entropy, epochs=cfg.epochs, batch_size=cfg.batch_size,
                       lr=cfg.lr, rng=rng)
        return Head(net, task)
    y = np.asarray(y, dtype=np.float64)
    mean, std = float(y.mean()), float(y.std()) or 1.0
    fit_supervised(net, x, ((y - mean) / std)[:, None], squared_error, epochs=cfg.epochs,
                   batch_size=cfg.batch_size, lr=cfg.lr, rng=rng)
    return Head(net, task, mean, std)


def _check_targets(y: np.ndarray, task: Task) -> None:
    if len(y) < 2:
        raise ValueError("need at least two training rows")
    if task.is_classification and len(np.unique(y)) < 2:
        raise ValueError("classification head needs at least two classes in its training data")


def train_head(reps: np.ndarray, targets: np.ndarray, task: Task,
               cfg: HeadConfig | None = None) -> Head:
    """One dense layer trained on frozen representations."""
    cfg = cfg or HeadConfig()
    _check_targets(targets, task)
    rng = np.random.default_rng(cfg.seed)
    out = task.n_classes if task.is_classification else 1
    net = init_network([reps.shape[1], out], ["identity"], rng)
    return _fit(net, reps, targets, task, cfg, rng)


def train_mlp(x: np.ndarray, targets: np.ndarray, task: Task, hidden: int = 256,
              cfg: HeadConfig | None = None) -> Head:
    """Plain supervised MLP comparator on raw features."""
    cfg = cfg or HeadConfig(epochs=50, lr=1e-3)
    _check_targets(targets, task)
    rng = np.random.default_rng(cfg.seed)
    out = task.n_classes if task.is_classification else 1
    return _fit(mlp(x.shape[1], [hidden, hidden], out, rng), x, targets, task, cfg, rng)


def predict(head: Head, reps: np.ndarray) -> np.ndarray:
    if reps.ndim != 2 or reps.shape[1] != head.net.in_dim:
        raise ShapeError(f"expected inputs of width {head.net.in_dim}, got {reps.shape}")
    out = forward(head.net, reps)[0]
    if head.task.is_classification:
        return out.argmax(axis=1)
    return out[:, 0] * head.target_std + head.target_mean


def f1(preds, labels, n_classes: int | None = None) -> float:
    """Binary F1 (positive class 1) when K = 2, else macro F1 over classes
    present in either ``preds`` or ``labels``."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    if preds.size == 0:
        raise ValueError("F1 of an empty set")
    k = n_classes or int(max(preds.max(), labels.max())) + 1
    if k <= 2:
        return _class_f1(preds, labels, 1)
    present = np.union1d(np.unique(preds), np.unique(labels))
    return float(np.mean([_class_f1(preds, labels, c) for c in present]))


def _class_f1(preds: np.ndarray, labels: np.ndarray, c: int) -> float:
    tp = np.sum((preds == c) & (labels == c))
    fp = np.sum((preds == c) & (labels != c))
    fn = np.sum((preds != c) & (labels == c))
    denom = 2 * tp + fp + fn
    return float(2 * tp / denom) if denom else 0.0


def rmse(preds, targets) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError("preds and targets differ in length")
    if preds.size == 0:
        raise ValueError("RMSE of an empty set")
    return float(np.sqrt(np.mean((preds - targets) ** 2)))


@dataclass
class EvalResult:
    metric: str  # "F1" | "RMSE"
    value: float
    n: int
    split: str  # "in" | "ood"
    model: str  # "M^a" | "M^b" | "baseline"

    def __post_init__(self):
        if self.metric == "F1" and not 0.0 <= self.value <= 1.0:
            raise ValueError(f"F1 outside [0, 1]: {self.value}")
        if self.metric == "RMSE" and self.value < 0:
            raise ValueError(f"negative RMSE: {self.value}")


def evaluate(head: Head, inputs: np.ndarray, targets: np.ndarray, split: str, model: str) -> EvalResult:
    preds = predict(head, inputs)
    if head.task.is_classification:
        value = f1(preds, targets, head.task.n_classes)
        metric = "F1"
    else:
        value, metric = rmse(preds, targets), "RMSE"
    return EvalResult(metric, value, len(targets), split, model)


def save_head(path: str | Path, head: Head) -> None:
    save_checkpoint(path, {"head": head.net},
                    {"kind": "head", "task": head.task.kind, "n_classes": head.task.n_classes,
                     "target_mean": head.target_mean, "target_std": head.target_std})


def load_head(path: str | Path) -> Head:
    nets, header, _ = load_checkpoint(path)
    if header.get("kind") != "head":
        raise ValueError(f"{path} is not a head checkpoint")
    return Head(nets["head"], Task(header["task"], header["n_classes"]),
                header["target_mean"], header["target_std"])
