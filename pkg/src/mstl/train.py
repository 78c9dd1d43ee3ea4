"""SGD with classical momentum and the per-stage training loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import ops
from .checkpoint import Checkpoint
from .errors import ConfigError, DataError, NumericError
from .graph import ModelGraph, Task
from .tensor import Tensor

logger = logging.getLogger(__name__)

# Recorded in checkpoint metadata so a run can be replayed bit-for-bit.
PRNG_ALGORITHM = "numpy.PCG64/SeedSequence-v1"


@dataclass
class Hyperparams:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    velocity: Mapping[str, np.ndarray],
    lr: float,
    momentum: float,
    trainable=None,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """One classical-momentum step: ``v <- m*v - lr*g``, ``p <- p + v``.

    Parameters outside ``trainable`` (all, when None) are returned as the
    same array objects and their velocity is left alone.
    """
    new_p, new_v = dict(params), dict(velocity)
    for name, p in params.items():
        if trainable is not None and name not in trainable:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        dtype = p.dtype.type
        v = dtype(momentum) * v - dtype(lr) * g
        updated = p + v
        if not np.all(np.isfinite(updated)):
            raise NumericError(f"sgd_step: non-finite update for parameter {name}")
        new_p[name], new_v[name] = updated.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)
    return new_p, new_v


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    steps: int


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1  # index into ``epochs``

    @property
    def best_val_acc(self) -> float:
        return self.epochs[self.best_epoch].val_acc

    def to_dict(self) -> dict:
        return {"best_epoch": self.best_epoch, "epochs": [asdict(e) for e in self.epochs]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainLog":
        return cls([EpochRecord(**e) for e in d["epochs"]], int(d["best_epoch"]))


def task_loss(prob: Tensor, labels: np.ndarray, task: Task) -> Tensor:
    if task.kind == "binary":
        return ops.bce(prob, labels.reshape(-1, 1))
    return ops.sparse_ce(prob, labels.astype(np.int64))


def predicted_labels(prob: np.ndarray, task: Task, threshold: float = 0.5) -> np.ndarray:
    if task.kind == "binary":
        return (prob.reshape(-1) >= threshold).astype(np.int64)
    return np.argmax(prob, axis=1)


def evaluate_split(graph: ModelGraph, x: np.ndarray, y: np.ndarray, task: Task, batch_size: int = 256):
    """(mean loss, accuracy) in eval mode."""
    prob = graph.predict(x, batch_size)
    loss = task_loss(Tensor(prob), y, task).item()
    acc = float(np.mean(predicted_labels(prob, task) == y))
    return loss, acc


def train_stage(
    graph: ModelGraph,
    train: tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray],
    task,
    hyper: Hyperparams,
    metadata: Mapping | None = None,
    progress: Callable[[EpochRecord], None] | None = None,
) -> tuple[Checkpoint, TrainLog]:
    """Fine-tune ``graph`` in place and keep the best-validation-accuracy epoch.

    On return the graph holds the best epoch's weights; the returned
    checkpoint carries those weights, the velocity at that point and
    ``metadata`` extended with epoch / val_accuracy / seed / prng.
    """
    task = Task.parse(task)
    if graph.task != task:
        raise ConfigError(f"graph head is {graph.task} but the stage task is {task}")
    x_tr, y_tr = train
    x_va, y_va = val
    if len(x_tr) == 0:
        raise DataError("train split is empty")
    if len(x_va) == 0:
        raise DataError("validation split is empty")
    y_tr = np.asarray(y_tr)
    y_va = np.asarray(y_va)

    shuffle_seq, dropout_seq = np.random.SeedSequence(hyper.seed).spawn(2)
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_seq))
    dropout_rng = np.random.Generator(np.random.PCG64(dropout_seq))

    trainable = set(graph.trainable_names())
    velocity = {k: np.zeros_like(graph.params[k].value) for k in trainable}
    log = TrainLog()
    best: Checkpoint | None = None
    best_acc = -1.0
    n = len(x_tr)

    for epoch in range(1, hyper.epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum, correct, steps = 0.0, 0, 0
        for b, start in enumerate(range(0, n, hyper.batch_size)):
            idx = order[start:start + hyper.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            leaves = {k: Tensor(graph.params[k].value, requires_grad=True) for k in trainable}
            try:
                prob = graph.forward(xb, train=True, rng=dropout_rng, params=leaves)
                loss = task_loss(prob, yb, task)
                loss.backward()
                current = {k: graph.params[k].value for k in trainable}
                grads = {k: leaves[k].grad for k in trainable}
                new_p, velocity = sgd_step(current, grads, velocity, hyper.learning_rate, hyper.momentum)
            except NumericError as exc:
                raise NumericError(f"training diverged at epoch {epoch}, batch {b + 1}: {exc}") from None
            for k, v in new_p.items():
                graph.params[k].value = v
            loss_sum += loss.item() * len(idx)
            correct += int(np.sum(predicted_labels(prob.data, task) == yb))
            steps += 1
        val_loss, val_acc = evaluate_split(graph, x_va, y_va, task)
        rec = EpochRecord(epoch, loss_sum / n, correct / n, val_loss, val_acc, steps)
        log.epochs.append(rec)
        if progress is not None:
            progress(rec)
        logger.debug("epoch %d: %s", epoch, rec)
        if val_acc > best_acc:
            best_acc = val_acc
            log.best_epoch = epoch - 1
            meta = dict(metadata or {})
            meta.update({"epoch": epoch, "val_accuracy": val_acc, "seed": hyper.seed,
                         "prng": PRNG_ALGORITHM, "task": str(task)})
            best = Checkpoint.from_graph(graph, velocity, meta)

    for k, v in best.params.items():
        graph.params[k].value = v.copy()
    return best, log
