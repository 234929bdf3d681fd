"""Adam, losses, metrics and the partitioned training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError
from .graph import MULTICLASS, MULTILABEL, Graph, NodeLabels, random_partition
from .layers import Network, network_forward
from .tensor import Tensor, make_op

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)

# SeedSequence stream ids derived from the run seed
_STREAM_SPLIT, _STREAM_PARTITION, _STREAM_DROPOUT, _STREAM_EVAL = 1, 2, 3, 4


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: list[Tensor]) -> None:
    """One bias-corrected Adam update, then zero the gradients."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError(f"optimizer tracks {len(state.m)} parameters, got {len(params)}")
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name or '?'} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, p in enumerate(params):
        g = p.grad
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)
        p.zero_grad()


# ---------------------------------------------------------------------------
# losses


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy on raw logits."""
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"labels {y.shape} vs logits {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("binary labels must be 0 or 1")
    x = logits.data
    n = x.size
    loss = np.sum(np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))) / n
    return make_op("bce_with_logits", np.array(loss), (logits,), lambda g: (g * (_sigmoid(x) - y) / n,))


def softmax_cross_entropy(logits: Tensor, ids) -> Tensor:
    """Mean negative log-softmax of the true class."""
    ids = np.asarray(ids, dtype=np.int64)
    x = logits.data
    if x.ndim != 2 or ids.shape != (x.shape[0],):
        raise ShapeError(f"class ids {ids.shape} vs logits {x.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[1]):
        raise ValueError(f"class ids must lie in [0, {x.shape[1]})")
    n = x.shape[0]
    shift = x.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(x - shift), axis=1, keepdims=True)) + shift
    rows = np.arange(n)
    loss = np.sum(lse[:, 0] - x[rows, ids]) / n

    def bw(g):
        p = np.exp(x - lse)
        p[rows, ids] -= 1.0
        return (g * p / n,)

    return make_op("softmax_cross_entropy", np.array(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# metrics


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the average rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    n = x.size
    boundaries = np.flatnonzero(np.diff(xs) != 0) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [n]])
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(n)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def roc_auc(scores, labels) -> float:
    """Mean per-column Mann-Whitney AUC, skipping columns without both classes."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    if s.shape != y.shape:
        raise ShapeError(f"scores {s.shape} vs labels {y.shape}")
    aucs = []
    for t in range(s.shape[1]):
        pos = y[:, t] == 1
        n_pos = int(pos.sum())
        n_neg = y.shape[0] - n_pos
        if n_pos == 0 or n_neg == 0:
            continue
        r = midranks(s[:, t])
        u = r[pos].sum() - n_pos * (n_pos + 1) / 2.0
        aucs.append(u / (n_pos * n_neg))
    if not aucs:
        raise ValueError("no label column contains both classes")
    return float(np.sum(aucs) / len(aucs))


def accuracy(logits, ids) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the id."""
    x = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    ids = np.asarray(ids)
    if x.shape[0] == 0:
        return 0.0
    return float(np.mean(np.argmax(x, axis=1) == ids))


@dataclass(frozen=True)
class MetricSpec:
    kind: str

    @classmethod
    def for_task(cls, task: str) -> "MetricSpec":
        return cls("roc_auc_multilabel" if task == MULTILABEL else "accuracy_multiclass")

    def __call__(self, logits: np.ndarray, targets: np.ndarray) -> float:
        if self.kind == "roc_auc_multilabel":
            return roc_auc(logits, targets)
        return accuracy(logits, targets)


def task_loss(logits: Tensor, labels: NodeLabels) -> Tensor:
    if labels.kind == MULTILABEL:
        return bce_with_logits(logits, labels.values)
    return softmax_cross_entropy(logits, labels.values)


# ---------------------------------------------------------------------------
# splits, evaluation, training


def _stream(seed, stream: int, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), stream, *extra])


def node_split(num_nodes: int, seed, fractions=SPLIT_FRACTIONS) -> dict[str, np.ndarray]:
    """Seeded disjoint train/valid/test node ids (each sorted)."""
    rng = np.random.default_rng(_stream(seed, _STREAM_SPLIT))
    perm = rng.permutation(num_nodes)
    n_train = int(round(fractions[0] * num_nodes))
    n_valid = int(round(fractions[1] * num_nodes))
    return {
        "train": np.sort(perm[:n_train]),
        "valid": np.sort(perm[n_train:n_train + n_valid]),
        "test": np.sort(perm[n_train + n_valid:]),
    }


def evaluate(net: Network, g: Graph, labels: NodeLabels, nodes: np.ndarray, partitions: int = 1, seed=0) -> float:
    """Metric over ``nodes`` with logits from an eval-mode pass per partition."""
    if labels.kind != net.config.task:
        raise ValidationError(f"labels are {labels.kind} but the network head is {net.config.task}")
    metric = MetricSpec.for_task(net.config.task)
    logits = np.zeros((g.num_nodes, net.config.out_dim))
    with T.no_grad():
        if partitions == 1:
            logits = network_forward(net, g, training=False).data
        else:
            part = random_partition(g, partitions, _stream(seed, _STREAM_EVAL))
            for ids, sub in zip(part.parts, part.subgraphs):
                logits[ids] = network_forward(net, sub, training=False).data
    return metric(logits[nodes], labels.values[nodes])


@dataclass
class TrainRun:
    """Epoch-indexed traces; ``params`` maps ``layerL.{beta|p|s|y}`` to values."""

    seed: int
    config: dict
    epochs: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    metric: list[float] = field(default_factory=list)
    params: dict[str, list[float]] = field(default_factory=dict)

    def to_csv(self, path) -> None:
        names = list(self.params)
        lines = [",".join(["epoch", "loss", "metric", *names])]
        for i, ep in enumerate(self.epochs):
            row = [str(ep), repr(self.loss[i]), repr(self.metric[i])]
            row += [repr(self.params[k][i]) for k in names]
            lines.append(",".join(row))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def train(
    net: Network,
    g: Graph,
    labels: NodeLabels,
    epochs: int,
    partitions: int = 1,
    seed: int = 0,
    log: Callable[[int, dict], None] | None = None,
    lr: float = 0.01,
    train_nodes: np.ndarray | None = None,
    eval_partitions: int = 1,
    config: dict | None = None,
    optimizer: AdamState | None = None,
) -> TrainRun:
    """Mini-batch training over a fresh random partition every epoch.

    Each epoch takes one Adam step per part (parts without training nodes
    are skipped), then records the mean step loss, the training-node metric
    from :func:`evaluate`, and every learnable aggregation/MsgNorm scalar.
    """
    if labels.kind != net.config.task:
        raise ValidationError(f"labels are {labels.kind} but the network head is {net.config.task}")
    if train_nodes is None:
        train_nodes = np.arange(g.num_nodes)
    in_train = np.zeros(g.num_nodes, dtype=bool)
    in_train[train_nodes] = True
    params = net.parameters()
    scalars = net.learnable_scalars()
    state = optimizer if optimizer is not None else AdamState(lr=lr)
    run = TrainRun(seed=seed, config=dict(config or {}), params={k: [] for k in scalars})
    drop_rng = np.random.default_rng(_stream(seed, _STREAM_DROPOUT))

    for epoch in range(1, epochs + 1):
        if partitions == 1:
            batches = [(np.arange(g.num_nodes), g)]
        else:
            part = random_partition(g, partitions, _stream(seed, _STREAM_PARTITION, epoch))
            batches = list(zip(part.parts, part.subgraphs))
        losses = []
        for ids, sub in batches:
            local = np.flatnonzero(in_train[ids])
            if local.size == 0:
                continue
            logits = network_forward(net, sub, training=True, rng=drop_rng)
            loss = task_loss(T.gather_rows(logits, local), labels.subset(ids[local]))
            T.backward(loss)
            adam_step(state, params)
            losses.append(loss.item())
        run.epochs.append(epoch)
        run.loss.append(float(np.mean(losses)) if losses else float("nan"))
        run.metric.append(evaluate(net, g, labels, train_nodes, eval_partitions, seed))
        for k, s in scalars.items():
            run.params[k].append(s.value)
        if log is not None:
            log(epoch, {"loss": run.loss[-1], "metric": run.metric[-1]})
    return run
