"""Evaluation, transfer metrics and model-analysis probes."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import nn
from . import rng as rngmod
from .buffer import MemoryBuffer


class UndefinedMetricError(ValueError):
    """Metric needs more tasks (or data) than were supplied."""


# -- accuracy ----------------------------------------------------------------

def accuracy(model: nn.DenseModel, x: np.ndarray, y: np.ndarray, mask=None) -> float:
    """Exact ratio correct/total; ``mask`` restricts the argmax to those classes."""
    if len(y) == 0:
        raise ValueError("cannot score an empty evaluation set")
    return float(np.count_nonzero(nn.predict(model, x, mask) == y) / len(y))


def evaluate(model: nn.DenseModel, stream, upto: int | None = None, task_il: bool | None = None) -> list[float]:
    """Accuracy on each task's test set.

    Class-IL and Domain-IL take the argmax over every logit; Task-IL
    (``task_il=True``, or a task-incremental stream) restricts it to the
    task's own classes.
    """
    task_il = stream.task_il if task_il is None else task_il
    tasks = stream.tasks if upto is None else stream.tasks[: upto + 1]
    row = []
    for task in tasks:
        x, y = stream.test_set(task)
        row.append(accuracy(model, x, y, task.classes if task_il else None))
    return row


@dataclass
class AccuracyMatrix:
    """``matrix[t, i]``: accuracy on task i after training through task t."""

    matrix: np.ndarray
    random_baseline: np.ndarray | None = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError("accuracy matrix must be square")
        if self.random_baseline is not None:
            self.random_baseline = np.asarray(self.random_baseline, dtype=np.float64)

    @property
    def n_tasks(self) -> int:
        return self.matrix.shape[0]

    def final_average(self) -> float:
        return float(self.matrix[-1].mean())

    def bwt(self) -> float:
        return backward_transfer(self.matrix)

    def forgetting(self) -> float:
        return forgetting(self.matrix)

    def fwt(self) -> float:
        if self.random_baseline is None:
            raise UndefinedMetricError("forward transfer needs the random-init baseline")
        return forward_transfer(self.matrix, self.random_baseline)


def _check_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("accuracy matrix must be square")
    if a.shape[0] < 2:
        raise UndefinedMetricError("transfer metrics need at least two tasks")
    return a


def backward_transfer(a) -> float:
    """Mean over earlier tasks of final accuracy minus just-learned accuracy."""
    a = _check_matrix(a)
    t = a.shape[0]
    return float(np.mean([a[t - 1, i] - a[i, i] for i in range(t - 1)]))


def forgetting(a) -> float:
    """Mean over earlier tasks of best accuracy (any checkpoint from its own
    task on) minus final accuracy."""
    a = _check_matrix(a)
    t = a.shape[0]
    return float(np.mean([a[i:, i].max() - a[t - 1, i] for i in range(t - 1)]))


def forward_transfer(a, baseline) -> float:
    """Mean over tasks 1..T-1 of accuracy just before training on them minus
    the random-init accuracy."""
    a = _check_matrix(a)
    b = np.asarray(baseline, dtype=np.float64)
    t = a.shape[0]
    return float(np.mean([a[i - 1, i] - b[i] for i in range(1, t)]))


def random_baseline(stream, n_classes: int, seed: int, n_inits: int = 10,
                    task_il: bool | None = None) -> np.ndarray:
    """Per-task accuracy of freshly initialised models, averaged over inits."""
    task_il = stream.task_il if task_il is None else task_il
    models = [nn.DenseModel.mnist(n_classes, rngmod.stream(seed, f"baseline/init{k}"))
              for k in range(n_inits)]
    out = np.zeros(len(stream.tasks))
    for i, task in enumerate(stream.tasks):
        x, y = stream.test_set(task)
        mask = task.classes if task_il else None
        out[i] = np.mean([accuracy(m, x, y, mask) for m in models])
    return out


# -- calibration -------------------------------------------------------------

@dataclass
class CalibrationBin:
    lower: float
    upper: float
    count: int
    mean_confidence: float
    accuracy: float


@dataclass
class CalibrationReport:
    bins: list[CalibrationBin]
    ece: float

    def reliability_rows(self) -> list[tuple[float, float, float, int]]:
        return [((b.lower + b.upper) / 2, b.mean_confidence, b.accuracy, b.count) for b in self.bins]


def bin_index(confidence: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin ``b`` holds confidences in ``(b/n, (b+1)/n]``; 0 goes to the first bin."""
    idx = np.ceil(np.asarray(confidence) * n_bins).astype(np.int64) - 1
    return np.clip(idx, 0, n_bins - 1)


def calibration(probs: np.ndarray, labels: np.ndarray, n_bins: int = 10) -> CalibrationReport:
    """ECE and reliability bins from predicted class probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise ValueError("ECE needs a nonempty evaluation set")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    idx = bin_index(conf, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=n_bins)
    bins, gaps = [], []
    for b in range(n_bins):
        c = int(counts[b])
        mc = conf_sum[b] / c if c else 0.0
        ac = acc_sum[b] / c if c else 0.0
        bins.append(CalibrationBin(b / n_bins, (b + 1) / n_bins, c, float(mc), float(ac)))
        if c:
            gaps.append(c / n * abs(ac - mc))
    return CalibrationReport(bins, float(math.fsum(gaps)))


def ece(model: nn.DenseModel, x: np.ndarray, y: np.ndarray, n_bins: int = 10) -> CalibrationReport:
    return ece_over(model, [(x, y)], n_bins)


def ece_over(model: nn.DenseModel, chunks: Iterable[tuple[np.ndarray, np.ndarray]],
             n_bins: int = 10) -> CalibrationReport:
    """ECE over an evaluation set supplied as ``(x, y)`` pieces."""
    probs, labels = [], []
    for x, y in chunks:
        probs.append(nn.softmax(nn.forward(model, x)))
        labels.append(np.asarray(y))
    if not probs:
        raise ValueError("ECE needs a nonempty evaluation set")
    return calibration(np.concatenate(probs), np.concatenate(labels), n_bins)


# -- Fisher trace --------------------------------------------------------------

def per_example_sq_grad_norms(model: nn.DenseModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``||grad_theta CE(x_n, y_n)||^2`` for every row, without materialising
    per-example gradients.

    For a dense layer the weight gradient of one example is an outer product,
    whose squared Frobenius norm is ``||input||^2 * ||delta||^2``.
    """
    logits, acts = nn.forward_cached(model, x)
    delta = nn.softmax(logits)
    delta[np.arange(len(y)), y] -= 1.0
    n_layers = len(model.params) // 2
    total = np.zeros(len(y))
    for k in reversed(range(n_layers)):
        a = acts[k]
        d_sq = np.einsum("ij,ij->i", delta, delta)
        total += np.einsum("ij,ij->i", a, a) * d_sq + d_sq
        if k > 0:
            delta = (delta @ model.params[2 * k].T) * (a > 0)
    return total


def fisher_trace(model: nn.DenseModel, x: np.ndarray, y: np.ndarray, chunk: int = 2048) -> float:
    """Trace of the empirical Fisher: mean squared per-example gradient norm."""
    return fisher_trace_over(model, _split(x, y, chunk))


def fisher_trace_over(model: nn.DenseModel, chunks: Iterable[tuple[np.ndarray, np.ndarray]]) -> float:
    """Fisher trace over a dataset supplied as ``(x, y)`` pieces. The sum is
    correctly rounded, so example order does not change the result."""
    parts, n = [], 0
    for x, y in chunks:
        y = np.asarray(y, dtype=np.int64)
        if len(y) == 0:
            continue
        parts.extend(per_example_sq_grad_norms(model, x, y).tolist())
        n += len(y)
    if n == 0:
        raise ValueError("Fisher trace needs at least one example")
    return math.fsum(parts) / n


def _split(x, y, chunk):
    for s in range(0, len(y), chunk):
        yield x[s:s + chunk], np.asarray(y[s:s + chunk])


def trace_from_gradients(grads: np.ndarray) -> float:
    """Trace for explicit per-example flat gradients of shape (N, P)."""
    grads = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    return math.fsum((grads * grads).ravel().tolist()) / grads.shape[0]


# -- flatness ------------------------------------------------------------------

DEFAULT_SIGMAS = (0.0, 0.01, 0.02, 0.05, 0.1, 0.2)


@dataclass
class FlatnessCurve:
    sigmas: list[float]
    mean_loss: list[float]
    n_draws: int = 10


def mean_ce(model: nn.DenseModel, x: np.ndarray, y: np.ndarray, chunk: int = 4096) -> float:
    return mean_ce_over(model, _split(x, y, chunk))


def mean_ce_over(model: nn.DenseModel, chunks: Iterable[tuple[np.ndarray, np.ndarray]]) -> float:
    parts, n = [], 0
    for x, y in chunks:
        loss, _ = nn.cross_entropy(nn.forward(model, x), y)
        parts.append(loss * len(y))
        n += len(y)
    return math.fsum(parts) / n


def flatness_probe(model: nn.DenseModel, x, y=None, sigmas: Sequence[float] = DEFAULT_SIGMAS,
                   n_draws: int = 10, seed: int = 0) -> FlatnessCurve:
    """Average training loss under Gaussian weight noise of growing scale.

    ``x, y`` are arrays, or ``x`` is a zero-argument callable returning a
    fresh iterable of ``(x, y)`` pieces and ``y`` is None.
    """
    sigmas = [float(s) for s in sigmas]
    if not sigmas or sigmas[0] != 0.0:
        raise ValueError("the sigma grid must start at 0")
    chunks = x if y is None else (lambda: _split(x, y, 4096))
    gen = rngmod.stream(seed, "probe/flatness")
    curve = [mean_ce_over(model, chunks())]
    for sigma in sigmas[1:]:
        losses = [mean_ce_over(nn.perturb(model, sigma, gen), chunks()) for _ in range(n_draws)]
        curve.append(float(np.mean(losses)))
    return FlatnessCurve(sigmas, curve, n_draws)


# -- buffer probes -------------------------------------------------------------

def train_supervised(model: nn.DenseModel, x: np.ndarray, y: np.ndarray, epochs: int,
                     batch_size: int, lr: float, gen: np.random.Generator) -> nn.DenseModel:
    spec = nn.LossSpec("cross_entropy")
    for _ in range(epochs):
        order = gen.permutation(len(y))
        for s in range(0, len(y), batch_size):
            idx = order[s:s + batch_size]
            _, g = nn.loss_and_grad(model, x[idx], spec, y[idx])
            nn.sgd_step(model, g, lr)
    return model


def train_on_buffer(buffer: MemoryBuffer, n_classes: int, epochs: int, batch_size: int,
                    lr: float, seed: int = 0) -> nn.DenseModel:
    """A fresh network trained on the buffer's (input, label) pairs only."""
    gen = rngmod.stream(seed, "probe/retrain")
    model = nn.DenseModel.mnist(n_classes, rngmod.stream(seed, "probe/retrain/init"))
    if len(buffer):
        if buffer.labels is None:
            raise ValueError("buffer has no labels; retraining is unsupported")
        train_supervised(model, buffer.inputs[: len(buffer)], buffer.labels[: len(buffer)],
                         epochs, batch_size, lr, gen)
    return model


def buffer_retrain_probe(buffer: MemoryBuffer, test_sets: Iterable[tuple[np.ndarray, np.ndarray]],
                         n_classes: int, epochs: int, batch_size: int, lr: float,
                         seed: int = 0) -> float:
    """Train a fresh network on the buffer alone; mean accuracy over the test sets."""
    model = train_on_buffer(buffer, n_classes, epochs, batch_size, lr, seed)
    return float(np.mean([accuracy(model, x, y) for x, y in test_sets]))


@dataclass
class FinetuneResult:
    before: float
    after: float
    n_finetune: int
    n_eval: int


def buffer_finetune_probe(model: nn.DenseModel, x: np.ndarray, y: np.ndarray, k: int = 10,
                          epochs: int = 5, lr: float = 0.01, batch_size: int = 10,
                          seed: int = 0, mask=None) -> FinetuneResult:
    """Fine-tune a copy on ``k`` test examples per class of one task and score
    the rest of that task's test data. ``epochs=0`` leaves the model as is.
    When ``k`` covers every example the fine-tuning set itself is scored."""
    gen = rngmod.stream(seed, "probe/finetune")
    y = np.asarray(y)
    chosen = []
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        if members.size < k:
            raise ValueError(f"class {c} has {members.size} test examples, fewer than k={k}")
        chosen.append(gen.choice(members, size=k, replace=False))
    pick = np.sort(np.concatenate(chosen))
    rest = np.setdiff1d(np.arange(len(y)), pick)
    eval_idx = rest if rest.size else pick
    before = accuracy(model, x[eval_idx], y[eval_idx], mask)
    tuned = train_supervised(model.copy(), x[pick], y[pick], epochs, batch_size, lr, gen)
    after = accuracy(tuned, x[eval_idx], y[eval_idx], mask)
    return FinetuneResult(before, after, int(pick.size), int(eval_idx.size))


# -- export --------------------------------------------------------------------

CSV_FIELDS = ("method", "setting", "buffer", "seed", "metric", "value")


def write_metrics_csv(path, rows: Iterable[dict]) -> None:
    """One row per (method, setting, buffer, seed, metric)."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in CSV_FIELDS})


def write_curve(path, columns: dict[str, Sequence[float]]) -> None:
    """Whitespace-separated columns with a ``#`` header, readable by gnuplot."""
    names = list(columns)
    length = len(columns[names[0]]) if names else 0
    with open(path, "w") as fh:
        fh.write("# " + " ".join(names) + "\n")
        for i in range(length):
            fh.write(" ".join(repr(float(columns[n][i])) for n in names) + "\n")


def write_flatness_curve(path, curve: FlatnessCurve) -> None:
    write_curve(path, {"sigma": curve.sigmas, "mean_loss": curve.mean_loss})


def write_reliability(path, report: CalibrationReport) -> None:
    rows = report.reliability_rows()
    write_curve(path, {
        "bin_center": [r[0] for r in rows],
        "confidence": [r[1] for r in rows],
        "accuracy": [r[2] for r in rows],
        "count": [r[3] for r in rows],
    })
