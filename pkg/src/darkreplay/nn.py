"""Dense ReLU network with exact backpropagation, written against numpy.

Parameters are kept as a flat list ``[W1, b1, W2, b2, ...]`` where each
``W`` has shape ``(fan_in, fan_out)``; gradients use the same layout, so a
gradient is just a list of arrays that can be added, scaled and flattened.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

INPUT_DIM = 784
HIDDEN_DIM = 100

Gradients = list  # list[np.ndarray], same layout as DenseModel.params


class ShapeError(ValueError):
    """Raised when array shapes do not fit the model or each other."""


@dataclass
class DenseModel:
    """Fully connected classifier: ReLU on hidden layers, identity output."""

    params: list[np.ndarray]

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator) -> "DenseModel":
        """He-uniform weights ``U(-sqrt(6/fan_in), +sqrt(6/fan_in))``, zero biases."""
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / fan_in)
            params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            params.append(np.zeros(fan_out))
        return cls(params)

    @classmethod
    def mnist(cls, n_classes: int, rng: np.random.Generator) -> "DenseModel":
        return cls.init((INPUT_DIM, HIDDEN_DIM, HIDDEN_DIM, n_classes), rng)

    @property
    def sizes(self) -> tuple[int, ...]:
        ws = self.params[0::2]
        return (ws[0].shape[0],) + tuple(w.shape[1] for w in ws)

    @property
    def n_classes(self) -> int:
        return self.params[-1].shape[0]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "DenseModel":
        return DenseModel([p.copy() for p in self.params])

    def flat(self) -> np.ndarray:
        return flatten(self.params)

    def load_flat(self, vector: np.ndarray) -> None:
        self.params = unflatten(vector, self.params)


@dataclass
class LossSpec:
    """Which loss ``backward`` differentiates.

    ``cross_entropy`` needs labels, ``logit_mse`` needs stored logits and
    ``weighted_sum`` is ``alpha * logit_mse + beta * cross_entropy`` on the
    same inputs.
    """

    kind: str = "cross_entropy"
    alpha: float = 0.0
    beta: float = 0.0
    mask: Sequence[int] | None = field(default=None)

    def __post_init__(self):
        if self.kind not in ("cross_entropy", "logit_mse", "weighted_sum"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


def _check_input(model: DenseModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.params[0].shape[0]:
        raise ShapeError(
            f"input of shape {x.shape} does not fit a model expecting "
            f"{model.params[0].shape[0]} features"
        )
    return x


def forward(model: DenseModel, x: np.ndarray) -> np.ndarray:
    """Pre-softmax logits for a batch ``x`` of shape ``(B, in_dim)``."""
    return forward_cached(model, x)[0]


def forward_cached(model: DenseModel, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Logits plus the per-layer inputs needed by :func:`backprop`."""
    h = _check_input(model, x)
    acts = [h]
    n_layers = len(model.params) // 2
    for k in range(n_layers):
        h = h @ model.params[2 * k] + model.params[2 * k + 1]
        if k < n_layers - 1:
            h = np.maximum(h, 0.0)
            acts.append(h)
    return h, acts


def backprop(model: DenseModel, acts: list[np.ndarray], dlogits: np.ndarray) -> Gradients:
    """Gradient of a scalar loss w.r.t. every parameter, given dLoss/dlogits."""
    n_layers = len(model.params) // 2
    grads: list[np.ndarray] = [None] * len(model.params)  # type: ignore[list-item]
    delta = dlogits
    for k in reversed(range(n_layers)):
        a = acts[k]
        grads[2 * k] = a.T @ delta
        grads[2 * k + 1] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ model.params[2 * k].T) * (a > 0)
    return grads


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction; works on vectors or matrices."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(
    logits: np.ndarray, labels: np.ndarray, mask: Sequence[int] | None = None
) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``.

    With ``mask`` the softmax only runs over the listed classes; the other
    logits receive zero gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError("label outside the model's classes")
    rows = np.arange(n)
    if mask is None:
        logp = log_softmax(logits)
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return float(-logp[rows, labels].mean()), grad / n

    mask = np.asarray(sorted(set(int(m) for m in mask)), dtype=np.int64)
    pos = np.full(c, -1)
    pos[mask] = np.arange(mask.size)
    local = pos[labels]
    if np.any(local < 0):
        raise ValueError("label outside the class mask")
    logp = log_softmax(logits[:, mask])
    sub = np.exp(logp)
    sub[rows, local] -= 1.0
    grad = np.zeros_like(logits)
    grad[:, mask] = sub / n
    return float(-logp[rows, local].mean()), grad


def logit_mse(stored: np.ndarray, current: np.ndarray) -> tuple[float, np.ndarray]:
    """Squared euclidean distance between logit rows, summed over classes and
    averaged over the batch; gradient is taken w.r.t. ``current``."""
    stored = np.asarray(stored, dtype=np.float64)
    current = np.asarray(current, dtype=np.float64)
    if stored.shape != current.shape:
        raise ShapeError(f"logit shapes differ: {stored.shape} vs {current.shape}")
    diff = current - stored
    n = diff.shape[0]
    return float((diff * diff).sum() / n), 2.0 * diff / n


def loss_and_grad(
    model: DenseModel,
    x: np.ndarray,
    spec: LossSpec,
    labels: np.ndarray | None = None,
    stored_logits: np.ndarray | None = None,
) -> tuple[float, Gradients]:
    logits, acts = forward_cached(model, x)
    if spec.kind == "cross_entropy":
        loss, dlogits = cross_entropy(logits, labels, spec.mask)
    elif spec.kind == "logit_mse":
        loss, dlogits = logit_mse(stored_logits, logits)
    else:
        l_mse, g_mse = logit_mse(stored_logits, logits)
        l_ce, g_ce = cross_entropy(logits, labels, spec.mask)
        loss = spec.alpha * l_mse + spec.beta * l_ce
        dlogits = spec.alpha * g_mse + spec.beta * g_ce
    return loss, backprop(model, acts, dlogits)


def backward(
    model: DenseModel,
    x: np.ndarray,
    spec: LossSpec,
    labels: np.ndarray | None = None,
    stored_logits: np.ndarray | None = None,
) -> Gradients:
    return loss_and_grad(model, x, spec, labels, stored_logits)[1]


def sgd_step(model: DenseModel, grads: Gradients, lr: float) -> DenseModel:
    """In-place descent step ``theta -= lr * grad``; returns the model."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for p, g in zip(model.params, grads):
        p -= lr * g
    return model


def perturb(model: DenseModel, sigma: float, rng: np.random.Generator) -> DenseModel:
    """Copy of ``model`` with i.i.d. N(0, sigma^2) noise on every parameter."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    out = model.copy()
    if sigma == 0:
        return out
    for p in out.params:
        p += rng.normal(0.0, sigma, size=p.shape)
    return out


# -- gradient arithmetic ---------------------------------------------------

def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays])


def unflatten(vector: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    total = sum(a.size for a in like)
    if vector.size != total:
        raise ShapeError(f"flat vector has {vector.size} entries, expected {total}")
    out, i = [], 0
    for a in like:
        out.append(np.array(vector[i:i + a.size], dtype=np.float64).reshape(a.shape))
        i += a.size
    return out


def add_scaled(a: Gradients, b: Gradients, scale: float) -> Gradients:
    """``a + scale * b`` elementwise over two gradient lists."""
    return [x + scale * y for x, y in zip(a, b)]


def grad_dot(a: Gradients, b: Gradients) -> float:
    return float(sum(np.vdot(x, y) for x, y in zip(a, b)))


def predict(model: DenseModel, x: np.ndarray, mask: Sequence[int] | None = None) -> np.ndarray:
    """Argmax class per row; ties go to the lowest index (numpy's argmax rule)."""
    logits = forward(model, x)
    if mask is None:
        return logits.argmax(axis=1)
    mask = np.asarray(sorted(set(int(m) for m in mask)), dtype=np.int64)
    return mask[logits[:, mask].argmax(axis=1)]
