"""Continual learners: SGD, JOINT, ER, DER, DER++, FDR and A-GEM-R.

Every learner exposes ``observe(inputs, labels) -> loss``. Task identity is
never passed to ``observe``; only FDR additionally gets ``on_boundary()``
calls, and only from streams that have boundaries.

Each term of a composite loss is differentiated on its own and the
gradients are summed, so a term with weight 0 leaves the update bit-for-bit
unchanged. Random draws come from separate named streams:
``reservoir`` for buffer insertion, ``replay/logits`` for the logit-matching
draw and ``replay/labels`` for the labelled draw.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from . import rng as rngmod
from .buffer import MemoryBuffer

KINDS = ("sgd", "joint", "er", "der", "derpp", "fdr", "agem_r")
REHEARSAL = ("er", "der", "derpp", "fdr", "agem_r")
BOUNDARY_FREE = ("sgd", "joint", "er", "der", "derpp", "agem_r")

_MSE = nn.LossSpec("logit_mse")
_CE = nn.LossSpec("cross_entropy")


class ConfigError(ValueError):
    """Invalid method or experiment configuration."""


@dataclass
class MethodConfig:
    kind: str
    lr: float
    alpha: float = 0.0
    beta: float = 0.0
    buffer_capacity: int = 0
    replay_batch_size: int | None = None  # replay batch; None = stream batch size

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown method {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if self.kind in REHEARSAL and self.buffer_capacity <= 0:
            raise ConfigError(f"{self.kind} needs a positive buffer_capacity")
        if self.kind not in REHEARSAL:
            self.buffer_capacity = 0

    def to_dict(self) -> dict:
        return asdict(self)


class Learner:
    needs_boundaries = False

    def __init__(self, model: nn.DenseModel, config: MethodConfig, seed: int,
                 batch_size: int | None = None):
        self.model = model
        self.config = config
        self.seed = seed
        self.replay_batch_size = config.replay_batch_size or batch_size or 10
        self.rngs = {name: rngmod.stream(seed, name)
                     for name in ("reservoir", "replay/logits", "replay/labels")}
        self.buffer = MemoryBuffer(config.buffer_capacity) if config.kind in REHEARSAL else None
        self.observed = 0

    def observe(self, inputs: np.ndarray, labels: np.ndarray) -> float:
        raise NotImplementedError

    def on_boundary(self) -> None:
        pass

    def _step(self, grads) -> None:
        nn.sgd_step(self.model, grads, self.config.lr)

    def _replay(self, stream: str):
        return self.buffer.sample(self.replay_batch_size, self.rngs[stream])

    # -- checkpoints ---------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "seed": self.seed,
            "observed": self.observed,
            "replay_batch_size": self.replay_batch_size,
            "rng": {k: g.bit_generator.state for k, g in self.rngs.items()},
        }

    def save(self, path) -> None:
        """npz with the parameters, the buffer snapshot and a JSON state blob."""
        arrays = {f"param{i}": p for i, p in enumerate(self.model.params)}
        if self.buffer is not None:
            arrays["buffer"] = np.frombuffer(self.buffer.to_bytes(), dtype=np.uint8)
        arrays["state"] = np.frombuffer(json.dumps(self.state_dict()).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @staticmethod
    def load(path) -> "Learner":
        with np.load(path) as z:
            state = json.loads(z["state"].tobytes().decode())
            params = [z[f"param{i}"] for i in range(sum(k.startswith("param") for k in z.files))]
            blob = z["buffer"].tobytes() if "buffer" in z.files else None
        learner = make_learner(nn.DenseModel(params), MethodConfig(**state["config"]),
                               state["seed"], state["replay_batch_size"])
        learner.observed = state["observed"]
        for k, st in state["rng"].items():
            learner.rngs[k].bit_generator.state = st
        if blob is not None:
            learner.buffer = MemoryBuffer.from_bytes(blob)
        if "pending" in state:
            learner.pending = MemoryBuffer.from_bytes(bytes.fromhex(state["pending"]))
        return learner


class SGD(Learner):
    """Plain fine-tuning, no protection against forgetting."""

    def observe(self, inputs, labels):
        loss, g = nn.loss_and_grad(self.model, inputs, _CE, labels)
        self._step(g)
        self.observed += len(labels)
        return loss


class ER(Learner):
    """Experience replay: one CE step on the batch concatenated with a
    labelled buffer draw."""

    def observe(self, inputs, labels):
        x, y = inputs, labels
        if len(self.buffer):
            rb = self._replay("replay/labels")
            x = np.concatenate([inputs, rb.inputs])
            y = np.concatenate([labels, rb.labels])
        loss, g = nn.loss_and_grad(self.model, x, _CE, y)
        self._step(g)
        self.buffer.insert(inputs, self.rngs["reservoir"], labels=labels)
        self.observed += len(labels)
        return loss


class DERpp(Learner):
    """DER++: CE + alpha * logit matching on one draw + beta * CE on another.

    With ``beta == 0`` this is DER; the DER class below only differs in
    skipping the second draw.
    """

    labelled_term = True

    def observe(self, inputs, labels):
        alpha, beta = self.config.alpha, self.config.beta
        logits, acts = nn.forward_cached(self.model, inputs)
        loss, dlogits = nn.cross_entropy(logits, labels)
        g = nn.backprop(self.model, acts, dlogits)
        if len(self.buffer):
            rb = self._replay("replay/logits")
            l_mse, g_mse = nn.loss_and_grad(self.model, rb.inputs, _MSE, stored_logits=rb.logits)
            loss += alpha * l_mse
            g = nn.add_scaled(g, g_mse, alpha)
            if self.labelled_term:
                rb2 = self._replay("replay/labels")
                l_ce, g_ce = nn.loss_and_grad(self.model, rb2.inputs, _CE, rb2.labels)
                loss += beta * l_ce
                g = nn.add_scaled(g, g_ce, beta)
        self._step(g)
        # logits from this step's forward pass, i.e. before the update
        self.buffer.insert(inputs, self.rngs["reservoir"], labels=labels, logits=logits)
        self.observed += len(labels)
        return loss


class DER(DERpp):
    """Dark Experience Replay: CE + alpha * ||z' - h(x')||^2 on a buffer draw.

    Labels are kept in the buffer only so snapshots can feed the buffer
    probes; the objective never reads them.
    """

    labelled_term = False


class AGEMR(Learner):
    """A-GEM gradient projection against a reservoir buffer."""

    def observe(self, inputs, labels):
        loss, g = nn.loss_and_grad(self.model, inputs, _CE, labels)
        if len(self.buffer):
            rb = self._replay("replay/labels")
            _, g_ref = nn.loss_and_grad(self.model, rb.inputs, _CE, rb.labels)
            g = project_gradient(g, g_ref)
        self._step(g)
        self.buffer.insert(inputs, self.rngs["reservoir"], labels=labels)
        self.observed += len(labels)
        return loss


def project_gradient(g, g_ref):
    """Remove the component of ``g`` that opposes ``g_ref``.

    Works on flat vectors or gradient lists. Returns ``g`` unchanged when
    the two agree or when ``g_ref`` is zero.
    """
    as_list = isinstance(g, list)
    dot = nn.grad_dot(g, g_ref) if as_list else float(np.dot(g, g_ref))
    ref_sq = nn.grad_dot(g_ref, g_ref) if as_list else float(np.dot(g_ref, g_ref))
    if dot >= 0 or ref_sq == 0:
        return g
    coef = dot / ref_sq
    return nn.add_scaled(g, g_ref, -coef) if as_list else g - coef * g_ref


class FDR(Learner):
    """Function-distance replay with logits frozen at task boundaries.

    A shadow reservoir tracks the stream online; at each boundary it is
    copied into the replay buffer and every stored logit is recomputed with
    the end-of-task model. Between boundaries only the frozen buffer is
    replayed.
    """

    needs_boundaries = True

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.pending = MemoryBuffer(self.config.buffer_capacity)

    def observe(self, inputs, labels):
        loss, g = nn.loss_and_grad(self.model, inputs, _CE, labels)
        if len(self.buffer):
            rb = self._replay("replay/logits")
            l_mse, g_mse = nn.loss_and_grad(self.model, rb.inputs, _MSE, stored_logits=rb.logits)
            loss += self.config.alpha * l_mse
            g = nn.add_scaled(g, g_mse, self.config.alpha)
        self._step(g)
        self.pending.insert(inputs, self.rngs["reservoir"], labels=labels)
        self.observed += len(labels)
        return loss

    def on_boundary(self):
        frozen = self.pending.copy()
        n = len(frozen)
        if n == 0:
            return
        frozen.logits = np.zeros((frozen.capacity, self.model.n_classes))
        fresh = nn.forward(self.model, frozen.inputs[:n])
        for i in range(n):
            frozen.update_logits(i, fresh[i])
        self.buffer = frozen

    def state_dict(self):
        state = super().state_dict()
        state["pending"] = self.pending.to_bytes().hex()
        return state


_CLASSES = {"sgd": SGD, "joint": SGD, "er": ER, "der": DER, "derpp": DERpp,
            "fdr": FDR, "agem_r": AGEMR}


def make_learner(model: nn.DenseModel, config: MethodConfig, seed: int,
                 batch_size: int | None = None) -> Learner:
    return _CLASSES[config.kind](model, config, seed, batch_size)


def train_joint(model: nn.DenseModel, batches, lr: float) -> nn.DenseModel:
    """Offline upper bound: plain SGD over pre-shuffled batches of all tasks."""
    for batch in batches:
        _, g = nn.loss_and_grad(model, batch.inputs, _CE, batch.labels)
        nn.sgd_step(model, g, lr)
    return model
