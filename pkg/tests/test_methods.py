import inspect

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from darkreplay import nn
from darkreplay.methods import (FDR, ConfigError, Learner, MethodConfig, make_learner,
                                project_gradient, train_joint)
from conftest import toy_dataset


def small_model(seed=0):
    return nn.DenseModel.init((784, 32, 32, 10), np.random.default_rng(seed))


def batches(n_batches=30, bs=8, seed=0):
    ds = toy_dataset(30)
    gen = np.random.default_rng(seed)
    for _ in range(n_batches):
        idx = gen.choice(len(ds), bs, replace=False)
        yield ds.inputs(idx), ds.labels[idx]


def run_learner(kind, seed=0, n_batches=30, **cfg):
    cfg.setdefault("lr", 0.05)
    if kind in ("er", "der", "derpp", "fdr", "agem_r"):
        cfg.setdefault("buffer_capacity", 20)
    learner = make_learner(small_model(), MethodConfig(kind, **cfg), seed, batch_size=8)
    for i, (x, y) in enumerate(batches(n_batches)):
        learner.observe(x, y)
        if learner.needs_boundaries and i % 10 == 9:
            learner.on_boundary()
    return learner


def test_config_validation():
    with pytest.raises(ConfigError):
        MethodConfig("ewc", lr=0.1)
    with pytest.raises(ConfigError):
        MethodConfig("der", lr=0.1)  # no buffer
    with pytest.raises(ConfigError):
        MethodConfig("sgd", lr=0)
    with pytest.raises(ConfigError):
        MethodConfig("der", lr=0.1, alpha=-1, buffer_capacity=5)


def test_observe_takes_no_task_identity():
    for kind in ("sgd", "er", "der", "derpp", "fdr", "agem_r"):
        cls = type(run_learner(kind, n_batches=1))
        assert list(inspect.signature(cls.observe).parameters) == ["self", "inputs", "labels"]


def test_derpp_with_zero_beta_is_der():
    a = run_learner("derpp", alpha=0.3, beta=0.0)
    b = run_learner("der", alpha=0.3)
    assert np.array_equal(a.model.flat(), b.model.flat())


def test_der_with_zero_alpha_is_sgd():
    a = run_learner("der", alpha=0.0)
    b = run_learner("sgd")
    assert np.array_equal(a.model.flat(), b.model.flat())


def test_er_equals_rescaled_derpp():
    # with replay available, CE over the (n + m) union equals
    # n/(n+m) * (CE_batch + m/n * CE_replay); both buffers start from the same rows
    n = m = 8
    lr = 0.05
    seed_x, seed_y = next(batches(1, bs=8, seed=42))
    learners = []
    for kind, cfg in (("er", dict(lr=lr)), ("derpp", dict(lr=lr * n / (n + m), alpha=0.0, beta=m / n))):
        learner = make_learner(small_model(), MethodConfig(kind, buffer_capacity=20, **cfg), 0, 8)
        logits = None if kind == "er" else np.zeros((8, 10))
        learner.buffer.insert(seed_x, learner.rngs["reservoir"], labels=seed_y, logits=logits)
        for x, y in batches(30):
            learner.observe(x, y)
        learners.append(learner)
    er, derpp = learners
    np.testing.assert_allclose(er.model.flat(), derpp.model.flat(), rtol=0, atol=1e-12)
    assert np.array_equal(er.buffer.inputs, derpp.buffer.inputs)


def test_empty_buffer_first_step_is_plain_sgd():
    x, y = next(batches(1))
    for kind in ("er", "der", "derpp", "agem_r", "fdr"):
        learner = make_learner(small_model(), MethodConfig(kind, 0.05, 0.5, 0.5, 20), 0, 8)
        plain = make_learner(small_model(), MethodConfig("sgd", 0.05), 0, 8)
        learner.observe(x, y)
        plain.observe(x, y)
        assert np.array_equal(learner.model.flat(), plain.model.flat()), kind


def test_regulariser_value_example():
    model = nn.DenseModel([np.zeros((2, 2)), np.zeros(2)])
    learner = make_learner(model, MethodConfig("der", lr=0.1, alpha=0.5, buffer_capacity=1), 0, 1)
    learner.buffer.insert(np.zeros((1, 2)), learner.rngs["reservoir"], labels=np.array([0]),
                          logits=np.array([[1.0, 0.0]]))
    loss = learner.observe(np.zeros((1, 2)), np.array([0]))
    assert loss == pytest.approx(np.log(2) + 0.5, abs=1e-12)


def test_stored_logits_are_pre_update():
    learner = make_learner(small_model(), MethodConfig("der", 0.05, 0.3, 0, 50), 0, 8)
    x, y = next(batches(1))
    before = nn.forward(learner.model, x)
    learner.observe(x, y)
    np.testing.assert_array_equal(learner.buffer.logits[:8], before)


def test_agem_projection_example_and_fallbacks():
    out = project_gradient(np.array([1.0, 0.0]), np.array([-1.0, 1.0]))
    np.testing.assert_allclose(out, [0.5, 0.5], atol=1e-15)
    g = np.array([1.0, 2.0])
    assert np.array_equal(project_gradient(g, np.array([1.0, 1.0])), g)
    assert np.array_equal(project_gradient(g, np.zeros(2)), g)
    gl = [np.array([1.0]), np.array([0.0])]
    rl = [np.array([-1.0]), np.array([1.0])]
    np.testing.assert_allclose(np.concatenate(project_gradient(gl, rl)), [0.5, 0.5])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-10, 10)),
       arrays(np.float64, 6, elements=st.floats(-10, 10)))
def test_agem_projection_never_opposes_reference(g, ref):
    out = project_gradient(g, ref)
    assert np.dot(out, ref) >= -1e-9 * max(1.0, np.dot(g, g) * np.dot(ref, ref)) ** 0.5


def test_fdr_logits_are_recomputed_at_boundary():
    learner = run_learner("fdr", alpha=0.3, n_batches=10)
    assert isinstance(learner, FDR) and learner.needs_boundaries
    n = len(learner.buffer)
    np.testing.assert_array_equal(learner.buffer.logits[:n],
                                  nn.forward(learner.model, learner.buffer.inputs[:n]))
    snapshot = learner.buffer.logits[:n].copy()
    for x, y in batches(5, seed=9):
        learner.observe(x, y)
    np.testing.assert_array_equal(learner.buffer.logits[:n], snapshot)


@pytest.mark.parametrize("kind", ["er", "der", "derpp", "agem_r", "fdr"])
def test_buffer_never_exceeds_capacity(kind):
    learner = run_learner(kind, alpha=0.2, beta=0.2, buffer_capacity=7)
    assert len(learner.buffer) == 7


@pytest.mark.parametrize("kind", ["sgd", "er", "derpp", "fdr", "agem_r"])
def test_checkpoint_roundtrip_resumes_identically(tmp_path, kind):
    learner = run_learner(kind, alpha=0.2, beta=0.3, n_batches=15)
    path = tmp_path / "ckpt.npz"
    learner.save(path)
    restored = Learner.load(path)
    for x, y in batches(5, seed=3):
        learner.observe(x, y)
        restored.observe(x, y)
    assert np.array_equal(learner.model.flat(), restored.model.flat())
    if learner.buffer is not None:
        assert learner.buffer.entries() == restored.buffer.entries()


def test_overfits_a_single_batch():
    x, y = next(batches(1, bs=10))
    learner = make_learner(small_model(), MethodConfig("derpp", 0.1, 0.1, 0.1, 10), 0, 10)
    for _ in range(300):
        learner.observe(x, y)
    assert np.all(nn.predict(learner.model, x) == y)


def test_runs_are_deterministic_per_seed():
    a = run_learner("derpp", alpha=0.2, beta=0.3, seed=4)
    b = run_learner("derpp", alpha=0.2, beta=0.3, seed=4)
    c = run_learner("derpp", alpha=0.2, beta=0.3, seed=5)
    assert np.array_equal(a.model.flat(), b.model.flat())
    assert not np.array_equal(a.model.flat(), c.model.flat())


def test_train_joint_reduces_loss():
    ds = toy_dataset(30)
    model = small_model()
    x, y = ds.inputs(), ds.labels
    before = nn.cross_entropy(nn.forward(model, x), y)[0]

    class B:
        def __init__(self, idx):
            self.inputs, self.labels = x[idx], y[idx]

    order = np.random.default_rng(0).permutation(len(y))
    train_joint(model, [B(order[s:s + 10]) for s in range(0, len(y), 10)], 0.05)
    assert nn.cross_entropy(nn.forward(model, x), y)[0] < before
