import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from darkreplay.buffer import BufferEntry, EmptyBufferError, MemoryBuffer


def rows(n, start=0, dim=3):
    return np.arange(start, start + n, dtype=float)[:, None] * np.ones(dim)


def test_fills_in_order_until_full():
    buf = MemoryBuffer(3)
    slots = buf.insert(rows(3), np.random.default_rng(0), labels=np.array([7, 8, 9]))
    assert list(slots) == [0, 1, 2] and len(buf) == 3
    assert [e.label for e in buf.entries()] == [7, 8, 9]
    assert [e.input[0] for e in buf.entries()] == [0, 1, 2]


def test_capacity_never_exceeded_and_seen_counts():
    buf = MemoryBuffer(5)
    gen = np.random.default_rng(1)
    for k in range(10):
        buf.insert(rows(7, 7 * k), gen)
        assert len(buf) <= 5
    assert buf.seen == 70 and len(buf) == 5


def test_capacity_one_keeps_each_item_uniformly():
    trials, n = 20000, 4
    hits = np.zeros(n)
    gen = np.random.default_rng(2)
    for _ in range(trials):
        buf = MemoryBuffer(1)
        buf.insert(rows(n), gen)
        hits[int(buf.inputs[0, 0])] += 1
    sd = np.sqrt(trials * (1 / n) * (1 - 1 / n))
    assert np.all(np.abs(hits - trials / n) < 4 * sd)


def test_reservoir_inclusion_is_uniform():
    # 10^5 independent fills of a capacity-5 buffer from a 20-item stream
    capacity, n, trials = 5, 20, 100_000
    gen = np.random.default_rng(3)
    stream = rows(n, dim=1)
    counts = np.zeros(n, dtype=np.int64)
    for _ in range(trials):
        b = MemoryBuffer(capacity)
        b.insert(stream, gen)
        counts[b.inputs[:, 0].astype(np.int64)] += 1
    assert counts.sum() == capacity * trials
    assert stats.chisquare(counts).pvalue > 0.001


def test_sampling_is_uniform_and_without_replacement():
    buf = MemoryBuffer(10)
    buf.insert(rows(10), np.random.default_rng(0))
    gen = np.random.default_rng(5)
    counts = np.zeros(10)
    for _ in range(5000):
        rb = buf.sample(3, gen)
        assert len(set(rb.indices)) == 3
        counts[rb.indices] += 1
    assert stats.chisquare(counts).pvalue > 0.001
    perm = buf.sample(10, gen)
    assert sorted(perm.indices) == list(range(10))


def test_sampling_more_than_stored_uses_replacement():
    buf = MemoryBuffer(10)
    buf.insert(rows(3), np.random.default_rng(0))
    rb = buf.sample(8, np.random.default_rng(1))
    assert len(rb.inputs) == 8 and set(rb.indices) <= {0, 1, 2}


def test_empty_buffer_raises():
    with pytest.raises(EmptyBufferError):
        MemoryBuffer(4).sample(1, np.random.default_rng(0))


def test_samples_are_copies_of_stored_rows():
    buf = MemoryBuffer(6)
    gen = np.random.default_rng(6)
    buf.insert(rows(30), gen, labels=np.arange(30), logits=np.arange(60.0).reshape(30, 2))
    rb = buf.sample(4, gen)
    for x, y, z, i in zip(rb.inputs, rb.labels, rb.logits, rb.indices):
        e = buf.entry(i)
        assert np.array_equal(x, e.input) and y == e.label and np.array_equal(z, e.logits)
        assert y == x[0] and np.array_equal(z, [2 * y, 2 * y + 1])
    rb.inputs[:] = -1
    assert buf.inputs.min() >= 0


def test_update_logits():
    buf = MemoryBuffer(2)
    buf.insert(rows(2), np.random.default_rng(0), logits=np.zeros((2, 3)))
    buf.update_logits(1, np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(buf.entry(1).logits, [1, 2, 3])
    assert np.array_equal(buf.entry(0).logits, [0, 0, 0])
    with pytest.raises(IndexError):
        buf.update_logits(2, np.zeros(3))
    with pytest.raises(ValueError):
        buf.insert(rows(1), np.random.default_rng(0))


def test_reservoir_insert_single_entry():
    buf = MemoryBuffer(1)
    gen = np.random.default_rng(0)
    assert buf.reservoir_insert(BufferEntry(np.ones(3), np.zeros(2), 4), gen) == 0
    assert buf.entry(0) == BufferEntry(np.ones(3), np.zeros(2), 4)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(0, 30), st.booleans(), st.booleans())
def test_snapshot_roundtrip(capacity, n, with_labels, with_logits):
    gen = np.random.default_rng(n)
    buf = MemoryBuffer(capacity)
    if n:
        buf.insert(gen.random((n, 4)), gen,
                   labels=gen.integers(0, 10, n) if with_labels else None,
                   logits=gen.normal(size=(n, 3)) if with_logits else None)
    back = MemoryBuffer.from_bytes(buf.to_bytes())
    assert back.entries() == buf.entries()
    assert (back.capacity, back.seen, len(back)) == (buf.capacity, buf.seen, len(buf))
    assert back.to_bytes() == buf.to_bytes()


def test_snapshot_file_and_corruption(tmp_path):
    buf = MemoryBuffer(3)
    buf.insert(rows(5), np.random.default_rng(0), labels=np.arange(5))
    path = tmp_path / "buf.bin"
    buf.save(path)
    assert MemoryBuffer.load(path).entries() == buf.entries()
    with pytest.raises(ValueError):
        MemoryBuffer.from_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ValueError):
        MemoryBuffer.from_bytes(path.read_bytes()[:-1])
