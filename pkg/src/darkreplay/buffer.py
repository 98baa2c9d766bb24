"""Fixed-capacity replay memory filled by reservoir sampling."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class EmptyBufferError(LookupError):
    """Sampling was requested before anything was stored."""


@dataclass
class BufferEntry:
    input: np.ndarray
    logits: np.ndarray | None = None
    label: int | None = None

    def __eq__(self, other):
        if not isinstance(other, BufferEntry):
            return NotImplemented
        same_logits = (self.logits is None and other.logits is None) or (
            self.logits is not None and other.logits is not None
            and np.array_equal(self.logits, other.logits))
        return np.array_equal(self.input, other.input) and same_logits and self.label == other.label


class ReplayBatch(NamedTuple):
    inputs: np.ndarray
    labels: np.ndarray | None
    logits: np.ndarray | None
    indices: np.ndarray


class MemoryBuffer:
    """Reservoir memory of ``(input, logits?, label?)`` rows.

    Storage is allocated on the first insertion. ``seen`` counts every
    example ever offered, stored or not.
    """

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = int(capacity)
        self.seen = 0
        self.size = 0
        self.inputs: np.ndarray | None = None
        self.labels: np.ndarray | None = None
        self.logits: np.ndarray | None = None

    def __len__(self):
        return self.size

    def _allocate(self, dim: int, with_labels: bool, n_logits: int | None):
        self.inputs = np.zeros((self.capacity, dim))
        if with_labels:
            self.labels = np.zeros(self.capacity, dtype=np.int64)
        if n_logits is not None:
            self.logits = np.zeros((self.capacity, n_logits))

    def insert(self, inputs: np.ndarray, rng: np.random.Generator,
               labels: np.ndarray | None = None, logits: np.ndarray | None = None) -> np.ndarray:
        """Offer a batch of examples, one reservoir step each, in row order.

        Returns the slot each row landed in, or -1 where it was discarded.
        """
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        n = len(inputs)
        if self.inputs is None:
            self._allocate(inputs.shape[1], labels is not None,
                           None if logits is None else np.shape(logits)[-1])
        if (labels is None) != (self.labels is None) or (logits is None) != (self.logits is None):
            raise ValueError("payload does not match what this buffer stores")
        positions = self.seen + np.arange(n)
        slots = positions.copy()
        full = positions >= self.capacity
        if full.any():
            # j ~ U{0, ..., N} with N the number of examples seen before this one
            draws = rng.integers(0, positions[full] + 1)
            slots[full] = np.where(draws < self.capacity, draws, -1)
        for row, slot in enumerate(slots):
            if slot < 0:
                continue
            self.inputs[slot] = inputs[row]
            if labels is not None:
                self.labels[slot] = labels[row]
            if logits is not None:
                self.logits[slot] = logits[row]
        self.seen += n
        self.size = min(self.seen, self.capacity)
        return slots

    def reservoir_insert(self, entry: BufferEntry, rng: np.random.Generator) -> int:
        labels = None if entry.label is None else np.array([entry.label])
        logits = None if entry.logits is None else np.atleast_2d(entry.logits)
        return int(self.insert(entry.input[None, :], rng, labels, logits)[0])

    def sample(self, k: int, rng: np.random.Generator) -> ReplayBatch:
        """``k`` rows uniformly; without replacement unless ``k`` exceeds the size."""
        if self.size == 0:
            raise EmptyBufferError("no replay available: buffer is empty")
        if k <= self.size:
            idx = rng.choice(self.size, size=k, replace=False)
        else:
            idx = rng.integers(0, self.size, size=k)
        return ReplayBatch(
            self.inputs[idx].copy(),
            None if self.labels is None else self.labels[idx].copy(),
            None if self.logits is None else self.logits[idx].copy(),
            idx,
        )

    def update_logits(self, index: int, new_logits: np.ndarray) -> None:
        if not 0 <= index < self.size:
            raise IndexError(f"buffer index {index} out of range (size {self.size})")
        if self.logits is None:
            raise ValueError("this buffer stores no logits")
        self.logits[index] = new_logits

    def entry(self, index: int) -> BufferEntry:
        if not 0 <= index < self.size:
            raise IndexError(f"buffer index {index} out of range (size {self.size})")
        return BufferEntry(
            self.inputs[index].copy(),
            None if self.logits is None else self.logits[index].copy(),
            None if self.labels is None else int(self.labels[index]),
        )

    def entries(self) -> list[BufferEntry]:
        return [self.entry(i) for i in range(self.size)]

    def copy(self) -> "MemoryBuffer":
        out = MemoryBuffer(self.capacity)
        out.seen, out.size = self.seen, self.size
        for name in ("inputs", "labels", "logits"):
            arr = getattr(self, name)
            setattr(out, name, None if arr is None else arr.copy())
        return out

    # -- snapshots ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        """Little-endian layout: ``DRMB``, u32 version, u64 capacity, u64 seen,
        u64 size, u32 input dim, u32 logit dim (0 = none), u8 has-labels,
        then inputs f64[size*dim], labels i64[size], logits f64[size*C]."""
        dim = 0 if self.inputs is None else self.inputs.shape[1]
        n_logits = 0 if self.logits is None else self.logits.shape[1]
        head = b"DRMB" + struct.pack("<IQQQIIB", 1, self.capacity, self.seen, self.size,
                                     dim, n_logits, int(self.labels is not None))
        parts = [head]
        if self.inputs is not None:
            parts.append(self.inputs[: self.size].astype("<f8").tobytes())
        if self.labels is not None:
            parts.append(self.labels[: self.size].astype("<i8").tobytes())
        if self.logits is not None:
            parts.append(self.logits[: self.size].astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MemoryBuffer":
        fmt = "<IQQQIIB"
        head = 4 + struct.calcsize(fmt)
        if blob[:4] != b"DRMB":
            raise ValueError("not a buffer snapshot")
        version, capacity, seen, size, dim, n_logits, has_labels = struct.unpack(fmt, blob[4:head])
        if version != 1:
            raise ValueError(f"unsupported buffer snapshot version {version}")
        buf = cls(capacity)
        buf.seen, buf.size = seen, size
        off = head
        if dim:
            buf._allocate(dim, bool(has_labels), n_logits or None)
            nbytes = size * dim * 8
            buf.inputs[:size] = np.frombuffer(blob, "<f8", size * dim, off).reshape(size, dim)
            off += nbytes
            if has_labels:
                buf.labels[:size] = np.frombuffer(blob, "<i8", size, off)
                off += size * 8
            if n_logits:
                buf.logits[:size] = np.frombuffer(blob, "<f8", size * n_logits, off).reshape(size, n_logits)
                off += size * n_logits * 8
        if off != len(blob):
            raise ValueError("buffer snapshot has trailing or missing bytes")
        return buf

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "MemoryBuffer":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
