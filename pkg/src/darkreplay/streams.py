"""Task streams: Sequential MNIST, Permuted/Rotated MNIST and MNIST-360."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import rng as rngmod
from .data import Dataset, Transform, apply_transform, rotate_each

SEQ_CLASS_ORDER = ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9))
SEQ_BATCH = 10
DOMAIN_BATCH = 128
DOMAIN_TASKS = 20
M360_ROUNDS = 3
M360_BATCH = 16
M360_DIGITS = 9


@dataclass
class StreamBatch:
    inputs: np.ndarray
    labels: np.ndarray
    raw_inputs: np.ndarray
    task_hint: int | None = None
    ids: np.ndarray | None = None
    angles: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)


@dataclass
class Task:
    task_id: int
    classes: tuple[int, ...]
    transform: Transform
    train: Dataset
    test: Dataset
    epochs: int = 1


@dataclass
class TaskStream:
    """A sequence of tasks with visible boundaries."""

    setting: str
    tasks: list[Task]
    batch_size: int
    seed: int
    boundary_visible: bool = True
    n_classes: int = 10
    cache_tests: bool = True
    _test_cache: dict = field(default_factory=dict, repr=False)

    @property
    def task_il(self) -> bool:
        return self.setting == "task_il"

    def batches(self, task: Task) -> Iterator[StreamBatch]:
        """Shuffled mini-batches of one task, for each of its epochs."""
        rng = rngmod.stream(self.seed, f"shuffle/task{task.task_id}")
        n = len(task.train)
        for _ in range(task.epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                raw = task.train.inputs(idx)
                yield StreamBatch(
                    inputs=apply_transform(raw, task.transform),
                    labels=task.train.labels[idx],
                    raw_inputs=raw,
                    task_hint=task.task_id,
                    ids=task.train.ids[idx],
                )

    def test_set(self, task: Task) -> tuple[np.ndarray, np.ndarray]:
        key = task.task_id
        if key in self._test_cache:
            return self._test_cache[key]
        pair = (task.test.transformed(task.transform), task.test.labels)
        if self.cache_tests:
            self._test_cache[key] = pair
        return pair

    def eval_mask(self, task: Task):
        return task.classes if self.task_il else None

    def joint_batches(self, rng: np.random.Generator) -> Iterator[StreamBatch]:
        """One shuffled pass over the union of every task's training data."""
        if self.setting in ("class_il", "task_il"):
            union = Dataset(
                np.concatenate([t.train.pixels for t in self.tasks]),
                np.concatenate([t.train.labels for t in self.tasks]),
                "train",
                np.concatenate([t.train.ids for t in self.tasks]),
            )
            order = rng.permutation(len(union))
            for start in range(0, len(order), self.batch_size):
                idx = order[start:start + self.batch_size]
                raw = union.inputs(idx)
                yield StreamBatch(raw, union.labels[idx], raw, ids=union.ids[idx])
            return
        n = len(self.tasks[0].train)
        total = n * len(self.tasks)
        order = rng.permutation(total)
        base = self.tasks[0].train
        perms = angles = None
        if self.tasks[0].transform.kind == "permutation":
            perms = np.array([t.transform.perm for t in self.tasks])
        else:
            angles = np.array([t.transform.angle for t in self.tasks])
        for start in range(0, total, self.batch_size):
            flat = order[start:start + self.batch_size]
            task_ids, idx = np.divmod(flat, n)
            raw = base.inputs(idx)
            if perms is not None:
                x = np.take_along_axis(raw, perms[task_ids], axis=1)
            else:
                x = rotate_each(raw, angles[task_ids])
            yield StreamBatch(x, base.labels[idx], raw, ids=base.ids[idx])


def sequential_stream(train: Dataset, test: Dataset, setting: str = "class_il",
                      seed: int = 0, batch_size: int = SEQ_BATCH, epochs: int = 1) -> TaskStream:
    """Five two-digit tasks in the fixed order (0,1), (2,3), ..., (8,9)."""
    if setting not in ("class_il", "task_il"):
        raise ValueError(f"unknown sequential setting {setting!r}")
    tasks = [
        Task(t, classes, Transform(), train.where(classes), test.where(classes), epochs)
        for t, classes in enumerate(SEQ_CLASS_ORDER)
    ]
    return TaskStream(setting, tasks, batch_size, seed)


def domain_stream(train: Dataset, test: Dataset, kind: str, n_tasks: int = DOMAIN_TASKS,
                  seed: int = 0, batch_size: int = DOMAIN_BATCH, epochs: int = 1) -> TaskStream:
    """Permuted (fresh pixel permutation per task) or rotated (angle ~ U[0, pi)) MNIST."""
    if kind not in ("permuted", "rotated"):
        raise ValueError(f"unknown domain stream {kind!r}")
    gen = rngmod.stream(seed, f"domain/{kind}")
    tasks = []
    for t in range(n_tasks):
        if kind == "permuted":
            tf = Transform.permutation(gen.permutation(784))
        else:
            tf = Transform.rotation(gen.uniform(0.0, math.pi))
        tasks.append(Task(t, tuple(range(10)), tf, train, test, epochs))
    # twenty transformed copies of the test set would not fit comfortably in memory
    return TaskStream("domain_il", tasks, batch_size, seed, cache_tests=False)


# -- MNIST-360 -------------------------------------------------------------

def m360_offsets(rounds: int = M360_ROUNDS) -> np.ndarray:
    """Per-digit angular offset ``(d - 1) * pi / (2R)``."""
    return (np.arange(M360_DIGITS) - 1) * math.pi / (2 * rounds)


def m360_batch_split(rem1: int, rem2: int, batch_size: int) -> tuple[int, int]:
    """How many of each digit go in the next batch.

    The proportional share of the first digit is rounded half-up and then
    clamped to what remains.
    """
    if rem1 + rem2 == 0:
        return 0, 0
    share = rem1 / (rem1 + rem2) * batch_size
    n1 = min(int(math.floor(share + 0.5)), rem1)
    n2 = min(batch_size - n1, rem2)
    return n1, n2


@dataclass
class M360Step:
    positions: np.ndarray  # rows of the training Dataset
    angles: np.ndarray
    labels: np.ndarray
    pseudo_task: int
    n_first: int  # how many rows belong to the pair's first digit


class Mnist360Stream:
    """Boundary-free stream of digit pairs under steadily increasing rotation.

    Each digit's examples are shuffled and split into ``2R`` near-equal
    groups. Groups are handed out in the order the digit appears in the
    pair schedule, so every example is emitted exactly once. A per-digit
    counter that is never reset drives the rotation angle.
    """

    def __init__(self, train: Dataset, rounds: int = M360_ROUNDS,
                 batch_size: int = M360_BATCH, seed: int = 0):
        if np.any(train.labels >= M360_DIGITS):
            train = train.where(range(M360_DIGITS))
        self.train = train
        self.rounds = rounds
        self.batch_size = batch_size
        self.seed = seed
        self.offsets = m360_offsets(rounds)
        self.digit_counts = np.bincount(train.labels, minlength=M360_DIGITS)
        gen = rngmod.stream(seed, "m360/groups")
        self.groups: list[list[np.ndarray]] = []
        for d in range(M360_DIGITS):
            members = np.flatnonzero(train.labels == d)
            members = members[gen.permutation(members.size)]
            self.groups.append(np.array_split(members, 2 * rounds))
        self.pairs = [(d, (d + 1) % M360_DIGITS) for _ in range(rounds) for d in range(M360_DIGITS)]
        self._steps: list[M360Step] | None = None

    def steps(self) -> list[M360Step]:
        """The full batch plan (indices, angles, labels) without pixel work."""
        if self._steps is not None:
            return self._steps
        next_group = [0] * M360_DIGITS
        counter = np.zeros(M360_DIGITS, dtype=np.int64)
        steps = []
        for p, (d1, d2) in enumerate(self.pairs):
            g1 = self.groups[d1][next_group[d1]]
            next_group[d1] += 1
            g2 = self.groups[d2][next_group[d2]]
            next_group[d2] += 1
            c1 = c2 = 0
            while c1 < len(g1) or c2 < len(g2):
                n1, n2 = m360_batch_split(len(g1) - c1, len(g2) - c2, self.batch_size)
                pos = np.concatenate([g1[c1:c1 + n1], g2[c2:c2 + n2]])
                angles = np.concatenate([
                    self._angles(d1, counter[d1], n1),
                    self._angles(d2, counter[d2], n2),
                ])
                counter[d1] += n1
                counter[d2] += n2
                c1 += n1
                c2 += n2
                steps.append(M360Step(pos, angles, self.train.labels[pos], p, n1))
        self._steps = steps
        return steps

    def _angles(self, digit: int, start: int, n: int) -> np.ndarray:
        c = np.arange(start, start + n)
        return 2 * math.pi / self.digit_counts[digit] * c + self.offsets[digit]

    def __iter__(self) -> Iterator[StreamBatch]:
        for step in self.steps():
            raw = self.train.inputs(step.positions)
            yield StreamBatch(
                inputs=rotate_each(raw, step.angles),
                labels=step.labels,
                raw_inputs=raw,
                task_hint=None,
                ids=self.train.ids[step.positions],
                angles=step.angles,
            )

    def joint_batches(self, rng: np.random.Generator, batch_size: int | None = None) -> Iterator[StreamBatch]:
        """Same rotated examples as the stream, shuffled into i.i.d. batches."""
        bs = batch_size or self.batch_size
        pos = np.concatenate([s.positions for s in self.steps()])
        ang = np.concatenate([s.angles for s in self.steps()])
        order = rng.permutation(pos.size)
        for start in range(0, pos.size, bs):
            sel = order[start:start + bs]
            raw = self.train.inputs(pos[sel])
            yield StreamBatch(rotate_each(raw, ang[sel]), self.train.labels[pos[sel]], raw,
                              ids=self.train.ids[pos[sel]], angles=ang[sel])


def mnist360_train_stream(train: Dataset, rounds: int = M360_ROUNDS,
                          batch_size: int = M360_BATCH, seed: int = 0) -> Iterator[StreamBatch]:
    return iter(Mnist360Stream(train, rounds, batch_size, seed))


def mnist360_test_angles(test: Dataset) -> np.ndarray:
    """Angle ``2*pi*k/|d|`` for the k-th test example of each digit (no offset)."""
    labels = test.labels
    angles = np.zeros(len(labels))
    for d in range(M360_DIGITS):
        members = np.flatnonzero(labels == d)
        angles[members] = 2 * math.pi * np.arange(members.size) / members.size
    return angles


def mnist360_test_set(test: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All rotated test digits 0-8 at once: (inputs, labels, angles)."""
    test = test.where(range(M360_DIGITS))
    angles = mnist360_test_angles(test)
    return rotate_each(test.inputs(), angles), test.labels, angles


def mnist360_test_stream(test: Dataset) -> Iterator[tuple[np.ndarray, int, float]]:
    """One rotated test digit per step."""
    test = test.where(range(M360_DIGITS))
    angles = mnist360_test_angles(test)
    for i in range(len(test)):
        x = rotate_each(test.inputs([i]), angles[i:i + 1])[0]
        yield x, int(test.labels[i]), float(angles[i])


# -- stream manifests ------------------------------------------------------

MANIFEST_MAGIC = b"DRSM"
MANIFEST_VERSION = 1
MANIFEST_DTYPE = np.dtype([("example", "<u4"), ("angle", "<f8"), ("batch", "<u4")])


def stream_manifest(stream: Mnist360Stream) -> np.ndarray:
    """One record per emitted example: dataset id, rotation angle, batch number."""
    steps = stream.steps()
    out = np.empty(sum(len(s.positions) for s in steps), dtype=MANIFEST_DTYPE)
    i = 0
    for b, s in enumerate(steps):
        n = len(s.positions)
        out["example"][i:i + n] = stream.train.ids[s.positions]
        out["angle"][i:i + n] = s.angles
        out["batch"][i:i + n] = b
        i += n
    return out


def write_manifest(path, records: np.ndarray) -> None:
    """Layout: magic ``DRSM``, u32 version, u64 count, then packed records
    (u32 example id, f64 angle, u32 batch id), all little endian."""
    records = np.asarray(records, dtype=MANIFEST_DTYPE)
    with open(path, "wb") as fh:
        fh.write(MANIFEST_MAGIC + struct.pack("<IQ", MANIFEST_VERSION, len(records)))
        fh.write(records.tobytes())


def read_manifest(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if head[:4] != MANIFEST_MAGIC:
            raise ValueError(f"{path}: not a stream manifest")
        version, count = struct.unpack("<IQ", head[4:])
        if version != MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported manifest version {version}")
        body = fh.read()
    if len(body) != count * MANIFEST_DTYPE.itemsize:
        raise ValueError(f"{path}: truncated manifest")
    return np.frombuffer(body, dtype=MANIFEST_DTYPE).copy()
