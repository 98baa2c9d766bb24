"""MNIST ingestion from IDX files and the per-task input transforms."""
from __future__ import annotations

import functools
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

SIDE = 28
N_PIXELS = SIDE * SIDE
CENTER = (SIDE - 1) / 2.0  # 13.5

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxError(ValueError):
    """Malformed or inconsistent IDX file."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


@dataclass
class Dataset:
    """Images kept as raw bytes; ``inputs`` scales to [0, 1] on demand.

    ``ids`` are row numbers in the originating IDX file, so subsets keep
    track of which example is which.
    """

    pixels: np.ndarray  # (N, 784) uint8
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    ids: np.ndarray | None = None

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(len(self.labels))

    def __len__(self):
        return len(self.labels)

    def inputs(self, idx=slice(None)) -> np.ndarray:
        out = self.pixels[idx].astype(np.float64)
        out /= 255.0
        return out

    def transformed(self, t: "Transform", idx=slice(None)) -> np.ndarray:
        """``apply_transform(self.inputs(idx), t)``; permutations gather the raw
        bytes first, which is cheaper and gives identical values."""
        if t.kind == "permutation":
            out = self.pixels[idx][:, _perm_index(t.perm)].astype(np.float64)
            out /= 255.0
            return out
        return apply_transform(self.inputs(idx), t)

    @property
    def images(self) -> np.ndarray:
        return self.inputs()

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.pixels[idx], self.labels[idx], split or self.split, self.ids[idx])

    def where(self, classes, split: str | None = None) -> "Dataset":
        return self.subset(np.flatnonzero(np.isin(self.labels, list(classes))), split)


def _read(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IdxError(path, f"cannot read ({exc.strerror})") from exc


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair (big endian, uncompressed)."""
    raw_img = _read(images_path)
    if len(raw_img) < 16:
        raise IdxError(images_path, "truncated file (missing header)")
    magic, n_img, rows, cols = struct.unpack(">IIII", raw_img[:16])
    if magic != IMAGES_MAGIC:
        raise IdxError(images_path, f"bad magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}")
    if len(raw_img) != 16 + n_img * rows * cols:
        raise IdxError(images_path, f"truncated file: {len(raw_img) - 16} pixel bytes for {n_img} images")

    raw_lab = _read(labels_path)
    if len(raw_lab) < 8:
        raise IdxError(labels_path, "truncated file (missing header)")
    magic, n_lab = struct.unpack(">II", raw_lab[:8])
    if magic != LABELS_MAGIC:
        raise IdxError(labels_path, f"bad magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}")
    if len(raw_lab) != 8 + n_lab:
        raise IdxError(labels_path, f"truncated file: {len(raw_lab) - 8} label bytes for {n_lab} labels")
    if n_lab != n_img:
        raise IdxError(labels_path, f"{n_lab} labels but {images_path} holds {n_img} images")

    pixels = np.frombuffer(raw_img, dtype=np.uint8, offset=16).reshape(n_img, rows * cols)
    labels = np.frombuffer(raw_lab, dtype=np.uint8, offset=8).astype(np.int64)
    split = "test" if "t10k" in os.path.basename(str(images_path)) else "train"
    return Dataset(pixels, labels, split)


@functools.lru_cache(maxsize=4)
def _load_mnist_cached(data_dir: str) -> tuple[Dataset, Dataset]:
    out = []
    for split in ("train", "test"):
        img, lab = MNIST_FILES[split]
        ds = load_idx(Path(data_dir) / img, Path(data_dir) / lab)
        ds.split = split
        out.append(ds)
    return out[0], out[1]


def load_mnist(data_dir) -> tuple[Dataset, Dataset]:
    """(train, test) from a directory holding the four standard files."""
    return _load_mnist_cached(str(Path(data_dir).resolve()))


def split_validation(ds: Dataset, fraction: float = 0.10, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified split; each class contributes ``round(fraction * n_c)`` to validation."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x5A17])))
    val = []
    for c in np.unique(ds.labels):
        members = np.flatnonzero(ds.labels == c)
        members = members[rng.permutation(members.size)]
        val.append(members[: int(np.floor(fraction * members.size + 0.5))])
    val_idx = np.sort(np.concatenate(val))
    keep = np.ones(len(ds), dtype=bool)
    keep[val_idx] = False
    return ds.subset(np.flatnonzero(keep), "train"), ds.subset(val_idx, "validation")


# -- transforms ------------------------------------------------------------

@dataclass(frozen=True)
class Transform:
    kind: str = "identity"  # identity | permutation | rotation
    perm: tuple[int, ...] | None = None
    angle: float = 0.0

    @staticmethod
    def permutation(perm) -> "Transform":
        perm = tuple(int(p) for p in perm)
        if sorted(perm) != list(range(len(perm))):
            raise ValueError("permutation must be a bijection on pixel indices")
        return Transform("permutation", perm=perm)

    @staticmethod
    def rotation(angle: float) -> "Transform":
        if not np.isfinite(angle):
            raise ValueError("rotation angle must be finite")
        return Transform("rotation", angle=float(angle))

    def inverse(self) -> "Transform":
        if self.kind == "permutation":
            return Transform("permutation", perm=tuple(np.argsort(self.perm).tolist()))
        if self.kind == "rotation":
            return Transform("rotation", angle=-self.angle)
        return self


def _bilinear_plan(angles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Source pixel indices and weights for counterclockwise rotation.

    Returns ``idx`` and ``w`` of shape ``(len(angles), 4, 784)``. Corners that
    fall outside the grid get weight 0 (zero fill).
    """
    angles = np.asarray(angles, dtype=np.float64).reshape(-1, 1)
    r, c = np.divmod(np.arange(N_PIXELS), SIDE)
    x_out = c - CENTER
    y_out = CENTER - r
    cos, sin = np.cos(angles), np.sin(angles)
    # inverse map: rotate the output coordinate clockwise to find its source
    x_src = cos * x_out + sin * y_out
    y_src = -sin * x_out + cos * y_out
    col = x_src + CENTER
    row = CENTER - y_src
    r0 = np.floor(row)
    c0 = np.floor(col)
    fr = row - r0
    fc = col - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    idx, w = [], []
    for dr, dc, wt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                       (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        inside = (rr >= 0) & (rr < SIDE) & (cc >= 0) & (cc < SIDE)
        idx.append(np.where(inside, rr * SIDE + cc, 0))
        w.append(np.where(inside, wt, 0.0))
    return np.stack(idx, axis=1), np.stack(w, axis=1)


@functools.lru_cache(maxsize=256)
def _plan_for(angle: float):
    idx, w = _bilinear_plan(np.array([angle]))
    return idx[0], w[0]


@functools.lru_cache(maxsize=256)
def _rotation_matrix(angle: float) -> sparse.csr_matrix:
    """(784, 784) sparse map with ``rotated = images @ M``."""
    idx, w = _plan_for(angle)
    cols = np.broadcast_to(np.arange(N_PIXELS), idx.shape)
    return sparse.csr_matrix((w.ravel(), (idx.ravel(), cols.ravel())), shape=(N_PIXELS, N_PIXELS))


def rotate(images: np.ndarray, angle: float) -> np.ndarray:
    """Rotate every row of ``images`` (N, 784) by the same angle."""
    images = np.asarray(images, dtype=np.float64)
    flat = images.reshape(-1, N_PIXELS)
    out = np.asarray(flat @ _rotation_matrix(float(angle)))
    return np.clip(out, 0.0, 1.0).reshape(images.shape)


def rotate_each(images: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rotate row ``i`` of ``images`` by ``angles[i]``."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        return images.copy()
    idx, w = _bilinear_plan(angles)
    out = np.zeros_like(images)
    for k in range(4):
        out += np.take_along_axis(images, idx[:, k], axis=1) * w[:, k]
    return np.clip(out, 0.0, 1.0)


@functools.lru_cache(maxsize=64)
def _perm_index(perm: tuple) -> np.ndarray:
    return np.asarray(perm, dtype=np.intp)


def apply_transform(images: np.ndarray, t: Transform) -> np.ndarray:
    """Apply ``t`` to one image (784,) or a batch (N, 784)."""
    images = np.asarray(images, dtype=np.float64)
    if t.kind == "identity":
        return images.copy()
    if t.kind == "permutation":
        return images[..., _perm_index(t.perm)]
    if t.kind == "rotation":
        return rotate(images, t.angle)
    raise ValueError(f"unknown transform {t.kind!r}")
