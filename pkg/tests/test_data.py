import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from darkreplay.data import (Dataset, IdxError, Transform, apply_transform, load_idx, rotate,
                             rotate_each, split_validation)
from conftest import needs_mnist, toy_dataset


def write_idx(tmp_path, n_img=3, n_lab=None, img_magic=0x803, lab_magic=0x801, drop=0):
    n_lab = n_img if n_lab is None else n_lab
    pix = np.arange(n_img * 4, dtype=np.uint8)
    img = struct.pack(">IIII", img_magic, n_img, 2, 2) + pix.tobytes()
    lab = struct.pack(">II", lab_magic, n_lab) + bytes(range(n_lab))
    ip, lp = tmp_path / "img", tmp_path / "lab"
    ip.write_bytes(img[: len(img) - drop])
    lp.write_bytes(lab)
    return ip, lp


def test_load_idx_small(tmp_path):
    ds = load_idx(*write_idx(tmp_path))
    assert ds.pixels.shape == (3, 4)
    assert list(ds.labels) == [0, 1, 2]
    assert ds.inputs().max() <= 1.0


@pytest.mark.parametrize("kwargs,fragment", [
    (dict(img_magic=0x801, lab_magic=0x803), "magic"),
    (dict(drop=1), "truncated"),
    (dict(n_lab=2), "labels"),
])
def test_load_idx_errors(tmp_path, kwargs, fragment):
    with pytest.raises(IdxError, match=fragment):
        load_idx(*write_idx(tmp_path, **kwargs))


def test_load_idx_empty_and_missing(tmp_path):
    empty = tmp_path / "empty"
    empty.write_bytes(b"")
    _, lp = write_idx(tmp_path)
    with pytest.raises(IdxError, match="truncated"):
        load_idx(empty, lp)
    with pytest.raises(IdxError) as err:
        load_idx(tmp_path / "nope", lp)
    assert "nope" in str(err.value)


@needs_mnist
def test_mnist_train_facts(mnist):
    train, test = mnist
    assert len(train) == 60000 and len(test) == 10000
    assert train.labels[0] == 5
    assert train.pixels.shape == (60000, 784)
    x = train.inputs(slice(0, 100))
    assert x.min() >= 0 and x.max() <= 1


@needs_mnist
def test_mnist_validation_split(mnist):
    train, _ = mnist
    fit, val = split_validation(train, 0.1, seed=0)
    assert len(fit) == 54000 and len(val) == 6000
    counts = np.bincount(train.labels, minlength=10)
    val_counts = np.bincount(val.labels, minlength=10)
    np.testing.assert_array_equal(val_counts, np.floor(0.1 * counts + 0.5))
    assert not set(fit.ids) & set(val.ids)


def test_split_validation_toy_balanced_and_deterministic():
    ds = toy_dataset(n_per_class=1000)
    fit, val = split_validation(ds, 0.1, seed=3)
    assert len(val) == 1000
    assert np.all(np.bincount(val.labels) == 100)
    assert set(fit.ids) | set(val.ids) == set(ds.ids)
    again = split_validation(ds, 0.1, seed=3)[1]
    np.testing.assert_array_equal(val.ids, again.ids)
    with pytest.raises(ValueError):
        split_validation(ds, 1.0)


def test_permutation_is_invertible_and_preserves_values():
    gen = np.random.default_rng(0)
    perm = Transform.permutation(gen.permutation(784))
    x = gen.random((5, 784))
    y = apply_transform(x, perm)
    np.testing.assert_array_equal(apply_transform(y, perm.inverse()), x)
    np.testing.assert_array_equal(np.sort(y, axis=1), np.sort(x, axis=1))
    ident = Transform.permutation(range(784))
    np.testing.assert_array_equal(apply_transform(x, ident), x)
    with pytest.raises(ValueError):
        Transform.permutation([0] * 784)


def test_dataset_transformed_matches_apply_transform():
    ds = toy_dataset(n_per_class=3)
    gen = np.random.default_rng(1)
    for t in (Transform(), Transform.permutation(gen.permutation(784)), Transform.rotation(0.7)):
        np.testing.assert_array_equal(ds.transformed(t), apply_transform(ds.inputs(), t))


def test_rotation_identity_and_quarter_turn():
    gen = np.random.default_rng(2)
    x = gen.random((3, 784))
    np.testing.assert_allclose(rotate(x, 0.0), x, atol=1e-12)
    img = np.zeros((28, 28))
    img[3, 20] = 1.0
    img[10, 5] = 0.5
    out = rotate(img.reshape(1, 784), math.pi / 2).reshape(28, 28)
    expected = np.zeros((28, 28))
    for r, c in ((3, 20), (10, 5)):
        expected[27 - c, r] = img[r, c]
    np.testing.assert_allclose(out, expected, atol=1e-9)


def test_rotation_full_turn_and_range():
    x = np.random.default_rng(3).random((2, 784))
    np.testing.assert_allclose(rotate(x, 2 * math.pi), rotate(x, 0.0), atol=1e-9)
    y = rotate(x, 1.234)
    assert y.min() >= 0 and y.max() <= 1


def test_rotation_matches_scipy_ndimage():
    ndimage = pytest.importorskip("scipy.ndimage")
    img = np.random.default_rng(6).random((28, 28))
    ours = rotate(img.reshape(1, 784), math.radians(30)).reshape(28, 28)
    ref = ndimage.rotate(img, 30, reshape=False, order=1, mode="grid-constant", cval=0.0)
    assert np.max(np.abs(ours - ref)) < 1e-12


def test_rotate_each_matches_rotate():
    x = np.random.default_rng(4).random((4, 784))
    angles = np.array([0.1, 1.0, 2.5, 4.0])
    each = rotate_each(x, angles)
    for i, a in enumerate(angles):
        np.testing.assert_allclose(each[i], rotate(x[i:i + 1], a)[0], atol=1e-12)


@needs_mnist
def test_rotation_preserves_mass_on_digits(mnist):
    train, _ = mnist
    x = train.inputs(slice(0, 100))
    angles = np.random.default_rng(5).uniform(0, 2 * math.pi, 100)
    y = rotate_each(x, angles)
    ratio = y.sum(axis=1) / x.sum(axis=1)
    assert np.all(np.abs(ratio - 1) < 0.03)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 2 * math.pi))
def test_rotation_inverse_roundtrip_on_centered_blob(angle):
    # a blob well inside the inscribed circle survives rotate / unrotate up to interpolation blur
    r, c = np.divmod(np.arange(784), 28)
    blob = np.exp(-((r - 13.5) ** 2 + (c - 13.5) ** 2) / 18.0).reshape(1, 784)
    t = Transform.rotation(angle)
    back = apply_transform(apply_transform(blob, t), t.inverse())
    assert np.max(np.abs(back - blob)) < 0.05
