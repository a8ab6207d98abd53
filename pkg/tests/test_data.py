import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from musekd.data import (
    DataFormatError,
    GaussianPairSpec,
    augment,
    corr_gaussian_batch,
    denormalize,
    first_per_class,
    hflip,
    load_cifar_bin,
    load_idx,
    normalize,
    read_idx,
)


def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


@pytest.fixture
def idx_pair(tmp_path):
    """Three 2x3 images with hand-picked pixels and labels 2, 0, 1."""
    pixels = list(range(0, 18 * 14, 14))  # 18 distinct bytes
    img = tmp_path / "img"
    lab = tmp_path / "lab"
    img.write_bytes(idx_bytes(0x803, (3, 2, 3), pixels))
    lab.write_bytes(idx_bytes(0x801, (3,), [2, 0, 1]))
    return img, lab, np.array(pixels, dtype=np.float64).reshape(3, 1, 2, 3) / 255


def test_idx_fixture_parses_exactly(idx_pair):
    img, lab, raw = idx_pair
    assert read_idx(img).shape == (3, 2, 3)
    assert read_idx(img)[1, 0, 2] == 14 * 8
    ds = load_idx(img, lab, num_classes=3)
    np.testing.assert_array_equal(ds.labels, [2, 0, 1])
    assert ds.mean[0] == pytest.approx(raw.mean(), rel=1e-6)
    assert ds.std[0] == pytest.approx(raw.std(), rel=1e-6)
    np.testing.assert_allclose(denormalize(ds.images, ds.mean, ds.std), raw, atol=1e-6)


def test_idx_loader_is_bit_deterministic(idx_pair):
    img, lab, _ = idx_pair
    a, b = load_idx(img, lab, 3), load_idx(img, lab, 3)
    assert a.images.tobytes() == b.images.tobytes()


def test_idx_test_split_reuses_stats(idx_pair):
    img, lab, raw = idx_pair
    ds = load_idx(img, lab, 3, split="test", stats=(np.float32([0.5]), np.float32([0.25])))
    np.testing.assert_allclose(ds.images, (raw - 0.5) / 0.25, rtol=1e-6)


@pytest.mark.parametrize(
    "blob",
    [
        b"\x00\x00",
        idx_bytes(0x0D03, (1, 1, 1), [0]),  # float payload type
        idx_bytes(0x803, (2, 2, 2), [0] * 7),  # short payload
        idx_bytes(0x803, (1, 1, 1), [0, 0]),  # long payload
        struct.pack(">I", 0x803) + b"\x00\x00",  # header cut
    ],
)
def test_idx_malformed(tmp_path, blob):
    p = tmp_path / "bad"
    p.write_bytes(blob)
    with pytest.raises(DataFormatError):
        read_idx(p)


def test_idx_wrong_role_and_count(tmp_path, idx_pair):
    img, lab, _ = idx_pair
    with pytest.raises(DataFormatError, match="magic"):
        load_idx(lab, img)
    short = tmp_path / "short"
    short.write_bytes(idx_bytes(0x801, (2,), [0, 1]))
    with pytest.raises(DataFormatError, match="count"):
        load_idx(img, short)


def cifar_rows(labels, fine=None, seed=0):
    rng = np.random.default_rng(seed)
    rows, pixels = [], []
    for i, lab in enumerate(labels):
        px = rng.integers(0, 256, 3072, dtype=np.uint8)
        head = bytes([lab]) if fine is None else bytes([lab, fine[i]])
        rows.append(head + px.tobytes())
        pixels.append(px)
    return b"".join(rows), np.array(pixels).reshape(-1, 3, 32, 32) / 255.0


def test_cifar10_fixture(tmp_path):
    blob, px = cifar_rows([3, 9, 0])
    p = tmp_path / "data_batch_1.bin"
    p.write_bytes(blob)
    ds = load_cifar_bin(p)
    assert ds.num_classes == 10 and ds.image_shape == (3, 32, 32)
    np.testing.assert_array_equal(ds.labels, [3, 9, 0])
    np.testing.assert_allclose(denormalize(ds.images, ds.mean, ds.std), px, atol=1e-6)
    np.testing.assert_allclose(ds.mean, px.mean(axis=(0, 2, 3)), rtol=1e-6)


def test_cifar100_fixture_fine_and_coarse(tmp_path):
    blob, _ = cifar_rows([1, 19], fine=[57, 99])
    p = tmp_path / "train.bin"
    p.write_bytes(blob)
    assert list(load_cifar_bin(p).labels) == [57, 99]
    coarse = load_cifar_bin(p, coarse=True)
    assert list(coarse.labels) == [1, 19] and coarse.num_classes == 20


def test_cifar_multiple_files_concatenate(tmp_path):
    a, _ = cifar_rows([1], seed=1)
    b, _ = cifar_rows([2, 3], seed=2)
    (tmp_path / "a").write_bytes(a)
    (tmp_path / "b").write_bytes(b)
    ds = load_cifar_bin([tmp_path / "a", tmp_path / "b"])
    assert list(ds.labels) == [1, 2, 3]


def test_cifar_bad_stride(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"\x00" * 3075)
    with pytest.raises(DataFormatError):
        load_cifar_bin(p)
    blob, _ = cifar_rows([1])
    p.write_bytes(blob)
    with pytest.raises(ValueError):
        load_cifar_bin(p, coarse=True)


def test_first_per_class_is_deterministic_prefix(idx_pair):
    img, lab, _ = idx_pair
    ds = load_idx(img, lab, 3)
    sub = first_per_class(ds, 1)
    assert list(sub.labels) == [2, 0, 1]


def test_first_per_class_on_digits(digits_splits):
    sub = first_per_class(digits_splits.train, 500)
    assert len(sub) == 5000 and np.bincount(sub.labels).tolist() == [500] * 10
    sub10 = first_per_class(digits_splits.train, 10)
    assert np.bincount(sub10.labels).tolist() == [10] * 10
    first_of_one = np.flatnonzero(digits_splits.train.labels == 1)[:10]
    np.testing.assert_array_equal(sub10.images[sub10.labels == 1], digits_splits.train.images[first_of_one])


def test_digits_substitute_shape(digits_splits):
    assert digits_splits.train.image_shape == (1, 28, 28)
    assert digits_splits.test.num_classes == 10
    assert digits_splits.test.mean[0] == digits_splits.train.mean[0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(0.1, 3))
def test_normalize_round_trip(seed, mean, std):
    x = np.random.default_rng(seed).random((2, 1, 3, 3)).astype(np.float32)
    back = denormalize(normalize(x, [mean], [std]), [mean], [std])
    np.testing.assert_allclose(back, x, atol=1e-6)


def test_augment_deterministic_and_in_range():
    x = np.random.default_rng(0).standard_normal((5, 3, 8, 8)).astype(np.float32)
    a, b = augment(x, seed=3), augment(x, seed=3)
    np.testing.assert_array_equal(a, b)
    assert a.shape == x.shape and a.min() >= x.min() and a.max() <= x.max()
    assert not np.array_equal(augment(x, seed=4), a)


def test_augment_without_pad_only_flips():
    x = np.arange(2 * 1 * 2 * 3, dtype=np.float32).reshape(2, 1, 2, 3)
    out = augment(x, seed=0, pad=0, flip=True)
    for i in range(2):
        assert np.array_equal(out[i], x[i]) or np.array_equal(out[i], x[i][..., ::-1])
    np.testing.assert_array_equal(hflip(hflip(x)), x)


def test_gaussian_analytic_mi():
    assert GaussianPairSpec(0.0).analytic_mi_nats == 0.0
    assert GaussianPairSpec(0.9).analytic_mi_nats == pytest.approx(-0.5 * math.log(0.19), rel=1e-12)
    assert GaussianPairSpec(0.9).analytic_mi_nats == pytest.approx(0.830366, abs=1e-6)
    assert GaussianPairSpec(0.5, 3).analytic_mi_nats == pytest.approx(-1.5 * math.log(0.75))
    with pytest.raises(ValueError):
        GaussianPairSpec(1.0)


def test_gaussian_batch_moments():
    x, y = corr_gaussian_batch(GaussianPairSpec(0.9), 100_000, seed=1)
    x, y = x.data[:, 0].astype(np.float64), y.data[:, 0].astype(np.float64)
    assert abs(np.corrcoef(x, y)[0, 1] - 0.9) < 0.01
    assert abs(x.var() - 1) < 0.02 and abs(y.var() - 1) < 0.02
