"""Dataset readers, augmentation and synthetic dependency benchmarks.

Readers produce a :class:`LabeledDataset` whose images are scaled to [0, 1]
and then normalized with per-channel statistics. The statistics travel with
the dataset so the test split can reuse the training split's constants.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .tensor import Tensor, get_default_dtype

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_PIXELS = 3 * 32 * 32


class DataFormatError(ValueError):
    """A dataset file does not match its binary layout."""


@dataclass
class LabeledDataset:
    images: np.ndarray  # [N, C, H, W] float32, normalized
    labels: np.ndarray  # [N] int64
    mean: np.ndarray  # per-channel, applied to [0, 1] pixels
    std: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels fall outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def subset(self, index) -> "LabeledDataset":
        return replace(self, images=self.images[index], labels=self.labels[index])


def channel_stats(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of [N, C, H, W] pixels in [0, 1]."""
    mean = pixels.mean(axis=(0, 2, 3), dtype=np.float64)
    std = pixels.std(axis=(0, 2, 3), dtype=np.float64)
    return mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32)


def normalize(pixels: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, np.float32).reshape(1, -1, 1, 1)
    return ((pixels - mean) / std).astype(np.float32)


def denormalize(images: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, np.float32).reshape(1, -1, 1, 1)
    return (images * std + mean).astype(np.float32)


def _build(pixels: np.ndarray, labels: np.ndarray, num_classes: int, split: str, stats) -> LabeledDataset:
    mean, std = channel_stats(pixels) if stats is None else stats
    return LabeledDataset(normalize(pixels, mean, std), labels.astype(np.int64), mean, std, num_classes, split)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an array of its declared shape."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic >> 8 != 0x08:
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x} (only unsigned bytes supported)")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if ndim == 0 or len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header != expected:
        raise DataFormatError(
            f"{path}: payload has {len(raw) - header} bytes, header declares {expected}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train", stats=None) -> LabeledDataset:
    """Read an IDX image/label pair (the MNIST distribution format).

    ``stats`` is an optional ``(mean, std)`` pair; by default the statistics
    are computed from these images.
    """
    for p, magic in ((images_path, IDX_IMAGES_MAGIC), (labels_path, IDX_LABELS_MAGIC)):
        with open(p, "rb") as fh:
            head = fh.read(4)
        if len(head) < 4:
            raise DataFormatError(f"{p}: truncated IDX header")
        found = struct.unpack(">I", head)[0]
        if found != magic:
            raise DataFormatError(f"{p}: expected magic 0x{magic:08x}, found 0x{found:08x}")
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if len(images) != len(labels):
        raise DataFormatError(f"image count {len(images)} does not match label count {len(labels)}")
    pixels = images[:, None, :, :].astype(np.float32) / 255.0
    return _build(pixels, labels, num_classes, split, stats)


# ---------------------------------------------------------------------------
# CIFAR binary
# ---------------------------------------------------------------------------


def load_cifar_bin(path, coarse: bool = False, cifar100: bool | None = None, split: str = "train",
                   stats=None) -> LabeledDataset:
    """Read CIFAR-10 (1 label byte) or CIFAR-100 (coarse, fine label bytes) rows.

    ``path`` may be a single file or a list of batch files. The variant is
    inferred from the row stride unless ``cifar100`` is given.
    """
    paths = [path] if isinstance(path, (str, os.PathLike)) else list(path)
    raw = b"".join(Path(p).read_bytes() for p in paths)
    if cifar100 is None:
        fits10 = len(raw) % (CIFAR_PIXELS + 1) == 0
        fits100 = len(raw) % (CIFAR_PIXELS + 2) == 0
        if fits10 == fits100:
            raise DataFormatError(
                f"{len(raw)} bytes is not a whole number of CIFAR-10 or CIFAR-100 rows"
            )
        cifar100 = fits100
    if coarse and not cifar100:
        raise ValueError("coarse labels exist only in CIFAR-100")
    label_bytes = 2 if cifar100 else 1
    stride = CIFAR_PIXELS + label_bytes
    if len(raw) == 0 or len(raw) % stride:
        raise DataFormatError(f"{len(raw)} bytes is not a multiple of the {stride}-byte row")
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(-1, stride)
    labels = rows[:, 0] if coarse or not cifar100 else rows[:, 1]
    pixels = rows[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    num_classes = 10 if not cifar100 else (20 if coarse else 100)
    return _build(pixels, labels, num_classes, split, stats)


# ---------------------------------------------------------------------------
# subsets and augmentation
# ---------------------------------------------------------------------------


def first_per_class(ds: LabeledDataset, k: int) -> LabeledDataset:
    """The first ``k`` examples of every class, in file order."""
    keep = np.zeros(len(ds), dtype=bool)
    for c in range(ds.num_classes):
        keep[np.flatnonzero(ds.labels == c)[:k]] = True
    return ds.subset(keep)


def hflip(batch: np.ndarray) -> np.ndarray:
    return batch[..., ::-1].copy()


def augment(batch: np.ndarray, seed: int, pad: int = 4, flip: bool = True, fill: float | None = None) -> np.ndarray:
    """Random crop after ``pad``-pixel padding, plus random horizontal flip.

    Padding uses ``fill`` (default: the batch minimum, i.e. the black level),
    so outputs never leave the input's value range.
    """
    rng = np.random.default_rng(seed)
    n, c, h, w = batch.shape
    out = batch
    if pad:
        fill = float(batch.min()) if fill is None else fill
        padded = np.full((n, c, h + 2 * pad, w + 2 * pad), fill, dtype=batch.dtype)
        padded[:, :, pad : pad + h, pad : pad + w] = batch
        dy = rng.integers(0, 2 * pad + 1, size=n)
        dx = rng.integers(0, 2 * pad + 1, size=n)
        out = np.empty_like(batch)
        for i in range(n):
            out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    if flip:
        mask = rng.random(n) < 0.5
        out = out.copy() if out is batch else out
        out[mask] = out[mask][..., ::-1]
    return out


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianPairSpec:
    rho: float
    dim: int = 1

    def __post_init__(self):
        if not -1 < self.rho < 1:
            raise ValueError(f"|rho| must be < 1, got {self.rho}")
        if self.dim < 1:
            raise ValueError("dim must be positive")

    @property
    def analytic_mi_nats(self) -> float:
        return -0.5 * self.dim * float(np.log1p(-self.rho**2))


def corr_gaussian_batch(spec: GaussianPairSpec, n: int, seed) -> tuple[Tensor, Tensor]:
    """n draws of (X, Y), each coordinate pair standard bivariate normal with correlation rho."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, spec.dim))
    z = rng.standard_normal((n, spec.dim))
    y = spec.rho * x + np.sqrt(1.0 - spec.rho**2) * z
    dtype = get_default_dtype()
    return Tensor(x.astype(dtype)), Tensor(y.astype(dtype))


def make_digits_idx(directory, train_per_class: int = 500, seed: int = 0) -> dict[str, Path]:
    """Write an MNIST-format (28x28, IDX) digit set built from scikit-learn's bundled digits.

    The 8x8 originals are split per class (two thirds train, one third test),
    upsampled into a 20x20 box centred on a 28x28 canvas, and the train pool is
    expanded to ``train_per_class`` images per class with small random affine
    jitter. Test images get one jitter each on top of the clean copy. Returns
    the four file paths keyed like the MNIST distribution.
    """
    from scipy import ndimage
    from sklearn.datasets import load_digits

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "train_images": directory / "train-images-idx3-ubyte",
        "train_labels": directory / "train-labels-idx1-ubyte",
        "test_images": directory / "t10k-images-idx3-ubyte",
        "test_labels": directory / "t10k-labels-idx1-ubyte",
    }
    if all(p.exists() for p in paths.values()):
        return paths

    digits = load_digits()
    rng = np.random.default_rng(seed)

    def to_canvas(img8):
        big = ndimage.zoom(img8 / 16.0, 2.5, order=1)  # 8 -> 20
        canvas = np.zeros((28, 28))
        canvas[4:24, 4:24] = np.clip(big, 0, 1)
        return canvas

    def jitter(canvas):
        angle = np.deg2rad(rng.uniform(-12, 12))
        s = rng.uniform(0.9, 1.1)
        shift = rng.uniform(-2, 2, size=2)
        rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]) / s
        centre = np.array([13.5, 13.5])
        offset = centre - rot @ (centre + shift)
        return np.clip(ndimage.affine_transform(canvas, rot, offset=offset, order=1), 0, 1)

    train_x, train_y, test_x, test_y = [], [], [], []
    for c in range(10):
        idx = np.flatnonzero(digits.target == c)
        cut = (2 * len(idx)) // 3
        pool = [to_canvas(digits.images[i]) for i in idx[:cut]]
        for j in range(train_per_class):
            base = pool[j % len(pool)]
            train_x.append(base if j < len(pool) else jitter(base))
            train_y.append(c)
        for i in idx[cut:]:
            canvas = to_canvas(digits.images[i])
            test_x.extend([canvas, jitter(canvas)])
            test_y.extend([c, c])

    # interleave classes so "first k per class" and file order behave like MNIST
    order = np.argsort(np.tile(np.arange(train_per_class), 10), kind="stable")
    train_x = np.asarray(train_x)[order]
    train_y = np.asarray(train_y)[order]
    write_idx(paths["train_images"], np.round(train_x * 255))
    write_idx(paths["train_labels"], train_y)
    write_idx(paths["test_images"], np.round(np.asarray(test_x) * 255))
    write_idx(paths["test_labels"], np.asarray(test_y))
    return paths
