import os
import sys
from pathlib import Path

import numpy as np
import pytest

from musekd import tensor as F
from musekd.data import load_idx, make_digits_idx
from musekd.tensor import Tensor
from musekd.training import DataSplits


def numeric_grad(fn, arrays, index, h=1e-5):
    """Central differences of scalar ``fn(*arrays)`` with respect to ``arrays[index]``."""
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        up = fn(*arrays)
        x[i] = orig - h
        down = fn(*arrays)
        x[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad


def max_rel_error(analytic, numeric):
    """Largest absolute deviation, relative to the largest gradient magnitude."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(build, arrays, extra_params=(), h=1e-5):
    """Compare autodiff and finite-difference gradients of ``build(*tensors) -> scalar``.

    ``arrays`` are float64 inputs (all differentiated). ``extra_params`` are
    Tensors captured by ``build`` (e.g. layer weights) that are checked too.
    Returns the worst relative error over everything checked.
    """
    with F.default_dtype(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        for p in extra_params:
            p.grad = None
        out = build(*tensors)
        assert out.size == 1
        out.backward()

        def value(*arrs):
            with F.no_grad():
                return build(*[Tensor(a) for a in arrs]).item()

        worst = 0.0
        for i, t in enumerate(tensors):
            num = numeric_grad(value, arrays, i, h)
            ana = t.grad if t.grad is not None else np.zeros_like(arrays[i])
            worst = max(worst, max_rel_error(ana, num))
        for p in extra_params:
            def pvalue(arr, p=p):
                saved = p.data
                p.data = arr
                try:
                    return value(*arrays)
                finally:
                    p.data = saved

            buf = [p.data.copy()]
            num = numeric_grad(pvalue, buf, 0, h)
            ana = p.grad if p.grad is not None else np.zeros_like(p.data)
            worst = max(worst, max_rel_error(ana, num))
        return worst


def to_float64(module):
    """Cast every parameter and buffer of a module to float64 in place."""
    for _, p in module.named_parameters():
        p.data = p.data.astype(np.float64)
    for m in module.modules():
        for k in list(m._buffers):
            m._buffers[k] = m._buffers[k].astype(np.float64)
    return module


@pytest.fixture(scope="session")
def digits_paths(tmp_path_factory):
    """MNIST-format files: real MNIST from $MUSE_MNIST_DIR when set, else the digits substitute."""
    real = os.environ.get("MUSE_MNIST_DIR")
    if real:
        root = Path(real)
        return {
            "train_images": root / "train-images-idx3-ubyte",
            "train_labels": root / "train-labels-idx1-ubyte",
            "test_images": root / "t10k-images-idx3-ubyte",
            "test_labels": root / "t10k-labels-idx1-ubyte",
        }
    return make_digits_idx(tmp_path_factory.mktemp("digits"))


@pytest.fixture(scope="session")
def digits_splits(digits_paths):
    train = load_idx(digits_paths["train_images"], digits_paths["train_labels"])
    test = load_idx(digits_paths["test_images"], digits_paths["test_labels"], split="test",
                    stats=(train.mean, train.std))
    return DataSplits(train, test)


@pytest.fixture
def tiny_splits(digits_splits):
    """Small subsets for fast training-loop tests."""
    from musekd.data import first_per_class

    return DataSplits(first_per_class(digits_splits.train, 8), digits_splits.test.subset(slice(0, 100)))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
