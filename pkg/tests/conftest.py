import numpy as np
import pytest
import torch

from ugeforge.data import SplitSpec, make_blobs, split_dataset

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def blobs_small():
    """A 4-class 16x16 grayscale corpus small enough for unit tests."""
    return make_blobs(num_classes=4, num_samples=600, image_size=16, channels=1, seed=11)


@pytest.fixture(scope="session")
def blobs_splits(blobs_small):
    return split_dataset(
        blobs_small,
        SplitSpec(fractions={"protect": 0.5, "embed": 0.3, "test": 0.2}, seed=3),
    )


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference normalized by the largest analytic magnitude."""
    scale = max(float(np.abs(analytic).max()), 1e-10)
    return float(np.abs(analytic - numeric).max() / scale)


def central_difference(f, x: torch.Tensor, h: float = 1e-5) -> np.ndarray:
    """Elementwise central finite differences of a scalar function of x."""
    base = x.detach().clone()
    flat = base.reshape(-1)
    out = np.empty(flat.numel(), dtype=np.float64)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + h
        up = float(f(base))
        flat[i] = orig - h
        down = float(f(base))
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return out.reshape(tuple(x.shape))
