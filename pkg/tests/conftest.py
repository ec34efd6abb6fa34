from pathlib import Path

import numpy as np
import pytest

from tncompress.config import settings
from tncompress.data import MNIST_FILES, Dataset
from tncompress.models import DType, LayerKind, LayerSpec
from tncompress.nn import Network
from tncompress.tensor import Tensor

MNIST_DIR = Path(settings.data_dir)


def mnist_available() -> bool:
    return all(
        (MNIST_DIR / name).exists() or (MNIST_DIR / f"{name}.gz").exists()
        for names in MNIST_FILES.values()
        for name in names
    )


requires_mnist = pytest.mark.skipif(not mnist_available(), reason=f"MNIST files not found in {MNIST_DIR}")


def make_dataset(n: int = 96, classes: int = 3, seed: int = 0, split: str = "train") -> Dataset:
    """4x4 single-channel images: faint noise plus one bright pixel at the label's index"""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n)
    images = rng.uniform(0.0, 0.2, size=(n, 1, 4, 4))
    images.reshape(n, -1)[np.arange(n), labels] = 1.0
    return Dataset(images=Tensor(images, DType.F32), labels=labels, split=split)


def tiny_fc_layers(hidden: int = 32, classes: int = 3):
    return [
        LayerSpec(name="flatten", kind=LayerKind.FLATTEN),
        LayerSpec(name="fc1", kind=LayerKind.LINEAR, in_features=16, out_features=hidden),
        LayerSpec(name="relu1", kind=LayerKind.RELU),
        LayerSpec(name="fc2", kind=LayerKind.LINEAR, in_features=hidden, out_features=classes),
    ]


def tiny_fc(seed: int = 0, dtype: DType = DType.F32) -> Network:
    return Network(tiny_fc_layers(), (1, 4, 4), model="fc-tiny", dtype=dtype).init_parameters(seed)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def train_set():
    return make_dataset(96, seed=0)


@pytest.fixture
def test_set():
    return make_dataset(48, seed=1, split="test")
