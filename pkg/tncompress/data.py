"""Dataset ingestion: bit-exact MNIST IDX parsing, CIFAR-10 binary records, subsets and batches.

Pixels are mapped to [0, 1] by /255 with no mean subtraction.
"""

import gzip
from loguru import logger
from pathlib import Path
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator
from typing import Iterator, List, Optional, Tuple

import numpy as np

from tncompress.errors import BadMagicError, CountMismatchError, DataFormatError, TruncatedPayloadError
from tncompress.models import DType
from tncompress.tensor import Tensor, numpy_dtype

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR10_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
CIFAR10_RECORD = 1 + 3 * 32 * 32


class Dataset(BaseModel):
    """Images [n, channels, H, W] in [0, 1] with integer labels [n]"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    images: Tensor
    labels: np.ndarray
    num_classes: int = 10
    split: str = "train"
    subset_seed: Optional[int] = None

    @model_validator(mode="after")
    def check_invariants(self) -> "Dataset":
        if self.images.order != 4:
            raise ValueError(f"Images must be [n, channels, H, W], got {list(self.images.shape)}")
        if self.images.shape[0] != len(self.labels):
            raise ValueError(f"{self.images.shape[0]} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"Labels outside [0, {self.num_classes})")
        return self

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def select(self, indices: np.ndarray, subset_seed: Optional[int] = None) -> "Dataset":
        return Dataset(
            images=Tensor.wrap(self.images.array[indices]),
            labels=self.labels[indices],
            num_classes=self.num_classes,
            split=self.split,
            subset_seed=subset_seed,
        )


def _read_header(payload: bytes, magic: int, ndim: int, kind: str) -> Tuple[int, ...]:
    header_size = 4 * (1 + ndim)
    if len(payload) < 4:
        raise TruncatedPayloadError(f"{kind} file is {len(payload)} bytes, shorter than the magic number")
    found = int(np.frombuffer(payload[:4], dtype=">u4")[0])
    if found != magic:
        raise BadMagicError(f"{kind} file has magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(payload) < header_size:
        raise TruncatedPayloadError(f"{kind} header needs {header_size} bytes, got {len(payload)}")
    dims = tuple(int(dim) for dim in np.frombuffer(payload[4:header_size], dtype=">u4"))
    expected = header_size + int(np.prod(dims, dtype=np.int64))
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{kind} payload declares {dims} but holds {len(payload) - header_size} bytes")
    if len(payload) > expected:
        raise DataFormatError(f"{kind} file has {len(payload) - expected} trailing bytes")
    return dims


def parse_idx(images: bytes, labels: bytes, split: str = "train", dtype: DType = DType.F32) -> Dataset:
    """Parse an IDX image/label file pair (big-endian headers, unsigned byte payloads)"""
    n_images, rows, cols = _read_header(images, IDX_IMAGES_MAGIC, 3, "images")
    (n_labels,) = _read_header(labels, IDX_LABELS_MAGIC, 1, "labels")
    if n_images != n_labels:
        raise CountMismatchError(f"Images file holds {n_images} samples, labels file {n_labels}")
    pixels = np.frombuffer(images, dtype=np.uint8, offset=16).reshape(n_images, 1, rows, cols)
    label_array = np.frombuffer(labels, dtype=np.uint8, offset=8).astype(np.int64)
    return _decoded_dataset(pixels, label_array, split, dtype, "IDX")


def _decoded_dataset(pixels: np.ndarray, labels: np.ndarray, split: str, dtype: DType, source: str) -> Dataset:
    """Scale uint8 pixels to [0, 1]; a file that breaks the Dataset invariants is a format error"""
    try:
        return Dataset(
            images=Tensor.wrap(pixels.astype(numpy_dtype(dtype)) / numpy_dtype(dtype)(255)),
            labels=labels,
            split=split,
        )
    except ValidationError as e:
        raise DataFormatError(f"{source} {split} data is invalid: {e.errors()[0]['msg']}") from e


def serialize_idx(dataset: Dataset) -> Tuple[bytes, bytes]:
    """Inverse of parse_idx for single-channel datasets"""
    n, channels, rows, cols = dataset.images.shape
    if channels != 1:
        raise DataFormatError(f"IDX holds single-channel images, dataset has {channels} channels")
    pixels = np.rint(dataset.images.array * 255).astype(np.uint8)
    images = np.array([IDX_IMAGES_MAGIC, n, rows, cols], dtype=">u4").tobytes() + pixels.tobytes()
    labels = np.array([IDX_LABELS_MAGIC, n], dtype=">u4").tobytes() + dataset.labels.astype(np.uint8).tobytes()
    return images, labels


def parse_cifar10(payload: bytes, split: str = "train", dtype: DType = DType.F32) -> Dataset:
    """Parse CIFAR-10 binary records: one label byte followed by 3072 pixel bytes (R, G, B planes)"""
    if len(payload) % CIFAR10_RECORD:
        raise TruncatedPayloadError(f"CIFAR-10 payload of {len(payload)} bytes is not a whole number of records")
    records = np.frombuffer(payload, dtype=np.uint8).reshape(-1, CIFAR10_RECORD)
    pixels = records[:, 1:].reshape(-1, 3, 32, 32)
    return _decoded_dataset(pixels, records[:, 0].astype(np.int64), split, dtype, "CIFAR-10")


def _read_file(path: Path) -> bytes:
    gz_path = path.with_name(path.name + ".gz")
    if path.exists():
        return path.read_bytes()
    if gz_path.exists():
        with gzip.open(gz_path, "rb") as f:
            return f.read()
    raise FileNotFoundError(f"Neither {path} nor {gz_path} exists")


def dataset_files(data_dir: Path, split: str, dataset: str = "mnist") -> List[Path]:
    """Existing on-disk files backing a split, for run manifests"""
    names = MNIST_FILES[split] if dataset == "mnist" else CIFAR10_FILES[split]
    paths = []
    for name in names:
        path = Path(data_dir) / name
        gz_path = path.with_name(name + ".gz")
        paths.append(path if path.exists() else gz_path)
    return [path for path in paths if path.exists()]


def load_mnist(data_dir: Path, split: str = "train", dtype: DType = DType.F32) -> Dataset:
    images_name, labels_name = MNIST_FILES[split]
    data_dir = Path(data_dir)
    dataset = parse_idx(_read_file(data_dir / images_name), _read_file(data_dir / labels_name), split, dtype)
    logger.info(f"Loaded MNIST {split}: {len(dataset)} samples from {data_dir}")
    return dataset


def load_cifar10(data_dir: Path, split: str = "train", dtype: DType = DType.F32) -> Dataset:
    payload = b"".join(_read_file(Path(data_dir) / name) for name in CIFAR10_FILES[split])
    dataset = parse_cifar10(payload, split, dtype)
    logger.info(f"Loaded CIFAR-10 {split}: {len(dataset)} samples from {data_dir}")
    return dataset


def load_dataset(name: str, data_dir: Path, split: str, dtype: DType = DType.F32) -> Dataset:
    if name == "mnist":
        return load_mnist(data_dir, split, dtype)
    if name == "cifar10":
        return load_cifar10(data_dir, split, dtype)
    raise DataFormatError(f"Unknown dataset {name}")


def subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Deterministic sample of n items without replacement"""
    if n < 1:
        raise ValueError(f"Subset size must be positive, got {n}")
    if n > len(dataset):
        raise ValueError(f"Subset of {n} requested from a dataset of {len(dataset)}")
    indices = np.random.default_rng(seed).permutation(len(dataset))[:n]
    return dataset.select(indices, subset_seed=seed)


def batches(
    dataset: Dataset, batch_size: int, seed: Optional[int] = None
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) batches; shuffled when a seed is given. The last partial batch is kept."""
    if batch_size < 1:
        raise ValueError(f"Batch size must be positive, got {batch_size}")
    order = np.arange(len(dataset))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(dataset))
    images = dataset.images.array
    for start in range(0, len(dataset), batch_size):
        index = order[start : start + batch_size]
        yield images[index], dataset.labels[index]


def num_batches(dataset: Dataset, batch_size: int) -> int:
    return -(-len(dataset) // batch_size)
