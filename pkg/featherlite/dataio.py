"""Dataset fetching, decoding, splits, pairing, k-fold partitions, and batching.

MNIST and Fashion-MNIST come as IDX files, CIFAR-10 as its binary batches.
Pixels are scaled to [0, 1] and images are channels-last.
"""

from __future__ import annotations

import gzip
import logging
import shutil
import tarfile
import urllib.request
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from tqdm import tqdm

from featherlite.augment import AugmentConfig, augment_batch
from featherlite.tensor import ConfigurationError, RngStream
from featherlite.utils import compute_file_hash, ensure_dir

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 1 + 32 * 32 * 3
PIXEL_SCALE = 1.0 / 255.0
NUM_CLASSES = 10
DEFAULT_VAL_SIZE = 10_000
CHECKSUM_FILE = "SHA256SUMS"


class DatasetError(Exception):
    """Base class for dataset acquisition and decoding failures."""


class DatasetNotFoundError(DatasetError):
    """Expected dataset files are not in the data directory."""


class BadMagicError(DatasetError):
    """A file header does not carry the expected format tag."""


class TruncatedFileError(DatasetError):
    """A file ends before its declared contents."""


class ChecksumMismatchError(DatasetError):
    """A file's digest differs from the recorded or published one."""


@dataclass(frozen=True, slots=True)
class DatasetAdvice:
    """User-facing explanation for a dataset failure."""

    reason: str
    suggestion: str


@dataclass(frozen=True)
class DatasetSpec:
    """Where a dataset comes from and how it is laid out on disk."""

    name: str
    kind: str
    image_shape: tuple[int, int, int]
    class_names: tuple[str, ...]
    urls: dict[str, str]
    md5: dict[str, str]
    train_files: tuple[str, ...]
    test_files: tuple[str, ...]


_MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}

DATASETS: dict[str, DatasetSpec] = {
    "mnist": DatasetSpec(
        name="mnist",
        kind="idx",
        image_shape=(28, 28, 1),
        class_names=tuple(str(d) for d in range(10)),
        urls={f: f"https://ossci-datasets.s3.amazonaws.com/mnist/{f}" for f in _MNIST_FILES.values()},
        md5={
            "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
            "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
            "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
            "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
        },
        train_files=(_MNIST_FILES["train_images"], _MNIST_FILES["train_labels"]),
        test_files=(_MNIST_FILES["test_images"], _MNIST_FILES["test_labels"]),
    ),
    "fashion": DatasetSpec(
        name="fashion",
        kind="idx",
        image_shape=(28, 28, 1),
        class_names=(
            "T-shirt/top",
            "Trouser",
            "Pullover",
            "Dress",
            "Coat",
            "Sandal",
            "Shirt",
            "Sneaker",
            "Bag",
            "Ankle boot",
        ),
        urls={
            f: f"http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/{f}"
            for f in _MNIST_FILES.values()
        },
        md5={
            "train-images-idx3-ubyte.gz": "8d4fb7e6c68d591d4c3dfef9ec88bf0d",
            "train-labels-idx1-ubyte.gz": "25c81989df183df01b3e8a0aad5dffbe",
            "t10k-images-idx3-ubyte.gz": "bef4ecab320f06d8554ea6380940ec79",
            "t10k-labels-idx1-ubyte.gz": "bb300cfdad3c16e7a12a480ee83cd310",
        },
        train_files=(_MNIST_FILES["train_images"], _MNIST_FILES["train_labels"]),
        test_files=(_MNIST_FILES["test_images"], _MNIST_FILES["test_labels"]),
    ),
    "cifar10": DatasetSpec(
        name="cifar10",
        kind="cifar",
        image_shape=(32, 32, 3),
        class_names=(
            "airplane",
            "automobile",
            "bird",
            "cat",
            "deer",
            "dog",
            "frog",
            "horse",
            "ship",
            "truck",
        ),
        urls={"cifar-10-binary.tar.gz": "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"},
        md5={"cifar-10-binary.tar.gz": "c32a1d4ab5d03f1284b67883e8d87530"},
        train_files=tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
        test_files=("test_batch.bin",),
    ),
}


def get_spec(name: str) -> DatasetSpec:
    try:
        return DATASETS[name]
    except KeyError as exc:
        raise ConfigurationError(
            f"unknown dataset '{name}'; choose one of {', '.join(sorted(DATASETS))}"
        ) from exc


# Decoding -------------------------------------------------------------------


def _open_maybe_gzip(path: Path) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        try:
            with gzip.open(path, "rb") as f:
                return f.read()
        except (EOFError, gzip.BadGzipFile) as exc:
            raise TruncatedFileError(f"{path}: damaged gzip stream ({exc})") from exc
    return path.read_bytes()


def read_idx(path: Path, expected_magic: int | None = None) -> np.ndarray:
    """Decode an IDX file (optionally gzip-compressed) into a uint8 array.

    The header is a big-endian magic (``0x00000803`` for images,
    ``0x00000801`` for labels) followed by one big-endian uint32 per
    dimension.

    Raises:
        BadMagicError: Unknown magic, or not ``expected_magic``.
        TruncatedFileError: Fewer bytes than the header declares.
    """
    path = Path(path)
    raw = _open_maybe_gzip(path)
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, too short for an IDX header")
    magic = int.from_bytes(raw[:4], "big")
    if magic not in (IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC) or (
        expected_magic is not None and magic != expected_magic
    ):
        raise BadMagicError(f"{path}: magic 0x{magic:08x} is not an IDX image or label file")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype=">u4", count=ndim, offset=4))
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise TruncatedFileError(f"{path}: {len(raw) - header} data bytes, header declares {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def read_cifar_batch(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Decode a CIFAR-10 binary batch into ``[N, 32, 32, 3]`` uint8 images and labels.

    Each record is one label byte then 1024 red, 1024 green and 1024 blue
    bytes, each plane row-major.

    Raises:
        TruncatedFileError: File size is not a whole number of records.
        DatasetError: A label byte is outside ``[0, 10)``.
    """
    path = Path(path)
    raw = path.read_bytes()
    if not raw or len(raw) % CIFAR_RECORD_BYTES:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is not a multiple of {CIFAR_RECORD_BYTES}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= NUM_CLASSES:
        raise DatasetError(f"{path}: label byte {labels.max()} out of range")
    images = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


# Writing ----------------------------------------------------------------------


def write_idx(path: Path, array: np.ndarray, *, compress: bool | None = None) -> Path:
    """Encode a uint8 array as IDX; gzip when ``compress`` or the name ends in ``.gz``.

    The magic is ``0x0800 | ndim``: labels get ``0x801`` and 3-D image stacks ``0x803``.
    """
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x0800 | array.ndim
    header = magic.to_bytes(4, "big") + np.asarray(array.shape, dtype=">u4").tobytes()
    payload = header + array.tobytes()
    ensure_dir(path.parent)
    if compress if compress is not None else path.suffix == ".gz":
        with gzip.GzipFile(path, "wb", mtime=0) as f:
            f.write(payload)
    else:
        path.write_bytes(payload)
    return path


def write_cifar_batch(path: Path, images: np.ndarray, labels: np.ndarray) -> Path:
    """Encode ``[N, 32, 32, 3]`` uint8 images and labels as a CIFAR-10 binary batch."""
    images = np.asarray(images, dtype=np.uint8)
    if images.shape[1:] != (32, 32, 3) or labels.shape != (images.shape[0],):
        raise ConfigurationError(f"CIFAR batches need [N, 32, 32, 3] images, got {images.shape}")
    planes = images.transpose(0, 3, 1, 2).reshape(images.shape[0], -1)
    records = np.concatenate([labels.astype(np.uint8)[:, np.newaxis], planes], axis=1)
    ensure_dir(path.parent)
    path.write_bytes(records.tobytes())
    return path


def synthetic_images(labels: np.ndarray, shape: Sequence[int], rng: RngStream) -> np.ndarray:
    """uint8 images where each class is a bright square at its own grid position over noise."""
    height, width, channels = (int(d) for d in shape)
    gen = rng.generator()
    images = gen.integers(0, 60, size=(labels.shape[0], height, width, channels), dtype=np.uint8)
    side = max(3, min(height, width) // 5)
    for index, label in enumerate(labels):
        row, col = divmod(int(label), 5)
        top = 1 + row * (height - side - 2)
        left = 1 + col * (width - side - 2) // 4
        jitter = gen.integers(-1, 2, size=2)
        top = int(np.clip(top + jitter[0], 0, height - side))
        left = int(np.clip(left + jitter[1], 0, width - side))
        images[index, top : top + side, left : left + side, :] = gen.integers(180, 256, dtype=np.uint8)
    return images


def write_synthetic_dataset(
    name: str,
    data_dir: Path,
    *,
    train_size: int = 1200,
    test_size: int = 300,
    seed: int = 0,
) -> Path:
    """Write a small learnable dataset in ``name``'s on-disk format, with checksums.

    Labels cycle through the ten classes, so every class is present in both
    splits whenever each split has at least ten samples.

    Returns:
        Directory holding the written files.
    """
    spec = get_spec(name)
    directory = dataset_dir(name, data_dir)
    rng = RngStream(seed, f"synthetic/{name}")
    split_sizes = {"train": train_size, "test": test_size}
    written: list[Path] = []
    if spec.kind == "cifar":
        directory = directory / "cifar-10-batches-bin"
        for split, files in (("train", spec.train_files), ("test", spec.test_files)):
            labels = np.arange(split_sizes[split]) % NUM_CLASSES
            images = synthetic_images(labels, spec.image_shape, rng.child(split))
            for part, (img, lab) in enumerate(
                zip(np.array_split(images, len(files)), np.array_split(labels, len(files)), strict=True)
            ):
                written.append(write_cifar_batch(directory / files[part], img, lab))
    else:
        for split, files in (("train", spec.train_files), ("test", spec.test_files)):
            labels = np.arange(split_sizes[split]) % NUM_CLASSES
            images = synthetic_images(labels, spec.image_shape, rng.child(split))[..., 0]
            written.append(write_idx(directory / files[0], images))
            written.append(write_idx(directory / files[1], labels))
    write_checksums(directory, written)
    logger.info("Wrote synthetic %s (%d train / %d test) to %s", name, train_size, test_size, directory)
    return directory


# Datasets -------------------------------------------------------------------


@dataclass
class Dataset:
    """Images ``[N, H, W, C]`` in [0, 1] with class labels ``[N]``."""

    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    class_names: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ConfigurationError(f"dataset images must be [N, H, W, C], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ConfigurationError(
                f"{self.images.shape[0]} images but labels shaped {self.labels.shape}"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise ConfigurationError(f"labels must lie in [0, {NUM_CLASSES})")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.images.shape[1:])  # type: ignore[return-value]

    def subset(self, indices: np.ndarray | slice) -> Dataset:
        return Dataset(self.images[indices], self.labels[indices], self.name, self.class_names)

    def head(self, limit: int | None) -> Dataset:
        """First ``limit`` samples in stored order (all when None)."""
        if limit is None or limit >= len(self):
            return self
        return self.subset(slice(0, limit))

    def concat(self, other: Dataset) -> Dataset:
        if self.sample_shape != other.sample_shape:
            raise ConfigurationError(f"cannot join {self.sample_shape} with {other.sample_shape}")
        return Dataset(
            np.concatenate([self.images, other.images]),
            np.concatenate([self.labels, other.labels]),
            self.name,
            self.class_names,
        )


@dataclass
class DatasetSplits:
    train: Dataset
    test: Dataset


def _scale(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32) * np.float32(PIXEL_SCALE)).astype(np.float32)


def dataset_dir(name: str, data_dir: Path) -> Path:
    return Path(data_dir) / name


def _resolve(directory: Path, filename: str) -> Path:
    """Accept ``foo.gz`` or its decompressed ``foo``."""
    for candidate in (directory / filename, directory / filename.removesuffix(".gz")):
        if candidate.exists():
            return candidate
    raise DatasetNotFoundError(f"{directory / filename} not found")


def read_checksums(directory: Path) -> dict[str, str]:
    record = directory / CHECKSUM_FILE
    if not record.exists():
        return {}
    sums = {}
    for line in record.read_text(encoding="utf-8").splitlines():
        if line.strip():
            digest, name = line.split(maxsplit=1)
            sums[name.strip().lstrip("*")] = digest
    return sums


def verify_checksums(directory: Path, files: Sequence[Path]) -> None:
    """Compare SHA-256 digests of ``files`` against ``SHA256SUMS``.

    Raises:
        ChecksumMismatchError: If a recorded digest differs.
    """
    sums = read_checksums(directory)
    if not sums:
        logger.warning("No %s in %s; skipping integrity check", CHECKSUM_FILE, directory)
        return
    for path in files:
        expected = sums.get(path.name)
        if expected is None:
            logger.warning("No checksum recorded for %s", path.name)
            continue
        actual = compute_file_hash(path)
        if actual != expected:
            raise ChecksumMismatchError(f"{path}: sha256 {actual} does not match recorded {expected}")


def load_dataset(name: str, data_dir: Path, *, verify: bool = True) -> DatasetSplits:
    """Decode a fetched dataset into train and test splits.

    Raises:
        DatasetNotFoundError: Files missing from ``data_dir/<name>``.
        BadMagicError, TruncatedFileError, ChecksumMismatchError: Damaged files.
    """
    spec = get_spec(name)
    directory = dataset_dir(name, data_dir)
    if spec.kind == "cifar":
        directory = directory / "cifar-10-batches-bin"
    if not directory.is_dir():
        raise DatasetNotFoundError(f"{directory} does not exist; run 'featherlite fetch-data {name}'")
    train_paths = [_resolve(directory, f) for f in spec.train_files]
    test_paths = [_resolve(directory, f) for f in spec.test_files]
    if verify:
        verify_checksums(directory, [*train_paths, *test_paths])

    def _load(paths: list[Path]) -> Dataset:
        if spec.kind == "idx":
            images = read_idx(paths[0], IDX_IMAGE_MAGIC)
            labels = read_idx(paths[1], IDX_LABEL_MAGIC).astype(np.int64)
            if images.shape[0] != labels.shape[0]:
                raise DatasetError(
                    f"{paths[0].name} has {images.shape[0]} images, {paths[1].name} {labels.shape[0]} labels"
                )
            images = images[..., np.newaxis]
        else:
            decoded = [read_cifar_batch(p) for p in paths]
            images = np.concatenate([d[0] for d in decoded])
            labels = np.concatenate([d[1] for d in decoded])
        return Dataset(_scale(images), labels, spec.name, spec.class_names)

    splits = DatasetSplits(_load(train_paths), _load(test_paths))
    logger.info(
        "Loaded %s: %d train / %d test samples of shape %s",
        name,
        len(splits.train),
        len(splits.test),
        splits.train.sample_shape,
    )
    return splits


def split_train_val(dataset: Dataset, val_size: int = DEFAULT_VAL_SIZE) -> tuple[Dataset, Dataset]:
    """Hold out the last ``val_size`` samples (stored order) for validation."""
    if not 0 < val_size < len(dataset):
        raise ConfigurationError(f"val_size {val_size} must be in (0, {len(dataset)})")
    cut = len(dataset) - val_size
    return dataset.subset(slice(0, cut)), dataset.subset(slice(cut, None))


# Fetching -------------------------------------------------------------------


def _download(url: str, target: Path, progress: bool) -> None:
    tmp = target.with_suffix(target.suffix + ".part")
    logger.info("Downloading %s", url)
    with urllib.request.urlopen(url, timeout=60) as response, open(tmp, "wb") as out:
        total = int(response.headers.get("Content-Length") or 0) or None
        with tqdm(
            total=total, unit="B", unit_scale=True, desc=target.name, disable=not progress
        ) as bar:
            while chunk := response.read(1 << 16):
                out.write(chunk)
                bar.update(len(chunk))
    tmp.replace(target)


def write_checksums(directory: Path, files: Sequence[Path]) -> Path:
    """Record SHA-256 digests of ``files`` in ``directory/SHA256SUMS``."""
    lines = [f"{compute_file_hash(p)}  {p.name}" for p in sorted(files)]
    record = directory / CHECKSUM_FILE
    record.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return record


def fetch_dataset(name: str, data_dir: Path, *, force: bool = False, progress: bool = True) -> Path:
    """Download a dataset, check published MD5 digests, and record SHA-256 sums.

    Already-present archives that pass the MD5 check are not downloaded again.

    Returns:
        Directory holding the decoded-ready files.

    Raises:
        ChecksumMismatchError: A downloaded archive fails its MD5 check.
    """
    spec = get_spec(name)
    directory = ensure_dir(dataset_dir(name, data_dir))
    stored: list[Path] = []
    for filename, url in spec.urls.items():
        target = directory / filename
        if force or not target.exists() or compute_file_hash(target, algorithm="md5") != spec.md5[filename]:
            _download(url, target, progress)
        digest = compute_file_hash(target, algorithm="md5")
        if digest != spec.md5[filename]:
            raise ChecksumMismatchError(
                f"{target}: md5 {digest} does not match published {spec.md5[filename]}"
            )
        stored.append(target)

    if spec.kind == "cifar":
        archive = stored[0]
        extracted = directory / "cifar-10-batches-bin"
        if force and extracted.exists():
            shutil.rmtree(extracted)
        with tarfile.open(archive, "r:gz") as tar:
            tar.extractall(directory, filter="data")
        record_dir = extracted
        stored = [extracted / f for f in (*spec.train_files, *spec.test_files)]
    else:
        record_dir = directory
    write_checksums(record_dir, stored)
    logger.info("Fetched %s into %s", name, record_dir)
    return record_dir


def describe_dataset_error(path: Path | None, error: BaseException) -> DatasetAdvice:
    """Turn a dataset exception into user-facing guidance."""
    display = str(path) if path else "the data directory"
    if isinstance(error, DatasetNotFoundError):
        return DatasetAdvice(
            reason=f"Dataset files are missing from {display}.",
            suggestion=(
                "Run 'featherlite fetch-data <dataset>' or point --data-dir / "
                "FEATHERLITE_DATA_DIR at an existing copy."
            ),
        )
    if isinstance(error, ChecksumMismatchError):
        return DatasetAdvice(
            reason="A dataset file does not match its recorded checksum.",
            suggestion="Delete the dataset directory and run 'featherlite fetch-data' again.",
        )
    if isinstance(error, BadMagicError):
        return DatasetAdvice(
            reason="A dataset file is not in the expected IDX format.",
            suggestion="Check that the files were not renamed or swapped, then fetch them again.",
        )
    if isinstance(error, TruncatedFileError):
        return DatasetAdvice(
            reason="A dataset file is incomplete.",
            suggestion="The download was probably interrupted; run 'featherlite fetch-data --force'.",
        )
    if isinstance(error, PermissionError):
        return DatasetAdvice(
            reason=f"Permission denied while reading {display}.",
            suggestion="Adjust the directory permissions or choose another --data-dir.",
        )
    if isinstance(error, OSError):
        return DatasetAdvice(
            reason=f"Could not read or download dataset files: {error}",
            suggestion="Check network access and free disk space, then retry.",
        )
    return DatasetAdvice(
        reason=f"Dataset could not be loaded: {error}",
        suggestion="Re-run with --verbose for details.",
    )


# Pairing, folds, batching -------------------------------------------------------


@dataclass
class PairedBatch:
    """Two-input batch for the dual model; both targets are the same labels."""

    inputs: tuple[np.ndarray, np.ndarray]
    targets: tuple[np.ndarray, np.ndarray]


def pair_train(
    images: np.ndarray,
    labels: np.ndarray,
    cfg: AugmentConfig,
    *,
    epoch: int,
    rng_base: RngStream,
    indices: np.ndarray | None = None,
    max_workers: int = 1,
) -> PairedBatch:
    """``(x, y) -> ((x, augment(x)), (y, y))``; ``images`` is not modified."""
    augmented = augment_batch(images, cfg, epoch, rng_base, indices=indices, max_workers=max_workers)
    return PairedBatch((images, augmented), (labels, labels))


def pair_val(images: np.ndarray, labels: np.ndarray) -> PairedBatch:
    """``(x, y) -> ((x, x), (y, y))``."""
    return PairedBatch((images, images), (labels, labels))


@dataclass(frozen=True)
class FoldSpec:
    index: int
    train_indices: np.ndarray
    val_indices: np.ndarray


def kfold_split(n: int, k: int = 6, seed: int = 0) -> list[FoldSpec]:
    """Shuffle ``range(n)`` with a seeded stream and cut it into ``k`` near-equal folds.

    The first ``n % k`` folds hold one extra sample.

    Raises:
        ConfigurationError: If ``n < k`` or ``k < 2``.
    """
    if k < 2 or n < k:
        raise ConfigurationError(f"k-fold needs 2 <= k <= n, got n={n}, k={k}")
    order = RngStream(seed, "kfold").generator().permutation(n)
    parts = np.array_split(order, k)
    folds = []
    for index, val in enumerate(parts):
        train = np.concatenate([p for j, p in enumerate(parts) if j != index])
        folds.append(FoldSpec(index, train, val))
    return folds


def batch_indices(
    n: int, batch_size: int = 32, *, shuffle: bool = True, seed: int = 0, epoch: int = 0
) -> list[np.ndarray]:
    """Index arrays for one epoch; the final partial batch is kept."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be at least 1, got {batch_size}")
    order = RngStream(seed, f"shuffle/epoch{epoch}").generator().permutation(n) if shuffle else np.arange(n)
    return [order[start : start + batch_size] for start in range(0, n, batch_size)]


def batch_iter(
    dataset: Dataset, batch_size: int = 32, *, shuffle: bool = True, seed: int = 0, epoch: int = 0
) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(indices, images, labels)`` per batch."""
    for idx in batch_indices(len(dataset), batch_size, shuffle=shuffle, seed=seed, epoch=epoch):
        yield idx, dataset.images[idx], dataset.labels[idx]


@dataclass
class FeedBatch:
    inputs: tuple[np.ndarray, ...]
    targets: tuple[np.ndarray, ...]

    @property
    def size(self) -> int:
        return int(self.targets[0].shape[0])


class SingleFeed:
    """Original images for single-input models."""

    n_inputs = 1

    def __init__(self, dataset: Dataset):
        self.dataset = dataset

    def __len__(self) -> int:
        return len(self.dataset)

    def batches(
        self, batch_size: int, *, shuffle: bool = True, seed: int = 0, epoch: int = 0
    ) -> Iterator[FeedBatch]:
        batches = batch_iter(self.dataset, batch_size, shuffle=shuffle, seed=seed, epoch=epoch)
        for _, images, labels in batches:
            yield FeedBatch((images,), (labels,))


class PairedFeed:
    """Original plus augmented (or duplicated, for validation) images for the dual model."""

    n_inputs = 2

    def __init__(
        self,
        dataset: Dataset,
        augment_cfg: AugmentConfig | None = None,
        rng_base: RngStream | None = None,
        max_workers: int = 1,
    ):
        if augment_cfg is not None and rng_base is None:
            raise ConfigurationError("an augmenting feed needs an RngStream")
        self.dataset = dataset
        self.augment_cfg = augment_cfg
        self.rng_base = rng_base
        self.max_workers = max_workers

    def __len__(self) -> int:
        return len(self.dataset)

    def batches(
        self, batch_size: int, *, shuffle: bool = True, seed: int = 0, epoch: int = 0
    ) -> Iterator[FeedBatch]:
        batches = batch_iter(self.dataset, batch_size, shuffle=shuffle, seed=seed, epoch=epoch)
        for idx, images, labels in batches:
            if self.augment_cfg is None:
                paired = pair_val(images, labels)
            else:
                paired = pair_train(
                    images,
                    labels,
                    self.augment_cfg,
                    epoch=epoch,
                    rng_base=self.rng_base,  # type: ignore[arg-type]
                    indices=idx,
                    max_workers=self.max_workers,
                )
            yield FeedBatch(paired.inputs, paired.targets)
