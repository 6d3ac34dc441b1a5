"""Dataset readers (IDX, CIFAR-10 binary) and a synthetic Gaussian-blob generator."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfgmod

CIFAR_RECORD = 1 + 3 * 32 * 32
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    pass


class BadMagicError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N x C x H x W] in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelRangeError(f"labels must lie in [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split)


def _read(path: str | Path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def _parse_idx(buf: bytes, magic: int, what: str) -> np.ndarray:
    if len(buf) < 4:
        raise TruncatedFileError(f"{what}: file shorter than the IDX header")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise BadMagicError(f"{what}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise TruncatedFileError(f"{what}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - header < count:
        raise TruncatedFileError(f"{what}: expected {count} data bytes, found {len(buf) - header}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path | None = None, num_classes: int = 10,
             split: str = "train") -> Dataset:
    """MNIST-style IDX pair -> Dataset of shape N x 1 x H x W (labels all 0 when absent)."""
    imgs = _parse_idx(_read(images_path), IDX_IMAGES_MAGIC, str(images_path))
    if labels_path is not None:
        labels = _parse_idx(_read(labels_path), IDX_LABELS_MAGIC, str(labels_path)).astype(np.int64)
        if len(labels) != len(imgs):
            raise DatasetError(f"{len(imgs)} images but {len(labels)} labels")
        if labels.size and labels.max() >= num_classes:
            raise LabelRangeError(f"label {labels.max()} out of range for {num_classes} classes")
    else:
        labels = np.zeros(len(imgs), dtype=np.int64)
    return Dataset(imgs[:, None].astype(np.float64) / 255.0, labels, num_classes, split)


def load_cifar_binary(paths, split: str = "train") -> Dataset:
    """CIFAR-10 binary batches: records of 1 label byte + 3072 channel-major pixel bytes."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for p in paths:
        buf = _read(p)
        if len(buf) % CIFAR_RECORD:
            raise TruncatedFileError(f"{p}: size {len(buf)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if rec.size and rec[:, 0].max() > 9:
            raise LabelRangeError(f"{p}: label {rec[:, 0].max()} out of range for CIFAR-10")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    imgs = np.concatenate(images) if images else np.zeros((0, 3, 32, 32), np.uint8)
    labs = np.concatenate(labels) if labels else np.zeros(0, np.int64)
    return Dataset(imgs.astype(np.float64) / 255.0, labs, 10, split)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 2
    size: int = 16
    channels: int = 3
    n_train: int = 500
    n_test: int = 200
    separation: float = 0.5
    noise: float = 0.15
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise cfgmod.ConfigError(f"unknown synthetic dataset keys: {sorted(unknown)}")
        return cls(**d)

    def to_text(self) -> str:
        return cfgmod.dumps(dict(self.__dict__))


def make_synthetic(spec: SyntheticSpec, seed: int | None = None, split: str = "train",
                   n: int | None = None) -> Dataset:
    """K classes, each a Gaussian blob of class-specific position and colour on grey, plus pixel noise.

    Class prototypes depend only on ``spec.seed``; the samples drawn depend on ``seed`` (defaults to
    ``spec.seed`` for the train split and ``spec.seed + 1`` otherwise).
    """
    proto_rng = np.random.default_rng([spec.seed, 12345])
    s, c = spec.size, spec.channels
    yy, xx = np.mgrid[0:s, 0:s] / max(s - 1, 1)
    protos = []
    for _ in range(spec.num_classes):
        cy, cx = proto_rng.uniform(0.2, 0.8, size=2)
        width = proto_rng.uniform(0.12, 0.25)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        colour = proto_rng.choice([-1.0, 1.0], size=c)
        protos.append(colour[:, None, None] * blob[None])
    protos = np.stack(protos)
    if seed is None:
        seed = spec.seed if split == "train" else spec.seed + 1
    if n is None:
        n = spec.n_train if split == "train" else spec.n_test
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % spec.num_classes
    rng.shuffle(labels)
    imgs = 0.5 + spec.separation * protos[labels] + spec.noise * rng.standard_normal((n, c, s, s))
    return Dataset(np.clip(imgs, 0.0, 1.0), labels, spec.num_classes, split)


def write_synthetic_spec(spec: SyntheticSpec, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    p = d / "synthetic.toml"
    p.write_text(spec.to_text())
    return p


def load_dataset(path: str | Path, split: str = "train") -> Dataset:
    """Load whatever dataset lives at ``path``.

    Accepted: a synthetic spec file (``*.toml``) or a directory holding one
    (``synthetic.toml``); a directory of CIFAR-10 batches (``data_batch_*.bin`` for
    train, ``test_batch.bin`` for test); a directory with an IDX pair
    (``{train,t10k}-images-idx3-ubyte[.gz]`` + matching labels); a single CIFAR
    ``.bin`` file.
    """
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"dataset path does not exist: {p}")
    if p.is_file():
        if p.suffix == ".toml":
            return make_synthetic(SyntheticSpec.from_dict(cfgmod.loads(p.read_text())), split=split)
        if p.suffix == ".bin":
            return load_cifar_binary(p, split)
        raise DatasetError(f"unrecognised dataset file {p}")
    if (p / "synthetic.toml").exists():
        return load_dataset(p / "synthetic.toml", split)
    if split == "train":
        bins = sorted(p.glob("data_batch_*.bin"))
    else:
        bins = sorted(p.glob("test_batch.bin"))
    if bins:
        return load_cifar_binary(bins, split)
    stem = "train" if split == "train" else "t10k"
    for suffix in ("", ".gz"):
        imgs = p / f"{stem}-images-idx3-ubyte{suffix}"
        labs = p / f"{stem}-labels-idx1-ubyte{suffix}"
        if imgs.exists():
            return load_idx(imgs, labs if labs.exists() else None, split=split)
    raise DatasetError(f"no recognised dataset files in {p}")
