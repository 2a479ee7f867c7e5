"""Digit ingestion, biased dataset synthesis, and the dataset container."""
from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import counter_uniform


class FormatError(ValueError):
    pass


class TruncationError(FormatError):
    pass


class DataError(ValueError):
    pass


IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

# Ten well separated background colours; override through the run config.
DEFAULT_PALETTE = (
    (0.90, 0.10, 0.10),
    (0.10, 0.65, 0.10),
    (0.10, 0.20, 0.90),
    (0.95, 0.85, 0.10),
    (0.85, 0.10, 0.85),
    (0.10, 0.80, 0.85),
    (0.95, 0.50, 0.05),
    (0.45, 0.10, 0.60),
    (0.55, 0.35, 0.15),
    (0.45, 0.45, 0.45),
)
FOREGROUND_THRESHOLD = 0.5


def blend_palette(palette, saturation: float, toward: float = 0.2) -> np.ndarray:
    """Pull every colour toward a dark grey; ``saturation=1`` is a no-op.

    Low saturation keeps the colours distinct but makes them a weaker
    input signal than the digit strokes.
    """
    pal = np.asarray(palette, dtype=np.float64)
    return toward + saturation * (pal - toward)


@dataclass(frozen=True)
class RawDataset:
    images: np.ndarray  # (N, 1, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int = 10

    def __post_init__(self):
        if len(self.labels) == 0:
            raise DataError("empty dataset")
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise DataError(f"raw images must be (N, 1, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError("images and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError("label out of range")
        if self.images.min() < 0 or self.images.max() > 1:
            raise DataError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "RawDataset":
        idx = np.asarray(idx)
        return RawDataset(self.images[idx], self.labels[idx], self.num_classes)

    def downsample(self, factor: int) -> "RawDataset":
        """Block-average the spatial axes by an integer factor."""
        if factor == 1:
            return self
        n, c, h, w = self.images.shape
        if h % factor or w % factor:
            raise DataError(f"image size {h}x{w} not divisible by {factor}")
        small = self.images.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
        return RawDataset(small, self.labels, self.num_classes)


@dataclass(frozen=True)
class BiasedDataset:
    images: np.ndarray  # (N, 3, H, W) in [0, 1]
    labels: np.ndarray
    bias_attr: np.ndarray
    rho: float
    seed: int
    num_classes: int = 10

    def __post_init__(self):
        n = len(self.labels)
        if len(self.images) != n or len(self.bias_attr) != n:
            raise DataError("images, labels and bias_attr must share length")

    def __len__(self):
        return len(self.labels)

    def batch(self, idx=None) -> "LabeledBatch":
        if idx is None:
            idx = slice(None)
        return LabeledBatch(self.images[idx], self.labels[idx], self.bias_attr[idx], self.num_classes)

    def equals(self, other: "BiasedDataset") -> bool:
        return (
            self.images.shape == other.images.shape
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.bias_attr, other.bias_attr)
            and float(self.rho) == float(other.rho)
            and int(self.seed) == int(other.seed)
            and self.num_classes == other.num_classes
        )


@dataclass
class LabeledBatch:
    features: np.ndarray
    labels: np.ndarray
    bias_attr: np.ndarray
    num_classes: int

    @property
    def onehot(self) -> np.ndarray:
        y = np.zeros((len(self.labels), self.num_classes))
        y[np.arange(len(self.labels)), self.labels] = 1.0
        return y

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class LongTailSpec:
    mu: float
    head_count: int

    def __post_init__(self):
        if not 0 < self.mu <= 1:
            raise DataError(f"mu must be in (0, 1], got {self.mu}")


# ------------------------------------------------------------------ IDX


def read_idx(data: bytes) -> np.ndarray:
    """Decode an IDX image (0x803) or label (0x801) container.

    Images come back as float64 in [0, 1] with shape (N, H, W); labels as
    int64 with shape (N,).
    """
    if len(data) < 8:
        raise FormatError("IDX stream too short for a header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_IMAGES:
        ndim = 3
    elif magic == IDX_LABELS:
        ndim = 1
    else:
        raise FormatError(f"bad IDX magic 0x{magic:08x}")
    head = 4 + 4 * ndim
    if len(data) < head:
        raise TruncationError("IDX header truncated")
    dims = struct.unpack(">" + "I" * ndim, data[4:head])
    need = int(np.prod(dims))
    payload = data[head:]
    if len(payload) < need:
        raise TruncationError(f"IDX payload has {len(payload)} bytes, header declares {need}")
    if len(payload) > need:
        raise FormatError(f"IDX payload has {len(payload) - need} trailing bytes")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    if magic == IDX_IMAGES:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.int64)


def write_idx(arr: np.ndarray) -> bytes:
    """Encode uint8-valued images (N, H, W) or labels (N,) as IDX bytes.

    Float images in [0, 1] are scaled by 255 and rounded.
    """
    arr = np.asarray(arr)
    if arr.ndim == 3:
        magic = IDX_IMAGES
        if arr.dtype.kind == "f":
            arr = np.rint(arr * 255.0)
    elif arr.ndim == 1:
        magic = IDX_LABELS
    else:
        raise FormatError(f"IDX writer supports 1-d or 3-d arrays, got {arr.ndim}-d")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise FormatError("IDX values must fit in an unsigned byte")
    head = struct.pack(">I" + "I" * arr.ndim, magic, *arr.shape)
    return head + arr.astype(np.uint8).tobytes()


def load_idx_pair(images_path, labels_path, num_classes: int = 10) -> RawDataset:
    images = read_idx(Path(images_path).read_bytes())
    labels = read_idx(Path(labels_path).read_bytes())
    if images.ndim != 3 or labels.ndim != 1:
        raise FormatError("expected an image file and a label file")
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    return RawDataset(images[:, None], labels, num_classes)


# ------------------------------------------------------------------ generators


def colorize(
    raw: RawDataset,
    rho: float,
    palette=DEFAULT_PALETTE,
    seed: int = 0,
    threshold: float = FOREGROUND_THRESHOLD,
) -> BiasedDataset:
    """Paint each background with its class colour (probability rho) or
    with one of the other nine colours chosen uniformly."""
    if not 0 <= rho <= 1:
        raise DataError("rho must be in [0,1]")
    pal = np.asarray(palette, dtype=np.float64)
    if pal.shape != (10, 3):
        raise DataError(f"palette must hold exactly 10 RGB triples, got shape {pal.shape}")
    if len(np.unique(pal, axis=0)) != 10:
        raise DataError("palette colours must be distinct")
    if raw.num_classes != 10:
        raise DataError("colorize needs 10 classes")

    n = len(raw)
    idx = np.arange(n)
    aligned = counter_uniform(seed, 0, idx) < rho
    # offset in 1..9 picks one of the other colours uniformly
    offset = 1 + np.minimum((counter_uniform(seed, 1, idx) * 9).astype(np.int64), 8)
    color = np.where(aligned, raw.labels, (raw.labels + offset) % 10)

    gray = raw.images[:, 0]
    fg = gray >= threshold
    bg_rgb = pal[color][:, :, None, None]
    images = np.where(fg[:, None], gray[:, None], bg_rgb)
    return BiasedDataset(
        np.ascontiguousarray(images), raw.labels.copy(), color.astype(np.int64), float(rho), int(seed), 10
    )


def long_tail_counts(spec: LongTailSpec, num_classes: int) -> list[int]:
    if num_classes == 1:
        return [spec.head_count]
    return [
        int(round(spec.head_count * spec.mu ** (c / (num_classes - 1)))) for c in range(num_classes)
    ]


def make_long_tailed(raw: RawDataset, spec: LongTailSpec, seed: int = 0) -> BiasedDataset:
    C = raw.num_classes
    if spec.head_count < C:
        raise DataError(f"head_count must be at least {C}")
    counts = long_tail_counts(spec, C)
    rng = np.random.default_rng(seed)
    keep = []
    for c, n_c in enumerate(counts):
        pool = np.flatnonzero(raw.labels == c)
        if len(pool) < n_c:
            raise DataError(f"class {c} has {len(pool)} samples, needs {n_c}")
        keep.append(np.sort(rng.choice(pool, size=n_c, replace=False)))
    idx = np.concatenate(keep)
    images = np.repeat(raw.images[idx], 3, axis=1)
    labels = raw.labels[idx].copy()
    return BiasedDataset(images, labels, labels.copy(), 1.0, int(seed), C)


def synthetic_spurious(
    n: int, d_core: int, d_bias: int, rho: float, num_classes: int, seed: int = 0,
    core_separation: float = 1.0, bias_scale: float = 1.0,
) -> BiasedDataset:
    """Gaussian class clusters plus a one-hot-style spurious block.

    The bias block carries a noisy code of ``bias_attr``; ``bias_attr``
    equals the label with probability rho, otherwise another class chosen
    uniformly.
    """
    if min(n, d_core, d_bias, num_classes) <= 0:
        raise DataError("n, d_core, d_bias and num_classes must be positive")
    if not 0 <= rho <= 1:
        raise DataError("rho must be in [0,1]")
    C = num_classes
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(C, d_core))
    means *= core_separation / np.maximum(np.linalg.norm(means, axis=1, keepdims=True), 1e-12)
    means *= np.sqrt(d_core)
    labels = rng.integers(0, C, size=n)
    core = means[labels] + rng.normal(size=(n, d_core))

    idx = np.arange(n)
    aligned = counter_uniform(seed, 0, idx) < rho
    if C > 1:
        offset = 1 + np.minimum((counter_uniform(seed, 1, idx) * (C - 1)).astype(np.int64), C - 2)
        bias_attr = np.where(aligned, labels, (labels + offset) % C)
    else:
        bias_attr = labels.copy()
    codes = rng.normal(size=(C, d_bias))
    codes *= bias_scale * np.sqrt(d_bias) / np.maximum(np.linalg.norm(codes, axis=1, keepdims=True), 1e-12)
    bias = codes[bias_attr] + 0.1 * rng.normal(size=(n, d_bias))

    feats = np.concatenate([core, bias], axis=1)[:, None, None, :]
    return BiasedDataset(feats, labels.astype(np.int64), bias_attr.astype(np.int64), float(rho), int(seed), C)


# ------------------------------------------------------------------ container

_MAGIC = b"GGDS"
_VERSION = 1


def dataset_to_bytes(ds: BiasedDataset) -> bytes:
    header = json.dumps(
        {
            "shape": list(ds.images.shape),
            "rho": float(ds.rho).hex(),
            "seed": int(ds.seed),
            "num_classes": int(ds.num_classes),
        },
        sort_keys=True,
    ).encode()
    body = (
        np.ascontiguousarray(ds.images, dtype="<f8").tobytes()
        + np.ascontiguousarray(ds.labels, dtype="<i8").tobytes()
        + np.ascontiguousarray(ds.bias_attr, dtype="<i8").tobytes()
    )
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", _VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", zlib.crc32(header + body)))
    buf.write(body)
    return buf.getvalue()


def dataset_from_bytes(data: bytes) -> BiasedDataset:
    if len(data) < 16:
        raise FormatError("dataset container too short")
    if data[:4] != _MAGIC:
        raise FormatError("not a dataset container")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != _VERSION:
        raise FormatError(f"unsupported container version {version}")
    if len(data) < 12 + hlen + 4:
        raise TruncationError("dataset header truncated")
    header = data[12 : 12 + hlen]
    (crc,) = struct.unpack("<I", data[12 + hlen : 16 + hlen])
    body = data[16 + hlen :]
    if zlib.crc32(header + body) != crc:
        raise FormatError("dataset checksum mismatch")
    try:
        meta = json.loads(header)
        shape = tuple(int(s) for s in meta["shape"])
        rho = float.fromhex(meta["rho"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad dataset header: {exc}") from exc
    n = shape[0]
    n_img = int(np.prod(shape)) * 8
    if len(body) != n_img + 16 * n:
        raise TruncationError("dataset payload length does not match header")
    images = np.frombuffer(body, dtype="<f8", count=int(np.prod(shape))).reshape(shape).copy()
    labels = np.frombuffer(body, dtype="<i8", count=n, offset=n_img).astype(np.int64)
    bias = np.frombuffer(body, dtype="<i8", count=n, offset=n_img + 8 * n).astype(np.int64)
    return BiasedDataset(images, labels, bias, rho, int(meta["seed"]), int(meta["num_classes"]))


def write_dataset(ds: BiasedDataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> BiasedDataset:
    return dataset_from_bytes(Path(path).read_bytes())
