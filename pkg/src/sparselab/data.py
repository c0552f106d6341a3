"""Dataset readers (IDX, CIFAR-10 binary), synthetic generators and splits."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .rng import stream

IDX_TYPES = {
    0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8"),
}
CIFAR_RECORD = 1 + 3 * 32 * 32


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "all"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs vs {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, split=None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.class_count, split or self.split)


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path, scale: bool = True) -> np.ndarray:
    """Parse an IDX file (optionally gzipped). u8 payloads are scaled to [0, 1] when ``scale``."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError("truncated IDX header", len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise FormatError("bad IDX magic, expected two zero bytes", 0)
    code, ndim = raw[2], raw[3]
    if code not in IDX_TYPES:
        raise FormatError(f"unknown IDX type code 0x{code:02x}", 2)
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"truncated IDX dims, need {head} header bytes", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    dt = IDX_TYPES[code]
    need = head + int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(raw) < need:
        raise FormatError(f"truncated IDX payload, expected {need} bytes, got {len(raw)}", len(raw))
    if len(raw) > need:
        raise FormatError("trailing bytes after IDX payload", need)
    arr = np.frombuffer(raw, dtype=dt, offset=head, count=int(np.prod(dims))).reshape(dims)
    if code == 0x08 and scale:
        return arr.astype(np.float64) / 255.0
    return arr.astype(dt.newbyteorder("="))


def write_idx(path, arr: np.ndarray):
    arr = np.asarray(arr)
    code = {np.dtype("u1"): 0x08, np.dtype("i1"): 0x09, np.dtype("i2"): 0x0B,
            np.dtype("i4"): 0x0C, np.dtype("f4"): 0x0D, np.dtype("f8"): 0x0E}[arr.dtype.newbyteorder("=")]
    payload = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    payload += arr.astype(IDX_TYPES[code]).tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(str(path), "wb") as f:
        f.write(payload)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist(directory, flatten: bool = True) -> tuple:
    """(train, test) Datasets from the four standard MNIST IDX files."""
    d = Path(directory)
    out = []
    for split, prefix in (("train", "train"), ("test", "t10k")):
        x = read_idx(_find(d, f"{prefix}-images-idx3-ubyte"))
        y = read_idx(_find(d, f"{prefix}-labels-idx1-ubyte"), scale=False)
        x = x.reshape(len(x), -1) if flatten else x[:, None]
        out.append(Dataset(x, y.astype(np.int64), 10, split))
    return tuple(out)


def read_cifar10_bin(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"file size {len(raw)} is not a multiple of {CIFAR_RECORD}",
                          len(raw) - len(raw) % CIFAR_RECORD)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.flatnonzero(labels > 9)[0])
        raise FormatError(f"label {labels[bad]} out of range", bad * CIFAR_RECORD)
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(x, labels, 10, Path(path).stem)


def write_cifar10_bin(path, images_u8: np.ndarray, labels):
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(-1, 3 * 32 * 32)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    Path(path).write_bytes(np.concatenate([labels, images_u8], axis=1).tobytes())


# synthetic ------------------------------------------------------------------

def _balanced_counts(n, k):
    return [n // k + (1 if c < n % k else 0) for c in range(k)]


def blob_centers(k: int, radius: float = 2.0) -> np.ndarray:
    ang = 2 * np.pi * np.arange(k) / k
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def make_synthetic(kind: str, n: int, noise: float = 0.1, seed: int = 0, classes: int = None) -> Dataset:
    """Deterministic 2-D toy classification data with balanced classes."""
    k = classes or {"blobs": 3, "two_moons": 2, "spirals": 2}.get(kind)
    if k is None:
        raise ValueError(f"unknown synthetic dataset {kind!r}")
    if kind == "two_moons" and k != 2:
        raise ValueError("two_moons has exactly 2 classes")
    if n < k:
        raise ValueError(f"need n >= class count ({k}), got {n}")
    rng = stream(seed, f"synthetic/{kind}")
    xs, ys = [], []
    for c, m in enumerate(_balanced_counts(n, k)):
        if kind == "blobs":
            pts = np.repeat(blob_centers(k)[c][None], m, axis=0)
        elif kind == "two_moons":
            t = np.linspace(0.0, np.pi, m)
            pts = (np.stack([np.cos(t), np.sin(t)], 1) if c == 0
                   else np.stack([1 - np.cos(t), 0.5 - np.sin(t)], 1))
        else:
            t = np.linspace(0.25, 1.0, m)
            ang = 3 * np.pi * t + 2 * np.pi * c / k
            pts = np.stack([t * np.cos(ang), t * np.sin(ang)], 1)
        xs.append(pts)
        ys.append(np.full(m, c))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    if noise:
        x = x + rng.normal(0.0, noise, size=x.shape)
    order = rng.permutation(len(y))
    return Dataset(x[order], y[order], k, kind)


def split_shuffle(ds: Dataset, fractions, seed: int = 0) -> list:
    """Disjoint, exhaustive random partition; the last part takes rounding leftovers."""
    fractions = list(fractions)
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    order = stream(seed, "split").permutation(len(ds))
    counts = [int(np.floor(f * len(ds))) for f in fractions[:-1]]
    counts.append(len(ds) - sum(counts))
    names = ["train", "test"] if len(fractions) == 2 else [f"part{i}" for i in range(len(fractions))]
    parts, start = [], 0
    for name, c in zip(names, counts):
        parts.append(ds.subset(np.sort(order[start:start + c]), name))
        start += c
    return parts


def channel_stats(train: Dataset) -> tuple:
    """Mean/std per channel (axis 1) for images, per feature for flat inputs."""
    x = train.inputs
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    mean = x.mean(axis=axes)
    std = x.std(axis=axes)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def normalize(ds: Dataset, mean, std) -> Dataset:
    mean, std = np.asarray(mean), np.asarray(std)
    if ds.inputs.ndim == 4:
        mean, std = mean[None, :, None, None], std[None, :, None, None]
    return replace(ds, inputs=(ds.inputs - mean) / std)


def to_csv(ds: Dataset, path):
    flat = ds.inputs.reshape(len(ds), -1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{i}" for i in range(flat.shape[1])] + ["label"])
        for row, lab in zip(flat, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


def read_csv(path, class_count: int = None) -> Dataset:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    y = arr[:, -1].astype(np.int64)
    return Dataset(arr[:, :-1], y, class_count or int(y.max()) + 1, Path(path).stem)

