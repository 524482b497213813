"""Datasets: synthetic generators, CSV/IDX loaders, and split bookkeeping."""

from __future__ import annotations

import csv
import gzip
import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import stream

SPLIT_RATIOS = (0.70, 0.15, 0.15)
SYNTHETIC_KINDS = ("gaussians", "moons", "rings", "rings+gaussians")


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or len(self.x) != len(self.y):
            raise DataError(f"expected x of shape (n, d) matching {len(self.y)} labels, got {self.x.shape}")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])

    def digest(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.x, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.y, dtype="<i8").tobytes())
        return h.hexdigest()[:16]

    def row_hashes(self) -> set[bytes]:
        return {hashlib.sha1(row.tobytes() + bytes([0])).digest() for row in np.ascontiguousarray(self.x, dtype="<f8")}


@dataclass
class DatasetSplit:
    train: Dataset
    val: Dataset
    test: Dataset
    provenance: str = ""

    @property
    def num_classes(self) -> int:
        return int(max(self.train.y.max(), self.val.y.max(), self.test.y.max())) + 1

    def validate(self) -> None:
        """Disjoint partitions, features in [0, 1], and >= 2 classes everywhere."""
        parts = {"train": self.train, "val": self.val, "test": self.test}
        for name, part in parts.items():
            if len(part) == 0:
                raise DataError(f"{name} partition is empty")
            if part.x.min() < 0 or part.x.max() > 1:
                raise DataError(f"{name} features fall outside [0, 1]")
            if len(np.unique(part.y)) < 2:
                raise DataError(f"{name} partition has fewer than 2 classes")
        hashes = {name: part.row_hashes() for name, part in parts.items()}
        names = list(hashes)
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                if hashes[a] & hashes[b]:
                    raise DataError(f"{a} and {b} partitions share {len(hashes[a] & hashes[b])} sample(s)")


def split(x: np.ndarray, y: np.ndarray, seed: int, provenance: str, ratios=SPLIT_RATIOS) -> DatasetSplit:
    n = len(y)
    perm = stream(seed, 0x5EED).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    parts = np.split(perm, [n_train, n_train + n_val])
    out = DatasetSplit(*(Dataset(x[p], y[p]) for p in parts), provenance=provenance)
    out.validate()
    return out


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.clip((x - lo) / span, 0.0, 1.0)


def _balanced_labels(n: int, classes: int, rng) -> np.ndarray:
    y = np.arange(n) % classes
    rng.shuffle(y)
    return y


def _gaussians(n, d, classes, margin, noise, rng):
    # class means on a regular simplex-like layout; pairwise distance >= margin * noise
    y = _balanced_labels(n, classes, rng)
    angles = 2 * math.pi * np.arange(classes) / classes
    radius = margin * noise / (2 * math.sin(math.pi / classes)) if classes > 1 else 0.0
    means = np.zeros((classes, d))
    means[:, 0] = radius * np.cos(angles)
    if d > 1:
        means[:, 1] = radius * np.sin(angles)
    return means[y] + noise * rng.standard_normal((n, d)), y


def _moons(n, d, classes, margin, noise, rng):
    y = _balanced_labels(n, classes, rng)
    t = rng.uniform(0, math.pi, n)
    x = np.zeros((n, max(d, 2)))
    shift = 1.0 + 0.25 * margin * noise
    x[:, 0] = np.cos(t) + shift * y
    x[:, 1] = np.where(y % 2 == 0, 1.0, -1.0) * np.sin(t) - 0.5 * (y % 2)
    x += noise * rng.standard_normal(x.shape)
    return x[:, :d] if d >= 2 else x[:, :1], y


def _rings(n, d, classes, margin, noise, rng):
    y = _balanced_labels(n, classes, rng)
    radius = 1.0 + margin * noise * y
    phi = rng.uniform(0, 2 * math.pi, n)
    x = np.zeros((n, max(d, 2)))
    x[:, 0] = radius * np.cos(phi)
    x[:, 1] = radius * np.sin(phi)
    x[:, :2] += noise * rng.standard_normal((n, 2))
    if d > 2:
        x[:, 2:] = noise * rng.standard_normal((n, d - 2))
    return x[:, :d], y


def _rings_gaussians(n, d, classes, margin, noise, rng):
    """Half the classes are concentric rings, the rest Gaussian blobs outside them."""
    y = _balanced_labels(n, classes, rng)
    n_rings = classes // 2
    x = np.zeros((n, max(d, 2)))
    phi = rng.uniform(0, 2 * math.pi, n)
    ring_r = 1.0 + margin * noise * y
    outer = 1.0 + margin * noise * (n_rings - 1) + margin * noise * 1.5
    blob_k = y - n_rings
    blob_angle = 2 * math.pi * (blob_k + 0.5) / max(classes - n_rings, 1)
    blob_r = outer + 1.5 * noise * margin
    is_ring = y < n_rings
    x[:, 0] = np.where(is_ring, ring_r * np.cos(phi), blob_r * np.cos(blob_angle))
    x[:, 1] = np.where(is_ring, ring_r * np.sin(phi), blob_r * np.sin(blob_angle))
    x[:, :2] += noise * rng.standard_normal((n, 2)) * np.where(is_ring, 1.0, 2.0)[:, None]
    if d > 2:
        x[:, 2:] = noise * rng.standard_normal((n, d - 2))
    return x[:, :d], y


_GENERATORS = {"gaussians": _gaussians, "moons": _moons, "rings": _rings, "rings+gaussians": _rings_gaussians}


def make_synthetic(
    kind: str,
    n: int,
    d: int = 2,
    classes: int = 4,
    margin: float = 4.0,
    noise: float = 0.1,
    seed: int = 0,
    nonrobust_dims: int = 0,
    nonrobust_shift: float = 0.02,
    nonrobust_noise: float = 0.05,
) -> DatasetSplit:
    """Deterministic synthetic classification data, scaled into [0, 1] and split 70/15/15.

    ``margin`` is in units of ``noise`` (the per-class standard deviation).
    ``nonrobust_dims`` appends features centred at 0.5 whose class means sit
    ``nonrobust_shift`` apart in a random sign pattern. They are predictive in
    aggregate but a perturbation larger than the shift erases them, which is
    what separates standard from adversarially trained models.
    """
    if kind not in _GENERATORS:
        raise DataError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    if n < 10 * classes:
        raise DataError(f"need n >= 10 * classes ({10 * classes}), got {n}")
    if nonrobust_dims < 0:
        raise DataError("nonrobust_dims must be >= 0")
    rng = stream(seed, 0xDA7A)
    x, y = _GENERATORS[kind](n, d, classes, margin, noise, rng)
    x = _minmax(x)
    tag = f"synthetic:{kind}:n={n}:d={d}:c={classes}:margin={margin}:noise={noise}:seed={seed}"
    if nonrobust_dims:
        extra = stream(seed, 0x0B5E)
        signs = extra.choice([-1.0, 1.0], size=(classes, nonrobust_dims))
        feats = 0.5 + nonrobust_shift * signs[y] + nonrobust_noise * extra.standard_normal((n, nonrobust_dims))
        x = np.hstack([x, np.clip(feats, 0.0, 1.0)])
        tag += f":nonrobust={nonrobust_dims}/{nonrobust_shift}/{nonrobust_noise}"
    return split(x, y, seed, tag)


# -- files -------------------------------------------------------------------


def _file_tag(path: Path) -> str:
    return f"file:{path.name}:sha256={hashlib.sha256(path.read_bytes()).hexdigest()[:16]}"


def read_csv(path) -> Dataset:
    """``label,f1,f2,...`` rows after one header row."""
    path = Path(path)
    xs, ys = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                label = int(row[0])
                feats = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed row ({exc})") from None
            if label < 0:
                raise DataError(f"{path}:{lineno}: negative label {label}")
            ys.append(label)
            xs.append(feats)
    if not ys:
        raise DataError(f"{path}: no data rows")
    x = np.array(xs, dtype=np.float64)
    if x.min() < 0 or x.max() > 1:
        raise DataError(f"{path}: features outside [0, 1]")
    return Dataset(x, np.array(ys))


def save_csv(data: Dataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(data.dim)])
        for xi, yi in zip(data.x, data.y):
            w.writerow([int(yi)] + [repr(float(v)) for v in xi])


def _open_maybe_gz(path: Path) -> bytes:
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx(path) -> np.ndarray:
    """Array from an IDX file (big-endian magic ``0 0 dtype ndim`` then dims)."""
    raw = _open_maybe_gz(Path(path))
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DataError(f"{path}: bad IDX magic")
    dtypes = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
    if raw[2] not in dtypes:
        raise DataError(f"{path}: unknown IDX element type 0x{raw[2]:02x}")
    ndim = raw[3]
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    dt = np.dtype(dtypes[raw[2]])
    body = raw[4 + 4 * ndim :]
    count = int(np.prod(dims)) if dims else 1
    if len(body) != count * dt.itemsize:
        raise DataError(f"{path}: payload has {len(body)} bytes, dims {dims} need {count * dt.itemsize}")
    return np.frombuffer(body, dtype=dt).reshape(dims)


def write_idx(arr: np.ndarray, path) -> None:
    codes = {np.dtype(np.uint8): 0x08, np.dtype(np.int32): 0x0C}
    arr = np.asarray(arr)
    code = codes[arr.dtype]
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(arr.dtype.newbyteorder(">")).tobytes())


def load_dataset(path, fmt: str, labels_path=None, split_path=None, seed: int = 0) -> DatasetSplit:
    """Load a CSV file or an IDX image/label pair and split it.

    The split follows ``split_path`` (one of ``train``/``val``/``test`` per
    line, in row order) when given, else the fixed 70/15/15 seeded shuffle.
    """
    path = Path(path)
    if fmt == "csv":
        data = read_csv(path)
        tag = _file_tag(path)
    elif fmt == "idx":
        if labels_path is None:
            raise DataError("idx format needs a labels file")
        images = read_idx(path)
        labels = read_idx(labels_path).astype(np.int64)
        if images.dtype != np.uint8:
            raise DataError(f"{path}: expected unsigned-byte pixels")
        x = images.reshape(len(images), -1).astype(np.float64) / 255.0
        if len(labels) != len(x):
            raise DataError(f"{len(x)} images but {len(labels)} labels")
        data = Dataset(x, labels)
        tag = _file_tag(path) + ";" + _file_tag(Path(labels_path))
    else:
        raise DataError(f"unknown dataset format {fmt!r}")
    if data.x.min() < 0 or data.x.max() > 1:
        raise DataError(f"{path}: features outside [0, 1] after scaling")
    if split_path is None:
        return split(data.x, data.y, seed, tag)
    names = [ln.strip() for ln in Path(split_path).read_text().splitlines() if ln.strip()]
    if len(names) != len(data):
        raise DataError(f"split file has {len(names)} entries for {len(data)} rows")
    idx = {k: np.array([i for i, s in enumerate(names) if s == k], dtype=np.int64) for k in ("train", "val", "test")}
    bad = set(names) - set(idx)
    if bad:
        raise DataError(f"split file has unknown partition names {sorted(bad)}")
    out = DatasetSplit(data.subset(idx["train"]), data.subset(idx["val"]), data.subset(idx["test"]), tag)
    out.validate()
    return out
