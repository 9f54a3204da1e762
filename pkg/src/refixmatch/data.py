"""Datasets, the binary tensor file format, label splits and synthetic data."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"RFXT"
VERSION = 1
_DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<f4")}
_CODES = {np.dtype(np.uint8): 0, np.dtype(np.float32): 1}


class TensorFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


# tensor files

def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"unsupported dtype {arr.dtype}; use uint8 or float32")
    if not 1 <= arr.ndim <= 255:
        raise ValueError("tensor must have 1..255 dimensions")
    header = MAGIC + bytes([VERSION, code, arr.ndim]) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise TensorFormatError("bad magic, expected b'RFXT'", 0)
    if len(buf) < 7:
        raise TensorFormatError("truncated header", len(buf))
    if buf[4] != VERSION:
        raise TensorFormatError(f"unsupported version {buf[4]}", 4)
    dtype = _DTYPES.get(buf[5])
    if dtype is None:
        raise TensorFormatError(f"unknown dtype code {buf[5]}", 5)
    ndim = buf[6]
    end = 7 + 4 * ndim
    if len(buf) < end:
        raise TensorFormatError("truncated shape", len(buf))
    shape = struct.unpack(f"<{ndim}I", buf[7:end])
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - end != nbytes:
        raise TensorFormatError(f"payload is {len(buf) - end} bytes, expected {nbytes}", end)
    return np.frombuffer(buf, dtype=dtype, offset=end).reshape(shape).astype(dtype.newbyteorder("="))


def write_tensor_file(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor_file(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# manifests

def read_manifest(path) -> dict[str, str]:
    entries = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        entries[key.strip()] = value.strip()
    return entries


def write_manifest(path, entries: dict[str, object]) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in entries.items()))


# datasets

@dataclass(frozen=True)
class Dataset:
    """Images (N, C, H, W) in [0, 1] with optional labels.

    ``hidden_labels`` carries ground truth for unlabeled data.  Training never
    reads it; it exists for the pseudo-label accuracy diagnostic only.
    """

    images: np.ndarray
    labels: np.ndarray | None
    num_classes: int
    hidden_labels: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be N,C,H,W, got {self.images.shape}")
        for name in ("labels", "hidden_labels"):
            lab = getattr(self, name)
            if lab is None:
                continue
            if lab.shape != (len(self.images),):
                raise ValueError(f"{name} length {lab.shape} does not match {len(self.images)} images")
            if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
                raise ValueError(f"{name} outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def truth(self) -> np.ndarray | None:
        return self.labels if self.labels is not None else self.hidden_labels

    def subset(self, idx, as_unlabeled: bool = False) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        truth = self.truth
        truth = None if truth is None else truth[idx]
        if as_unlabeled:
            return Dataset(self.images[idx], None, self.num_classes, truth)
        hidden = None if self.hidden_labels is None else self.hidden_labels[idx]
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, self.num_classes, hidden)


def save_dataset(ds: Dataset, directory, name: str = "dataset") -> Path:
    """Write images as uint8 (quantised) tensors plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n, c, h, w = ds.images.shape
    write_tensor_file(directory / f"{name}.images.rfxt", quantize(ds.images))
    entries: dict[str, object] = {"images": f"{name}.images.rfxt"}
    if ds.labels is not None:
        write_tensor_file(directory / f"{name}.labels.rfxt", ds.labels.astype(np.uint8))
        entries["labels"] = f"{name}.labels.rfxt"
    if ds.hidden_labels is not None:
        write_tensor_file(directory / f"{name}.hidden.rfxt", ds.hidden_labels.astype(np.uint8))
        entries["hidden_labels"] = f"{name}.hidden.rfxt"
    entries.update(K=ds.num_classes, C=c, H=h, W=w, N=n)
    manifest = directory / f"{name}.manifest"
    write_manifest(manifest, entries)
    return manifest


def load_dataset(manifest) -> Dataset:
    manifest = Path(manifest)
    entries = read_manifest(manifest)
    for key in ("images", "K", "C", "H", "W"):
        if key not in entries:
            raise ValueError(f"{manifest}: missing key {key!r}")
    raw = read_tensor_file(manifest.parent / entries["images"])
    images = raw.astype(np.float32) / np.float32(255) if raw.dtype == np.uint8 else raw.astype(np.float32)
    expected = tuple(int(entries[k]) for k in ("C", "H", "W"))
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ValueError(f"{manifest}: images shape {images.shape} does not match C,H,W={expected}")

    def _labels(key):
        if key not in entries:
            return None
        return read_tensor_file(manifest.parent / entries[key]).astype(np.int64)

    return Dataset(images, _labels("labels"), int(entries["K"]), _labels("hidden_labels"))


def quantize(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def dequantize(q: np.ndarray) -> np.ndarray:
    return q.astype(np.float32) / np.float32(255)


# splits

@dataclass(frozen=True)
class SplitSpec:
    """Balanced (``per_class``) or long-tailed (``n1``, ``ratio``, ``beta``) split."""

    per_class: int | None = 4
    n1: int | None = None
    ratio: float = 1.0
    beta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n1 is None:
            if self.per_class is None or self.per_class < 1:
                raise ValueError("per_class must be >= 1")
        else:
            if self.n1 < 1 or self.ratio < 1:
                raise ValueError("long-tailed split needs n1 >= 1 and ratio >= 1")
            if not 0 < self.beta <= 1:
                raise ValueError("beta must be in (0, 1]")

    @property
    def long_tailed(self) -> bool:
        return self.n1 is not None


def _class_indices(labels: np.ndarray, num_classes: int) -> list[np.ndarray]:
    return [np.flatnonzero(labels == k) for k in range(num_classes)]


def balanced_split(ds: Dataset, per_class: int, seed: int) -> tuple[Dataset, Dataset]:
    """``per_class`` labeled samples per class; everything else unlabeled."""
    if ds.labels is None:
        raise ValueError("balanced_split needs a labeled source dataset")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    chosen = []
    for k, idx in enumerate(_class_indices(ds.labels, ds.num_classes)):
        if len(idx) < per_class:
            raise ValueError(f"class {k} has {len(idx)} samples, fewer than {per_class}")
        chosen.append(rng.choice(idx, size=per_class, replace=False))
    labeled = np.sort(np.concatenate(chosen))
    rest = np.setdiff1d(np.arange(len(ds)), labeled)
    return ds.subset(labeled), ds.subset(rest, as_unlabeled=True)


def long_tailed_counts(n1: int, ratio: float, num_classes: int) -> list[int]:
    """N_k = N_1 * ratio^(-(k-1)/(L-1)), rounded to nearest, at least 1."""
    if n1 < 1 or ratio < 1 or num_classes < 2:
        raise ValueError("need n1 >= 1, ratio >= 1, num_classes >= 2")
    k = np.arange(num_classes)
    raw = n1 * np.power(float(ratio), -k / (num_classes - 1))
    return [max(1, int(np.floor(v + 0.5))) for v in raw]


def long_tailed_split(ds: Dataset, n1: int, ratio: float, beta: float, seed: int) -> tuple[Dataset, Dataset]:
    """Subsample a long-tailed profile, then label round(beta * N_k) per class."""
    if ds.labels is None:
        raise ValueError("long_tailed_split needs a labeled source dataset")
    counts = long_tailed_counts(n1, ratio, ds.num_classes)
    rng = np.random.default_rng(seed)
    labeled, unlabeled = [], []
    for k, idx in enumerate(_class_indices(ds.labels, ds.num_classes)):
        if len(idx) < counts[k]:
            raise ValueError(f"class {k} has {len(idx)} samples, long-tailed profile needs {counts[k]}")
        pick = rng.choice(idx, size=counts[k], replace=False)
        n_lab = max(1, int(np.floor(beta * counts[k] + 0.5)))
        labeled.append(pick[:n_lab])
        unlabeled.append(pick[n_lab:])
    lab = np.sort(np.concatenate(labeled))
    unl = np.sort(np.concatenate(unlabeled))
    return ds.subset(lab), ds.subset(unl, as_unlabeled=True)


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    if spec.long_tailed:
        return long_tailed_split(ds, spec.n1, spec.ratio, spec.beta, spec.seed)
    return balanced_split(ds, spec.per_class, spec.seed)


def class_counts(labels: np.ndarray | None, num_classes: int) -> list[int]:
    if labels is None:
        return [0] * num_classes
    return np.bincount(labels, minlength=num_classes).tolist()


# synthetic data

def _disk(yy, xx, cy, cx, r):
    return ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r


def _ring(yy, xx, cy, cx, r):
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return np.abs(d - r) <= 0.75


def _bar(yy, xx, cy, cx, r, horizontal):
    along, across = (xx - cx, yy - cy) if horizontal else (yy - cy, xx - cx)
    return (np.abs(along) <= r) & (np.abs(across) <= 0.75)


def _glyph(kind: str, yy, xx, cy, cx, r):
    if kind == "hbar":
        return _bar(yy, xx, cy, cx, r, True)
    if kind == "vbar":
        return _bar(yy, xx, cy, cx, r, False)
    if kind == "ring":
        return _ring(yy, xx, cy, cx, r)
    if kind == "disk":
        return _disk(yy, xx, cy, cx, r * 0.8)
    if kind == "plus":
        return _bar(yy, xx, cy, cx, r, True) | _bar(yy, xx, cy, cx, r, False)
    if kind == "cross":
        u, v = (xx - cx + yy - cy) / np.sqrt(2), (xx - cx - yy + cy) / np.sqrt(2)
        return ((np.abs(u) <= r) & (np.abs(v) <= 0.75)) | ((np.abs(v) <= r) & (np.abs(u) <= 0.75))
    if kind == "square":
        m = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
        return np.abs(m - r * 0.8) <= 0.6
    if kind == "block":
        return np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= r * 0.7
    if kind == "tri_up":
        t = (yy - (cy - r)) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= t * r)
    if kind == "tri_down":
        t = ((cy + r) - yy) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= t * r)
    if kind == "hbars":
        return _bar(yy, xx, cy - r * 0.5, cx, r, True) | _bar(yy, xx, cy + r * 0.5, cx, r, True)
    if kind == "vbars":
        return _bar(yy, xx, cy, cx - r * 0.5, r, False) | _bar(yy, xx, cy, cx + r * 0.5, r, False)
    raise ValueError(kind)


GLYPHS = ("hbar", "vbar", "ring", "disk", "plus", "cross", "square", "block",
          "tri_up", "tri_down", "hbars", "vbars")
KINDS = ("shapes", "moons-img")


def gen_synthetic(kind: str, num_classes: int, n: int, size: int, seed: int,
                  noise: float = 0.05) -> Dataset:
    """Desk-scale single-channel image classification data.

    ``shapes`` draws one glyph family per class with random position, scale and
    intensity jitter plus Gaussian pixel noise.  ``moons-img`` renders a point
    cloud sampled from one of the two interleaved half-moons.  Labels cycle
    through the classes in a shuffled order, so classes are balanced.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if size < 8:
        raise ValueError("size must be >= 8")
    if kind == "shapes" and not 2 <= num_classes <= len(GLYPHS):
        raise ValueError(f"shapes supports 2..{len(GLYPHS)} classes, got {num_classes}")
    if kind == "moons-img" and num_classes != 2:
        raise ValueError("moons-img is a two-class dataset")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, 1, size, size), dtype=np.float64)
    for i, lab in enumerate(labels):
        if kind == "shapes":
            r = size * rng.uniform(0.22, 0.34)
            cy, cx = (size - 1) / 2 + rng.uniform(-0.15, 0.15, size=2) * size
            mask = _glyph(GLYPHS[lab], yy, xx, cy, cx, r)
            fg, bg = rng.uniform(0.6, 1.0), rng.uniform(0.0, 0.25)
            img = np.where(mask, fg, bg)
        else:
            img = _moons_image(rng, int(lab), size)
        images[i, 0] = img + rng.normal(0.0, noise, size=(size, size))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), num_classes)


def _moons_image(rng, label: int, size: int, points: int = 24) -> np.ndarray:
    t = rng.uniform(0, np.pi, size=points)
    if label == 0:
        px, py = np.cos(t), np.sin(t)
    else:
        px, py = 1 - np.cos(t), 0.5 - np.sin(t)
    px = px + rng.normal(0, 0.1, points)
    py = py + rng.normal(0, 0.1, points)
    # world box [-1.5, 2.5] x [-1.0, 1.5]
    col = np.clip(((px + 1.5) / 4.0 * (size - 1)).round().astype(int), 0, size - 1)
    row = np.clip(((1.5 - py) / 2.5 * (size - 1)).round().astype(int), 0, size - 1)
    img = np.zeros((size, size))
    img[row, col] = 1.0
    return img
