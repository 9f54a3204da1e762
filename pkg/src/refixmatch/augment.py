"""Weak (flip + pad-and-crop) and strong (RandAugment + cutout) augmentation.

Every random choice is drawn from a counter-based stream keyed by
``(seed, iteration, sample index, stream)``, so the output for one sample does
not depend on which batch, chunk or thread processed it.  All batched
transforms act on each image independently; applying them to a batch gives
bit-identical results to applying them one image at a time.
"""

from __future__ import annotations

import functools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

# name -> (low, high) parameter range, None for parameter-free transforms
TRANSFORMS: dict[str, tuple[float, float] | None] = {
    "AutoContrast": None,
    "Brightness": (0.05, 0.95),
    "Color": (0.05, 0.95),
    "Contrast": (0.05, 0.95),
    "Equalize": None,
    "Identity": None,
    "Posterize": (4, 8),
    "Rotate": (-30.0, 30.0),
    "Sharpness": (0.05, 0.95),
    "ShearX": (-0.3, 0.3),
    "ShearY": (-0.3, 0.3),
    "Solarize": (0.0, 1.0),
    "TranslateX": (-0.3, 0.3),
    "TranslateY": (-0.3, 0.3),
}
NAMES = tuple(TRANSFORMS)
# blend transforms also accept their degenerate (0) and original (1) endpoints
# when applied directly; sampling stays inside TRANSFORMS ranges
_DOMAINS = {name: ((0.0, 1.0) if name in ("Brightness", "Color", "Contrast", "Sharpness") else rng)
            for name, rng in TRANSFORMS.items()}
CUTOUT_FILL = 0.5

# streams used by the trainer
STREAM_LABELED_WEAK = 1
STREAM_UNLABELED_WEAK = 2
STREAM_UNLABELED_STRONG = 4  # also uses 5 for the RandAugment stage


@dataclass(frozen=True)
class TransformSpec:
    name: str
    value: float | None = None

    def __post_init__(self):
        if self.name not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.name!r}")
        rng = TRANSFORMS[self.name]
        if rng is None:
            return
        if self.value is None:
            raise ValueError(f"{self.name} needs a parameter in {rng}")
        lo, hi = rng
        if not lo <= self.value <= hi:
            raise ValueError(f"{self.name} parameter {self.value} outside [{lo}, {hi}]")
        if self.name == "Posterize" and int(self.value) != self.value:
            raise ValueError("Posterize bits must be an integer")


# counter-based random streams

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


_MASK = (1 << 64) - 1


def _mix_int(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _key(seed: int, iteration: int, indices: np.ndarray, stream: int) -> np.ndarray:
    g = int(_GOLDEN)
    k = _mix_int(seed + g)
    k = _mix_int(k ^ ((iteration * g) & _MASK))
    k = _mix_int(k ^ ((stream + 3 * g) & _MASK))
    # array arithmetic wraps silently; only scalar uint64 ops warn
    return _mix(np.uint64(k) ^ (indices.astype(np.uint64) * _GOLDEN + np.uint64(7)))


class BatchRng:
    """Uniform draws in [0, 1) for a batch of samples.

    Row ``i`` depends only on ``(seed, iteration, indices[i], stream)``.
    """

    def __init__(self, seed: int, iteration: int, indices, stream: int = 0):
        if min(seed, iteration, stream) < 0:
            raise ValueError("seed, iteration and stream must be non-negative")
        self.seed, self.iteration, self.stream = seed, iteration, stream
        self.indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        if self.indices.size and self.indices.min() < 0:
            raise ValueError("sample indices must be non-negative")
        self._key = None

    def __len__(self):
        return len(self.indices)

    def subset(self, sl) -> "BatchRng":
        return BatchRng(self.seed, self.iteration, self.indices[sl], self.stream)

    def uniforms(self, count: int, offset: int = 0) -> np.ndarray:
        if self._key is None:
            self._key = _key(self.seed, self.iteration, self.indices, self.stream)
        ctr = np.arange(offset + 1, offset + count + 1, dtype=np.uint64) * _GOLDEN
        z = _mix(self._key[:, None] + ctr[None, :])
        return (z >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def sample_rng(seed: int, iteration: int, index: int, stream: int = 0) -> BatchRng:
    return BatchRng(seed, iteration, [index], stream)


# helpers

def _check_batch(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim != 4 or min(images.shape[1:]) < 1:
        raise ValueError(f"expected a (N, C, H, W) batch, got shape {images.shape}")
    return images


def _finish(x: np.ndarray, dtype) -> np.ndarray:
    # same result as np.clip without its Python-level dispatch
    return np.minimum(np.maximum(x, 0.0), 1.0).astype(dtype, copy=False)


def _gray(x: np.ndarray) -> np.ndarray:
    if x.shape[1] == 3:
        return (0.299 * x[:, 0] + 0.587 * x[:, 1] + 0.114 * x[:, 2])[:, None]
    return x.mean(axis=1, keepdims=True) if x.shape[1] > 1 else x


def _blend(degenerate: np.ndarray, x: np.ndarray, factor: np.ndarray) -> np.ndarray:
    f = factor.reshape(-1, 1, 1, 1)
    return degenerate + f * (x - degenerate)


def _gather(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """out[i, c, p] = x[i, c, idx[i, p]] over flattened spatial positions."""
    n, c, h, w = x.shape
    base = (np.arange(n * c, dtype=np.intp) * (h * w)).reshape(n, c, 1)
    return np.take(x.reshape(-1), base + idx.reshape(n, 1, -1)).reshape(n, c, *idx.shape[1:])


def _warp(x: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear resampling at source coordinates (n, H, W); edges replicated."""
    n, c, h, w = x.shape
    xs = np.minimum(np.maximum(xs, 0.0), w - 1.0)
    ys = np.minimum(np.maximum(ys, 0.0), h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    fx = (xs - x0)[:, None]
    fy = (ys - y0)[:, None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    idx = np.concatenate([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=1)
    v00, v01, v10, v11 = np.split(_gather(x.astype(np.float64), idx), 4, axis=2)
    top = (1.0 - fx) * v00 + fx * v01
    bottom = (1.0 - fx) * v10 + fx * v11
    return (1.0 - fy) * top + fy * bottom


def _q8(x: np.ndarray) -> np.ndarray:
    return np.rint(np.minimum(np.maximum(x, 0.0), 1.0).astype(np.float64) * 255.0).astype(np.uint8)


# geometric transforms share one affine warp:
#   xs = a*x + b*y + c,  ys = d*x + e*y + f   (source coordinates)
_GEOMETRIC = ("Rotate", "ShearX", "ShearY", "TranslateX", "TranslateY")


def _affine(kind: np.ndarray, v: np.ndarray, h: int, w: int) -> np.ndarray:
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    coef = np.zeros((len(v), 6))
    coef[:, 0] = coef[:, 4] = 1.0
    for i, (k, p) in enumerate(zip(kind, v.tolist())):
        if k == "Rotate":
            # elementwise libm calls: results must not depend on batch size
            t = p * (math.pi / 180.0)
            cs, sn = math.cos(t), math.sin(t)
            # counter-clockwise on screen for positive angles
            coef[i] = (cs, -sn, cx - cs * cx + sn * cy, sn, cs, cy - sn * cx - cs * cy)
        elif k == "ShearX":
            coef[i, 1], coef[i, 2] = p, -p * cy
        elif k == "ShearY":
            coef[i, 3], coef[i, 5] = p, -p * cx
        elif k == "TranslateX":
            coef[i, 2] = -p * w
        elif k == "TranslateY":
            coef[i, 5] = -p * h
    return coef


@functools.lru_cache(maxsize=8)
def _grid(h: int, w: int) -> np.ndarray:
    g = np.mgrid[0:h, 0:w].astype(np.float64)
    g.flags.writeable = False
    return g


def _geometric(x: np.ndarray, kind: np.ndarray, v: np.ndarray) -> np.ndarray:
    _, _, h, w = x.shape
    coef = _affine(kind, v, h, w)[:, :, None, None]
    yy, xx = _grid(h, w)
    xs = coef[:, 0] * xx + coef[:, 1] * yy + coef[:, 2]
    ys = coef[:, 3] * xx + coef[:, 4] * yy + coef[:, 5]
    return _warp(x, xs, ys)


def _geometric_as(name: str):
    def fn(x, v):
        return _geometric(x, np.full(len(x), name, dtype=object), v)
    return fn


# batched transforms, one parameter per image

def _autocontrast(x, v):
    lo = x.min(axis=(2, 3), keepdims=True).astype(np.float64)
    hi = x.max(axis=(2, 3), keepdims=True).astype(np.float64)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (x - lo) / safe, x)


def _brightness(x, v):
    # blend towards black: 0 + f * (x - 0) is exactly f * x
    return v.reshape(-1, 1, 1, 1) * x.astype(np.float64)


def _color(x, v):
    if x.shape[1] == 1:
        return x
    return _blend(np.broadcast_to(_gray(x.astype(np.float64)), x.shape), x, v)


def _contrast(x, v):
    g = _gray(x.astype(np.float64))
    m = g.reshape(len(x), -1).mean(axis=1).reshape(-1, 1, 1, 1)
    return _blend(m, x, v)


def _equalize(x, v):
    """Per-channel histogram equalization with the usual 8-bit step rule."""
    q = _q8(x)
    n, c, h, w = q.shape
    rows = q.reshape(n * c, h * w).astype(np.intp)
    m = n * c
    hist = np.bincount((rows + 256 * np.arange(m)[:, None]).ravel(),
                       minlength=256 * m).reshape(m, 256)
    last = hist[np.arange(m), 255 - np.argmax(hist[:, ::-1] > 0, axis=1)]
    step = (h * w - last) // 255
    cum = np.concatenate([np.zeros((m, 1), dtype=hist.dtype), np.cumsum(hist, axis=1)[:, :-1]], axis=1)
    lut = np.clip((cum + (step // 2)[:, None]) // np.maximum(step, 1)[:, None], 0, 255)
    out = np.where(step[:, None] > 0, np.take_along_axis(lut, rows, axis=1), rows)
    return out.reshape(n, c, h, w).astype(np.float64) / 255.0


def _identity(x, v):
    return x


def _posterize(x, v):
    q = _q8(x)
    bits = v.astype(np.int64).reshape(-1, 1, 1, 1)
    mask = (0xFF << (8 - bits)) & 0xFF
    return (q & mask.astype(np.uint8)).astype(np.float64) / 255.0


def _sharpness(x, v):
    xf = x.astype(np.float64)
    smooth = xf.copy()
    inner = 5.0 * xf[:, :, 1:-1, 1:-1]
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy or dx:
                inner = inner + xf[:, :, 1 + dy:xf.shape[2] - 1 + dy, 1 + dx:xf.shape[3] - 1 + dx]
    smooth[:, :, 1:-1, 1:-1] = inner / 13.0
    return _blend(smooth, xf, v)


def _solarize(x, v):
    # threshold on the 8-bit scale: T = 1 leaves every pixel, T = 0 inverts all
    t = v.reshape(-1, 1, 1, 1) * 256.0
    xf = x.astype(np.float64)
    return np.where(_q8(x) >= t, 1.0 - xf, xf)


_IMPL = {
    "AutoContrast": _autocontrast,
    "Brightness": _brightness,
    "Color": _color,
    "Contrast": _contrast,
    "Equalize": _equalize,
    "Identity": _identity,
    "Posterize": _posterize,
    "Sharpness": _sharpness,
    "Solarize": _solarize,
    **{name: _geometric_as(name) for name in _GEOMETRIC},
}


def apply_transform_batch(images: np.ndarray, name: str, values) -> np.ndarray:
    images = _check_batch(images)
    if name not in _IMPL:
        raise ValueError(f"unknown transform {name!r}")
    values = np.broadcast_to(np.asarray(0.0 if values is None else values, dtype=np.float64),
                             (len(images),))
    rng = _DOMAINS[name]
    if rng is not None and values.size and (values.min() < rng[0] or values.max() > rng[1]):
        raise ValueError(f"{name} parameter outside [{rng[0]}, {rng[1]}]")
    if name == "Identity":
        return images.copy()
    return _finish(_IMPL[name](images, values), images.dtype)


def apply_transform(img: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Apply one table transform to a single (C, H, W) image."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got {img.shape}")
    return apply_transform_batch(img[None], spec.name, spec.value)[0]


# weak augmentation

def weak_params(rng: BatchRng, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(flip, dy, dx) per sample; crop offsets index the reflect-padded image."""
    h, w = shape
    ph, pw = math.ceil(h / 8), math.ceil(w / 8)
    u = rng.uniforms(3)
    flip = u[:, 0] < 0.5
    dy = np.minimum((u[:, 1] * (2 * ph + 1)).astype(np.intp), 2 * ph)
    dx = np.minimum((u[:, 2] * (2 * pw + 1)).astype(np.intp), 2 * pw)
    return flip, dy, dx


def _reflect(i: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(i)
    i = np.abs(i)
    return np.where(i > n - 1, 2 * (n - 1) - i, i)


def apply_weak(images: np.ndarray, flip, dy, dx) -> np.ndarray:
    """Flip, reflect-pad by ceil(size/8) and crop at (dy, dx), as one gather."""
    images = _check_batch(images)
    n, _, h, w = images.shape
    ph, pw = math.ceil(h / 8), math.ceil(w / 8)
    flip = np.broadcast_to(np.asarray(flip, dtype=bool), (n,))
    dy = np.broadcast_to(np.asarray(dy, dtype=np.intp), (n,))
    dx = np.broadcast_to(np.asarray(dx, dtype=np.intp), (n,))
    if dy.size and (dy.min() < 0 or dy.max() > 2 * ph or dx.min() < 0 or dx.max() > 2 * pw):
        raise ValueError("crop offset outside the padded image")
    rows = _reflect(dy[:, None] + np.arange(h)[None] - ph, h)
    cols = _reflect(dx[:, None] + np.arange(w)[None] - pw, w)
    cols = np.where(flip[:, None], w - 1 - cols, cols)
    return _gather(np.ascontiguousarray(images), rows[:, :, None] * w + cols[:, None, :])


def weak_augment(img: np.ndarray, rng: BatchRng) -> np.ndarray:
    """Random horizontal flip (p = 0.5) then reflect-pad by ceil(size/8) and crop."""
    return weak_augment_batch(np.asarray(img)[None], rng)[0]


def weak_augment_batch(images: np.ndarray, rng: BatchRng) -> np.ndarray:
    images = _check_batch(images)
    _require_rows(images, rng)
    return apply_weak(images, *weak_params(rng, images.shape[2:]))


# strong augmentation

_NAME_ARRAY = np.array(NAMES, dtype=object)
_LO = np.array([np.nan if TRANSFORMS[k] is None else TRANSFORMS[k][0] for k in NAMES])
_HI = np.array([np.nan if TRANSFORMS[k] is None else TRANSFORMS[k][1] for k in NAMES])
_POSTERIZE = NAMES.index("Posterize")
_IS_GEOMETRIC = np.isin(np.array(NAMES), _GEOMETRIC)


def sample_ops(rng: BatchRng, n_ops: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Transform indices into NAMES and parameters, each (n, n_ops); NaN = no parameter."""
    u = rng.uniforms(2 * n_ops)
    k = np.minimum((u[:, 0::2] * len(NAMES)).astype(np.intp), len(NAMES) - 1)
    lo, hi, uv = _LO[k], _HI[k], u[:, 1::2]
    vals = lo + uv * (hi - lo)
    post = k == _POSTERIZE
    vals[post] = np.minimum(lo[post] + np.floor(uv[post] * (hi[post] - lo[post] + 1)), hi[post])
    return k, vals


def sample_transforms(rng: BatchRng, n_ops: int = 2) -> list[list[TransformSpec]]:
    """``n_ops`` transforms per sample, uniform over the table and its ranges."""
    k, vals = sample_ops(rng, n_ops)
    return [[TransformSpec(NAMES[a], None if math.isnan(b) else float(b))
             for a, b in zip(krow, vrow)] for krow, vrow in zip(k.tolist(), vals.tolist())]


def cutout_params(rng: BatchRng, shape: tuple[int, int], n_ops: int) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    side = min(h, w) // 2
    u = rng.uniforms(2, offset=2 * n_ops)
    y = np.minimum((u[:, 0] * (h - side + 1)).astype(np.intp), h - side)
    x = np.minimum((u[:, 1] * (w - side + 1)).astype(np.intp), w - side)
    return y, x


def apply_cutout(images: np.ndarray, y, x) -> np.ndarray:
    """Set one square of side floor(min(H, W) / 2) to gray in every image."""
    images = _check_batch(images)
    n, _, h, w = images.shape
    side = min(h, w) // 2
    y = np.broadcast_to(np.asarray(y, dtype=np.intp), (n,))[:, None]
    x = np.broadcast_to(np.asarray(x, dtype=np.intp), (n,))[:, None]
    ar_h, ar_w = np.arange(h)[None], np.arange(w)[None]
    inside = ((ar_h >= y) & (ar_h < y + side))[:, :, None] & ((ar_w >= x) & (ar_w < x + side))[:, None, :]
    return np.where(inside[:, None], images.dtype.type(CUTOUT_FILL), images)


def _apply_ops(images: np.ndarray, k: np.ndarray, vals: np.ndarray) -> np.ndarray:
    out = images.copy()
    for j in range(k.shape[1]):
        names = _NAME_ARRAY[k[:, j]]
        geo = _IS_GEOMETRIC[k[:, j]]
        if geo.any():
            sel = np.flatnonzero(geo)
            out[sel] = _finish(_geometric(out[sel], names[sel], vals[sel, j]), out.dtype)
        for idx in np.unique(k[~geo, j]):
            name = NAMES[idx]
            if name == "Identity":
                continue
            sel = np.flatnonzero(k[:, j] == idx)
            out[sel] = _finish(_IMPL[name](out[sel], vals[sel, j]), out.dtype)
    return out


def apply_specs(images: np.ndarray, specs: list[list[TransformSpec]]) -> np.ndarray:
    """Apply per-sample transform lists in order."""
    images = _check_batch(images)
    if len(specs) != len(images):
        raise ValueError("need one transform list per image")
    if not specs:
        return images.copy()
    k = np.array([[NAMES.index(s.name) for s in row] for row in specs], dtype=np.intp)
    vals = np.array([[np.nan if s.value is None else s.value for s in row] for row in specs])
    return _apply_ops(images, k, vals)


def strong_augment(img: np.ndarray, rng: BatchRng, n_ops: int = 2, cutout: bool = True) -> np.ndarray:
    """RandAugment with ``n_ops`` uniformly sampled transforms, then optional cutout."""
    return strong_augment_batch(np.asarray(img)[None], rng, n_ops, cutout)[0]


def strong_augment_batch(images: np.ndarray, rng: BatchRng, n_ops: int = 2,
                         cutout: bool = True) -> np.ndarray:
    images = _check_batch(images)
    _require_rows(images, rng)
    out = _apply_ops(images, *sample_ops(rng, n_ops))
    if cutout:
        out = apply_cutout(out, *cutout_params(rng, images.shape[2:], n_ops))
    return out


def _require_rows(images, rng):
    if len(images) != len(rng):
        raise ValueError(f"{len(images)} images but {len(rng)} random streams")


def augment_views(images: np.ndarray, rng: BatchRng, strong: bool, n_ops: int = 2,
                  cutout: bool = True, workers: int = 1) -> np.ndarray:
    """Batch augmentation, optionally split across threads.

    The weak view is flip + crop; the strong view is the weak view followed by
    RandAugment (and cutout).  Strong draws come from ``rng.stream + 1`` so the
    two stages stay independent.
    """
    images = _check_batch(images)
    _require_rows(images, rng)

    def run(sl):
        sub = rng.subset(sl)
        x = weak_augment_batch(images[sl], sub)
        if strong:
            x = strong_augment_batch(x, BatchRng(sub.seed, sub.iteration, sub.indices, sub.stream + 1),
                                     n_ops, cutout)
        return x

    if workers <= 1 or len(images) < 2:
        return run(slice(None))
    bounds = np.linspace(0, len(images), min(workers, len(images)) + 1).astype(int)
    slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(run, slices))
    return np.concatenate(parts)
