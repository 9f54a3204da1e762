"""Small classifiers, their parameter state, and the EMA shadow copy."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import grad as G
from .grad import Tensor

ARCHITECTURES = ("mlp", "smallconv")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``widths`` are hidden layer sizes for ``mlp`` and the two conv channel
    counts for ``smallconv``.  Inputs are normalised per channel with the fixed
    ``norm_mean``/``norm_std`` before the first layer.
    """

    arch: str = "smallconv"
    widths: tuple[int, ...] = (16, 32)
    input_shape: tuple[int, int, int] = (1, 16, 16)
    num_classes: int = 10
    norm_mean: float = 0.5
    norm_std: float = 0.25

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        if self.arch == "smallconv":
            if len(self.widths) != 2:
                raise ValueError("smallconv takes exactly two channel widths")
            if min(self.input_shape[1:]) < 4:
                raise ValueError("smallconv needs spatial size >= 4")
        if self.norm_std <= 0:
            raise ValueError("norm_std must be positive")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c, h, w = self.input_shape
        k = self.num_classes
        if self.arch == "mlp":
            shapes = {}
            fan = c * h * w
            for i, width in enumerate(self.widths):
                shapes[f"fc{i}.w"] = (fan, width)
                shapes[f"fc{i}.b"] = (width,)
                fan = width
            shapes["out.w"] = (fan, k)
            shapes["out.b"] = (k,)
            return shapes
        c1, c2 = self.widths
        flat = c2 * (h // 4) * (w // 4)
        return {
            "conv1.w": (c1, c, 3, 3), "conv1.b": (c1,),
            "conv2.w": (c2, c1, 3, 3), "conv2.b": (c2,),
            "out.w": (flat, k), "out.b": (k,),
        }


def fan_in(shape: tuple[int, ...]) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


def init_bound(shape: tuple[int, ...]) -> float:
    """Half-width of the uniform fan-in init; std is ``sqrt(2 / fan_in)``."""
    return float(np.sqrt(6.0 / fan_in(shape)))


@dataclass
class ModelState:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] = field(default_factory=dict)
    momentum: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.ema:
            self.ema = {k: v.copy() for k, v in self.params.items()}
        if not self.momentum:
            self.momentum = {k: np.zeros_like(v) for k, v in self.params.items()}
        if not (self.params.keys() == self.ema.keys() == self.momentum.keys()):
            raise ValueError("params, ema and momentum must share keys")
        for k, v in self.params.items():
            if self.ema[k].shape != v.shape or self.momentum[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}")

    def copy(self) -> "ModelState":
        return ModelState(self.spec,
                          {k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.ema.items()},
                          {k: v.copy() for k, v in self.momentum.items()})


def init(spec: ModelSpec, seed: int) -> ModelState:
    rng = np.random.default_rng(seed)
    dtype = G.default_dtype()
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = init_bound(shape)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelState(spec, params)


class Forward(NamedTuple):
    logits: Tensor
    tape: G.Tape | None
    params: dict[str, Tensor]


def forward(state: ModelState, x, use_ema: bool = False, record: bool = False) -> Forward:
    """Logits for a batch ``x`` of shape (N, C, H, W).

    With ``record`` (and not ``use_ema``) the pass is recorded on a fresh tape
    and the parameter tensors it used are returned for :meth:`Tape.backward`.
    """
    spec = state.spec
    x = np.asarray(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise G.DimensionError(f"input shape {x.shape} does not match model input {spec.input_shape}")
    source = state.ema if use_ema else state.params
    record = record and not use_ema
    params = {k: Tensor(v, requires_grad=record) for k, v in source.items()}
    tape = G.Tape() if record else None
    dtype = next(iter(source.values())).dtype
    inp = Tensor((x.astype(dtype) - dtype.type(spec.norm_mean)) / dtype.type(spec.norm_std))
    if tape is None:
        logits = _network(spec, params, inp)
    else:
        with tape:
            logits = _network(spec, params, inp)
    return Forward(logits, tape, params)


def _network(spec: ModelSpec, p: dict[str, Tensor], x: Tensor) -> Tensor:
    n = x.shape[0]
    if spec.arch == "mlp":
        h = x.reshape(n, -1)
        for i in range(len(spec.widths)):
            h = G.relu(h @ p[f"fc{i}.w"] + p[f"fc{i}.b"])
        return h @ p["out.w"] + p["out.b"]
    h = G.conv2d(x, p["conv1.w"], padding=1) + p["conv1.b"].reshape(1, -1, 1, 1)
    h = G.max_pool2d(G.relu(h))
    h = G.conv2d(h, p["conv2.w"], padding=1) + p["conv2.b"].reshape(1, -1, 1, 1)
    h = G.max_pool2d(G.relu(h))
    return h.reshape(n, -1) @ p["out.w"] + p["out.b"]


def ema_update(state: ModelState, m: float) -> None:
    """ema <- m * ema + (1 - m) * params, for every key."""
    if not 0.0 <= m < 1.0:
        raise ValueError(f"EMA momentum must be in [0, 1), got {m}")
    for k, p in state.params.items():
        t = p.dtype.type
        state.ema[k] = t(m) * state.ema[k] + t(1.0 - m) * p


def predict_proba(state: ModelState, x, use_ema: bool = True, batch_size: int = 512) -> np.ndarray:
    """Softmax probabilities in fixed-size chunks (inference only)."""
    out = []
    for start in range(0, len(x), batch_size):
        logits = forward(state, x[start:start + batch_size], use_ema=use_ema).logits
        out.append(G.softmax(logits).data)
    return np.concatenate(out) if out else np.zeros((0, state.spec.num_classes))


# checkpoints

def save_checkpoint(state: ModelState, directory) -> Path:
    from .data import write_tensor_file

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spec = state.spec
    lines = [
        f"arch={spec.arch}",
        f"widths={','.join(map(str, spec.widths))}",
        f"input_shape={','.join(map(str, spec.input_shape))}",
        f"num_classes={spec.num_classes}",
        f"norm_mean={spec.norm_mean!r}",
        f"norm_std={spec.norm_std!r}",
    ]
    for group, tensors in (("param", state.params), ("ema", state.ema), ("momentum", state.momentum)):
        for k, v in tensors.items():
            fname = f"{group}.{k}.rfxt"
            write_tensor_file(directory / fname, v.astype(np.float32))
            lines.append(f"{group}.{k}={fname}")
    manifest = directory / "checkpoint.manifest"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_checkpoint(path) -> ModelState:
    from .data import read_manifest, read_tensor_file

    path = Path(path)
    manifest = path / "checkpoint.manifest" if path.is_dir() else path
    entries = read_manifest(manifest)
    spec = ModelSpec(
        arch=entries["arch"],
        widths=tuple(int(v) for v in entries["widths"].split(",")),
        input_shape=tuple(int(v) for v in entries["input_shape"].split(",")),
        num_classes=int(entries["num_classes"]),
        norm_mean=float(entries["norm_mean"]),
        norm_std=float(entries["norm_std"]),
    )
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "ema": {}, "momentum": {}}
    for key, value in entries.items():
        group, _, name = key.partition(".")
        if group in groups and name:
            groups[group][name] = read_tensor_file(manifest.parent / value)
    expected = spec.param_shapes()
    for name, shape in expected.items():
        if name not in groups["param"] or groups["param"][name].shape != shape:
            raise ValueError(f"checkpoint {manifest} missing or misshapen parameter {name}")
    return ModelState(spec, groups["param"], groups["ema"], groups["momentum"])
