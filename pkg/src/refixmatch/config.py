"""Flat ``key=value`` run configuration."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .models import ModelSpec
from .trainer import TrainConfig

SEED_ENV = "RFX_SEED"


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _widths(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _show(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class Key:
    default: Any
    parse: Callable[[str], Any]
    doc: str


_T = TrainConfig()
_M = ModelSpec()

KEYS: dict[str, Key] = {
    # data and output
    "labeled": Key("", str, "labeled-set manifest"),
    "unlabeled": Key("", str, "unlabeled-set manifest (empty: supervised only)"),
    "eval": Key("", str, "evaluation-set manifest (empty: no evaluation)"),
    "out": Key("run", str, "output directory"),
    # model
    "arch": Key(_M.arch, str, "mlp or smallconv"),
    "widths": Key(_M.widths, _widths, "hidden widths (mlp) or conv channels (smallconv), comma separated"),
    "norm_mean": Key(_M.norm_mean, float, "input normalisation mean"),
    "norm_std": Key(_M.norm_std, float, "input normalisation std"),
    # optimisation
    "iterations": Key(_T.iterations, int, "training iterations K"),
    "batch_size": Key(_T.batch_size, int, "labeled batch size B"),
    "mu": Key(_T.mu, int, "unlabeled to labeled batch ratio"),
    "lr": Key(_T.lr, float, "initial learning rate"),
    "momentum": Key(_T.momentum, float, "SGD momentum"),
    "weight_decay": Key(_T.weight_decay, float, "weight decay"),
    "ema_momentum": Key(_T.ema_momentum, float, "EMA momentum of the evaluation weights"),
    # objective
    "threshold": Key(_T.threshold, float, "confidence threshold tau"),
    "temperature": Key(_T.temperature, float, "sharpening temperature T"),
    "lambda_u": Key(_T.lambda_u, float, "unlabeled loss weight"),
    "threshold_mode": Key(_T.threshold_mode, str, "fixed or cpl"),
    "ablation": Key(_T.ablation, str, "hard_only, soft_only or both"),
    "soft_scope": Key(_T.soft_scope, str, "below: KL on below-threshold samples only; all: KL on every sample"),
    "supervised_only": Key(_T.supervised_only, _bool, "ignore unlabeled data"),
    # augmentation
    "n_ops": Key(_T.n_ops, int, "RandAugment transforms per strong view"),
    "cutout": Key(_T.cutout, _bool, "apply cutout after RandAugment"),
    "workers": Key(_T.workers, int, "augmentation threads (results do not depend on it)"),
    # bookkeeping
    "seed": Key(_T.seed, int, "run seed; RFX_SEED overrides"),
    "eval_interval": Key(_T.eval_interval, int, "iterations between evaluations"),
    "log_interval": Key(_T.log_interval, int, "iterations between log rows"),
    "ece_bins": Key(_T.ece_bins, int, "calibration bins M"),
    "eval_batch": Key(_T.eval_batch, int, "evaluation batch size"),
}

_TRAIN_FIELDS = [f for f in TrainConfig.__dataclass_fields__ if f in KEYS]


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    raw: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        raw[k.strip()] = v.strip()
    return raw


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, Any]

    @classmethod
    def build(cls, raw: dict[str, str], overrides: list[str] | None = None,
              env: dict[str, str] | None = None) -> "RunConfig":
        raw = dict(raw)
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            raw[k.strip()] = v.strip()
        env = os.environ if env is None else env
        if env.get(SEED_ENV, "").strip():
            raw["seed"] = env[SEED_ENV].strip()
        unknown = sorted(set(raw) - set(KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = {k: key.default for k, key in KEYS.items()}
        for k, v in raw.items():
            try:
                values[k] = KEYS[k].parse(v)
            except ValueError as exc:
                raise ConfigError(f"bad value for {k}: {v!r} ({exc})") from None
        cfg = cls(values)
        cfg.train_config()
        cfg.model_spec((1, 8, 8), 2)
        return cfg

    @classmethod
    def load(cls, path, overrides: list[str] | None = None,
             env: dict[str, str] | None = None) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
        return cls.build(parse_lines(text, str(path)), overrides, env)

    def __getitem__(self, key: str):
        return self.values[key]

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**{k: self.values[k] for k in _TRAIN_FIELDS})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def model_spec(self, input_shape: tuple[int, int, int], num_classes: int) -> ModelSpec:
        try:
            return ModelSpec(arch=self["arch"], widths=self["widths"], input_shape=tuple(input_shape),
                             num_classes=num_classes, norm_mean=self["norm_mean"], norm_std=self["norm_std"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def resolved(self) -> str:
        """Every key with its effective value; loading this text reproduces the run."""
        return "".join(f"{k}={_show(self.values[k])}\n" for k in KEYS)


def defaults_text() -> str:
    return "".join(f"# {key.doc}\n{k}={_show(key.default)}\n" for k, key in KEYS.items())
