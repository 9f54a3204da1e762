"""Training loop: interleaved labeled/unlabeled batches, SGD, cosine LR, EMA."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import augment as A
from . import grad as G
from . import models as M
from . import objective as O
from .data import Dataset
from .metrics import DEFAULT_BINS, MetricBundle, evaluate_predictions, pseudo_label_accuracy

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "lr", "loss_total", "loss_sup", "loss_unsup_ce", "loss_kl",
               "mask_ratio", "utilization", "pseudo_acc", "eval_top1", "eval_top5", "eval_ece")
LOG_SCHEMA_VERSION = 1
CHECKPOINT_WINDOW = 20


@dataclass
class TrainConfig:
    iterations: int = 20000
    batch_size: int = 64
    mu: int = 7
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    ema_momentum: float = 0.999
    threshold: float = O.DEFAULT_THRESHOLD
    temperature: float = O.DEFAULT_TEMPERATURE
    lambda_u: float = O.DEFAULT_LAMBDA_U
    threshold_mode: str = "fixed"
    ablation: str = "both"
    soft_scope: str = "below"
    eval_interval: int = 1000
    log_interval: int = 100
    seed: int = 0
    n_ops: int = 2
    cutout: bool = True
    workers: int = 1
    ece_bins: int = DEFAULT_BINS
    eval_batch: int = 512
    supervised_only: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.mu < 1 or self.iterations < 1:
            raise ValueError("batch_size, mu and iterations must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not 0 <= self.ema_momentum < 1:
            raise ValueError("ema_momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.eval_interval < 1 or self.log_interval < 1:
            raise ValueError("intervals must be >= 1")
        self.ablation = O.AblationMode.parse(self.ablation).value
        self.threshold_mode = O.ThresholdMode(self.threshold_mode).value
        if self.soft_scope not in ("below", "all"):
            raise ValueError("soft_scope must be 'below' or 'all'")


def cosine_lr(t: int, total: int, lr0: float) -> float:
    """lr0 * cos(7 pi t / (16 K)): decays to about 0.195 * lr0 at t = K."""
    if not 0 <= t <= total:
        raise ValueError(f"iteration {t} outside [0, {total}]")
    return lr0 * math.cos(7.0 * math.pi * t / (16.0 * total))


def sgd_step(state: M.ModelState, grads: dict[str, np.ndarray], lr: float,
             momentum: float, weight_decay: float) -> None:
    """v <- momentum * v + grad + wd * theta;  theta <- theta - lr * v."""
    for k, p in state.params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise G.DimensionError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        t = p.dtype.type
        v = t(momentum) * state.momentum[k] + g
        if weight_decay:
            v = v + t(weight_decay) * p
        state.momentum[k] = v
        state.params[k] = p - t(lr) * v


class EpochSampler:
    """Endless stream of indices made of independently shuffled epochs."""

    def __init__(self, n: int, seed: int, stream: int):
        if n < 1:
            raise ValueError("cannot sample from an empty set")
        self.n, self.seed, self.stream = n, seed, stream
        self.epoch = 0
        self._order = self._perm()
        self._pos = 0

    def _perm(self):
        return np.random.default_rng([self.seed, self.stream, self.epoch]).permutation(self.n)

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self._pos == self.n:
                self.epoch += 1
                self._order, self._pos = self._perm(), 0
            chunk = self._order[self._pos:self._pos + k]
            self._pos += len(chunk)
            k -= len(chunk)
            out.append(chunk)
        return np.concatenate(out)


@dataclass
class EvalResult:
    top1_error: float
    top5_error: float
    ece: float
    metrics: MetricBundle
    probs: np.ndarray


def evaluate(state: M.ModelState, ds: Dataset, n_bins: int = DEFAULT_BINS,
             batch_size: int = 512) -> EvalResult:
    """EMA-weight inference on a labeled set."""
    if len(ds) == 0:
        raise ValueError("empty evaluation set")
    truth = ds.truth
    if truth is None:
        raise ValueError("evaluation set has no labels")
    probs = M.predict_proba(state, ds.images, use_ema=True, batch_size=batch_size)
    bundle = evaluate_predictions(probs, truth, state.spec.num_classes, n_bins)
    return EvalResult(bundle.top1_error, bundle.top5_error, bundle.ece, bundle, probs)


class TrainingAborted(RuntimeError):
    def __init__(self, iteration: int, last_good: int, row: dict):
        super().__init__(f"non-finite loss at iteration {iteration}; last good iteration {last_good}")
        self.iteration, self.last_good, self.row = iteration, last_good, row


@dataclass
class TrainResult:
    state: M.ModelState
    rows: list[dict]
    eval_history: list[tuple[int, float]] = field(default_factory=list)
    final_eval: EvalResult | None = None
    best_state: M.ModelState | None = None

    @property
    def best_error(self) -> float:
        return min(e for _, e in self.eval_history)

    @property
    def last_error(self) -> float:
        return self.eval_history[-1][1]

    @property
    def median_last_error(self) -> float:
        return float(np.median([e for _, e in self.eval_history[-CHECKPOINT_WINDOW:]]))

    def summary(self) -> dict:
        fe = self.final_eval
        return {
            "best_top1_error": self.best_error,
            "median_last20_top1_error": self.median_last_error,
            "final_top1_error": fe.top1_error,
            "final_top5_error": fe.top5_error,
            "final_ece": fe.ece,
            "final_precision": fe.metrics.precision,
            "final_recall": fe.metrics.recall,
            "final_f1": fe.metrics.f1,
            "final_auc": fe.metrics.auc,
            "evaluations": len(self.eval_history),
        }


@dataclass
class StepOutput:
    breakdown: O.LossBreakdown
    decisions: O.BranchDecisions | None
    unlabeled_idx: np.ndarray | None


def train_step(state: M.ModelState, cfg: TrainConfig, t: int, labeled: Dataset,
               unlabeled: Dataset | None, lab_idx: np.ndarray, unl_idx: np.ndarray | None,
               policy: O.ThresholdPolicy | None) -> StepOutput:
    """One iteration: augment, pseudo-label, combined loss, SGD, EMA."""
    b = len(lab_idx)
    x_lab = A.augment_views(labeled.images[lab_idx],
                            A.BatchRng(cfg.seed, t, np.arange(b), A.STREAM_LABELED_WEAK),
                            strong=False, workers=cfg.workers)
    y_lab = labeled.labels[lab_idx]
    if cfg.supervised_only or unl_idx is None:
        fwd = M.forward(state, x_lab, record=True)
        with fwd.tape:
            l_sup = O.supervised_loss(y_lab, fwd.logits)
            zero = G.Tensor(np.zeros((), dtype=l_sup.dtype))
            total, bd = O.total_loss(l_sup, zero, zero, cfg.lambda_u)
        decisions = None
    else:
        n = len(unl_idx)
        raw = unlabeled.images[unl_idx]
        pos = np.arange(n)
        x_weak = A.augment_views(raw, A.BatchRng(cfg.seed, t, pos, A.STREAM_UNLABELED_WEAK),
                                 strong=False, workers=cfg.workers)
        x_strong = A.augment_views(raw, A.BatchRng(cfg.seed, t, pos, A.STREAM_UNLABELED_STRONG),
                                   strong=True, n_ops=cfg.n_ops, cutout=cfg.cutout, workers=cfg.workers)
        weak_logits = M.forward(state, x_weak).logits.data
        decisions = O.select_branches(O.softmax(weak_logits), policy, unl_idx)
        fwd = M.forward(state, np.concatenate([x_lab, x_strong]), record=True)
        with fwd.tape:
            l_sup = O.supervised_loss(y_lab, fwd.logits[0:b])
            strong_logits = fwd.logits[b:]
            l_ce, l_kl = O.unlabeled_losses(decisions, weak_logits, strong_logits, cfg.ablation,
                                            cfg.temperature, cfg.soft_scope)
            total, bd = O.total_loss(l_sup, l_ce, l_kl, cfg.lambda_u, decisions, cfg.ablation,
                                     cfg.soft_scope)
    names = list(fwd.params)
    grads = fwd.tape.backward(total, [fwd.params[k] for k in names])
    sgd_step(state, dict(zip(names, grads)), cosine_lr(t, cfg.iterations, cfg.lr),
             cfg.momentum, cfg.weight_decay)
    M.ema_update(state, cfg.ema_momentum)
    return StepOutput(bd, decisions, unl_idx)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_row(row: dict) -> list[str]:
    return [_fmt(row.get(c)) for c in LOG_COLUMNS]


def train(cfg: TrainConfig, spec: M.ModelSpec, labeled: Dataset, unlabeled: Dataset | None,
          eval_set: Dataset | None, on_row: Callable[[dict], None] | None = None,
          on_eval: Callable[[int, M.ModelState, EvalResult], None] | None = None) -> TrainResult:
    """Run ``cfg.iterations`` steps; deterministic given ``cfg.seed``."""
    if labeled.labels is None or len(labeled) == 0:
        raise ValueError("labeled set is empty or has no labels")
    missing = sorted(set(range(spec.num_classes)) - set(np.unique(labeled.labels).tolist()))
    if missing:
        raise ValueError(f"labeled set has no samples for classes {missing}")
    use_unlabeled = not cfg.supervised_only and unlabeled is not None and len(unlabeled) > 0
    state = M.init(spec, cfg.seed)
    lab_sampler = EpochSampler(len(labeled), cfg.seed, 11)
    unl_sampler = EpochSampler(len(unlabeled), cfg.seed, 12) if use_unlabeled else None
    policy = O.ThresholdPolicy(cfg.threshold, cfg.threshold_mode, spec.num_classes,
                               len(unlabeled) if use_unlabeled else 0)
    truth = unlabeled.truth if use_unlabeled else None
    result = TrainResult(state, [])
    best = math.inf
    last_good = 0
    for t in range(cfg.iterations):
        it = t + 1
        lab_idx = lab_sampler.take(cfg.batch_size)
        unl_idx = unl_sampler.take(cfg.mu * cfg.batch_size) if use_unlabeled else None
        try:
            # overflow surfaces as NonFiniteError from the op checks
            with np.errstate(over="ignore", invalid="ignore"):
                out = train_step(state, cfg, t, labeled, unlabeled, lab_idx, unl_idx, policy)
        except G.NonFiniteError as exc:
            row = {"iteration": it, "lr": cosine_lr(t, cfg.iterations, cfg.lr), "loss_total": math.nan}
            result.rows.append(row)
            if on_row:
                on_row(row)
            log.error("aborting: %s", exc)
            raise TrainingAborted(it, last_good, row) from exc
        last_good = it
        final = it == cfg.iterations
        do_eval = eval_set is not None and (it % cfg.eval_interval == 0 or final)
        if use_unlabeled and cfg.threshold_mode == "cpl" and (it % cfg.eval_interval == 0):
            policy.refresh()
        if not (do_eval or final or it % cfg.log_interval == 0):
            continue
        bd = out.breakdown
        row = {
            "iteration": it, "lr": cosine_lr(t, cfg.iterations, cfg.lr),
            "loss_total": bd.total, "loss_sup": bd.sup, "loss_unsup_ce": bd.unsup_ce,
            "loss_kl": bd.kl,
        }
        if out.decisions is not None:
            row["mask_ratio"] = bd.mask_ratio
            row["utilization"] = bd.utilization
            if truth is not None:
                row["pseudo_acc"] = pseudo_label_accuracy(out.decisions, truth[out.unlabeled_idx])
        if do_eval:
            ev = evaluate(state, eval_set, cfg.ece_bins, cfg.eval_batch)
            row.update(eval_top1=ev.top1_error, eval_top5=ev.top5_error, eval_ece=ev.ece)
            result.eval_history.append((it, ev.top1_error))
            result.final_eval = ev
            if ev.top1_error < best:
                best = ev.top1_error
                result.best_state = state.copy()
            if on_eval:
                on_eval(it, state, ev)
            log.info("iter %d  loss %.4f  top1 %.2f  ece %.2f", it, bd.total, ev.top1_error, ev.ece)
        result.rows.append(row)
        if on_row:
            on_row(row)
    return result


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
