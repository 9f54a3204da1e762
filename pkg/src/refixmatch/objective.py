"""Hard pseudo-label CE plus sharpened-KL soft targets, and threshold policies.

For an unlabeled batch of size ``n`` with weak-view probabilities ``q``:

* samples with ``max(q) >= threshold`` are HARD: cross-entropy of the strong
  view against ``argmax(q)``;
* the rest are SOFT: KL(sharpen(weak logits, T) || strong prediction).

Both sums are divided by ``n`` (the whole batch), and targets are constants.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import grad as G
from .grad import Tensor

DEFAULT_THRESHOLD = 0.95
DEFAULT_TEMPERATURE = 0.5
DEFAULT_LAMBDA_U = 1.0
PROB_TOLERANCE = 1e-4


class Branch(enum.IntEnum):
    HARD = 1
    SOFT = 0


class AblationMode(str, enum.Enum):
    HARD_ONLY = "hard_only"   # FixMatch: KL term off
    SOFT_ONLY = "soft_only"   # only the sharpened-KL term
    BOTH = "both"             # CE for confident samples + KL for the rest

    @classmethod
    def parse(cls, value) -> "AblationMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown ablation mode {value!r}; expected one of "
                             f"{[m.value for m in cls]}") from None


class ThresholdMode(str, enum.Enum):
    FIXED = "fixed"
    CPL = "cpl"


def softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def sharpen(logits, temperature: float) -> np.ndarray:
    """softmax(z / T), computed with max-subtraction."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits)
    return softmax(z / z.dtype.type(temperature) if z.dtype.kind == "f" else z / temperature)


# branch selection

@dataclass(frozen=True)
class BranchDecision:
    confidence: float
    pseudo_label: int
    branch: Branch
    threshold: float


@dataclass(frozen=True)
class BranchDecisions:
    """Per-sample branch assignment for one unlabeled batch (array form)."""

    confidence: np.ndarray
    pseudo_label: np.ndarray
    hard: np.ndarray
    threshold: np.ndarray

    def __len__(self):
        return len(self.hard)

    def __getitem__(self, i) -> BranchDecision:
        return BranchDecision(float(self.confidence[i]), int(self.pseudo_label[i]),
                              Branch.HARD if self.hard[i] else Branch.SOFT, float(self.threshold[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def soft(self) -> np.ndarray:
        return ~self.hard

    @property
    def hard_count(self) -> int:
        return int(self.hard.sum())

    @property
    def soft_count(self) -> int:
        return len(self) - self.hard_count

    @property
    def mask_ratio(self) -> float:
        return self.soft_count / len(self)

    @property
    def hard_fraction(self) -> float:
        return 1.0 - self.mask_ratio

    def tile(self, times: int) -> "BranchDecisions":
        return BranchDecisions(*(np.tile(a, times) for a in
                                 (self.confidence, self.pseudo_label, self.hard, self.threshold)))


@dataclass
class ThresholdPolicy:
    """Fixed threshold, or class-wise curriculum thresholds (CPL).

    CPL keeps the latest confident (``>= tau``) prediction of every unlabeled
    sample.  ``counts[c]`` is how many samples currently sit in class ``c`` and
    ``unused`` how many were never confident.  On :meth:`refresh` each class
    gets ``tau * counts[c] / max(max(counts), unused)``.
    """

    tau: float = DEFAULT_THRESHOLD
    mode: ThresholdMode = ThresholdMode.FIXED
    num_classes: int = 10
    num_unlabeled: int = 0
    thresholds: np.ndarray = field(default=None)
    selected: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.mode = ThresholdMode(self.mode)
        if not 0 <= self.tau <= 1:
            raise ValueError(f"threshold must be in [0, 1], got {self.tau}")
        if self.thresholds is None:
            self.thresholds = np.full(self.num_classes, float(self.tau))
        if self.selected is None:
            self.selected = np.full(self.num_unlabeled, -1, dtype=np.int64)
        if self.mode is ThresholdMode.CPL:
            # all samples start unused: warm-up thresholds
            self.refresh()

    @property
    def counts(self) -> np.ndarray:
        sel = self.selected[self.selected >= 0]
        return np.bincount(sel, minlength=self.num_classes)

    @property
    def unused(self) -> int:
        return int((self.selected < 0).sum())

    def observe(self, indices, confidence: np.ndarray, pseudo_label: np.ndarray) -> None:
        if self.mode is not ThresholdMode.CPL or indices is None:
            return
        indices = np.asarray(indices)
        confident = confidence >= self.tau
        self.selected[indices[confident]] = pseudo_label[confident]

    def refresh(self) -> np.ndarray:
        if self.mode is ThresholdMode.CPL:
            self.thresholds = cpl_thresholds(self.counts, self.unused, self.tau)
        return self.thresholds


def cpl_thresholds(counts, unused: int, tau: float) -> np.ndarray:
    """tau * counts / max(max(counts), unused); all tau when nothing is counted yet."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0) or unused < 0:
        raise ValueError("counts must be non-negative")
    denom = max(float(counts.max()) if counts.size else 0.0, float(unused))
    if denom == 0:
        return np.full(counts.shape, float(tau))
    return (counts / denom) * tau


def select_branches(probs, policy: ThresholdPolicy | float = DEFAULT_THRESHOLD,
                    indices=None) -> BranchDecisions:
    """Assign each row of weak-view probabilities to HARD or SOFT.

    A sample is HARD when its max probability reaches the threshold of its
    predicted class (boundary inclusive).  Rows off the simplex by at most
    1e-4 are renormalised; anything further is an error.
    """
    if not isinstance(policy, ThresholdPolicy):
        policy = ThresholdPolicy(tau=float(policy), num_classes=np.shape(probs)[-1])
    q = np.asarray(probs, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] == 0:
        raise ValueError(f"expected a non-empty (n, K) probability matrix, got {q.shape}")
    if np.any(q < 0) or not np.all(np.isfinite(q)):
        raise ValueError("probabilities must be finite and non-negative")
    sums = q.sum(axis=1)
    bad = np.abs(sums - 1.0) > PROB_TOLERANCE
    if bad.any():
        raise ValueError(f"row {int(np.flatnonzero(bad)[0])} sums to {sums[bad][0]:.6f}, not a probability vector")
    q = q / sums[:, None]
    conf = q.max(axis=1)
    pred = q.argmax(axis=1)
    thr = np.asarray(policy.thresholds, dtype=np.float64)[pred]
    hard = conf >= thr
    policy.observe(indices, conf, pred)
    return BranchDecisions(conf, pred, hard, thr)


# loss terms

def _per_batch(x: Tensor, n: int) -> Tensor:
    return G.mul(G.total(x), Tensor(np.asarray(1.0, dtype=x.dtype) / np.asarray(n, dtype=x.dtype)))


def supervised_loss(labels, logits: Tensor) -> Tensor:
    """Mean hard-label cross-entropy."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty labeled batch")
    k = logits.shape[1]
    if labels.max() >= k or labels.min() < 0:
        raise ValueError(f"label outside [0, {k})")
    nll = G.neg(G.gather(G.log_softmax(logits), labels))
    return _per_batch(nll, len(labels))


def unsupervised_ce(decisions: BranchDecisions, strong_logits: Tensor) -> Tensor:
    """(1/n) * sum over HARD samples of CE(argmax q, strong prediction)."""
    n = len(decisions)
    if strong_logits.shape[0] != n:
        raise ValueError("decisions and strong logits are not aligned")
    mask = decisions.hard.astype(strong_logits.dtype)
    picked = G.gather(G.log_softmax(strong_logits), decisions.pseudo_label)
    return G.neg(_per_batch(G.mul(picked, mask), n))


def kl_loss(decisions: BranchDecisions, weak_logits, strong_logits: Tensor,
            temperature: float = DEFAULT_TEMPERATURE, scope: str = "below") -> Tensor:
    """(1/n) * sum over SOFT samples of KL(sharpen(weak, T) || strong prediction).

    ``scope="all"`` applies the KL term to every sample instead of only the
    sub-threshold ones.
    """
    n = len(decisions)
    if strong_logits.shape[0] != n:
        raise ValueError("decisions and strong logits are not aligned")
    weak = weak_logits.data if isinstance(weak_logits, Tensor) else np.asarray(weak_logits)
    target = sharpen(weak.astype(strong_logits.dtype), temperature)
    if scope == "below":
        mask = decisions.soft
    elif scope == "all":
        mask = np.ones(n, dtype=bool)
    else:
        raise ValueError(f"unknown KL scope {scope!r}")
    with np.errstate(divide="ignore"):
        log_t = np.where(target > 0, np.log(np.where(target > 0, target, 1.0)), 0.0)
    neg_entropy = (target * log_t).sum(axis=1)
    cross = G.sum(G.mul(G.log_softmax(strong_logits), Tensor(target)), axis=1)
    per_sample = G.sub(Tensor(neg_entropy.astype(strong_logits.dtype)), cross)
    return _per_batch(G.mul(per_sample, mask.astype(strong_logits.dtype)), n)


def per_sample_unlabeled(decisions: BranchDecisions, weak_logits, strong_logits: Tensor,
                         temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """CE for HARD rows and KL for SOFT rows in one vector (single fused pass)."""
    weak = weak_logits.data if isinstance(weak_logits, Tensor) else np.asarray(weak_logits)
    target = sharpen(weak.astype(strong_logits.dtype), temperature)
    onehot = np.eye(strong_logits.shape[1], dtype=target.dtype)[decisions.pseudo_label]
    hard = decisions.hard[:, None]
    dist = np.where(hard, onehot, target)
    with np.errstate(divide="ignore"):
        log_d = np.where(dist > 0, np.log(np.where(dist > 0, dist, 1.0)), 0.0)
    const = (dist * log_d).sum(axis=1).astype(strong_logits.dtype)
    cross = G.sum(G.mul(G.log_softmax(strong_logits), Tensor(dist)), axis=1)
    return G.sub(Tensor(const), cross)


@dataclass(frozen=True)
class LossBreakdown:
    sup: float
    unsup_ce: float
    kl: float
    total: float
    mask_ratio: float
    utilization: float
    lambda_u: float


def utilization(decisions: BranchDecisions, mode: AblationMode, scope: str = "below") -> float:
    mode = AblationMode.parse(mode)
    if mode is AblationMode.BOTH:
        return 1.0
    if mode is AblationMode.HARD_ONLY:
        return decisions.hard_fraction
    return 1.0 if scope == "all" else decisions.mask_ratio


def total_loss(l_sup: Tensor, l_ce: Tensor, l_kl: Tensor, lambda_u: float = DEFAULT_LAMBDA_U,
               decisions: BranchDecisions | None = None,
               mode: AblationMode = AblationMode.BOTH, scope: str = "below") -> tuple[Tensor, LossBreakdown]:
    """L_s + lambda_u * (L_u_ce + L_kl), with a float breakdown for logging."""
    l_sup, l_ce, l_kl = (t if isinstance(t, Tensor) else Tensor(t) for t in (l_sup, l_ce, l_kl))
    lam = Tensor(np.asarray(lambda_u, dtype=l_sup.dtype))
    total = G.add(l_sup, G.mul(lam, G.add(l_ce, l_kl)))
    if decisions is not None:
        mask, util = decisions.mask_ratio, utilization(decisions, mode, scope)
    else:
        mask, util = float("nan"), float("nan")
    # "+ 0.0" folds a negative zero into 0.0 for logging
    return total, LossBreakdown(l_sup.item() + 0.0, l_ce.item() + 0.0, l_kl.item() + 0.0,
                                total.item() + 0.0, mask, util, float(lambda_u))


def unlabeled_losses(decisions: BranchDecisions, weak_logits, strong_logits: Tensor,
                     mode: AblationMode = AblationMode.BOTH,
                     temperature: float = DEFAULT_TEMPERATURE,
                     scope: str = "below") -> tuple[Tensor, Tensor]:
    """(L_u_ce, L_kl) under an ablation mode; disabled terms are constant zeros."""
    mode = AblationMode.parse(mode)
    zero = Tensor(np.zeros((), dtype=strong_logits.dtype))
    ce = unsupervised_ce(decisions, strong_logits) if mode is not AblationMode.SOFT_ONLY else zero
    kl = kl_loss(decisions, weak_logits, strong_logits, temperature, scope) \
        if mode is not AblationMode.HARD_ONLY else zero
    return ce, kl
