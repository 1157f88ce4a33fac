"""Loss terms: click cross-entropy, reweighted conversion cross-entropy, funnel calibration hinge."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 0.6

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3) < 0:
            raise ConfigError(f"loss weights must be nonnegative, got {self}")


@dataclass(frozen=True)
class CurseConfig:
    gamma: float = 3.0
    cap: float = 4.0
    enabled: bool = True
    pos_pct: float = 99.0
    neg_pct: float = 10.0
    window: int = 10_000
    warmup_min: int = 1_000

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.cap < 1:
            raise ConfigError(f"cap must be >= 1, got {self.cap}")
        if not (0 < self.neg_pct <= 100 and 0 < self.pos_pct <= 100):
            raise ConfigError("percentiles must lie in (0, 100]")
        if self.window < 1 or self.warmup_min < 0:
            raise ConfigError("window must be >= 1 and warmup_min >= 0")


@dataclass
class LossReport:
    l_ctr: float
    l_ce: float
    l_co: float
    total: float
    mean_a: float = 1.0
    mean_b: float = 1.0
    pos: float = float("nan")
    neg: float = float("nan")


def _check_labels(y: np.ndarray, what: str) -> None:
    if y.size and not np.all((y == 0) | (y == 1)):
        raise DataError(f"{what} labels must be 0 or 1")


def clamp(p: np.ndarray) -> np.ndarray:
    return np.clip(p, EPS, 1.0 - EPS)


def _weighted_bce(p, labels, w_pos, w_neg):
    labels = np.asarray(labels)
    _check_labels(labels, "binary")
    pc = clamp(np.asarray(p, dtype=np.float64))
    n = pc.size
    per = -(w_pos * labels * np.log(pc) + w_neg * (1 - labels) * np.log(1.0 - pc))
    # the clamp is treated as identity in the gradient so saturated mistakes still get a signal
    grad = (-w_pos * labels / pc + w_neg * (1 - labels) / (1.0 - pc)) / n
    return float(per.sum() / n), grad


def bce_loss(p: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient with respect to ``p``."""
    one = np.ones(np.shape(p))
    return _weighted_bce(p, labels, one, one)


def weighted_cvr_loss(z_hat, z, a, b) -> tuple[float, np.ndarray]:
    """Cross-entropy with per-sample weights ``a`` on positives and ``b`` on negatives.

    The weights are constants here; no gradient flows into them.
    """
    shape = np.shape(z_hat)
    return _weighted_bce(z_hat, z, np.broadcast_to(a, shape), np.broadcast_to(b, shape))


def calib_loss(z_hat, y_hat) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean hinge ``max(z_hat - y_hat, 0)``; subgradient is zero at equality."""
    z_hat = np.asarray(z_hat, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    n = z_hat.size
    diff = z_hat - y_hat
    viol = diff > 0
    loss = float(np.where(viol, diff, 0.0).sum() / n) if n else 0.0
    g = viol / n if n else viol.astype(np.float64)
    return loss, g.astype(np.float64), -g.astype(np.float64)


class ThresholdTracker:
    """Ring buffer over the most recent click predictions, read as nearest-rank percentiles."""

    def __init__(self, capacity: int = 10_000, pos_pct: float = 99.0, neg_pct: float = 10.0,
                 warmup_min: int = 1_000):
        self.capacity = int(capacity)
        self.pos_pct, self.neg_pct = pos_pct, neg_pct
        self.warmup_min = int(warmup_min)
        self.buffer = np.zeros(self.capacity, dtype=np.float64)
        self.cursor = 0
        self.fill = 0

    @classmethod
    def from_config(cls, cfg: CurseConfig) -> "ThresholdTracker":
        return cls(cfg.window, cfg.pos_pct, cfg.neg_pct, cfg.warmup_min)

    def push(self, values) -> None:
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size >= self.capacity:
            # only the newest `capacity` values survive; keep ring order consistent
            values = values[-self.capacity:]
        n = values.size
        first = min(n, self.capacity - self.cursor)
        self.buffer[self.cursor:self.cursor + first] = values[:first]
        self.buffer[:n - first] = values[first:]
        self.cursor = (self.cursor + n) % self.capacity
        self.fill = min(self.capacity, self.fill + n)

    def window(self) -> np.ndarray:
        """Current contents, oldest first."""
        if self.fill < self.capacity:
            return self.buffer[:self.fill].copy()
        return np.concatenate([self.buffer[self.cursor:], self.buffer[:self.cursor]])

    def thresholds(self) -> tuple[float, float, bool]:
        """``(pos, neg, active)``; pos/neg are NaN until something has been pushed."""
        if self.fill == 0:
            return float("nan"), float("nan"), False
        srt = np.sort(self.buffer[:self.fill])
        return (nearest_rank(srt, self.pos_pct), nearest_rank(srt, self.neg_pct),
                self.fill >= self.warmup_min)


def nearest_rank(sorted_values: np.ndarray, pct: float) -> float:
    n = len(sorted_values)
    rank = max(1, math.ceil(pct * n / 100))
    return float(sorted_values[min(rank, n) - 1])


def curse_weights(y_hat, pos: float, neg: float, cfg: CurseConfig, active: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Sample weights ``A = min(cap, max(1, (neg/y)^g))`` and ``B = min(cap, max(1, (y/pos)^g))``."""
    y = clamp(np.asarray(y_hat, dtype=np.float64))
    if not cfg.enabled or not active:
        return np.ones_like(y), np.ones_like(y)
    if not (pos > 0 and neg > 0):
        raise ConfigError(f"thresholds must be positive, got pos={pos} neg={neg}")
    a = np.minimum(cfg.cap, np.maximum(1.0, (neg / y) ** cfg.gamma))
    b = np.minimum(cfg.cap, np.maximum(1.0, (y / pos) ** cfg.gamma))
    return a, b


def total_loss(l_ctr: float, l_ce: float, l_co: float, w: LossWeights) -> float:
    return w.w1 * l_ctr + w.w2 * l_ce + w.w3 * l_co


@dataclass
class ObjectiveResult:
    report: LossReport
    d_y: np.ndarray
    d_z: np.ndarray


def cstwa_objective(y_hat, z_hat, y, z, w: LossWeights, a=1.0, b=1.0, pos=float("nan"),
                    neg=float("nan"), cvr_mask=None) -> ObjectiveResult:
    """Weighted sum of the three terms and its gradient split onto the two heads.

    ``cvr_mask`` restricts the conversion term to a subset of rows (used by the
    clicked-only baseline); the mean is then over that subset.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    z_hat = np.asarray(z_hat, dtype=np.float64)
    l_ctr, g_ctr = bce_loss(y_hat, y)
    a = np.broadcast_to(np.asarray(a, dtype=np.float64), z_hat.shape)
    b = np.broadcast_to(np.asarray(b, dtype=np.float64), z_hat.shape)
    if cvr_mask is None:
        l_ce, g_ce = weighted_cvr_loss(z_hat, z, a, b)
    else:
        g_ce = np.zeros_like(z_hat)
        if cvr_mask.any():
            l_ce, g_ce[cvr_mask] = weighted_cvr_loss(z_hat[cvr_mask], np.asarray(z)[cvr_mask], a[cvr_mask], b[cvr_mask])
        else:
            l_ce = 0.0
    l_co, gz_co, gy_co = calib_loss(z_hat, y_hat)
    report = LossReport(l_ctr, l_ce, l_co, total_loss(l_ctr, l_ce, l_co, w),
                        float(a.mean()) if a.size else 1.0, float(b.mean()) if b.size else 1.0, pos, neg)
    d_y = w.w1 * g_ctr + w.w3 * gy_co
    d_z = w.w2 * g_ce + w.w3 * gz_co
    return ObjectiveResult(report, d_y, d_z)
