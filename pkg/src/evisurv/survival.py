"""Discrete-time likelihood, concordance, Kaplan-Meier and the log-rank test."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import SurvivalLabel

HAZARD_EPS = 1e-7


class UndefinedMetricError(ValueError):
    """A statistic has no valid value for the given cohort."""


class DegenerateTestError(UndefinedMetricError):
    pass


# ---------------------------------------------------------------------------
# likelihood and risk


def clamp_hazards(h: Tensor, eps: float = HAZARD_EPS) -> Tensor:
    return ad.clip(h, eps, 1.0 - eps)


def nll_loss(hazards, label: SurvivalLabel, eps: float = HAZARD_EPS) -> Tensor:
    """Negative log-likelihood of one patient under per-bin hazards.

    An event in bin ``j`` contributes ``-log S_{j-1} - log h_j``; a censored
    patient in bin ``j`` contributes ``-log S_j``, where
    ``S_j = prod_{i<=j} (1 - h_i)``.
    """
    h = clamp_hazards(ad.as_tensor(hazards), eps)
    K = h.cols
    if not 0 <= label.bin < K:
        raise ValueError(f"label bin {label.bin} outside 0..{K - 1}")
    survived = np.zeros((1, K))
    if label.event:
        survived[0, : label.bin] = 1.0
        hit = np.zeros((1, K))
        hit[0, label.bin] = 1.0
        log_surv = ad.sum(ad.mul(ad.log(ad.add_scalar(ad.scale(h, -1.0), 1.0)), Tensor(survived)))
        log_hit = ad.sum(ad.mul(ad.log(h), Tensor(hit)))
        return ad.scale(ad.add(log_surv, log_hit), -1.0)
    survived[0, : label.bin + 1] = 1.0
    log_surv = ad.sum(ad.mul(ad.log(ad.add_scalar(ad.scale(h, -1.0), 1.0)), Tensor(survived)))
    return ad.scale(log_surv, -1.0)


def survival_curve(hazards, eps: float = HAZARD_EPS) -> np.ndarray:
    h = np.clip(np.asarray(hazards, dtype=np.float64).reshape(-1), eps, 1.0 - eps)
    return np.cumprod(1.0 - h)


def scalar_risk(hazards, eps: float = HAZARD_EPS) -> float:
    """Negative summed survival curve; larger means earlier expected death."""
    return -float(survival_curve(hazards, eps).sum())


# ---------------------------------------------------------------------------
# concordance


@dataclass(frozen=True)
class Concordance:
    c_index: float
    n_pairs: int


def concordance(risks, times, events) -> Concordance:
    """Harrell's c over pairs where the earlier time is an observed death.

    Risk ties count 0.5; pairs with tied times are not comparable.
    """
    r = np.asarray(risks, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events).astype(bool)
    if not (len(r) == len(t) == len(e)):
        raise ValueError("risks, times and events must have equal length")
    num = 0.0
    pairs = 0
    # per anchor row: compare against every longer-lived patient
    for i in np.flatnonzero(e):
        later = t > t[i]
        n = int(later.sum())
        if not n:
            continue
        rj = r[later]
        num += float((rj < r[i]).sum()) + 0.5 * float((rj == r[i]).sum())
        pairs += n
    if pairs == 0:
        raise UndefinedMetricError("c-index undefined: no comparable pairs")
    return Concordance(num / pairs, pairs)


def c_index(risks, labels: list[SurvivalLabel]) -> float:
    return concordance(risks, [lb.time for lb in labels], [lb.event for lb in labels]).c_index


# ---------------------------------------------------------------------------
# Kaplan-Meier


@dataclass(frozen=True)
class KMCurve:
    times: np.ndarray  # distinct event times
    at_risk: np.ndarray
    events: np.ndarray
    survival: np.ndarray

    def at(self, t: float) -> float:
        """Survival estimate at time ``t`` (right-continuous step function)."""
        idx = np.searchsorted(self.times, t, side="right")
        return 1.0 if idx == 0 else float(self.survival[idx - 1])


def km_curve(times, events) -> KMCurve:
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events).astype(bool)
    if t.size == 0:
        raise ValueError("Kaplan-Meier needs a nonempty cohort")
    event_times = np.unique(t[e])
    at_risk = np.array([(t >= s).sum() for s in event_times], dtype=np.int64)
    deaths = np.array([((t == s) & e).sum() for s in event_times], dtype=np.int64)
    # (n - d) / n keeps simple fractions correctly rounded; 1 - d/n loses a bit
    surv = np.cumprod((at_risk - deaths) / at_risk) if event_times.size else np.zeros(0)
    return KMCurve(event_times, at_risk, deaths, surv)


# ---------------------------------------------------------------------------
# log-rank


@dataclass(frozen=True)
class LogRankResult:
    chi2: float
    p: float


def _gammainc_lower_series(a: float, x: float) -> float:
    term = total = 1.0 / a
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-17:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gammainc_upper_cf(a: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def gammaincc(a: float, x: float) -> float:
    """Regularized upper incomplete gamma ``Q(a, x)``."""
    if a <= 0:
        raise ValueError("gammaincc needs a > 0")
    if x <= 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gammainc_lower_series(a, x)
    return _gammainc_upper_cf(a, x)


def chi2_sf(x: float, df: int = 1) -> float:
    """Upper tail of the chi-square distribution."""
    if x <= 0:
        return 1.0
    return gammaincc(df / 2.0, x / 2.0)


def log_rank(times_a, events_a, times_b, events_b) -> LogRankResult:
    ta, tb = np.asarray(times_a, dtype=np.float64), np.asarray(times_b, dtype=np.float64)
    ea, eb = np.asarray(events_a).astype(bool), np.asarray(events_b).astype(bool)
    if ta.size == 0 or tb.size == 0:
        raise ValueError("log-rank needs two nonempty groups")
    all_t = np.concatenate([ta, tb])
    all_e = np.concatenate([ea, eb])
    if not all_e.any():
        raise DegenerateTestError("log-rank needs at least one observed event")
    observed = expected = variance = 0.0
    for s in np.unique(all_t[all_e]):
        n_a = float((ta >= s).sum())
        n = n_a + float((tb >= s).sum())
        d_a = float(((ta == s) & ea).sum())
        d = d_a + float(((tb == s) & eb).sum())
        observed += d_a
        expected += d * n_a / n
        if n > 1:
            variance += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1.0)
    if variance <= 0.0:
        raise DegenerateTestError("log-rank variance is zero; groups cannot be compared")
    stat = (observed - expected) ** 2 / variance
    return LogRankResult(stat, chi2_sf(stat, 1))


def median_split(risks) -> np.ndarray:
    """True for the high-risk half (risk strictly above the median)."""
    r = np.asarray(risks, dtype=np.float64)
    high = r > np.median(r)
    if high.all() or not high.any():
        raise DegenerateTestError("median split puts every patient in one group")
    return high
