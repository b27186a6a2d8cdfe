"""Survival evaluation: time-dependent concordance, Kaplan-Meier, log-rank."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class TdcResult:
    value: float | None
    concordant: float
    comparable: int

    @property
    def defined(self) -> bool:
        return self.value is not None


def survival_matrix(curves: Sequence, times) -> np.ndarray:
    """``M[j, i] = S_j(t_i)`` for per-record curves exposing ``survival(t)``."""
    times = np.asarray(times, dtype=float)
    return np.stack([np.asarray(c.survival(times), dtype=float) for c in curves])


def td_concordance(times, events, curves) -> TdcResult:
    """Antolini's time-dependent concordance.

    A pair (i, j) is comparable when ``t_i < t_j`` and record i had an event;
    it is concordant when ``S_i(t_i) < S_j(t_i)`` and counts one half when the
    two survival values tie.  ``curves`` is either a sequence of objects with
    ``survival(t)`` or a precomputed matrix ``M[j, i] = S_j(t_i)``.
    """
    t = np.asarray(times, dtype=float)
    e = np.asarray(events, dtype=int)
    m = curves if isinstance(curves, np.ndarray) else survival_matrix(curves, t)
    own = np.diag(m)                       # S_i(t_i)
    other = m.T                            # other[i, j] = S_j(t_i)
    comp = (t[:, None] < t[None, :]) & (e[:, None] == 1)
    n_comp = int(comp.sum())
    if n_comp == 0:
        return TdcResult(None, 0.0, 0)
    lt = int((comp & (own[:, None] < other)).sum())
    eq = int((comp & (own[:, None] == other)).sum())
    return TdcResult((2 * lt + eq) / (2 * n_comp), lt + 0.5 * eq, n_comp)


@dataclass(frozen=True)
class KmCurve:
    times: np.ndarray      # distinct event times, ascending
    survival: np.ndarray   # S just after each time
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t):
        """Right-continuous step evaluation."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        return np.concatenate([[1.0], self.survival])[idx]


def kaplan_meier(times, events) -> KmCurve:
    """Product-limit estimate; deaths at a time precede censorings at that time."""
    t = np.asarray(times, dtype=float)
    e = np.asarray(events, dtype=int)
    if t.size == 0:
        raise ValueError("Kaplan-Meier needs at least one record")
    uniq = np.unique(t[e == 1])
    at_risk = np.array([(t >= u).sum() for u in uniq], dtype=int)
    deaths = np.array([((t == u) & (e == 1)).sum() for u in uniq], dtype=int)
    surv = np.cumprod(1.0 - deaths / at_risk) if uniq.size else np.empty(0)
    return KmCurve(uniq, surv, at_risk, deaths)


def write_km_csv(path, curve: KmCurve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "survival", "at_risk", "events"])
        n0 = int(curve.at_risk[0]) if curve.at_risk.size else 0
        w.writerow([0.0, 1.0, n0, 0])
        for row in zip(curve.times, curve.survival, curve.at_risk, curve.events):
            w.writerow([repr(float(row[0])), repr(float(row[1])), int(row[2]), int(row[3])])


# ---------------------------------------------------------------------------
# chi-square tail via the regularized incomplete gamma function


def _gamma_series(a: float, x: float) -> float:
    term = total = 1.0 / a
    ap = a
    for _ in range(10000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-17:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cont_frac(a: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
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
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x)."""
    if a <= 0 or x < 0:
        raise ValueError("gamma_q needs a > 0 and x >= 0")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return max(0.0, 1.0 - _gamma_series(a, x))
    return min(1.0, _gamma_cont_frac(a, x))


def chi2_sf(stat: float, df: int = 1) -> float:
    return gamma_q(df / 2.0, max(stat, 0.0) / 2.0)


@dataclass(frozen=True)
class LogRankResult:
    statistic: float | None
    p_value: float | None
    n_a: int
    n_b: int
    observed_a: int = 0
    expected_a: float = 0.0

    @property
    def defined(self) -> bool:
        return self.statistic is not None


def logrank(times_a, events_a, times_b, events_b) -> LogRankResult:
    ta, ea = np.asarray(times_a, float), np.asarray(events_a, int)
    tb, eb = np.asarray(times_b, float), np.asarray(events_b, int)
    if ta.size == 0 or tb.size == 0:
        raise ValueError("log-rank needs two non-empty groups")
    t = np.concatenate([ta, tb])
    e = np.concatenate([ea, eb])
    in_a = np.concatenate([np.ones(ta.size, bool), np.zeros(tb.size, bool)])
    uniq = np.unique(t[e == 1])
    if uniq.size == 0:
        return LogRankResult(None, None, ta.size, tb.size)
    o_minus_e = var = expected = 0.0
    observed = 0
    for u in uniq:
        risk = t >= u
        n = int(risk.sum())
        n_a = int((risk & in_a).sum())
        dead = (t == u) & (e == 1)
        d = int(dead.sum())
        d_a = int((dead & in_a).sum())
        exp_a = d * n_a / n
        observed += d_a
        expected += exp_a
        o_minus_e += d_a - exp_a
        if n > 1:
            var += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1)
    if var <= 0:
        return LogRankResult(None, None, ta.size, tb.size, observed, expected)
    stat = o_minus_e**2 / var
    return LogRankResult(stat, chi2_sf(stat, 1), ta.size, tb.size, observed, expected)


@dataclass(frozen=True)
class Stratification:
    high: np.ndarray
    low: np.ndarray
    threshold: float

    @property
    def degenerate(self) -> bool:
        return self.high.size == 0 or self.low.size == 0


def stratify_median(risk_scores) -> Stratification:
    """High risk = strictly above the median score; ties go to low risk."""
    r = np.asarray(risk_scores, dtype=float)
    if r.size < 2:
        raise ValueError("stratification needs at least two records")
    med = float(np.median(r))
    return Stratification(np.flatnonzero(r > med), np.flatnonzero(r <= med), med)
