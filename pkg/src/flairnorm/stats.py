"""Box-Cox transformation, t-tests and per-volume DSC improvement."""

from __future__ import annotations

import logging
import math
from typing import NamedTuple, Sequence

import numpy as np

from flairnorm.errors import (
    DegenerateDataError,
    IdMismatchError,
    NonPositiveDataError,
    TooFewSamplesError,
    ZeroVarianceBothError,
)

logger = logging.getLogger(__name__)

LAMBDA_GRID = np.arange(-300, 301) / 100.0
BOX_COX_MIN_SAMPLES = 10
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
# metrics whose distributions are tested untransformed
NO_BOX_COX = frozenset({"avd", "avd_percent"})


def _positive(data) -> np.ndarray:
    x = np.asarray(data, dtype=np.float64)
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise NonPositiveDataError("Box-Cox needs strictly positive, finite data")
    return x


def box_cox(data, lmbda: float) -> np.ndarray:
    """``(x**lmbda - 1) / lmbda``, or ``log(x)`` at ``lmbda == 0``."""
    x = _positive(data)
    if lmbda == 0:
        return np.log(x)
    if abs(lmbda) < 1e-2:
        # avoids cancellation in x**lmbda - 1 for tiny lambda
        return np.expm1(lmbda * np.log(x)) / lmbda
    return (x**lmbda - 1.0) / lmbda


def box_cox_llf(lmbda: float, log_x: np.ndarray) -> float:
    """Profile log-likelihood of the Box-Cox normal model, given ``log(x)``."""
    n = log_x.size
    y = log_x if lmbda == 0 else np.expm1(lmbda * log_x) / lmbda
    var = np.mean((y - y.mean()) ** 2)
    if not var > 0 or not np.isfinite(var):
        return -math.inf
    return -0.5 * n * math.log(var) + (lmbda - 1.0) * float(log_x.sum())


def box_cox_fit(data, tol: float = 1e-7) -> float:
    """Maximum-likelihood lambda: grid over [-3, 3] in 0.01 steps, then golden-section refinement."""
    x = _positive(data)
    if x.size < BOX_COX_MIN_SAMPLES:
        raise TooFewSamplesError(f"box_cox_fit needs at least {BOX_COX_MIN_SAMPLES} samples, got {x.size}")
    if np.ptp(x) == 0:
        raise DegenerateDataError("constant data has a flat Box-Cox likelihood")
    log_x = np.log(x)
    llf = np.array([box_cox_llf(lam, log_x) for lam in LAMBDA_GRID])
    i = int(np.argmax(llf))
    a = LAMBDA_GRID[max(i - 1, 0)]
    b = LAMBDA_GRID[min(i + 1, LAMBDA_GRID.size - 1)]
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = box_cox_llf(c, log_x), box_cox_llf(d, log_x)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = box_cox_llf(c, log_x)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = box_cox_llf(d, log_x)
    lam = 0.5 * (a + b)
    # the refinement bracket includes the grid optimum; never do worse than it
    if box_cox_llf(lam, log_x) < llf[i]:
        lam = float(LAMBDA_GRID[i])
    return float(lam)


# --- Student t distribution -----------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 1000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must be in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if not df > 0:
        raise ValueError("df must be positive")
    if t == 0:
        return 1.0
    return betainc(0.5 * df, 0.5, df / (df + t * t))


class TTestResult(NamedTuple):
    t: float
    df: float
    p: float


def _sample(data, name: str) -> np.ndarray:
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise TooFewSamplesError(f"{name} needs at least 2 values")
    return x


def welch_ttest(a, b) -> TTestResult:
    """Two-sided unequal-variance t-test."""
    a, b = _sample(a, "a"), _sample(b, "b")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    if va == 0 and vb == 0:
        raise ZeroVarianceBothError("both samples have zero variance")
    se2 = va + vb
    t = float((a.mean() - b.mean()) / math.sqrt(se2))
    df = float(se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1)))
    return TTestResult(t, df, t_sf_two_sided(t, df))


def paired_ttest(a, b) -> TTestResult:
    a, b = _sample(a, "a"), _sample(b, "b")
    if a.size != b.size:
        raise ValueError("paired samples must have equal length")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0:
        raise ZeroVarianceBothError("paired differences have zero variance")
    t = float(d.mean() / (sd / math.sqrt(d.size)))
    df = float(d.size - 1)
    return TTestResult(t, df, t_sf_two_sided(t, df))


def compare_metric(
    method_values: Sequence[float],
    original_values: Sequence[float],
    metric: str,
    method: str,
    alpha: float = 0.05,
    paired: bool = False,
) -> dict:
    """Significance of a metric difference between a method and the original data.

    Both groups are Box-Cox transformed with one lambda fitted on the pooled
    values, except for AVD. If the pooled data is not strictly positive or
    too small to fit, the test runs untransformed and ``lambda`` is None.
    """
    a = np.asarray(method_values, dtype=np.float64)
    b = np.asarray(original_values, dtype=np.float64)
    lam = None
    if metric not in NO_BOX_COX:
        pooled = np.concatenate([a, b])
        try:
            lam = box_cox_fit(pooled)
        except (NonPositiveDataError, TooFewSamplesError) as exc:
            logger.info("%s/%s: Box-Cox skipped (%s)", metric, method, exc)
        else:
            a, b = box_cox(a, lam), box_cox(b, lam)
    res = paired_ttest(a, b) if paired else welch_ttest(a, b)
    return {
        "metric": metric,
        "method": method,
        "lambda": lam,
        "t": res.t,
        "df": res.df,
        "p": res.p,
        "significant_at_0.05": bool(res.p < alpha),
    }


# --- improvement analysis -------------------------------------------------


class Improvement(NamedTuple):
    deltas: dict[str, float]
    fraction_improved: float
    n: int


def dsc_improvement(records_method, records_original) -> Improvement:
    """Per-volume DSC change (method minus original), paired by volume id."""
    def by_id(records):
        out = {}
        for r in records:
            if r.volume_id in out:
                raise IdMismatchError(f"duplicate volume id {r.volume_id!r}")
            out[r.volume_id] = r.dsc
        return out

    m, o = by_id(records_method), by_id(records_original)
    if set(m) != set(o):
        raise IdMismatchError(f"volume ids differ: {sorted(set(m) ^ set(o))}")
    if not m:
        raise IdMismatchError("no records to compare")
    deltas = {vid: m[vid] - o[vid] for vid in sorted(m)}
    improved = sum(1 for d in deltas.values() if d > 0)
    return Improvement(deltas, improved / len(deltas), len(deltas))
