"""Ensemble statistics, rate regression, Kolmogorov-Smirnov, and the run report."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

# Pass/fail thresholds used by every acceptance check.
SE_MULTIPLIER = 3.0
KS_ALPHA = 0.001
KS_COEFFICIENT = 1.95  # c(alpha) in the large-N critical value c / sqrt(N) at alpha = 0.001
BOOTSTRAP_RESAMPLES = 1000
BOOTSTRAP_SEED = 20240917


def mean_se(samples) -> tuple[float, float]:
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("mean_se needs at least 2 samples")
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def within_se(estimate: float, target: float, se: float, k: float = SE_MULTIPLIER) -> bool:
    return abs(estimate - target) <= k * se


@dataclass(frozen=True)
class RateFit:
    rate: float
    intercept: float
    se_rate: float
    residual: float  # rms of the log-space residuals


def _ols(t: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    tm = t.mean()
    slope = np.sum((t - tm) * (y - y.mean())) / np.sum((t - tm) ** 2)
    return float(slope), float(y.mean() - slope * tm)


def fit_exponential_rate(
    times,
    values,
    replicates: Optional[np.ndarray] = None,
    replicate_weights: Optional[np.ndarray] = None,
    n_boot: int = BOOTSTRAP_RESAMPLES,
    seed: int = BOOTSTRAP_SEED,
) -> RateFit:
    """Least squares on (t, ln value); returned rate r means value ~ exp(-r t).

    ``replicates`` (shape R x T) are independent per-replicate estimates whose
    (weighted) mean is ``values``; when given, se_rate is a bootstrap over
    replicates, otherwise the OLS standard error.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.size < 4 or t.shape != v.shape:
        raise ValueError("need at least 4 (time, value) pairs of equal length")
    if np.any(v <= 0):
        raise ValueError("values must be positive to fit an exponential rate")
    y = np.log(v)
    slope, intercept = _ols(t, y)
    resid = y - (intercept + slope * t)
    rms = float(np.sqrt(np.mean(resid**2)))
    if replicates is None:
        dof = t.size - 2
        s2 = np.sum(resid**2) / dof
        se = math.sqrt(s2 / np.sum((t - t.mean()) ** 2))
    else:
        reps = np.asarray(replicates, dtype=float)
        w = np.ones(reps.shape[0]) if replicate_weights is None else np.asarray(replicate_weights, float)
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, reps.shape[0], size=(n_boot, reps.shape[0]))
        slopes = []
        for row in idx:
            ww = w[row]
            m = ww @ reps[row] / ww.sum()
            if np.any(m <= 0):
                continue
            slopes.append(_ols(t, np.log(m))[0])
        se = float(np.std(slopes, ddof=1))
    return RateFit(-slope, intercept, float(se), rms)


def ks_statistic(samples, cdf: Callable) -> float:
    """Two-sided sup distance between the empirical CDF of ``samples`` and ``cdf``."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n < 10:
        raise ValueError("ks_statistic needs at least 10 samples")
    F = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


def ks_threshold(n: int) -> float:
    return KS_COEFFICIENT / math.sqrt(n)


@dataclass
class Row:
    time: float
    observable: str
    estimate: float
    se: float
    exact_value: Optional[float] = None
    exact_source: str = ""


@dataclass
class Verdict:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ExperimentReport:
    module: str
    metadata: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    rates: dict = field(default_factory=dict)
    verdicts: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def add_row(self, time, observable, estimate, se, exact_value=None, exact_source=""):
        if se < 0 or not math.isfinite(se):
            raise ValueError(f"invalid standard error {se} for {observable}")
        self.rows.append(Row(float(time), observable, float(estimate), float(se),
                             None if exact_value is None else float(exact_value), exact_source))

    def add_verdict(self, name: str, passed: bool, detail: str = "") -> Verdict:
        v = Verdict(name, bool(passed), detail)
        self.verdicts.append(v)
        return v

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def series(self, observable: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rows = [r for r in self.rows if r.observable == observable]
        return (np.array([r.time for r in rows]), np.array([r.estimate for r in rows]),
                np.array([r.se for r in rows]))

    def to_dict(self) -> dict:
        return {
            "module": self.module,
            "metadata": self.metadata,
            "rates": self.rates,
            "counters": self.counters,
            "diagnostics": self.diagnostics,
            "verdicts": [asdict(v) for v in self.verdicts],
            "rows": [asdict(r) for r in self.rows],
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "observable", "estimate", "se", "exact_value", "exact_source"])
            for r in self.rows:
                w.writerow([_g17(r.time), r.observable, _g17(r.estimate), _g17(r.se),
                            "" if r.exact_value is None else _g17(r.exact_value), r.exact_source])


def _g17(x: float) -> str:
    return format(float(x), ".17g")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj)}")
