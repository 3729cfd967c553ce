"""Two-particle separation process and its inverse-dispersion statistics.

The separation R_t of two Lagrangian particles is a driftless Ito diffusion
dR = Sigma(R) dB with Sigma Sigma^T = 2 (D(0) - D(R)).  For zeta = 2, log|R_t|
is exactly Brownian motion with drift d D1 and variance rate 2 D1, which is
the oracle every estimate here is compared with.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .covariance import CovarianceSpec, apply_diffusion_sqrt
from .exact_laws import LognormalLaw, inverse_moment, lambda_ds, separation_law
from .stats import (ExperimentReport, SE_MULTIPLIER, fit_exponential_rate, ks_statistic,
                    ks_threshold, within_se)

UNDERFLOW = 1e-300
MAX_EXCLUDED_FRACTION = 0.01


def default_dt(spec: CovarianceSpec, target: float = 0.05) -> float:
    """Largest dt whose per-step relative displacement std is ``target``."""
    d = spec.d
    return target**2 * (d - 1) / (2.0 * spec.D1 * (d + 1))


def output_steps(n_steps: int, n_times: int = 32, extra_steps=()) -> np.ndarray:
    """Step indices of a geometric grid of ``n_times`` times in (0, T], plus 0."""
    grid = np.geomspace(max(n_steps / 100.0, 1.0), n_steps, n_times)
    steps = np.unique(np.concatenate([[0], np.rint(grid).astype(int), list(extra_steps)]))
    return steps[(steps >= 0) & (steps <= n_steps)]


@dataclass
class SeparationEnsemble:
    d: int
    separations: np.ndarray  # (N, d)
    dt: float
    initial_separation: np.ndarray
    rng: np.random.Generator
    step_index: int = 0
    excluded: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.excluded is None:
            self.excluded = np.zeros(self.separations.shape[0], dtype=bool)
        if np.any(np.linalg.norm(self.separations, axis=1) == 0):
            raise ValueError("separations must be non-zero")

    @property
    def t(self) -> float:
        return self.step_index * self.dt

    @classmethod
    def start(cls, r0, n: int, dt: float, generator: np.random.Generator) -> "SeparationEnsemble":
        r0 = np.asarray(r0, dtype=float)
        return cls(r0.size, np.tile(r0, (n, 1)), dt, r0.copy(), generator)


def step_separation(ens: SeparationEnsemble, spec: CovarianceSpec, xi=None) -> SeparationEnsemble:
    """One Euler-Maruyama step R <- R + Sigma(R) sqrt(dt) xi, in place.

    ``xi`` defaults to a fresh standard normal draw from the ensemble stream;
    noise is drawn for every trajectory, excluded or not, so the stream stays
    aligned.  Trajectories that under- or overflow are frozen and flagged.
    """
    R = ens.separations
    if xi is None:
        xi = ens.rng.standard_normal(R.shape)
    with np.errstate(over="ignore", invalid="ignore"):
        new = R + apply_diffusion_sqrt(spec, R, math.sqrt(ens.dt) * xi)
        rho = np.linalg.norm(new, axis=1)
    rho0 = np.linalg.norm(ens.initial_separation)
    bad = ~np.isfinite(rho) | (rho < UNDERFLOW * rho0)
    bad |= ens.excluded
    ens.excluded = bad
    ens.separations = np.where(bad[:, None], R, new)
    ens.step_index += 1
    return ens


def simulate_block(spec, r0, n, dt, steps, generator, extrapolate=False):
    """Run one trajectory block.

    Returns (|R| at each requested step, |R| on the dt/2 path or None, excluded).
    With ``extrapolate`` a second ensemble runs at dt/2 on the same Brownian
    path: each coarse increment is the normalised sum of two fine ones.
    """
    coarse = SeparationEnsemble.start(r0, n, dt, generator)
    fine = SeparationEnsemble.start(r0, n, dt / 2, generator) if extrapolate else None
    steps = list(steps)
    out = np.empty((len(steps), n))
    out_f = np.empty((len(steps), n)) if extrapolate else None
    k = 0
    for j in range(steps[-1] + 1):
        while k < len(steps) and steps[k] == j:
            out[k] = np.linalg.norm(coarse.separations, axis=1)
            if extrapolate:
                out_f[k] = np.linalg.norm(fine.separations, axis=1)
            k += 1
        if j == steps[-1]:
            break
        if extrapolate:
            xi = generator.standard_normal((2, n, coarse.d))
            step_separation(fine, spec, xi[0])
            step_separation(fine, spec, xi[1])
            step_separation(coarse, spec, (xi[0] + xi[1]) / math.sqrt(2.0))
        else:
            step_separation(coarse, spec)
    excluded = coarse.excluded | (fine.excluded if extrapolate else False)
    return out, out_f, excluded


def simulate_separations(spec, r0, N, dt, steps, seed, workers=1, extrapolate=False):
    """|R_t| for N trajectories at the given step indices, shape (len(steps), N).

    Returns (coarse, fine_or_None, excluded).
    """
    spec.require_batchelor()
    parts = rngmod.blocks(N)

    def work(bi):
        a, b = parts[bi]
        return simulate_block(spec, r0, b - a, dt, steps,
                              rngmod.stream(seed, rngmod.DISPERSION, bi), extrapolate)

    results = rngmod.ordered_map(work, range(len(parts)), workers)
    rho = np.concatenate([r[0] for r in results], axis=1)
    rho_f = np.concatenate([r[1] for r in results], axis=1) if extrapolate else None
    excluded = np.concatenate([r[2] for r in results])
    return rho, rho_f, excluded


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    if np.all(x == x[0]):
        return float(x[0]), 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def radial_exact_sampler(spec: CovarianceSpec, rho0: float, t: float, N: int, seed: int) -> np.ndarray:
    """N i.i.d. draws of |R_t| straight from the lognormal law."""
    if t == 0:
        return np.full(N, float(rho0))
    law = separation_law(spec.d, spec.D1, rho0, t)
    z = rngmod.stream(seed, rngmod.EXACT_SAMPLER).standard_normal(N)
    return np.exp(law.mu + math.sqrt(law.sigma2) * z)


@dataclass(frozen=True)
class KSResult:
    statistic: float
    threshold: float
    passed: bool


def distribution_test(samples, law: LognormalLaw) -> KSResult:
    """KS test of log(samples) against Normal(mu, sigma2) at the 0.001 level."""
    x = np.asarray(samples, dtype=float)
    if x.size < 1000:
        raise ValueError("distribution_test needs at least 1000 samples")
    logs = np.log(x)
    thr = ks_threshold(x.size)
    if law.sigma2 == 0:
        stat = 0.0 if np.allclose(logs, law.mu, rtol=0, atol=1e-12 * max(1.0, abs(law.mu))) else 1.0
        return KSResult(stat, thr, stat == 0.0)
    stat = ks_statistic(logs, law.log_cdf)
    return KSResult(stat, thr, stat < thr)


def run_dispersion(spec: CovarianceSpec, r0, N: int, T: float, dt: float, seed: int,
                   s_values, workers: int = 1, n_times: int = 32, ks_times=(),
                   ks_samples: int = 10_000, extrapolate: bool = True) -> ExperimentReport:
    """Inverse-dispersion moments E|R_t|^{2s-d} against their exact decay laws.

    With ``extrapolate`` every mean is the Richardson combination
    2 E_{dt/2}[f] - E_{dt}[f] of two Euler-Maruyama runs sharing one Brownian
    path, which removes the O(dt) weak error of the scheme.  KS tests always
    use the raw samples at step ``dt``.
    """
    spec.require_batchelor()
    d = spec.d
    r0 = np.asarray(r0, dtype=float)
    rho0 = float(np.linalg.norm(r0))
    if r0.shape != (d,) or rho0 == 0:
        raise ValueError("r0 must be a non-zero vector of length d")
    if N < 100:
        raise ValueError("N must be at least 100")
    for s in s_values:
        if not 0 <= s < d / 2:
            raise ValueError(f"s must lie in [0, d/2), got {s}")
    n_steps = int(round(T / dt))
    if n_steps < 1 or abs(n_steps * dt - T) > 1e-9 * T:
        raise ValueError("T must be a positive integer multiple of dt")
    ks_steps = [int(round(t / dt)) for t in ks_times]
    steps = output_steps(n_steps, n_times, ks_steps)
    times = steps * dt

    rho, rho_f, excluded = simulate_separations(spec, r0, N, dt, steps, seed, workers, extrapolate)
    keep = ~excluded
    frac = float(excluded.mean())

    def observe(f):
        """Per-trajectory samples of f(|R_t|), extrapolated when requested."""
        if extrapolate:
            return 2.0 * f(rho_f[:, keep]) - f(rho[:, keep])
        return f(rho[:, keep])

    report = ExperimentReport("dispersion_mc")
    report.metadata.update(dict(d=d, D1=spec.D1, D0=spec.D0, zeta=spec.zeta, r0=r0.tolist(),
                                N=N, T=T, dt=dt, seed=seed, s_values=list(s_values),
                                estimator="richardson(dt, dt/2)" if extrapolate else "euler"))
    report.counters.update(excluded=int(excluded.sum()), total=N)
    report.add_verdict("excluded_fraction", frac <= MAX_EXCLUDED_FRACTION,
                       f"{frac:.2e} of trajectories excluded (limit {MAX_EXCLUDED_FRACTION})")
    sizes = np.array([b - a for a, b in rngmod.blocks(N)])
    block_id = np.repeat(np.arange(sizes.size), sizes)[keep]
    block_w = np.bincount(block_id, minlength=sizes.size).astype(float)

    logs = observe(np.log)
    logs_sq = None
    for ti, t in enumerate(times):
        law = separation_law(d, spec.D1, rho0, t)
        m, se = _mean_se(logs[ti])
        report.add_row(t, "mean_log_rho", m, se, law.mu, "exact_laws.separation_law")
    # variance of log|R_t| about the exact-law centre keeps the estimator linear
    centred = observe(lambda r: (np.log(r) - np.log(rho0)
                                 - d * spec.D1 * times[:, None]) ** 2)
    for ti, t in enumerate(times):
        law = separation_law(d, spec.D1, rho0, t)
        bias = logs[ti].mean() - law.mu
        v, vse = _mean_se(centred[ti])
        report.add_row(t, "var_log_rho", v - bias**2, vse, law.sigma2, "exact_laws.separation_law")

    drift, drift_se = _mean_se((logs[-1] - math.log(rho0)) / times[-1])
    report.rates["log_drift"] = dict(estimate=drift, se=drift_se, exact=d * spec.D1,
                                     exact_source="exact_laws.separation_law")
    report.add_verdict("log_drift", within_se(drift, d * spec.D1, drift_se),
                       f"{drift:.4f} +/- {drift_se:.4f}, exact {d * spec.D1:.4f}")

    quantiles = {}
    for s in s_values:
        p = 2 * s - d
        name = f"inverse_moment_s={s:g}"
        vals = observe(lambda r: r**p)
        ok = True
        worst = 0.0
        est = np.empty(times.size)
        for ti, t in enumerate(times):
            m, se = _mean_se(vals[ti])
            est[ti] = m
            exact = inverse_moment(d, s, spec.D1, rho0, t)
            report.add_row(t, name, m, se, exact, "exact_laws.inverse_moment")
            if se > 0:
                worst = max(worst, abs(m - exact) / se)
            ok &= within_se(m, exact, se)
        raw_T = rho[-1, keep] ** p
        quantiles[name] = dict(q0001=float(np.quantile(raw_T, 0.001)),
                               q0999=float(np.quantile(raw_T, 0.999)))
        report.add_verdict(name, ok, f"max |estimate - exact| / SE = {worst:.2f} over {times.size} times")
        if s > 0:
            lam = lambda_ds(d, s, spec.D1)
            win = times <= 2.0 / lam + 1e-12
            if win.sum() >= 4 and np.all(est[win] > 0):
                block_means = np.stack([np.bincount(block_id, weights=vals[ti], minlength=sizes.size)
                                        for ti in np.flatnonzero(win)], axis=1)
                nz = block_w > 0
                reps = block_means[nz] / block_w[nz, None]
                fit = fit_exponential_rate(times[win], est[win], replicates=reps,
                                           replicate_weights=block_w[nz])
                report.rates[f"decay_rate_s={s:g}"] = dict(estimate=fit.rate, se=fit.se_rate,
                                                           exact=lam, exact_source="exact_laws.lambda_ds")
                report.add_verdict(f"decay_rate_s={s:g}", within_se(fit.rate, lam, fit.se_rate),
                                   f"fitted {fit.rate:.4f} +/- {fit.se_rate:.4f}, exact {lam:.4f}")
    report.diagnostics["tail_quantiles_at_T"] = quantiles

    for t, js in zip(ks_times, ks_steps):
        ti = int(np.flatnonzero(steps == js)[0])
        sample = rho[ti, :ks_samples][keep[:ks_samples]]
        law = separation_law(d, spec.D1, rho0, times[ti])
        res = distribution_test(sample, law)
        report.add_row(times[ti], "ks_log_rho", res.statistic, 0.0, res.threshold, "stats.ks_threshold")
        report.add_verdict(f"lognormal_ks_t={t:g}", res.passed,
                           f"KS {res.statistic:.4f} vs threshold {res.threshold:.4f} (n={sample.size})")
    return report
