"""Closed-form decay laws and the analytic oracles used by the Monte Carlo modules."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import gamma
from scipy.stats import norm


def _check_s(d: int, s: float) -> None:
    if not 0 < s < d / 2:
        raise ValueError(f"s must lie in (0, d/2) = (0, {d / 2}), got {s}")


def lambda_ds(d: int, s: float, D1: float) -> float:
    """Mixing rate 2 D1 s (d - 2 s) of the H^{-s} norm."""
    _check_s(d, s)
    if not D1 > 0:
        raise ValueError("D1 must be positive")
    return 2.0 * D1 * s * (d - 2.0 * s)


def riesz_constant(d: int, s: float) -> float:
    """c_{d,s} = pi^{d/2} 2^{2s} Gamma(s) / Gamma((d - 2s)/2)."""
    _check_s(d, s)
    return math.pi ** (d / 2) * 2.0 ** (2 * s) * gamma(s) / gamma((d - 2 * s) / 2)


def riesz_potential(d: int, s: float, rho):
    """I_s(rho) = rho^{2s-d} / c_{d,s}; accepts scalars or arrays."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0):
        raise ValueError("rho must be positive")
    out = rho ** (2 * s - d) / riesz_constant(d, s)
    return float(out) if out.ndim == 0 else out


def ode_terms(d, zeta, lambda_over_D1, alpha, beta, z):
    """The three terms of z^2 G'' + (d - 1 + zeta) z G' + (lambda/D1) z^{2-zeta} G
    for G = z^alpha ln^beta z, from exact derivatives."""
    za = z**alpha
    if beta == 0:
        t2nd = alpha * (alpha - 1) * za
        t1st = (d - 1 + zeta) * alpha * za
        t0 = lambda_over_D1 * z ** (2 - zeta) * za
    elif beta == 1:
        L = math.log(z)
        t2nd = za * (alpha * (alpha - 1) * L + 2 * alpha - 1)
        t1st = (d - 1 + zeta) * za * (alpha * L + 1)
        t0 = lambda_over_D1 * z ** (2 - zeta) * za * L
    else:
        raise ValueError("beta must be 0 or 1")
    return t2nd, t1st, t0


def ode_residual(d, zeta, lambda_over_D1, alpha, beta, z) -> float:
    """Relative residual of the radial kernel ODE on z^alpha ln^beta z."""
    if not z > 0:
        raise ValueError("z must be positive")
    if beta == 1 and z == 1:
        raise ValueError("z = 1 is a zero of ln z; the relative residual is undefined")
    terms = ode_terms(d, zeta, lambda_over_D1, alpha, beta, z)
    scale = max(abs(t) for t in terms)
    if scale == 0:
        return 0.0
    return abs(sum(terms)) / scale


@dataclass(frozen=True)
class ExponentSolution:
    alpha: float
    beta: int
    case_label: str  # "conserved" | "power_pair" | "logarithmic"
    second_alpha: Optional[float] = None


def exponent_cases(d: int, zeta: float, lambda_over_D1: float, rtol: float = 1e-12) -> ExponentSolution:
    """Power-law / logarithmic radial solutions G = z^alpha ln^beta z."""
    if d < 2 or not 0 < zeta <= 2:
        raise ValueError("invalid (d, zeta)")
    lam = float(lambda_over_D1)
    if lam == 0:
        return ExponentSolution(2.0 - d - zeta, 0, "conserved", 0.0)
    if zeta != 2:
        raise ValueError("no power-law solution for lambda != 0 unless zeta = 2")
    half = d / 2
    disc = half**2 - lam
    if abs(disc) <= rtol * half**2:
        return ExponentSolution(-half, 1, "logarithmic")
    if disc < 0:
        raise ValueError(
            f"lambda/D1 = {lam} exceeds (d/2)^2 = {half**2}: complex exponents are not supported"
        )
    root = math.sqrt(disc)
    return ExponentSolution(-half + root, 0, "power_pair", -half - root)


@dataclass(frozen=True)
class LognormalLaw:
    """Law of the separation length: log rho ~ Normal(mu, sigma2)."""

    mu: float
    sigma2: float

    def moment(self, p: float) -> float:
        return math.exp(p * self.mu + 0.5 * p * p * self.sigma2)

    def log_cdf(self, x):
        """CDF of log rho evaluated at ``x`` (a log-length)."""
        if self.sigma2 == 0:
            return (np.asarray(x) >= self.mu).astype(float)
        return norm.cdf(x, loc=self.mu, scale=math.sqrt(self.sigma2))


def separation_law(d: int, D1: float, rho0: float, t: float) -> LognormalLaw:
    """log|R_t| is Brownian with drift d D1 and variance rate 2 D1 (zeta = 2)."""
    if rho0 <= 0 or t < 0:
        raise ValueError("need rho0 > 0 and t >= 0")
    return LognormalLaw(math.log(rho0) + d * D1 * t, 2.0 * D1 * t)


def inverse_moment(d: int, s: float, D1: float, rho0: float, t: float) -> float:
    """E|R_t|^{2s-d} = exp(-2 D1 s (d-2s) t) rho0^{2s-d}; s = 0 is conserved."""
    if not 0 <= s < d / 2:
        raise ValueError(f"s must lie in [0, d/2), got {s}")
    rate = 2.0 * D1 * s * (d - 2.0 * s)
    return math.exp(-rate * t) * rho0 ** (2 * s - d)
