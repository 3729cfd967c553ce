"""Deterministic algebra suite: covariance identities and kernel-ODE residuals.

Parameter draws come from an unscrambled Halton sequence, so the suite uses no
random numbers and always checks the same points.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.stats import qmc

from .covariance import (CovarianceSpec, diffusion_sqrt, gradient_covariance_tensor,
                         structure_tensor, strain_trace_matrix, tensor_as_matrix)
from .exact_laws import exponent_cases, inverse_moment, ode_residual, separation_law
from .stats import ExperimentReport

TOLERANCE = 1e-12
DIMENSIONS = (2, 3, 4)


def _halton(dim: int, n: int, offset: int = 0) -> np.ndarray:
    return qmc.Halton(d=dim, scramble=False).random(n + offset + 1)[offset + 1:]


def _rotation(u: np.ndarray, d: int) -> np.ndarray:
    """Proper rotation from d*d numbers in (0, 1) via QR with sign fixing."""
    A = np.tan(np.pi * (u.reshape(d, d) - 0.5))  # spread over the reals
    Q, R = np.linalg.qr(A)
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def _rel(a, b) -> float:
    scale = max(np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))) / scale)


def covariance_checks(d: int, D1: float = 1.3) -> dict:
    spec = CovarianceSpec(d, D1)
    out = {}
    pts = _halton(d * d + d, 100)
    worst_iso, worst_eig = 0.0, 0.0
    for row in pts:
        R = _rotation(row[: d * d], d)
        r = 4.0 * (row[d * d:] - 0.5) + 1e-3
        S = structure_tensor(spec, r)
        worst_iso = max(worst_iso, _rel(structure_tensor(spec, R @ r), R @ S @ R.T))
        w = np.linalg.eigvalsh(S)
        rho2 = float(r @ r)
        expect = np.sort([D1 * rho2] + [D1 * rho2 * (d + 1) / (d - 1)] * (d - 1))
        worst_eig = max(worst_eig, _rel(w, expect))
    out["structure_isotropy"] = worst_iso
    out["structure_eigenvalues"] = worst_eig

    T = gradient_covariance_tensor(spec)
    C = tensor_as_matrix(T)
    out["gradient_swap_symmetry"] = _rel(C, C.T)
    out["gradient_psd"] = max(0.0, -float(np.linalg.eigvalsh(C).min()))
    out["incompressibility_contraction"] = float(np.max(np.abs(np.einsum("kkml->ml", T))))
    contraction = np.einsum("ijil->jl", T)
    out["strain_trace_contraction"] = _rel(strain_trace_matrix(spec), contraction)
    out["strain_trace_closed_form"] = _rel(strain_trace_matrix(spec), 2 * D1 * (d + 2) * np.eye(d))

    worst = 0.0
    for row in _halton(d + 1, 1000, offset=7):
        sp = CovarianceSpec(d, 0.1 + 3.0 * row[0])
        r = 6.0 * (row[1:] - 0.5) + 1e-3
        Sig = diffusion_sqrt(sp, r)
        worst = max(worst, _rel(Sig @ Sig.T, 2 * structure_tensor(sp, r)))
    out["diffusion_sqrt_contract"] = worst
    return out


def ode_checks(n: int = 100) -> dict:
    out = {"conserved": 0.0, "power_pair": 0.0, "logarithmic": 0.0, "vieta": 0.0, "riesz_root": 0.0}
    pts = _halton(4, n, offset=11)
    for row in pts:
        d = DIMENSIONS[int(row[0] * len(DIMENSIONS))]
        zeta = 0.05 + 1.95 * row[1]
        z = 0.05 + 5.0 * row[2]
        if abs(z - 1) < 1e-3:
            z += 0.01
        sol = exponent_cases(d, zeta, 0.0)
        out["conserved"] = max(out["conserved"], ode_residual(d, zeta, 0.0, sol.alpha, 0, z))

        lam = (d / 2) ** 2 * (0.02 + 0.96 * row[3])
        sol = exponent_cases(d, 2.0, lam)
        for a in (sol.alpha, sol.second_alpha):
            out["power_pair"] = max(out["power_pair"], ode_residual(d, 2.0, lam, a, 0, z))
        out["vieta"] = max(out["vieta"], abs(sol.alpha + sol.second_alpha + d) / d,
                           abs(sol.alpha * sol.second_alpha - lam) / lam)

        s = (d / 2) * (0.02 + 0.96 * row[3])
        lam_s = 2 * s * (d - 2 * s)
        if lam_s < (d / 2) ** 2 * (1 - 1e-9):
            sol = exponent_cases(d, 2.0, lam_s)
            roots = sorted([sol.alpha, sol.second_alpha])
            out["riesz_root"] = max(out["riesz_root"], abs(roots[0] - min(2 * s - d, -2 * s)),
                                    abs(roots[1] - max(2 * s - d, -2 * s)))

        lam_c = (d / 2) ** 2
        sol = exponent_cases(d, 2.0, lam_c)
        out["logarithmic"] = max(out["logarithmic"], ode_residual(d, 2.0, lam_c, sol.alpha, sol.beta, z))
    return out


def moment_chain_checks(n: int = 100) -> float:
    worst = 0.0
    for row in _halton(5, n, offset=3):
        d = DIMENSIONS[int(row[0] * len(DIMENSIONS))]
        s = (d / 2) * 0.999 * row[1]
        D1 = 0.1 + 2 * row[2]
        rho0 = 0.2 + 3 * row[3]
        t = 3 * row[4]
        law = separation_law(d, D1, rho0, t)
        worst = max(worst, _rel(inverse_moment(d, s, D1, rho0, t), law.moment(2 * s - d)))
    return worst


def run_verify() -> ExperimentReport:
    """Every identity is reported as a row (max error) and a verdict at 1e-12."""
    report = ExperimentReport("verify")
    report.metadata.update(dict(tolerance=TOLERANCE, dimensions=list(DIMENSIONS), draws=100))
    results = {}
    for d in DIMENSIONS:
        for name, err in covariance_checks(d).items():
            results[f"{name}_d={d}"] = err
    for name, err in ode_checks().items():
        results[f"ode_{name}"] = err
    results["inverse_moment_chain"] = moment_chain_checks()
    for name, err in results.items():
        report.add_row(0.0, name, err, 0.0, 0.0, "exact_laws/covariance closed form")
        report.add_verdict(name, err <= TOLERANCE, f"max error {err:.2e} (limit {TOLERANCE:.0e})")
    return report
