"""Tensor algebra of the self-similar isotropic velocity covariance.

The structure function of the velocity field is

    D(0) - D(r) = D1 [I + zeta/(d-1) (I - rhat rhat)] |r|^zeta,

with D(0) = D0 I.  Everything here is a closed form; the dynamics modules
only ever see the Batchelor case zeta = 2.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gamma


@dataclass(frozen=True)
class CovarianceSpec:
    d: int
    D1: float
    D0: float = 1.0
    zeta: float = 2.0

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 2:
            raise ValueError(f"d must be an integer >= 2, got {self.d}")
        if not self.D1 > 0:
            raise ValueError(f"D1 must be positive, got {self.D1}")
        if not self.D0 > 0:
            raise ValueError(f"D0 must be positive, got {self.D0}")
        if not 0 < self.zeta <= 2:
            raise ValueError(f"zeta must lie in (0, 2], got {self.zeta}")

    def require_batchelor(self) -> None:
        if self.zeta != 2:
            raise ValueError(
                "velocity gradients exist at coincident points only for zeta = 2 "
                f"(got zeta={self.zeta})"
            )


def structure_tensor(spec: CovarianceSpec, r) -> np.ndarray:
    """Return D(0) - D(r); ``r`` may carry leading batch dimensions."""
    r = np.asarray(r, dtype=float)
    d = spec.d
    if r.shape[-1] != d:
        raise ValueError(f"r must have trailing dimension {d}")
    rho = np.linalg.norm(r, axis=-1)
    safe = np.where(rho > 0, rho, 1.0)
    rhat = r / safe[..., None]
    outer = rhat[..., :, None] * rhat[..., None, :]
    eye = np.eye(d)
    shape = eye + spec.zeta / (d - 1) * (eye - outer)
    out = spec.D1 * shape * (rho ** spec.zeta)[..., None, None]
    # r = 0 is exactly zero
    return np.where((rho > 0)[..., None, None], out, 0.0)


def gradient_covariance_tensor(spec: CovarianceSpec) -> np.ndarray:
    """E[d_j sigma_k d_l sigma_m] at coincident points, as an array T[k, j, m, l]."""
    spec.require_batchelor()
    d = spec.d
    I = np.eye(d)
    km_jl = np.einsum("km,jl->kjml", I, I)
    kj_ml = np.einsum("kj,ml->kjml", I, I)
    mj_kl = np.einsum("mj,kl->kjml", I, I)
    return 2.0 * spec.D1 * ((d + 1) / (d - 1) * km_jl - (kj_ml + mj_kl) / (d - 1))


def tensor_as_matrix(T: np.ndarray) -> np.ndarray:
    """Flatten T[k, j, m, l] to the d^2 x d^2 matrix with rows (k, j), columns (m, l)."""
    d = T.shape[0]
    return T.reshape(d * d, d * d)


def strain_trace_matrix(spec: CovarianceSpec) -> np.ndarray:
    """C_jk = sum_i d_{x_j} d_{x'_k} D^{ii}(x - x') at x = x', i.e. 2 D1 (d + 2) I."""
    spec.require_batchelor()
    return 2.0 * spec.D1 * (spec.d + 2) * np.eye(spec.d)


def diffusion_sqrt(spec: CovarianceSpec, r) -> np.ndarray:
    """Closed-form square root Sigma(r) with Sigma Sigma^T = 2 (D(0) - D(r)).

    Sigma(r) = sqrt(2 D1) |r| [rhat rhat + sqrt((d+1)/(d-1)) (I - rhat rhat)].
    Vectorised over leading dimensions of ``r``.
    """
    spec.require_batchelor()
    r = np.asarray(r, dtype=float)
    d = spec.d
    rho = np.linalg.norm(r, axis=-1)
    if np.any(rho == 0):
        raise ValueError("diffusion_sqrt is singular at r = 0 (absorbing point)")
    rhat = r / rho[..., None]
    outer = rhat[..., :, None] * rhat[..., None, :]
    c = np.sqrt((d + 1) / (d - 1))
    eye = np.eye(d)
    return np.sqrt(2.0 * spec.D1) * rho[..., None, None] * (outer + c * (eye - outer))


def apply_diffusion_sqrt(spec: CovarianceSpec, r: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Sigma(r) @ xi for batches of row vectors without forming the matrices."""
    d = spec.d
    rho = np.linalg.norm(r, axis=-1, keepdims=True)
    rhat = r / rho
    par = np.sum(rhat * xi, axis=-1, keepdims=True)
    c = np.sqrt((d + 1) / (d - 1))
    return np.sqrt(2.0 * spec.D1) * rho * (par * rhat + c * (xi - par * rhat))


def example_spectral_constants(d: int, m: float, Dbar0: float) -> tuple[float, float]:
    """(D0, D1) of the infrared-regularised power-law spectrum with cutoff ``m``."""
    if d < 2:
        raise ValueError("d must be >= 2")
    base = (d - 1) / ((4 * np.pi) ** (d / 2) * gamma((d + 2) / 2))
    D0 = Dbar0 / m**2 * base / d
    D1 = Dbar0 * base / (d + 2)
    return float(D0), float(D1)
