"""Logarithmic barrier functions with gradient re-centering, quadratic
relaxation and the quadratic upper-bound matrix.

The relaxed branch replaces -ln(sigma) for sigma < kappa by the quadratic
extension -ln(kappa) + ((sigma - 2*kappa)/kappa)**2 / 2 - 1/2, which matches
value and slope at sigma = kappa and has constant curvature 1/kappa**2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BoundaryEvaluation, DimensionMismatch
from .geometry import Ellipsoid, Polytope


def _beta(sigma: float, kappa: float, relaxed: bool) -> float:
    """Branchwise -ln(sigma) with quadratic extension below kappa."""
    if relaxed and sigma < kappa:
        t = (sigma - 2.0 * kappa) / kappa
        return -math.log(kappa) + 0.5 * (t * t - 1.0)
    if sigma <= 0.0:
        return math.inf
    return -math.log(sigma)


def _beta_prime(sigma: float, kappa: float, relaxed: bool) -> float:
    if relaxed and sigma < kappa:
        return (sigma - 2.0 * kappa) / (kappa * kappa)
    if sigma <= 0.0:
        raise BoundaryEvaluation("barrier gradient on or outside the boundary")
    return -1.0 / sigma

def _beta_second(sigma: float, kappa: float, relaxed: bool) -> float:
    if relaxed and sigma < kappa:
        return 1.0 / (kappa * kappa)
    if sigma <= 0.0:
        raise BoundaryEvaluation("barrier curvature on or outside the boundary")
    return 1.0 / (sigma * sigma)


def _beta_vec(sig: np.ndarray, kappa: float, relaxed: bool) -> np.ndarray:
    if relaxed:
        t = (sig - 2.0 * kappa) / kappa
        quad = -math.log(kappa) + 0.5 * (t * t - 1.0)
        log = -np.log(np.maximum(sig, 1e-300))
        return np.where(sig < kappa, quad, log)
    out = -np.log(np.maximum(sig, 1e-300))
    return np.where(sig <= 0.0, np.inf, out)


def _beta_prime_vec(sig: np.ndarray, kappa: float, relaxed: bool) -> np.ndarray:
    if relaxed:
        return np.where(
            sig < kappa,
            (sig - 2.0 * kappa) / (kappa * kappa),
            -1.0 / np.maximum(sig, 1e-300),
        )
    if np.any(sig <= 0.0):
        raise BoundaryEvaluation("barrier gradient on or outside the boundary")
    return -1.0 / sig


def _beta_second_vec(sig: np.ndarray, kappa: float, relaxed: bool) -> np.ndarray:
    if relaxed:
        return np.where(
            sig < kappa,
            1.0 / (kappa * kappa),
            1.0 / np.maximum(sig, 1e-150) ** 2,
        )
    if np.any(sig <= 0.0):
        raise BoundaryEvaluation("barrier curvature on or outside the boundary")
    return 1.0 / sig**2


def quadratic_upper_bound(P: Polytope, kappa: float) -> np.ndarray:
    """Quadratic dominance matrix H = kappa**-2 * sum_i a_i a_i'."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    return (P.normals.T @ P.normals) / (kappa * kappa)


@dataclass
class RelaxedBarrier:
    """Logarithmic barrier for a polytope or origin-centered ellipsoid."""

    base_set: Polytope | Ellipsoid
    kappa: float = 0.1
    recentered: bool = True
    relaxed: bool = True
    H: np.ndarray | None = None

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if isinstance(self.base_set, Polytope):
            if self.relaxed and self.H is None:
                self.H = quadratic_upper_bound(self.base_set, self.kappa)
            # re-centering constants at the origin
            b = self.base_set.offsets
            if np.any(b <= 0) and not self.relaxed:
                raise ValueError("barrier set must contain the origin strictly")
            self._g0 = sum(
                -_beta_prime(bi, self.kappa, self.relaxed) * ai
                for ai, bi in zip(self.base_set.normals, b)
            )
            self._v0 = sum(_beta(bi, self.kappa, self.relaxed) for bi in b)
        else:
            # origin-centered ellipsoid: value and gradient already vanish at 0
            self._g0 = np.zeros(self.base_set.dim)
            self._v0 = _beta(1.0, self.kappa, self.relaxed)

    @property
    def dim(self) -> int:
        return self.base_set.dim

    def _sigmas(self, z: np.ndarray) -> np.ndarray:
        return self.base_set.offsets - self.base_set.normals @ z

    def value(self, z: np.ndarray) -> float:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dim,):
            raise DimensionMismatch(f"barrier input shape {z.shape}")
        if isinstance(self.base_set, Polytope):
            raw = float(np.sum(_beta_vec(self._sigmas(z), self.kappa, self.relaxed)))
        else:
            sigma = 1.0 - self.base_set.quad(z) / self.base_set.level
            raw = _beta(sigma, self.kappa, self.relaxed)
        if not self.recentered:
            return raw
        if math.isinf(raw):
            return math.inf
        return raw - self._v0 - float(self._g0 @ z)

    def value_batch(self, Z: np.ndarray) -> float:
        """Sum of barrier values over the rows of Z."""
        Z = np.asarray(Z, dtype=float)
        if Z.ndim != 2 or Z.shape[1] != self.dim:
            raise DimensionMismatch(f"barrier batch shape {Z.shape}")
        if isinstance(self.base_set, Polytope):
            sig = self.base_set.offsets[None, :] - Z @ self.base_set.normals.T
            raw = float(np.sum(_beta_vec(sig, self.kappa, self.relaxed)))
        else:
            q = np.einsum("ij,jk,ik->i", Z, self.base_set.shape, Z)
            sig = 1.0 - q / self.base_set.level
            raw = float(np.sum(_beta_vec(sig, self.kappa, self.relaxed)))
        if not self.recentered:
            return raw
        return raw - Z.shape[0] * self._v0 - float(np.sum(Z @ self._g0))

    def gradient(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dim,):
            raise DimensionMismatch(f"barrier input shape {z.shape}")
        if isinstance(self.base_set, Polytope):
            bp = _beta_prime_vec(self._sigmas(z), self.kappa, self.relaxed)
            g = -(self.base_set.normals.T @ bp)
        else:
            level = self.base_set.level
            sigma = 1.0 - self.base_set.quad(z) / level
            g = -_beta_prime(sigma, self.kappa, self.relaxed) * (
                2.0 / level
            ) * self.base_set.shape @ z
        if self.recentered:
            g = g - self._g0
        return g

    def hessian(self, z: np.ndarray) -> np.ndarray:
        """Analytic Hessian (re-centering does not change curvature)."""
        z = np.asarray(z, dtype=float)
        if isinstance(self.base_set, Polytope):
            bs = _beta_second_vec(self._sigmas(z), self.kappa, self.relaxed)
            A = self.base_set.normals
            return A.T @ (bs[:, None] * A)
        level = self.base_set.level
        Zn = self.base_set.shape / level
        sigma = 1.0 - self.base_set.quad(z) / level
        g_sigma = 2.0 * Zn @ z
        return -_beta_prime(sigma, self.kappa, self.relaxed) * 2.0 * Zn + _beta_second(
            sigma, self.kappa, self.relaxed
        ) * np.outer(g_sigma, g_sigma)
