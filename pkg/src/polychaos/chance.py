"""Chance-constraint machinery: risk allocation, moment surrogates, checks.

A joint chance constraint P(G x <= d) >= beta over a polytope is split by a
union bound into per-row budgets eps_i summing to 1 - beta, and each row is
enforced through the distributionally robust (two-moment) surrogate

    mean(g' x - d) + sqrt((1 - eps) / eps) * std(g' x) <= 0,

which is sound for every distribution with those two moments and tight for a
two-point one.  Sample-average and ellipsoidal checks are provided as
independent ways to audit the surrogates.
"""

from dataclasses import dataclass

import numpy as np

from polychaos import pce as pce_mod

_SYM_TOL = 1e-10
_EPS_SUM_TOL = 1e-12


@dataclass(eq=False)
class Polytope:
    """Feasible set {x : G x <= d} with no degenerate rows."""

    G: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        self.G = np.atleast_2d(np.asarray(self.G, dtype=float))
        self.d = np.atleast_1d(np.asarray(self.d, dtype=float))
        if self.G.shape[0] != self.d.shape[0]:
            raise ValueError(f"{self.G.shape[0]} rows but {self.d.shape[0]} bounds")
        if not (np.all(np.isfinite(self.G)) and np.all(np.isfinite(self.d))):
            raise ValueError("polytope data must be finite")
        norms = np.linalg.norm(self.G, axis=1)
        if np.any(norms == 0.0):
            raise ValueError("polytope has an all-zero row")

    @property
    def n_rows(self):
        return self.G.shape[0]

    @property
    def n_dims(self):
        return self.G.shape[1]

    def residuals(self, x):
        """Row residuals G x - d; nonpositive means inside."""
        return np.asarray(x, dtype=float) @ self.G.T - self.d

    def contains(self, x):
        return bool(np.all(self.residuals(x) <= 0.0))


@dataclass(eq=False)
class ChanceSpec:
    """Joint satisfaction target beta with per-row violation budgets eps."""

    beta: float
    eps: np.ndarray

    def __post_init__(self):
        self.eps = np.atleast_1d(np.asarray(self.eps, dtype=float))
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if np.any(self.eps <= 0.0) or np.any(self.eps >= 1.0):
            raise ValueError("every per-row budget must lie in (0, 1)")
        gap = abs(self.eps.sum() - (1.0 - self.beta))
        if gap > _EPS_SUM_TOL:
            raise ValueError(f"budgets sum to {self.eps.sum():.17g}, not "
                             f"{1.0 - self.beta:.17g} (off by {gap:.3g})")

    @property
    def n_rows(self):
        return self.eps.shape[0]


def boole_allocate(beta, n_rows):
    """Uniform union-bound budget split: eps_i = (1 - beta) / n_rows."""
    if n_rows < 1:
        raise ValueError("need at least one constraint row")
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    return ChanceSpec(float(beta), np.full(n_rows, (1.0 - beta) / n_rows))


def cantelli_residual(mean, std, eps):
    """Two-moment surrogate residual; <= 0 certifies P(violation) <= eps.

    Accepts scalars or broadcastable arrays.
    """
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if np.any(std < 0.0):
        raise ValueError("standard deviation must be nonnegative")
    if np.any(eps <= 0.0) or np.any(eps >= 1.0):
        raise ValueError("eps must lie strictly inside (0, 1)")
    out = mean + np.sqrt((1.0 - eps) / eps) * std
    return float(out) if out.ndim == 0 else out


def pce_halfspace_moments(p, polytope):
    """Per-row mean and standard deviation of the functionals g_i' x - d_i.

    ``p`` is the chaos expansion of the state (one row per coordinate); the
    moments are exact consequences of orthonormality.
    """
    if p.n_out != polytope.n_dims:
        raise ValueError(f"state has {p.n_out} coordinates but the polytope "
                         f"expects {polytope.n_dims}")
    rows = polytope.G @ p.coeffs  # (n_rows, basis size)
    means = rows[:, 0] - polytope.d
    stds = np.linalg.norm(rows[:, 1:], axis=1)
    return means, stds


def saa_joint_probability(samples, polytope):
    """Sample-average estimate of P(all rows satisfied)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[1] != polytope.n_dims:
        raise ValueError(f"samples have {samples.shape[1]} coordinates but the "
                         f"polytope expects {polytope.n_dims}")
    worst = polytope.residuals(samples).max(axis=1)
    return float(np.mean(worst <= 0.0))


def ellipsoid_inclusion(mean, cov, radius, polytope):
    """Whether the ellipsoid {mean + L z : ||z|| <= radius}, cov = L L', sits
    inside the polytope: g' mean + radius * sqrt(g' cov g) <= d for all rows."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    if cov.shape != (mean.size, mean.size):
        raise ValueError(f"covariance shape {cov.shape} does not match state size "
                         f"{mean.size}")
    if np.max(np.abs(cov - cov.T)) > _SYM_TOL:
        raise ValueError("covariance is not symmetric")
    eigs = np.linalg.eigvalsh(cov)
    if eigs[0] < -_SYM_TOL:
        raise ValueError(f"covariance is not positive semidefinite "
                         f"(min eigenvalue {eigs[0]:.3g})")
    quad = np.einsum("ri,ij,rj->r", polytope.G, cov, polytope.G)
    support = polytope.G @ mean + radius * np.sqrt(np.maximum(quad, 0.0))
    return bool(np.all(support <= polytope.d))
