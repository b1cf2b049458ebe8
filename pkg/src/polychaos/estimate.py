"""Bayesian moment matching for scalar parameter expansions.

A measurement updates the chaos expansion of a parameter in two moves:
importance-weight a germ sample of the prior by the observation likelihood
to get posterior raw moments, then refit the expansion coefficients so the
new expansion reproduces those moments.  The germ (and with it the basis)
never changes; only the coefficients move, which keeps every downstream
Galerkin object reusable.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from polychaos import multibasis, pce, propagate

_LOG_FLOOR = math.log(1e-300)

_GN_MAX_ITER = 200
_GN_STEP_TOL = 1e-10
_GN_RESIDUAL_TOL = 1e-8


class LikelihoodCollapseError(RuntimeError):
    """Every prior sample is assigned (numerically) zero likelihood."""


@dataclass(eq=False)
class LikelihoodModel:
    """Scalar observation model y = forward(theta) + Gaussian noise."""

    forward: callable
    noise_std: float

    def __post_init__(self):
        if not callable(self.forward):
            raise ValueError("forward model must be callable")
        if not self.noise_std > 0:
            raise ValueError(f"noise_std must be positive, got {self.noise_std}")


@dataclass(eq=False)
class MomentTargets:
    """Posterior raw moments E[theta^m | y] for m = 1..order."""

    moments: np.ndarray
    ess: float
    n_samples: int

    def __post_init__(self):
        self.moments = np.atleast_1d(np.asarray(self.moments, dtype=float))
        if self.moments.size < 1:
            raise ValueError("need at least the first moment")
        if self.moments.size >= 2:
            spread = self.moments[1] - self.moments[0] ** 2
            if spread < -1e-10 * max(1.0, abs(self.moments[1])):
                raise ValueError(f"targets imply negative variance {spread:.3g}")

    @property
    def order(self):
        return self.moments.size

    @property
    def mean(self):
        return float(self.moments[0])

    @property
    def variance(self):
        if self.order < 2:
            raise ValueError("variance needs moments up to order 2")
        return max(float(self.moments[1] - self.moments[0] ** 2), 0.0)


def posterior_moments(prior, y, likelihood, order=2, n_samples=10000, seed=0):
    """Importance-sampled posterior raw moments of a scalar parameter.

    Samples the germ with the same chunked substream scheme as the Monte
    Carlo propagator, so results are reproducible from the seed alone.
    Raises :class:`LikelihoodCollapseError` when the observation is so far
    from every sample that all weights underflow.
    """
    if prior.n_out != 1:
        raise ValueError("posterior moments are defined for a scalar parameter")
    if order < 1:
        raise ValueError("moment order must be at least 1")
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    pts = propagate.sample_germ(prior.basis, seed, n_samples)
    thetas = pce.sample_eval(prior, pts)[:, 0]
    predicted = _forward_on(likelihood.forward, thetas)
    sigma = likelihood.noise_std
    log_w = -0.5 * ((y - predicted) / sigma) ** 2 \
        - math.log(sigma * math.sqrt(2.0 * math.pi))
    top = np.max(log_w)
    if top < _LOG_FLOOR:
        raise LikelihoodCollapseError(
            f"all {n_samples} samples have log-likelihood below {_LOG_FLOOR:.1f}; "
            "the observation is inconsistent with the prior")
    w = np.exp(log_w - top)
    w /= w.sum()
    moments = np.array([float(w @ thetas ** m) for m in range(1, order + 1)])
    ess = float(1.0 / np.sum(w ** 2))
    return MomentTargets(moments, ess, int(n_samples))


def refit_pce(basis, targets, init):
    """Gauss-Newton refit of coefficients to the target raw moments.

    ``init`` supplies the starting coefficients (typically the prior).  The
    first two moment residuals use the closed forms mu_1 = c_0 and
    mu_2 = sum c_l^2 with analytic Jacobians; higher orders fall back to
    quadrature values with finite-difference sensitivities.  If the germ
    measure is symmetric the sign of the leading coefficient is normalized
    to be nonnegative (flipping odd-degree coefficients leaves the
    distribution unchanged).
    """
    if basis.n_dims != 1:
        raise ValueError("moment refits are defined on a 1-D germ")
    if init.n_out != 1 or not init.basis.same_basis(basis):
        raise ValueError("init must be a scalar expansion on the target basis")
    n_free = basis.size
    order = targets.order
    if n_free > order + 1:
        raise ValueError(f"{n_free} coefficients cannot be pinned down by "
                         f"{order} moments; lower the basis degree")
    rule = None
    if order >= 3:
        rule = multibasis.tensor_rule(basis, (order * basis.degree) // 2 + 1)

    c = init.coeffs[0].copy()
    best_c, best_norm = c.copy(), math.inf
    for _ in range(_GN_MAX_ITER):
        r = _moment_residuals(c, basis, targets, rule)
        norm = float(np.max(np.abs(r)))
        if norm < best_norm:
            best_norm, best_c = norm, c.copy()
        if norm <= 1e-12:
            break
        jac = _moment_jacobian(c, basis, order, rule)
        delta = np.linalg.lstsq(jac, -r, rcond=None)[0]
        c = c + delta
        if np.max(np.abs(delta)) <= _GN_STEP_TOL:
            r = _moment_residuals(c, basis, targets, rule)
            norm = float(np.max(np.abs(r)))
            if norm < best_norm:
                best_norm, best_c = norm, c.copy()
            break
    converged = best_norm <= _GN_RESIDUAL_TOL
    if not converged:
        warnings.warn(f"moment refit stalled with residual {best_norm:.3g}",
                      RuntimeWarning, stacklevel=2)
    c = best_c
    if basis.size > 1 and c[1] < 0.0 and _symmetric_measure(basis.families[0].measure):
        odd = np.array([sum(ix) % 2 == 1 for ix in basis.indices])
        c = np.where(odd, -c, c)
    out = pce.PceVector(c, basis)
    out.refit_converged = converged
    return out


def filter_step(prior, y, likelihood, order=2, n_samples=10000, seed=0):
    """One Bayesian update: posterior moments, then a coefficient refit.

    Returns the updated expansion; the matched :class:`MomentTargets` ride
    along as its ``targets`` attribute for diagnostics.
    """
    targets = posterior_moments(prior, y, likelihood, order=order,
                                n_samples=n_samples, seed=seed)
    updated = refit_pce(prior.basis, targets, prior)
    updated.targets = targets
    return updated


def _forward_on(forward, thetas):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            out = np.asarray(forward(thetas), dtype=float)
        if out.shape == thetas.shape:
            return out
    except (TypeError, ValueError, Warning):
        pass
    return np.array([float(forward(t)) for t in thetas])


def _moment_residuals(c, basis, targets, rule):
    p = pce.PceVector(c, basis)
    res = np.empty(targets.order)
    res[0] = c[0] - targets.moments[0]
    if targets.order >= 2:
        res[1] = float(np.sum(c ** 2)) - targets.moments[1]
    for m in range(3, targets.order + 1):
        res[m - 1] = pce.raw_moment(p, m, rule=rule)[0] - targets.moments[m - 1]
    return res


def _moment_jacobian(c, basis, order, rule):
    jac = np.zeros((order, c.size))
    jac[0, 0] = 1.0
    if order >= 2:
        jac[1] = 2.0 * c
    for m in range(3, order + 1):
        for j in range(c.size):
            h = 1e-6 * max(1.0, abs(c[j]))
            up, dn = c.copy(), c.copy()
            up[j] += h
            dn[j] -= h
            mu_up = pce.raw_moment(pce.PceVector(up, basis), m, rule=rule)[0]
            mu_dn = pce.raw_moment(pce.PceVector(dn, basis), m, rule=rule)[0]
            jac[m - 1, j] = (mu_up - mu_dn) / (2.0 * h)
    return jac


def _symmetric_measure(measure):
    if measure.kind in ("gaussian", "uniform"):
        return True
    if measure.kind == "beta":
        return measure.params["p"] == measure.params["q"]
    return False
