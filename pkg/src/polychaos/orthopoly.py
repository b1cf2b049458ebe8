"""Univariate orthonormal polynomial families matched to probability measures.

Families are represented by monic three-term recurrences

    p_{k+1}(x) = (x - a_k) p_k(x) - b_k p_{k-1}(x),    p_0 = 1, p_{-1} = 0,

together with the normalizers h_n = sqrt(b_1 * ... * b_n) that turn the monic
sequence into an orthonormal one (h_0 = 1 because every measure here carries
unit mass).  Closed-form recurrences cover the Gaussian, uniform, gamma and
beta germs; arbitrary densities on a finite interval go through a discretized
Stieltjes procedure.
"""

import math
from dataclasses import dataclass

import numpy as np

GAUSSIAN = "gaussian"
UNIFORM = "uniform"
GAMMA = "gamma"
BETA = "beta"
CUSTOM = "custom"

_KINDS = (GAUSSIAN, UNIFORM, GAMMA, BETA, CUSTOM)

#: number of discretization points used when a custom density has to be
#: integrated or sampled and the caller did not say otherwise
DEFAULT_QUAD_POINTS = 512

_NORM_FLOOR = 1e-12
_MASS_TOL = 1e-8


class DegenerateMeasureError(ValueError):
    """Measure cannot support an orthonormal family.

    Raised when a density is negative, fails to integrate to one under the
    module's quadrature, or produces vanishing polynomial norms.
    """


@dataclass(frozen=True)
class MeasureDescriptor:
    """Probability measure of one scalar uncertainty source.

    Use the classmethod constructors rather than ``__init__``:
    :meth:`gaussian`, :meth:`uniform`, :meth:`gamma` (unit rate, support
    ``[0, inf)``), :meth:`beta` (mapped onto ``[-1, 1]``) and :meth:`custom`
    (density callback on a finite interval).
    """

    kind: str
    params: dict
    support: tuple

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown measure kind {self.kind!r}")

    @classmethod
    def gaussian(cls, mean=0.0, stddev=1.0):
        if not stddev > 0:
            raise ValueError(f"gaussian stddev must be positive, got {stddev}")
        return cls(GAUSSIAN, {"mean": float(mean), "stddev": float(stddev)},
                   (-math.inf, math.inf))

    @classmethod
    def uniform(cls, lo=-1.0, hi=1.0):
        lo, hi = float(lo), float(hi)
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise ValueError(f"uniform interval must satisfy lo < hi, got [{lo}, {hi}]")
        return cls(UNIFORM, {"lo": lo, "hi": hi}, (lo, hi))

    @classmethod
    def gamma(cls, shape):
        if not shape > 0:
            raise ValueError(f"gamma shape must be positive, got {shape}")
        return cls(GAMMA, {"shape": float(shape)}, (0.0, math.inf))

    @classmethod
    def beta(cls, p, q):
        if not (p > 0 and q > 0):
            raise ValueError(f"beta parameters must be positive, got p={p}, q={q}")
        return cls(BETA, {"p": float(p), "q": float(q)}, (-1.0, 1.0))

    @classmethod
    def custom(cls, density, lo, hi):
        if not callable(density):
            raise ValueError("custom measure needs a callable density")
        lo, hi = float(lo), float(hi)
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise ValueError(f"custom support must be a finite interval, got [{lo}, {hi}]")
        return cls(CUSTOM, {"density": density}, (lo, hi))

    def standardized(self):
        """Return ``(germ, loc, scale)`` such that this measure is the law of
        ``loc + scale * germ``.  Gaussian and uniform measures standardize to
        the unit germ; the other kinds are their own germ."""
        if self.kind == GAUSSIAN:
            return (MeasureDescriptor.gaussian(0.0, 1.0),
                    self.params["mean"], self.params["stddev"])
        if self.kind == UNIFORM:
            lo, hi = self.params["lo"], self.params["hi"]
            return (MeasureDescriptor.uniform(-1.0, 1.0),
                    0.5 * (lo + hi), 0.5 * (hi - lo))
        return (self, 0.0, 1.0)

    def density(self, x):
        """Evaluate the probability density at ``x`` (scalar or array)."""
        x = np.asarray(x, dtype=float)
        if self.kind == GAUSSIAN:
            m, s = self.params["mean"], self.params["stddev"]
            return np.exp(-0.5 * ((x - m) / s) ** 2) / (s * math.sqrt(2.0 * math.pi))
        if self.kind == UNIFORM:
            lo, hi = self.params["lo"], self.params["hi"]
            inside = (x >= lo) & (x <= hi)
            return np.where(inside, 1.0 / (hi - lo), 0.0)
        if self.kind == GAMMA:
            s = self.params["shape"]
            out = np.zeros_like(x)
            pos = x > 0
            out[pos] = np.exp((s - 1.0) * np.log(x[pos]) - x[pos] - math.lgamma(s))
            if s == 1.0:
                out = np.where(x == 0.0, 1.0, out)
            return out
        if self.kind == BETA:
            p, q = self.params["p"], self.params["q"]
            # beta(p, q) on [0, 1] pushed onto [-1, 1]
            log_b = math.lgamma(p) + math.lgamma(q) - math.lgamma(p + q)
            u = 0.5 * (x + 1.0)
            out = np.zeros_like(x)
            inside = (u > 0) & (u < 1)
            ui = u[inside]
            out[inside] = 0.5 * np.exp((p - 1.0) * np.log(ui)
                                       + (q - 1.0) * np.log(1.0 - ui) - log_b)
            return out
        return _call_on_points(self.params["density"], x)

    def sample(self, rng, size):
        """Draw ``size`` i.i.d. samples using the generator ``rng``."""
        if self.kind == GAUSSIAN:
            m, s = self.params["mean"], self.params["stddev"]
            return m + s * rng.standard_normal(size)
        if self.kind == UNIFORM:
            return rng.uniform(self.params["lo"], self.params["hi"], size)
        if self.kind == GAMMA:
            return rng.standard_gamma(self.params["shape"], size)
        if self.kind == BETA:
            return 2.0 * rng.beta(self.params["p"], self.params["q"], size) - 1.0
        # custom: inverse-CDF lookup on the discretized density
        x, mass = _discretized_mass(self, DEFAULT_QUAD_POINTS)
        cdf = np.concatenate(([0.0], np.cumsum(mass)))
        cdf /= cdf[-1]
        grid = np.concatenate(([self.support[0]], x))
        return np.interp(rng.uniform(0.0, 1.0, size), cdf, grid)

    def to_dict(self):
        """JSON-ready description.  Custom measures carry a callback and
        cannot be serialized."""
        if self.kind == CUSTOM:
            raise ValueError("custom measures cannot be serialized (density is a callback)")
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, data):
        kind = data["kind"]
        params = data["params"]
        if kind == GAUSSIAN:
            return cls.gaussian(params["mean"], params["stddev"])
        if kind == UNIFORM:
            return cls.uniform(params["lo"], params["hi"])
        if kind == GAMMA:
            return cls.gamma(params["shape"])
        if kind == BETA:
            return cls.beta(params["p"], params["q"])
        raise ValueError(f"cannot deserialize measure kind {kind!r}")


@dataclass(eq=False)
class PolynomialFamily:
    """Orthonormal polynomial family for a (standardized) germ measure.

    Attributes
    ----------
    measure : MeasureDescriptor
        The germ measure the family is orthonormal against.
    max_degree : int
        Highest represented degree.
    recur_a, recur_b : ndarray, shape (max_degree + 1,)
        Monic three-term recurrence coefficients; ``recur_b[0]`` is fixed
        to 1 by convention.
    norms : ndarray, shape (max_degree + 1,)
        Normalizers ``h_n`` with ``h_0 = 1``.
    quad_points : int or None
        Discretization size when the family came from the Stieltjes path,
        ``None`` for closed-form recurrences.
    """

    measure: MeasureDescriptor
    max_degree: int
    recur_a: np.ndarray
    recur_b: np.ndarray
    norms: np.ndarray
    quad_points: int = None

    def extended(self, degree):
        """Same family rebuilt to at least ``degree`` (used when a quadrature
        or triple-product table needs a deeper recurrence)."""
        if degree <= self.max_degree:
            return self
        if self.quad_points is None:
            return build_family(self.measure, degree)
        return stieltjes_family(self.measure, degree, self.quad_points)

    def same_family(self, other):
        """True when two families share measure kind, parameters and degree."""
        if self.measure.kind != other.measure.kind:
            return False
        if self.max_degree != other.max_degree:
            return False
        a, b = self.measure.params, other.measure.params
        if self.measure.kind == CUSTOM:
            return a["density"] is b["density"] and self.measure.support == other.measure.support
        return a == b


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss rule: nodes, positive weights summing to one, and the highest
    polynomial degree it integrates exactly."""

    nodes: np.ndarray
    weights: np.ndarray
    exact_degree: int


def build_family(measure, max_degree):
    """Construct the orthonormal family for ``measure`` on its standardized germ.

    Parameters
    ----------
    measure : MeasureDescriptor
        Any closed-form kind.  Gaussian and uniform inputs are standardized
        first, so the recurrence is always the unit-germ one; custom measures
        must go through :func:`stieltjes_family` instead.
    max_degree : int
        Highest degree to represent (>= 0).

    Returns
    -------
    PolynomialFamily
    """
    if not isinstance(max_degree, (int, np.integer)) or max_degree < 0:
        raise ValueError(f"max_degree must be a nonnegative integer, got {max_degree!r}")
    germ, _, _ = measure.standardized()
    if germ.kind == CUSTOM:
        raise ValueError("custom measures have no closed-form recurrence; "
                         "use stieltjes_family")
    d = int(max_degree)
    k = np.arange(d + 1, dtype=float)
    if germ.kind == GAUSSIAN:
        a = np.zeros(d + 1)
        b = k.copy()
    elif germ.kind == UNIFORM:
        a = np.zeros(d + 1)
        with np.errstate(invalid="ignore", divide="ignore"):
            b = k ** 2 / (4.0 * k ** 2 - 1.0)
    elif germ.kind == GAMMA:
        s = germ.params["shape"]
        a = 2.0 * k + s
        b = k * (k + s - 1.0)
    else:  # beta on [-1, 1] with weight (1-x)^alpha (1+x)^beta
        al = germ.params["q"] - 1.0
        be = germ.params["p"] - 1.0
        a = np.empty(d + 1)
        b = np.empty(d + 1)
        a[0] = (be - al) / (al + be + 2.0)
        for i in range(1, d + 1):
            two = 2.0 * i + al + be
            a[i] = (be ** 2 - al ** 2) / (two * (two + 2.0))
            if i == 1:
                b[1] = 4.0 * (al + 1.0) * (be + 1.0) / ((al + be + 2.0) ** 2 * (al + be + 3.0))
            else:
                b[i] = (4.0 * i * (i + al) * (i + be) * (i + al + be)
                        / (two ** 2 * (two ** 2 - 1.0)))
    b[0] = 1.0
    return PolynomialFamily(germ, d, a, b, _norms_from_b(b), None)


def stieltjes_family(measure, max_degree, quad_points=DEFAULT_QUAD_POINTS):
    """Build a family numerically by the discretized Stieltjes procedure.

    Works for custom measures and for closed-form measures whose support is
    already a finite interval (uniform, beta).  Gaussian and gamma measures
    must be wrapped as a custom density on an explicit truncated support,
    since the discretization needs finite endpoints.  ``quad_points`` has to
    be large enough to resolve moments up to degree ``2 * max_degree``.
    """
    if not isinstance(max_degree, (int, np.integer)) or max_degree < 0:
        raise ValueError(f"max_degree must be a nonnegative integer, got {max_degree!r}")
    if quad_points < 2 * max_degree + 1:
        raise ValueError(f"quad_points={quad_points} cannot resolve moments to "
                         f"degree {2 * max_degree}")
    germ, _, _ = measure.standardized()
    lo, hi = germ.support
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError(f"measure kind {germ.kind!r} has unbounded support; wrap it as a "
                         "custom density on a truncated interval")
    d = int(max_degree)
    x, mass = _discretized_mass(germ, quad_points)

    a = np.zeros(d + 1)
    b = np.ones(d + 1)
    norm2 = np.ones(d + 1)
    p_prev = np.zeros_like(x)
    p_cur = np.ones_like(x)
    a[0] = float(mass @ x)
    for n in range(d):
        p_next = (x - a[n]) * p_cur - b[n] * p_prev
        nn = float(mass @ (p_next * p_next))
        b[n + 1] = nn / norm2[n]
        norm2[n + 1] = nn
        if nn <= 0 or math.sqrt(nn) < _NORM_FLOOR:
            raise DegenerateMeasureError(
                f"polynomial norm at degree {n + 1} fell below {_NORM_FLOOR:g}; "
                "the measure is (numerically) supported on too few points")
        a[n + 1] = float(mass @ (x * p_next * p_next)) / nn
        p_prev, p_cur = p_cur, p_next
    return PolynomialFamily(germ, d, a, b, np.sqrt(norm2), int(quad_points))


def eval_poly(family, degree, point):
    """Evaluate the orthonormal polynomial of a given degree.

    ``point`` may be a scalar or an array; the result matches its shape.
    """
    if not 0 <= degree <= family.max_degree:
        raise ValueError(f"degree {degree} outside [0, {family.max_degree}]")
    x = np.asarray(point, dtype=float)
    table = eval_all(family, x.ravel())[:, degree].reshape(x.shape)
    if np.ndim(point) == 0:
        return float(table)
    return table


def eval_all(family, points):
    """Table of all orthonormal values: shape ``(len(points), max_degree + 1)``."""
    x = np.asarray(points, dtype=float).ravel()
    d = family.max_degree
    out = np.empty((x.size, d + 1))
    p_prev = np.zeros_like(x)
    p_cur = np.ones_like(x)
    out[:, 0] = p_cur
    for n in range(d):
        p_next = (x - family.recur_a[n]) * p_cur - family.recur_b[n] * p_prev
        out[:, n + 1] = p_next
        p_prev, p_cur = p_cur, p_next
    out /= family.norms
    return out


def gauss_rule(family, n):
    """Gauss rule with ``n`` nodes via the symmetric tridiagonal Jacobi matrix.

    Requires ``1 <= n <= family.max_degree + 1`` because ``n`` nodes consume
    recurrence coefficients up to index ``n - 1``.  The rule integrates
    polynomials exactly up to degree ``2n - 1``.
    """
    if not 1 <= n <= family.max_degree + 1:
        raise ValueError(f"node count {n} outside [1, {family.max_degree + 1}]; "
                         "extend the family for a larger rule")
    if n == 1:
        return QuadratureRule(np.array([family.recur_a[0]]), np.array([1.0]), 1)
    jacobi = np.diag(family.recur_a[:n]) + np.diag(np.sqrt(family.recur_b[1:n]), 1) \
        + np.diag(np.sqrt(family.recur_b[1:n]), -1)
    try:
        vals, vecs = np.linalg.eigh(jacobi)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"eigensolver failed on the {n}-node Jacobi matrix: {exc}") from exc
    return QuadratureRule(vals, vecs[0, :] ** 2, 2 * n - 1)


def inner_product(family, f, g, rule=None):
    """Weighted inner product of two callbacks under the family's measure.

    Uses the supplied Gauss rule, or the family's largest one when omitted.
    The result is exact whenever ``f * g`` is a polynomial within the rule's
    exactness degree.
    """
    if rule is None:
        rule = gauss_rule(family, family.max_degree + 1)
    fx = _call_on_points(f, rule.nodes)
    gx = _call_on_points(g, rule.nodes)
    return float(np.dot(rule.weights, fx * gx))


def _norms_from_b(b):
    logs = np.concatenate(([0.0], np.cumsum(np.log(b[1:]))))
    return np.exp(0.5 * logs)


def _composite_rule(lo, hi, n_points):
    """Composite 4-point Gauss-Legendre rule on [lo, hi] with ~n_points nodes."""
    base_x, base_w = np.polynomial.legendre.leggauss(4)
    n_panels = max(1, int(n_points) // 4)
    edges = np.linspace(lo, hi, n_panels + 1)
    half = 0.5 * (edges[1:] - edges[:-1])
    mid = 0.5 * (edges[1:] + edges[:-1])
    x = (mid[:, None] + half[:, None] * base_x[None, :]).ravel()
    w = (half[:, None] * base_w[None, :]).ravel()
    return x, w


def _discretized_mass(measure, quad_points):
    """Nodes and normalized point masses of the measure on its support.

    Raises DegenerateMeasureError when the density is negative or its total
    mass under the composite rule strays from 1 by more than the tolerance.
    """
    lo, hi = measure.support
    x, w = _composite_rule(lo, hi, quad_points)
    rho = np.asarray(_call_on_points(measure.density, x), dtype=float)
    if np.any(rho < -1e-12):
        raise DegenerateMeasureError("density takes negative values on the support")
    mass = w * np.maximum(rho, 0.0)
    total = mass.sum()
    if abs(total - 1.0) > _MASS_TOL:
        raise DegenerateMeasureError(
            f"density integrates to {total:.10g} under the discretization, not 1 "
            f"(tolerance {_MASS_TOL:g})")
    return x, mass / total


def _call_on_points(f, x):
    """Evaluate a callback on an array of points, tolerating scalar-only callables."""
    try:
        out = np.asarray(f(x), dtype=float)
        if out.shape == x.shape:
            return out
    except (TypeError, ValueError):
        pass
    return np.array([float(f(xi)) for xi in np.ravel(x)]).reshape(np.shape(x))
