"""Chaos-vector algebra: moments, Galerkin products, projection, regression.

A :class:`PceVector` stores the coefficients of a vector-valued random
variable in a :class:`~polychaos.multibasis.TotalDegreeBasis`: row ``r`` of
``coeffs`` holds the spectral coefficients of output ``r``, so the mean is
column 0 and the variance is the sum of squares of the remaining columns
(orthonormality does all the work).
"""

import warnings
from dataclasses import dataclass

import numpy as np

from polychaos import multibasis


class RankDeficiencyError(ValueError):
    """Least-squares design matrix does not determine the coefficients."""


@dataclass(eq=False)
class PceVector:
    """Coefficients of a vector-valued polynomial chaos expansion.

    ``coeffs`` has shape ``(n_out, basis.size)``; a 1-D array is promoted to
    one output row.
    """

    coeffs: np.ndarray
    basis: multibasis.TotalDegreeBasis

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        if c.ndim != 2 or c.shape[1] != self.basis.size:
            raise ValueError(f"coefficient array of shape {np.shape(self.coeffs)} does "
                             f"not match basis size {self.basis.size}")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be finite")
        self.coeffs = c

    @property
    def n_out(self):
        return self.coeffs.shape[0]

    def to_dict(self):
        return {"basis": self.basis.to_dict(), "coeffs": self.coeffs.tolist()}

    @classmethod
    def from_dict(cls, data):
        basis = multibasis.TotalDegreeBasis.from_dict(data["basis"])
        return cls(np.asarray(data["coeffs"], dtype=float), basis)


def dirac(basis, value):
    """Deterministic expansion: mean block set to ``value``, all else zero."""
    value = np.atleast_1d(np.asarray(value, dtype=float))
    coeffs = np.zeros((value.size, basis.size))
    coeffs[:, 0] = value
    return PceVector(coeffs, basis)


def mean(p):
    """Exact mean, one entry per output row."""
    return p.coeffs[:, 0].copy()


def variance(p):
    """Exact variance from the squared higher-order coefficients."""
    return np.sum(p.coeffs[:, 1:] ** 2, axis=1)


def raw_moment(p, m, rule=None):
    """Raw moment E[x^m] per output, via a tensorized Gauss rule.

    The rule must integrate per-dimension degree ``m * basis.degree`` exactly;
    when omitted, a sufficient rule is built on the fly.
    """
    if not isinstance(m, (int, np.integer)) or m < 1:
        raise ValueError(f"moment order must be a positive integer, got {m!r}")
    needed = m * p.basis.degree
    if rule is None:
        rule = multibasis.tensor_rule(p.basis, needed // 2 + 1)
    elif rule.exact_degree < needed:
        raise ValueError(f"rule is exact to degree {rule.exact_degree} but the moment "
                         f"needs {needed}")
    values = sample_eval(p, rule.points)  # (P, n_out)
    return rule.weights @ values ** m


def galerkin_product(p, q, tensor):
    """Galerkin (spectral) product of two expansions on the same basis.

    Output rows broadcast: either both operands have the same number of rows
    or one of them has a single row.
    """
    _check_same_basis(p, q)
    if not tensor.basis.same_basis(p.basis):
        raise ValueError("triple-product tensor was built on a different basis")
    a, b = p.coeffs, q.coeffs
    if a.shape[0] != b.shape[0]:
        if a.shape[0] == 1:
            a = np.broadcast_to(a, (b.shape[0], a.shape[1]))
        elif b.shape[0] == 1:
            b = np.broadcast_to(b, (a.shape[0], b.shape[1]))
        else:
            raise ValueError(f"cannot broadcast {p.n_out} outputs against {q.n_out}")
    out = np.einsum("ri,rj,ijl->rl", a, b, tensor.dense)
    return PceVector(out, p.basis)


def project_function(fun, basis, rule=None):
    """Project a germ-to-vector callback onto the basis by quadrature.

    Coefficients are ``E[fun(xi) phi_l(xi)]``.  The default rule uses
    ``degree + 1`` points per dimension, which is exact whenever ``fun`` is a
    polynomial that fits inside the truncation.
    """
    if rule is None:
        rule = multibasis.tensor_rule(basis, basis.degree + 1)
    values = _eval_callback(fun, rule.points, basis.n_dims)
    table = multibasis.eval_basis(basis, rule.points)
    coeffs = values.T @ (rule.weights[:, None] * table)
    return PceVector(coeffs, basis)


def regress(samples, basis):
    """Least-squares fit of chaos coefficients to (germ point, value) pairs.

    Needs at least ``basis.size`` samples; a rank-deficient design matrix is
    reported rather than silently pseudo-inverted.
    """
    pts = np.asarray([np.atleast_1d(x) for x, _ in samples], dtype=float)
    vals = np.asarray([np.atleast_1d(y) for _, y in samples], dtype=float)
    if pts.shape[0] < basis.size:
        raise ValueError(f"{pts.shape[0]} samples cannot determine {basis.size} "
                         "coefficients")
    design = multibasis.eval_basis(basis, pts)
    sol, _, rank, _ = np.linalg.lstsq(design, vals, rcond=None)
    if rank < basis.size:
        raise RankDeficiencyError(f"design matrix rank {rank} < {basis.size}; samples do "
                                  "not excite every basis direction")
    return PceVector(sol.T, basis)


def sample_eval(p, xi):
    """Realize the expansion at germ point(s): ``(n_out,)`` for one point,
    ``(P, n_out)`` for a batch."""
    table = multibasis.eval_basis(p.basis, xi)
    if table.ndim == 1:
        return p.coeffs @ table
    return table @ p.coeffs.T


def _check_same_basis(p, q):
    if not p.basis.same_basis(q.basis):
        raise ValueError("operands are defined on different bases")


def _eval_callback(fun, points, n_dims):
    """Evaluate a germ callback on a batch, tolerating per-point callables."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error")  # a noisy batch probe means "not vectorized"
            out = np.asarray(fun(points), dtype=float)
        if out.ndim == 1 and out.shape[0] == points.shape[0]:
            return out[:, None]
        if out.ndim == 2 and out.shape[0] == points.shape[0]:
            return out
    except (TypeError, ValueError, IndexError, Warning):
        pass
    rows = []
    for pt in points:
        arg = pt[0] if n_dims == 1 else pt
        rows.append(np.atleast_1d(np.asarray(fun(arg), dtype=float)))
    return np.asarray(rows)
