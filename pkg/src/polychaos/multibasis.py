"""Multivariate total-degree bases, triple-product tensors and tensor rules.

A multivariate basis function is a product of univariate orthonormal
polynomials, one per germ dimension, indexed by a multi-index of exponents.
The total-degree truncation keeps every multi-index whose exponents sum to at
most ``d``, giving ``(n + d)! / (n! d!)`` functions, ordered graded first
(by total degree) and lexicographically within a grade with the leading
dimension varying slowest.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from polychaos import orthopoly

#: multi-indices are plain tuples of nonnegative ints, one exponent per dimension
MultiIndex = tuple

_BASIS_CAP = 1_000_000
_TENSOR_SIDE_CAP = 250
_TRIPLE_FLOOR = 1e-12

_FORMAT_VERSION = "polychaos-basis/1"


@dataclass(eq=False)
class TotalDegreeBasis:
    """Total-degree multivariate basis over per-dimension germ families.

    Attributes
    ----------
    families : list of PolynomialFamily
        One family per germ dimension, each built to at least ``degree``.
    degree : int
        The total-degree truncation level.
    indices : list of tuple
        Multi-indices in graded order; ``indices[0]`` is all zeros.
    """

    families: list
    degree: int
    indices: list
    idx_array: np.ndarray = field(repr=False, default=None)

    @property
    def n_dims(self):
        return len(self.families)

    @property
    def size(self):
        """Number of basis functions, L + 1."""
        return len(self.indices)

    def position(self, index):
        """Position of a multi-index within the graded ordering."""
        try:
            return self._lookup[tuple(index)]
        except AttributeError:
            self._lookup = {ix: k for k, ix in enumerate(self.indices)}
            return self._lookup[tuple(index)]

    def same_basis(self, other):
        if self is other:
            return True
        if self.degree != other.degree or self.n_dims != other.n_dims:
            return False
        return all(a.same_family(b) for a, b in zip(self.families, other.families))

    def to_dict(self):
        return {
            "version": _FORMAT_VERSION,
            "degree": self.degree,
            "measures": [f.measure.to_dict() for f in self.families],
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("version") != _FORMAT_VERSION:
            raise ValueError(f"unsupported basis artifact version {data.get('version')!r}")
        families = [orthopoly.build_family(orthopoly.MeasureDescriptor.from_dict(m),
                                           data["degree"])
                    for m in data["measures"]]
        return total_degree_basis(families, data["degree"])


@dataclass(eq=False)
class TripleProductTensor:
    """Sparse symmetric tensor of expectations E[phi_i phi_j phi_l].

    ``entries`` holds canonical triples ``i <= j <= l`` with magnitude above
    1e-12; ``dense`` is the full cube used by vectorized Galerkin products.
    Symmetry is exact by construction: every permutation of a triple reads
    the same stored value.
    """

    basis: TotalDegreeBasis
    entries: dict
    dense: np.ndarray = field(repr=False, default=None)

    def get(self, i, j, l):
        return self.entries.get(tuple(sorted((i, j, l))), 0.0)

    def to_dict(self):
        return {
            "version": _FORMAT_VERSION,
            "basis": self.basis.to_dict(),
            "entries": [[i, j, l, v] for (i, j, l), v in sorted(self.entries.items())],
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("version") != _FORMAT_VERSION:
            raise ValueError(f"unsupported tensor artifact version {data.get('version')!r}")
        basis = TotalDegreeBasis.from_dict(data["basis"])
        entries = {(int(i), int(j), int(l)): float(v) for i, j, l, v in data["entries"]}
        size = basis.size
        dense = np.zeros((size, size, size))
        for (i, j, l), v in entries.items():
            dense[i, j, l] = dense[i, l, j] = dense[j, i, l] = v
            dense[j, l, i] = dense[l, i, j] = dense[l, j, i] = v
        return cls(basis, entries, dense)


@dataclass(frozen=True)
class TensorRule:
    """Product-grid Gauss rule over the joint germ measure."""

    points: np.ndarray  # (P, n_dims)
    weights: np.ndarray
    exact_degree: int  # per-dimension exactness degree


def total_degree_basis(families, degree):
    """Build the graded total-degree basis of the given degree.

    ``families`` may be a single family or one per dimension; every family
    must already be built to ``max_degree >= degree``.
    """
    if isinstance(families, orthopoly.PolynomialFamily):
        families = [families]
    families = list(families)
    if not families:
        raise ValueError("need at least one germ dimension")
    if not isinstance(degree, (int, np.integer)) or degree < 0:
        raise ValueError(f"degree must be a nonnegative integer, got {degree!r}")
    for k, fam in enumerate(families):
        if fam.max_degree < degree:
            raise ValueError(f"family {k} is built to degree {fam.max_degree} < {degree}; "
                             "rebuild it deeper")
    n = len(families)
    count = math.comb(n + degree, degree)
    if count > _BASIS_CAP:
        raise ValueError(f"total-degree basis would hold {count} functions "
                         f"(cap {_BASIS_CAP}); lower the degree or dimension")
    indices = sorted(_compositions(n, degree),
                     key=lambda ix: (sum(ix), tuple(-e for e in ix)))
    basis = TotalDegreeBasis(families, int(degree), indices,
                             np.array(indices, dtype=int).reshape(count, n))
    assert basis.size == count
    return basis


def eval_basis(basis, xi):
    """Evaluate every basis function at one germ point or a batch.

    ``xi`` of shape ``(n_dims,)`` gives a vector of length ``basis.size``;
    shape ``(P, n_dims)`` gives a ``(P, basis.size)`` table.
    """
    pts = np.asarray(xi, dtype=float)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != basis.n_dims:
        raise ValueError(f"expected points with {basis.n_dims} germ coordinates, "
                         f"got shape {np.shape(xi)}")
    out = np.ones((pts.shape[0], basis.size))
    for dim, fam in enumerate(basis.families):
        table = orthopoly.eval_all(fam, pts[:, dim])
        out *= table[:, basis.idx_array[:, dim]]
    return out[0] if single else out


def triple_products(basis):
    """Tensor of triple expectations, exact for the total-degree truncation.

    Each univariate factor table is integrated with a Gauss rule of
    ``ceil((3d + 1) / 2)`` nodes, exact through degree ``3d``; multivariate
    entries are the products of the per-dimension factors (Fubini over the
    tensorized rule).
    """
    size = basis.size
    if size > _TENSOR_SIDE_CAP:
        raise ValueError(f"dense triple-product tensor with side {size} exceeds the "
                         f"cap of {_TENSOR_SIDE_CAP}")
    d = basis.degree
    n_nodes = (3 * d + 2) // 2  # ceil((3d + 1)/2)
    uni = []
    for fam in basis.families:
        ext = fam.extended(n_nodes - 1)
        rule = orthopoly.gauss_rule(ext, n_nodes)
        table = orthopoly.eval_all(ext, rule.nodes)[:, :d + 1]
        u = np.empty((d + 1, d + 1, d + 1))
        for a in range(d + 1):
            for b in range(a, d + 1):
                for c in range(b, d + 1):
                    v = float(np.einsum("p,p,p,p->", rule.weights,
                                        table[:, a], table[:, b], table[:, c]))
                    u[a, b, c] = u[a, c, b] = u[b, a, c] = v
                    u[b, c, a] = u[c, a, b] = u[c, b, a] = v
        uni.append(u)
    ix = basis.idx_array
    dense = np.ones((size, size, size))
    for dim, u in enumerate(uni):
        a = ix[:, dim]
        dense *= u[a[:, None, None], a[None, :, None], a[None, None, :]]
    dense[np.abs(dense) <= _TRIPLE_FLOOR] = 0.0
    nz = np.argwhere(dense != 0.0)
    entries = {(int(i), int(j), int(l)): float(dense[i, j, l])
               for i, j, l in nz if i <= j <= l}
    return TripleProductTensor(basis, entries, dense)


def monomial_to_basis(basis, exponents):
    """Exact chaos coefficients of the germ monomial ``prod xi_i**s_i``.

    The monomial must fit inside the truncation (total degree of ``exponents``
    at most ``basis.degree``); the returned vector has length ``basis.size``.

    A reference point for the uniform germ: xi^3 projects onto the cubic
    basis polynomial with weight 2*sqrt(7)/35, not the 2*sqrt(5)/7 that
    circulates in some printed tables (the quadrature here settles it).
    """
    s = tuple(int(e) for e in exponents)
    if len(s) != basis.n_dims or any(e < 0 for e in s):
        raise ValueError(f"exponents {exponents!r} do not describe a monomial in "
                         f"{basis.n_dims} germ dimensions")
    if sum(s) > basis.degree:
        raise ValueError(f"monomial of total degree {sum(s)} does not fit in a "
                         f"degree-{basis.degree} basis")
    d = basis.degree
    coeffs = np.ones(basis.size)
    for dim, fam in enumerate(basis.families):
        rule = orthopoly.gauss_rule(fam, d + 1)
        table = orthopoly.eval_all(fam, rule.nodes)[:, :d + 1]
        mono = rule.nodes ** s[dim]
        m = (rule.weights * mono) @ table  # E[xi^s phi_a] for a = 0..d
        coeffs *= m[basis.idx_array[:, dim]]
    coeffs[np.abs(coeffs) < 1e-14] = 0.0
    return coeffs


def tensor_rule(basis, points_per_dim):
    """Product Gauss rule over the joint germ, exact per dimension through
    degree ``2 * points_per_dim - 1``.  Families are extended as needed."""
    if points_per_dim < 1:
        raise ValueError("points_per_dim must be at least 1")
    total = points_per_dim ** basis.n_dims
    if total > 2_000_000:
        raise ValueError(f"tensor rule with {total} points is too large")
    rules = [orthopoly.gauss_rule(f.extended(points_per_dim - 1), points_per_dim)
             for f in basis.families]
    grids = np.meshgrid(*[r.nodes for r in rules], indexing="ij")
    points = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.ones(total)
    wgrids = np.meshgrid(*[r.weights for r in rules], indexing="ij")
    for wg in wgrids:
        weights = weights * wg.ravel()
    return TensorRule(points, weights, 2 * points_per_dim - 1)


def save_cache(path, basis, tensor=None):
    """Write the basis (and optionally its tensor) as a versioned JSON artifact."""
    payload = {"version": _FORMAT_VERSION, "basis": basis.to_dict()}
    if tensor is not None:
        if not tensor.basis.same_basis(basis):
            raise ValueError("tensor was built on a different basis")
        payload["tensor"] = tensor.to_dict()
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_cache(path):
    """Read a basis artifact; returns ``(basis, tensor_or_None)``."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("version") != _FORMAT_VERSION:
        raise ValueError(f"unsupported artifact version {payload.get('version')!r}")
    basis = TotalDegreeBasis.from_dict(payload["basis"])
    tensor = None
    if "tensor" in payload:
        tensor = TripleProductTensor.from_dict(payload["tensor"])
        tensor.basis = basis
    return basis, tensor


def _compositions(n, d):
    """All exponent tuples of length n with sum at most d."""
    if n == 1:
        for k in range(d + 1):
            yield (k,)
        return
    for k in range(d + 1):
        for rest in _compositions(n - 1, d - k):
            yield (k,) + rest
