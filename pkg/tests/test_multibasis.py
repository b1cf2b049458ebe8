import math

import numpy as np
import pytest

from polychaos.multibasis import (
    eval_basis,
    load_cache,
    monomial_to_basis,
    save_cache,
    tensor_rule,
    total_degree_basis,
    triple_products,
)
from polychaos.orthopoly import MeasureDescriptor, build_family


def hermite_basis(n_dims, degree):
    fam = build_family(MeasureDescriptor.gaussian(), degree)
    return total_degree_basis([fam] * n_dims, degree)


def legendre_basis(n_dims, degree):
    fam = build_family(MeasureDescriptor.uniform(), degree)
    return total_degree_basis([fam] * n_dims, degree)


class TestBasisConstruction:
    @pytest.mark.parametrize("n,d,count", [
        (1, 3, 4), (2, 1, 3), (2, 2, 6), (3, 4, 35), (4, 5, 126),
    ])
    def test_cardinality(self, n, d, count):
        assert hermite_basis(n, d).size == count
        assert count == math.comb(n + d, d)

    def test_graded_ordering(self):
        basis = legendre_basis(2, 2)
        assert basis.indices == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
        assert basis.indices[0] == (0, 0)
        degrees = [sum(ix) for ix in basis.indices]
        assert degrees == sorted(degrees)

    def test_position_lookup(self):
        basis = legendre_basis(3, 3)
        for k, ix in enumerate(basis.indices):
            assert basis.position(ix) == k

    def test_shallow_family_rejected(self):
        fam = build_family(MeasureDescriptor.uniform(), 2)
        with pytest.raises(ValueError, match="rebuild"):
            total_degree_basis([fam], 3)

    def test_size_cap(self):
        fam = build_family(MeasureDescriptor.uniform(), 10)
        with pytest.raises(ValueError, match="cap"):
            total_degree_basis([fam] * 30, 10)

    def test_mixed_germs_allowed(self):
        fams = [build_family(MeasureDescriptor.gaussian(), 2),
                build_family(MeasureDescriptor.uniform(), 2)]
        basis = total_degree_basis(fams, 2)
        assert basis.size == 6
        # phi_(1,1) at (1, 0.5) = 1 * sqrt(3)*0.5
        vals = eval_basis(basis, np.array([1.0, 0.5]))
        assert vals[basis.position((1, 1))] == pytest.approx(math.sqrt(3.0) / 2.0)


class TestEvaluation:
    def test_first_degree_hermite_pair(self):
        basis = hermite_basis(2, 1)
        np.testing.assert_allclose(eval_basis(basis, np.array([1.0, 2.0])),
                                   [1.0, 1.0, 2.0], atol=1e-14)

    def test_batch_matches_single(self):
        basis = legendre_basis(3, 2)
        rng = np.random.default_rng(3)
        pts = rng.uniform(-1, 1, size=(20, 3))
        batch = eval_basis(basis, pts)
        for k in range(20):
            np.testing.assert_allclose(batch[k], eval_basis(basis, pts[k]), atol=1e-14)

    def test_orthonormality_under_tensor_rule(self):
        basis = legendre_basis(2, 3)
        rule = tensor_rule(basis, 4)
        table = eval_basis(basis, rule.points)
        gram = (table * rule.weights[:, None]).T @ table
        np.testing.assert_allclose(gram, np.eye(basis.size), atol=1e-12)

    def test_dimension_mismatch(self):
        basis = legendre_basis(2, 2)
        with pytest.raises(ValueError, match="germ coordinates"):
            eval_basis(basis, np.zeros(3))


class TestTripleProducts:
    def test_univariate_oracles(self):
        t_leg = triple_products(legendre_basis(1, 3))
        assert t_leg.get(1, 1, 2) == pytest.approx(2.0 / math.sqrt(5.0), abs=1e-13)
        assert t_leg.get(1, 1, 1) == 0.0  # odd integrand
        t_her = triple_products(hermite_basis(1, 3))
        assert t_her.get(1, 1, 2) == pytest.approx(math.sqrt(2.0), abs=1e-13)
        # E[He_1 He_2 He_3] = 6, normalized by sqrt(1! 2! 3!) = sqrt(12)
        assert t_her.get(1, 2, 3) == pytest.approx(math.sqrt(3.0), abs=1e-12)

    def test_degree_zero_slice_is_identity(self):
        tensor = triple_products(legendre_basis(2, 3))
        size = tensor.basis.size
        np.testing.assert_allclose(tensor.dense[0], np.eye(size), atol=1e-13)

    def test_permutation_symmetry_is_exact(self):
        tensor = triple_products(hermite_basis(2, 3))
        rng = np.random.default_rng(11)
        for _ in range(200):
            i, j, l = rng.integers(0, tensor.basis.size, size=3)
            v = tensor.dense[i, j, l]
            assert tensor.dense[j, i, l] == v
            assert tensor.dense[l, j, i] == v
            assert tensor.dense[i, l, j] == v

    def test_multivariate_entries_factor(self):
        basis = legendre_basis(2, 2)
        tensor = triple_products(basis)
        i = basis.position((1, 0))
        l = basis.position((2, 0))
        assert tensor.get(i, i, l) == pytest.approx(2.0 / math.sqrt(5.0), abs=1e-13)
        j = basis.position((0, 1))
        m = basis.position((1, 1))
        # E[phi_(1,0) phi_(0,1) phi_(1,1)] = E[phi_1^2]^2 = 1
        assert tensor.get(i, j, m) == pytest.approx(1.0, abs=1e-13)

    def test_entries_hold_only_canonical_nonzeros(self):
        tensor = triple_products(legendre_basis(1, 4))
        for (i, j, l), v in tensor.entries.items():
            assert i <= j <= l
            assert abs(v) > 1e-12


class TestMonomialTransform:
    def test_cubic_legendre(self):
        basis = legendre_basis(1, 3)
        np.testing.assert_allclose(
            monomial_to_basis(basis, (3,)),
            [0.0, math.sqrt(3.0) / 5.0, 0.0, 2.0 * math.sqrt(7.0) / 35.0], atol=1e-13)

    def test_cubic_hermite(self):
        basis = hermite_basis(1, 3)
        np.testing.assert_allclose(monomial_to_basis(basis, (3,)),
                                   [0.0, 3.0, 0.0, math.sqrt(6.0)], atol=1e-12)

    def test_cross_term(self):
        basis = legendre_basis(2, 2)
        coeffs = monomial_to_basis(basis, (1, 1))
        expect = np.zeros(basis.size)
        expect[basis.position((1, 1))] = 1.0 / 3.0
        np.testing.assert_allclose(coeffs, expect, atol=1e-13)

    def test_round_trip_against_direct_evaluation(self):
        basis = hermite_basis(2, 3)
        rng = np.random.default_rng(5)
        pts = rng.standard_normal((50, 2))
        for expo in [(0, 0), (2, 1), (0, 3), (1, 1)]:
            coeffs = monomial_to_basis(basis, expo)
            recon = eval_basis(basis, pts) @ coeffs
            direct = pts[:, 0] ** expo[0] * pts[:, 1] ** expo[1]
            np.testing.assert_allclose(recon, direct, atol=1e-10)

    def test_overflowing_degree_rejected(self):
        basis = legendre_basis(2, 2)
        with pytest.raises(ValueError, match="does not fit"):
            monomial_to_basis(basis, (2, 1))


class TestSerialization:
    def test_cache_round_trip(self, tmp_path):
        basis = legendre_basis(2, 2)
        tensor = triple_products(basis)
        path = tmp_path / "cache.json"
        save_cache(path, basis, tensor)
        basis2, tensor2 = load_cache(path)
        assert basis2.same_basis(basis)
        assert basis2.indices == basis.indices
        np.testing.assert_allclose(tensor2.dense, tensor.dense, atol=1e-15)

    def test_basis_only_cache(self, tmp_path):
        basis = hermite_basis(1, 4)
        path = tmp_path / "basis.json"
        save_cache(path, basis)
        basis2, tensor2 = load_cache(path)
        assert tensor2 is None
        assert basis2.same_basis(basis)

    def test_version_is_checked(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"version": "polychaos-basis/99", "basis": {}}')
        with pytest.raises(ValueError, match="version"):
            load_cache(path)
