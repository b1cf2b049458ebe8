import math

import numpy as np
import pytest

from polychaos.orthopoly import (
    DegenerateMeasureError,
    MeasureDescriptor,
    build_family,
    eval_all,
    eval_poly,
    gauss_rule,
    inner_product,
    stieltjes_family,
)

# Analytic orthonormal tables used as oracles.  Normalized Legendre on the
# uniform germ (density 1/2 on [-1, 1]) and normalized probabilists' Hermite.
LEGENDRE = [
    lambda x: np.ones_like(np.asarray(x, float)),
    lambda x: math.sqrt(3.0) * x,
    lambda x: math.sqrt(5.0) / 2.0 * (3.0 * x ** 2 - 1.0),
    lambda x: math.sqrt(7.0) / 2.0 * (5.0 * x ** 3 - 3.0 * x),
]
HERMITE = [
    lambda x: np.ones_like(np.asarray(x, float)),
    lambda x: x,
    lambda x: (x ** 2 - 1.0) / math.sqrt(2.0),
    lambda x: (x ** 3 - 3.0 * x) / math.sqrt(6.0),
]


class TestClosedFormRecurrences:
    def test_legendre_b_table(self):
        fam = build_family(MeasureDescriptor.uniform(), 4)
        np.testing.assert_allclose(fam.recur_a, 0.0, atol=1e-15)
        np.testing.assert_allclose(
            fam.recur_b, [1.0, 1.0 / 3.0, 4.0 / 15.0, 9.0 / 35.0, 16.0 / 63.0],
            rtol=1e-15)

    def test_hermite_b_table(self):
        fam = build_family(MeasureDescriptor.gaussian(), 5)
        np.testing.assert_allclose(fam.recur_a, 0.0, atol=1e-15)
        np.testing.assert_allclose(fam.recur_b, [1, 1, 2, 3, 4, 5], rtol=1e-15)
        # h_n = sqrt(n!)
        np.testing.assert_allclose(
            fam.norms, [math.sqrt(math.factorial(n)) for n in range(6)], rtol=1e-13)

    def test_exponential_is_laguerre_shape_one(self):
        fam = build_family(MeasureDescriptor.gamma(1.0), 3)
        np.testing.assert_allclose(fam.recur_a, [1, 3, 5, 7], rtol=1e-15)
        np.testing.assert_allclose(fam.recur_b, [1, 1, 4, 9], rtol=1e-15)
        np.testing.assert_allclose(
            fam.norms, [math.factorial(n) for n in range(4)], rtol=1e-13)

    def test_flat_beta_matches_legendre(self):
        flat = build_family(MeasureDescriptor.beta(1.0, 1.0), 6)
        leg = build_family(MeasureDescriptor.uniform(), 6)
        np.testing.assert_allclose(flat.recur_a, leg.recur_a, atol=1e-14)
        np.testing.assert_allclose(flat.recur_b, leg.recur_b, rtol=1e-13)

    def test_affine_measures_standardize_to_unit_germ(self):
        shifted = build_family(MeasureDescriptor.uniform(2.0, 6.0), 3)
        unit = build_family(MeasureDescriptor.uniform(), 3)
        np.testing.assert_allclose(shifted.recur_b, unit.recur_b, rtol=1e-15)
        assert shifted.measure.params == {"lo": -1.0, "hi": 1.0}
        scaled = build_family(MeasureDescriptor.gaussian(5.0, 0.1), 2)
        assert scaled.measure.params == {"mean": 0.0, "stddev": 1.0}


class TestEvaluation:
    def test_legendre_point_values(self):
        fam = build_family(MeasureDescriptor.uniform(), 3)
        assert eval_poly(fam, 2, 0.5) == pytest.approx(-math.sqrt(5.0) / 8.0, abs=1e-14)
        assert eval_poly(fam, 3, 0.5) == pytest.approx(-7.0 * math.sqrt(7.0) / 16.0,
                                                       abs=1e-14)

    def test_hermite_point_values(self):
        fam = build_family(MeasureDescriptor.gaussian(), 3)
        assert eval_poly(fam, 3, 1.0) == pytest.approx(-2.0 / math.sqrt(6.0), abs=1e-14)

    def test_tables_match_analytic_forms_on_a_grid(self):
        xs = np.linspace(-1.0, 1.0, 11)
        fam = build_family(MeasureDescriptor.uniform(), 3)
        table = eval_all(fam, xs)
        for deg, phi in enumerate(LEGENDRE):
            np.testing.assert_allclose(table[:, deg], phi(xs), atol=1e-12)
        xs = np.linspace(-3.0, 3.0, 11)
        fam = build_family(MeasureDescriptor.gaussian(), 3)
        table = eval_all(fam, xs)
        for deg, phi in enumerate(HERMITE):
            np.testing.assert_allclose(table[:, deg], phi(xs), atol=1e-12)

    def test_array_point_shape_is_preserved(self):
        fam = build_family(MeasureDescriptor.gaussian(), 2)
        pts = np.array([[0.0, 1.0], [2.0, -1.0]])
        out = eval_poly(fam, 1, pts)
        np.testing.assert_allclose(out, pts)

    def test_degree_out_of_range(self):
        fam = build_family(MeasureDescriptor.uniform(), 2)
        with pytest.raises(ValueError, match="degree"):
            eval_poly(fam, 3, 0.0)


class TestGaussRules:
    def test_two_point_legendre(self):
        fam = build_family(MeasureDescriptor.uniform(), 2)
        rule = gauss_rule(fam, 2)
        np.testing.assert_allclose(rule.nodes, [-1.0 / math.sqrt(3.0),
                                                1.0 / math.sqrt(3.0)], atol=1e-14)
        np.testing.assert_allclose(rule.weights, [0.5, 0.5], atol=1e-14)
        assert rule.exact_degree == 3

    def test_two_point_hermite(self):
        fam = build_family(MeasureDescriptor.gaussian(), 2)
        rule = gauss_rule(fam, 2)
        np.testing.assert_allclose(rule.nodes, [-1.0, 1.0], atol=1e-14)
        np.testing.assert_allclose(rule.weights, [0.5, 0.5], atol=1e-14)

    def test_two_point_exponential(self):
        # classic Gauss-Laguerre pair: nodes 2 -/+ sqrt(2), weights (2 +/- sqrt(2))/4
        fam = build_family(MeasureDescriptor.gamma(1.0), 2)
        rule = gauss_rule(fam, 2)
        s = math.sqrt(2.0)
        np.testing.assert_allclose(rule.nodes, [2.0 - s, 2.0 + s], atol=1e-13)
        np.testing.assert_allclose(rule.weights, [(2.0 + s) / 4.0, (2.0 - s) / 4.0],
                                   atol=1e-13)

    @pytest.mark.parametrize("measure", [
        MeasureDescriptor.gaussian(),
        MeasureDescriptor.uniform(),
        MeasureDescriptor.gamma(2.5),
        MeasureDescriptor.beta(2.0, 3.0),
    ])
    def test_rule_invariants(self, measure):
        fam = build_family(measure, 7)
        for n in (1, 3, 8):
            rule = gauss_rule(fam, n)
            assert rule.weights.min() > 0
            assert abs(rule.weights.sum() - 1.0) < 1e-12
            assert np.all(np.diff(rule.nodes) > 0)
            lo, hi = measure.standardized()[0].support
            assert rule.nodes.min() >= lo - 1e-12
            assert rule.nodes.max() <= hi + 1e-12
            assert rule.exact_degree == 2 * n - 1

    def test_moments_are_exact_to_stated_degree(self):
        fam = build_family(MeasureDescriptor.uniform(), 3)
        rule = gauss_rule(fam, 3)  # exact through degree 5
        for m in range(6):
            exact = 1.0 / (m + 1) if m % 2 == 0 else 0.0
            assert np.dot(rule.weights, rule.nodes ** m) == pytest.approx(exact, abs=1e-14)

    def test_node_count_bounds(self):
        fam = build_family(MeasureDescriptor.uniform(), 2)
        with pytest.raises(ValueError, match="node count"):
            gauss_rule(fam, 4)
        with pytest.raises(ValueError, match="node count"):
            gauss_rule(fam, 0)


class TestOrthonormality:
    @pytest.mark.parametrize("measure", [
        MeasureDescriptor.gaussian(),
        MeasureDescriptor.uniform(),
        MeasureDescriptor.gamma(3.0),
        MeasureDescriptor.beta(2.0, 5.0),
    ])
    def test_gram_matrix_is_identity(self, measure):
        d = 8
        fam = build_family(measure, d)
        rule = gauss_rule(fam, d + 1)
        table = eval_all(fam, rule.nodes)
        gram = (table * rule.weights[:, None]).T @ table
        np.testing.assert_allclose(gram, np.eye(d + 1), atol=1e-10)

    def test_inner_product_callback_path(self):
        fam = build_family(MeasureDescriptor.gaussian(), 3)
        phi1 = lambda x: eval_poly(fam, 1, x)
        phi3 = lambda x: eval_poly(fam, 3, x)
        assert inner_product(fam, phi1, phi3) == pytest.approx(0.0, abs=1e-13)
        assert inner_product(fam, phi3, phi3) == pytest.approx(1.0, abs=1e-13)
        # scalar-only callbacks are tolerated
        assert inner_product(fam, lambda x: float(x) ** 2, lambda x: 1.0) \
            == pytest.approx(1.0, abs=1e-13)


class TestStieltjes:
    def test_truncated_normal_matches_hermite(self):
        dens = lambda x: np.exp(-0.5 * np.asarray(x) ** 2) / math.sqrt(2.0 * math.pi)
        fam = stieltjes_family(MeasureDescriptor.custom(dens, -10.0, 10.0), 6)
        ref = build_family(MeasureDescriptor.gaussian(), 6)
        np.testing.assert_allclose(fam.recur_a, ref.recur_a, atol=1e-6)
        np.testing.assert_allclose(fam.recur_b, ref.recur_b, atol=1e-6)
        np.testing.assert_allclose(fam.norms, ref.norms, rtol=1e-6)

    def test_flat_density_matches_legendre(self):
        fam = stieltjes_family(MeasureDescriptor.custom(lambda x: 0.5 * np.ones_like(x),
                                                        -1.0, 1.0), 5)
        ref = build_family(MeasureDescriptor.uniform(), 5)
        np.testing.assert_allclose(fam.recur_a, ref.recur_a, atol=1e-10)
        np.testing.assert_allclose(fam.recur_b, ref.recur_b, atol=1e-10)

    def test_closed_form_finite_support_accepted_directly(self):
        fam = stieltjes_family(MeasureDescriptor.beta(2.0, 3.0), 4)
        ref = build_family(MeasureDescriptor.beta(2.0, 3.0), 4)
        np.testing.assert_allclose(fam.recur_a, ref.recur_a, atol=1e-8)
        np.testing.assert_allclose(fam.recur_b, ref.recur_b, atol=1e-8)

    def test_unbounded_support_is_rejected(self):
        with pytest.raises(ValueError, match="unbounded"):
            stieltjes_family(MeasureDescriptor.gaussian(), 3)

    def test_negative_density_raises(self):
        bad = MeasureDescriptor.custom(lambda x: np.asarray(x), -1.0, 1.0)
        with pytest.raises(DegenerateMeasureError, match="negative"):
            stieltjes_family(bad, 2)

    def test_wrong_mass_raises(self):
        bad = MeasureDescriptor.custom(lambda x: 0.7 * np.ones_like(x), -1.0, 1.0)
        with pytest.raises(DegenerateMeasureError, match="integrates"):
            stieltjes_family(bad, 2)

    def test_norm_collapse_raises(self):
        # Legendre norms shrink like 2^-n; degree 44 drops below the 1e-12 floor.
        flat = MeasureDescriptor.custom(lambda x: 0.5 * np.ones_like(x), -1.0, 1.0)
        with pytest.raises(DegenerateMeasureError, match="norm"):
            stieltjes_family(flat, 44, quad_points=4096)

    def test_too_few_points_rejected(self):
        flat = MeasureDescriptor.custom(lambda x: 0.5 * np.ones_like(x), -1.0, 1.0)
        with pytest.raises(ValueError, match="quad_points"):
            stieltjes_family(flat, 10, quad_points=12)


class TestMeasureValidation:
    def test_bad_parameters(self):
        with pytest.raises(ValueError):
            MeasureDescriptor.gaussian(0.0, 0.0)
        with pytest.raises(ValueError):
            MeasureDescriptor.uniform(1.0, 1.0)
        with pytest.raises(ValueError):
            MeasureDescriptor.gamma(-2.0)
        with pytest.raises(ValueError):
            MeasureDescriptor.beta(0.0, 1.0)
        with pytest.raises(ValueError):
            MeasureDescriptor.custom(lambda x: x, 0.0, math.inf)

    def test_custom_has_no_closed_form(self):
        m = MeasureDescriptor.custom(lambda x: 0.5 * np.ones_like(x), -1.0, 1.0)
        with pytest.raises(ValueError, match="stieltjes"):
            build_family(m, 2)

    def test_serialization_round_trip(self):
        for m in (MeasureDescriptor.gaussian(1.5, 0.5),
                  MeasureDescriptor.uniform(0.0, 2.0),
                  MeasureDescriptor.gamma(4.0),
                  MeasureDescriptor.beta(2.0, 2.0)):
            assert MeasureDescriptor.from_dict(m.to_dict()) == m
        cust = MeasureDescriptor.custom(lambda x: 0.5 * np.ones_like(x), -1.0, 1.0)
        with pytest.raises(ValueError, match="serialize"):
            cust.to_dict()

    def test_sampling_is_deterministic_and_in_support(self):
        m = MeasureDescriptor.custom(
            lambda x: np.exp(-0.5 * np.asarray(x) ** 2) / math.sqrt(2.0 * math.pi),
            -10.0, 10.0)
        a = m.sample(np.random.default_rng(7), 1000)
        b = m.sample(np.random.default_rng(7), 1000)
        np.testing.assert_array_equal(a, b)
        assert a.min() >= -10.0 and a.max() <= 10.0
        # crude distribution check on the inverse-CDF path
        assert abs(a.mean()) < 0.1
        assert abs(a.std() - 1.0) < 0.1
