import math

import numpy as np
import pytest
import scipy.linalg

from polychaos import pce
from polychaos.multibasis import (
    eval_basis,
    monomial_to_basis,
    tensor_rule,
    total_degree_basis,
    triple_products,
)
from polychaos.orthopoly import MeasureDescriptor, build_family
from polychaos.propagate import (
    GalerkinOde,
    McSummary,
    ParametricLinearSystem,
    expand_linear,
    galerkin_ode_integrate,
    galerkin_ode_step,
    mc_propagate,
    sample_germ,
    step,
)


def uniform_basis(n_dims, degree):
    fam = build_family(MeasureDescriptor.uniform(), degree)
    return total_degree_basis([fam] * n_dims, degree)


def affine_scalar(basis, const, lin_coeffs):
    """PCE rows for entries affine in the germ: const + sum lin_i * xi_i."""
    row = const * monomial_to_basis(basis, (0,) * basis.n_dims)
    for dim, c in enumerate(lin_coeffs):
        expo = tuple(1 if k == dim else 0 for k in range(basis.n_dims))
        row = row + c * monomial_to_basis(basis, expo)
    return row


def rotation_system(basis, spread=0.1):
    """2-state system with an uncertain off-diagonal coupling."""
    rows_a = np.zeros((4, basis.size))
    rows_a[0] = affine_scalar(basis, 0.9, [0.0])
    rows_a[1] = affine_scalar(basis, 0.2, [spread])
    rows_a[2] = affine_scalar(basis, -0.2, [-spread])
    rows_a[3] = affine_scalar(basis, 0.9, [0.0])
    rows_b = np.zeros((2, basis.size))
    rows_b[0] = affine_scalar(basis, 0.5, [0.0])
    rows_b[1] = affine_scalar(basis, 1.0, [0.0])
    return ParametricLinearSystem(pce.PceVector(rows_a, basis),
                                  pce.PceVector(rows_b, basis), 2, 1)


def decay_ode(degree):
    """dy/dt = -theta y with theta ~ U[0.5, 1.5]: theta = 1 + 0.5 xi."""
    basis = uniform_basis(1, degree)
    rate = pce.PceVector(affine_scalar(basis, 1.0, [0.5]), basis)
    return GalerkinOde(rate, triple_products(basis))


class TestExpansion:
    def test_deterministic_system_is_block_diagonal(self):
        basis = uniform_basis(1, 2)
        a0 = np.array([[0.5, 0.1], [0.0, 0.8]])
        b0 = np.array([[1.0], [0.3]])
        sys = ParametricLinearSystem(
            pce.PceVector(np.outer(a0.ravel(), np.eye(basis.size)[0]), basis),
            pce.PceVector(np.outer(b0.ravel(), np.eye(basis.size)[0]), basis), 2, 1)
        exp = expand_linear(sys, triple_products(basis))
        np.testing.assert_allclose(exp.A_hat, np.kron(np.eye(basis.size), a0),
                                   atol=1e-13)
        np.testing.assert_allclose(exp.B_hat[:2], b0, atol=1e-15)
        np.testing.assert_allclose(exp.B_hat[2:], 0.0, atol=1e-15)

    def test_expanded_steps_match_exact_projection(self):
        # with affine A and degree 4 truncation, the first 4 steps stay inside
        # the basis, so Galerkin propagation must equal the exact projection
        basis = uniform_basis(1, 4)
        sys = rotation_system(basis, spread=0.3)
        exp = expand_linear(sys, triple_products(basis))
        x0 = np.array([1.0, -0.5])
        us = [np.array([0.4]), np.array([0.0]), np.array([-0.2]), np.array([0.1])]

        x_stacked = exp.stack(pce.dirac(basis, x0))
        rule = tensor_rule(basis, 8)
        a_s, b_s = sys.sample_matrices(rule.points)
        x_exact = np.broadcast_to(x0, (rule.points.shape[0], 2)).copy()
        table = eval_basis(basis, rule.points)
        for u in us:
            x_stacked = step(exp, x_stacked, u)
            x_exact = np.einsum("cij,cj->ci", a_s, x_exact) + b_s @ u
            proj = (rule.weights[:, None] * table).T @ x_exact  # (size, 2)
            np.testing.assert_allclose(x_stacked, proj.ravel(), atol=1e-11)

    def test_stack_round_trip(self):
        basis = uniform_basis(2, 2)
        sys = ParametricLinearSystem(
            pce.PceVector(np.zeros((4, basis.size)), basis),
            pce.PceVector(np.zeros((2, basis.size)), basis), 2, 1)
        exp = expand_linear(sys, triple_products(basis))
        p = pce.PceVector(np.arange(2.0 * basis.size).reshape(2, -1), basis)
        np.testing.assert_array_equal(exp.unstack(exp.stack(p)).coeffs, p.coeffs)

    def test_from_callbacks(self):
        basis = uniform_basis(1, 2)
        f_a = lambda xi: np.array([[0.9, 0.1 * float(np.atleast_1d(xi)[0])], [0.0, 0.8]])
        f_b = lambda xi: np.array([[1.0], [0.0]])
        sys = ParametricLinearSystem.from_callbacks(f_a, f_b, basis, 2, 1)
        # entry (0,1) is 0.1 xi = 0.1/sqrt(3) phi_1
        assert sys.A.coeffs[1, 1] == pytest.approx(0.1 / math.sqrt(3.0), abs=1e-12)
        assert sys.A.coeffs[1, 0] == pytest.approx(0.0, abs=1e-13)

    def test_shape_validation(self):
        basis = uniform_basis(1, 2)
        good_a = pce.PceVector(np.zeros((4, basis.size)), basis)
        bad_b = pce.PceVector(np.zeros((3, basis.size)), basis)
        with pytest.raises(ValueError, match="B needs"):
            ParametricLinearSystem(good_a, bad_b, 2, 1)
        sys = rotation_system(basis)
        exp = expand_linear(sys, triple_products(basis))
        with pytest.raises(ValueError, match="stacked state"):
            step(exp, np.zeros(3), np.zeros(1))
        with pytest.raises(ValueError, match="input"):
            step(exp, np.zeros(exp.dim), np.zeros(2))


class TestGalerkinOde:
    def test_deterministic_rate_decays_exactly(self):
        basis = uniform_basis(1, 3)
        rate = pce.dirac(basis, 2.0)
        ode = GalerkinOde(rate, triple_products(basis))
        a0 = np.zeros((1, basis.size))
        a0[0, 0] = 1.0
        _, states = galerkin_ode_integrate(ode, a0, 1.0, dt=1e-3)
        assert states[-1][0, 0] == pytest.approx(math.exp(-2.0), rel=1e-10)
        np.testing.assert_allclose(states[-1][0, 1:], 0.0, atol=1e-12)

    def test_rk4_converges_at_fourth_order(self):
        ode = decay_ode(4)
        a0 = np.zeros((1, ode.rate.basis.size))
        a0[0, 0] = 1.0
        exact = a0 @ scipy.linalg.expm(ode.rhs).T
        errs = []
        for dt in (0.1, 0.05):
            a = a0.copy()
            for _ in range(int(round(1.0 / dt))):
                a = galerkin_ode_step(ode, a, dt)
            errs.append(np.max(np.abs(a - exact)))
        ratio = errs[0] / errs[1]
        assert 12.0 < ratio < 20.0

    def test_divergence_is_reported(self):
        basis = uniform_basis(1, 2)
        growth = GalerkinOde(pce.dirac(basis, -50.0), triple_products(basis))
        a = np.zeros((1, basis.size))
        a[0, 0] = 1.0
        with pytest.raises(FloatingPointError, match="diverged"):
            for _ in range(100):
                a = galerkin_ode_step(growth, a, 1.0)

    def test_record_thinning(self):
        ode = decay_ode(2)
        a0 = np.zeros((1, ode.rate.basis.size))
        a0[0, 0] = 1.0
        times, states = galerkin_ode_integrate(ode, a0, 1.0, dt=0.01, n_record=10)
        assert len(times) == 11
        assert times[0] == 0.0 and times[-1] == 1.0
        assert states.shape[0] == 11


class TestMonteCarlo:
    def test_decay_mc_matches_galerkin_within_stderr(self):
        ode = decay_ode(6)
        a0 = np.zeros((1, ode.rate.basis.size))
        a0[0, 0] = 1.0
        _, states = galerkin_ode_integrate(ode, a0, 1.0, dt=1e-3)
        g_mean = states[-1][0, 0]
        g_var = np.sum(states[-1][0, 1:] ** 2)
        summary = mc_propagate(ode, 1.0, np.array([1.0]), 20000, seed=42)
        assert abs(summary.mean[0, 0] - g_mean) < 4.0 * summary.stderr[0, 0]
        assert abs(summary.variance[0, 0] - g_var) < 0.1 * g_var

    def test_linear_mc_matches_galerkin_mean(self):
        basis = uniform_basis(1, 4)
        sys = rotation_system(basis, spread=0.3)
        exp = expand_linear(sys, triple_products(basis))
        us = np.array([[0.4], [0.0], [-0.2]])
        x = exp.stack(pce.dirac(basis, np.array([1.0, -0.5])))
        for u in us:
            x = step(exp, x, u)
        final = exp.unstack(x)
        summary = mc_propagate(sys, np.array([1.0, -0.5]), us, 20000, seed=7)
        for i in range(2):
            assert abs(summary.mean[-1, i] - pce.mean(final)[i]) \
                < 4.0 * summary.stderr[-1, i] + 1e-12
            assert abs(summary.variance[-1, i] - pce.variance(final)[i]) \
                < 0.05 * max(pce.variance(final)[i], 1e-6)

    def test_byte_identical_across_thread_counts(self, monkeypatch):
        ode = decay_ode(3)
        runs = []
        for threads in ("1", "3"):
            monkeypatch.setenv("POLYCHAOS_THREADS", threads)
            runs.append(mc_propagate(ode, 1.0, np.linspace(0.0, 1.0, 5), 10000, seed=3))
        np.testing.assert_array_equal(runs[0].mean, runs[1].mean)
        np.testing.assert_array_equal(runs[0].variance, runs[1].variance)
        np.testing.assert_array_equal(runs[0].stderr, runs[1].stderr)

    def test_seed_determinism_and_sensitivity(self):
        basis = uniform_basis(2, 2)
        a = sample_germ(basis, 11, 100)
        b = sample_germ(basis, 11, 100)
        c = sample_germ(basis, 12, 100)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        assert a.shape == (100, 2)

    def test_variance_nonnegative_and_csv_round_trip(self, tmp_path):
        ode = decay_ode(2)
        summary = mc_propagate(ode, 1.0, np.array([0.5, 1.0]), 500, seed=1)
        assert np.all(summary.variance >= 0.0)
        path = tmp_path / "mc.csv"
        summary.write_csv(path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "time,mean_0,var_0,stderr_0"
        assert len(lines) == 3
        # repr round-trip: parsing the text recovers the exact float
        assert float(lines[1].split(",")[1]) == summary.mean[0, 0]

    def test_input_validation(self):
        ode = decay_ode(2)
        with pytest.raises(ValueError, match="samples"):
            mc_propagate(ode, 1.0, np.array([1.0]), 1, seed=0)
        with pytest.raises(TypeError, match="propagate"):
            mc_propagate("nonsense", 1.0, np.array([1.0]), 10, seed=0)
        basis = uniform_basis(1, 2)
        sys = rotation_system(basis)
        with pytest.raises(ValueError, match="columns"):
            mc_propagate(sys, np.zeros(2), np.zeros((3, 2)), 10, seed=0)
