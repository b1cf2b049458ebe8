"""Chance-constrained stochastic MPC on expanded chaos coefficients.

The pipeline: expand the uncertain linear system by Galerkin projection
(:mod:`polychaos.propagate`), condense the expanded block dynamics over the
horizon so every predicted coefficient vector is affine in the feedforward
sequence, replace each per-row chance constraint by its two-moment surrogate
(a second-order cone on the coefficients), and solve the resulting cone
program with an operator-splitting (ADMM) method that supports warm starts
across receding-horizon steps.

Two policies are supported.  ``open_loop`` optimizes the raw input sequence.
``prestabilized`` optimizes a feedforward on top of the linear feedback
``u = eta - K (x - E[x])``; the feedback acts only on the higher-order
coefficient blocks (the mean deviation), which keeps the applied input equal
to ``eta_0`` after each Dirac re-initialization while shrinking the predicted
dispersion the constraints see.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from polychaos import pce as pce_mod
from polychaos import propagate
from polychaos.chance import ChanceSpec, Polytope
from polychaos.multibasis import triple_products

_RHO = 1.0
_ALPHA = 1.6
_CHECK_EVERY = 25
_STALL_WINDOW = 1000  # iterations without progress before declaring infeasible


def dare_solve(A, B, Q, R, tol=1e-12, max_iter=10000):
    """Fixed-point solution of the discrete algebraic Riccati equation.

    Iterates P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA from P = Q until the
    update falls below ``tol`` in max-norm.  Divergence or exhausting
    ``max_iter`` raises, since both indicate an unstabilizable pair or a
    badly scaled problem.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        gain = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ gain
        P_next = 0.5 * (P_next + P_next.T)
        delta = np.max(np.abs(P_next - P))
        P = P_next
        if delta <= tol:
            return P
        if not np.all(np.isfinite(P)) or np.max(np.abs(P)) > 1e14:
            raise RuntimeError("Riccati iteration diverged; the mean pair is "
                               "likely unstabilizable")
    raise RuntimeError(f"Riccati iteration did not reach tol={tol:g} within "
                       f"{max_iter} iterations")


def lqr_gain(A, B, Q, R, tol=1e-12, max_iter=10000):
    """Infinite-horizon LQR gain K for the convention u = -K x."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    P = dare_solve(A, B, Q, R, tol=tol, max_iter=max_iter)
    BtP = B.T @ P
    return np.linalg.solve(np.atleast_2d(R) + BtP @ B, BtP @ A)


def _check_symmetric_psd(M, name, definite=False):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1] or np.max(np.abs(M - M.T)) > 1e-10:
        raise ValueError(f"{name} must be symmetric")
    eigs = np.linalg.eigvalsh(M)
    if definite and eigs[0] <= 1e-12:
        raise ValueError(f"{name} must be positive definite "
                         f"(min eigenvalue {eigs[0]:.3g})")
    if not definite and eigs[0] < -1e-10:
        raise ValueError(f"{name} must be positive semidefinite "
                         f"(min eigenvalue {eigs[0]:.3g})")
    return M


@dataclass(eq=False)
class SmpcProblem:
    """Horizon, weights, input box, state chance constraints and policy.

    ``P_f`` defaults to the Riccati cost matrix of the mean system; ``K``
    defaults to the mean-system LQR gain when the policy is prestabilized.
    Chance constraints require both ``polytope`` and ``chance`` (one budget
    per polytope row, re-used at every prediction step).
    """

    horizon: int
    Q: np.ndarray
    R: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray
    P_f: np.ndarray = None
    polytope: Polytope = None
    chance: ChanceSpec = None
    policy: str = "open_loop"
    K: np.ndarray = None

    def __post_init__(self):
        if not isinstance(self.horizon, (int, np.integer)) or self.horizon < 1:
            raise ValueError(f"horizon must be a positive integer, got {self.horizon!r}")
        self.Q = _check_symmetric_psd(self.Q, "Q")
        self.R = _check_symmetric_psd(self.R, "R", definite=True)
        if self.P_f is not None:
            self.P_f = _check_symmetric_psd(self.P_f, "P_f")
        self.u_lo = np.atleast_1d(np.asarray(self.u_lo, dtype=float))
        self.u_hi = np.atleast_1d(np.asarray(self.u_hi, dtype=float))
        if self.u_lo.shape != self.u_hi.shape or np.any(self.u_lo > self.u_hi):
            raise ValueError("input bounds must satisfy u_lo <= u_hi elementwise")
        if self.policy not in ("open_loop", "prestabilized"):
            raise ValueError(f"unknown policy {self.policy!r}")
        if (self.polytope is None) != (self.chance is None):
            raise ValueError("state constraints need both a polytope and a chance spec")
        if self.polytope is not None and self.chance.n_rows != self.polytope.n_rows:
            raise ValueError(f"chance spec budgets {self.chance.n_rows} rows but the "
                             f"polytope has {self.polytope.n_rows}")
        if self.K is not None:
            self.K = np.atleast_2d(np.asarray(self.K, dtype=float))


@dataclass(eq=False)
class ConeProgram:
    """min 0.5 x'Hx + f'x + const  s.t.  lb <= x <= ub and, per cone block,
    C x + c0 in the second-order cone (first entry bounds the rest)."""

    H: np.ndarray
    f: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    cones: list  # of (C, c0) pairs
    const: float = 0.0
    input_shape: tuple = None

    def __post_init__(self):
        self.H = _check_symmetric_psd(self.H, "H")
        n = self.H.shape[0]
        self.f = np.asarray(self.f, dtype=float).reshape(n)
        self.lb = np.asarray(self.lb, dtype=float).reshape(n)
        self.ub = np.asarray(self.ub, dtype=float).reshape(n)
        if np.any(self.lb > self.ub):
            raise ValueError("box bounds must satisfy lb <= ub")
        for k, (C, c0) in enumerate(self.cones):
            C = np.atleast_2d(np.asarray(C, dtype=float))
            c0 = np.atleast_1d(np.asarray(c0, dtype=float))
            if C.shape != (c0.size, n):
                raise ValueError(f"cone block {k} has inconsistent shapes")
            self.cones[k] = (C, c0)

    @property
    def n_var(self):
        return self.H.shape[0]


@dataclass(eq=False)
class Solution:
    """Cone-program solution with the splitting state kept for warm starts."""

    x: np.ndarray
    objective: float
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    inputs: np.ndarray = None
    z: np.ndarray = field(default=None, repr=False)
    y: np.ndarray = field(default=None, repr=False)


def _project(w, n_box, lb, ub, groups):
    """Project the stacked constraint vector onto box x product-of-cones."""
    out = w.copy()
    np.clip(w[:n_box], lb, ub, out=out[:n_box])
    for dim, starts in groups:
        idx = starts[:, None] + np.arange(dim)[None, :]
        blocks = w[idx]
        t = blocks[:, 0]
        u = blocks[:, 1:]
        nu = np.linalg.norm(u, axis=1)
        inside = nu <= t
        zero = nu <= -t
        scale_mask = ~(inside | zero)
        proj = blocks.copy()
        proj[zero] = 0.0
        if np.any(scale_mask):
            tau = 0.5 * (t[scale_mask] + nu[scale_mask])
            safe = np.maximum(nu[scale_mask], 1e-300)
            proj[scale_mask, 0] = tau
            proj[scale_mask, 1:] = u[scale_mask] * (tau / safe)[:, None]
        out[idx] = proj
    return out


def solve_cone(program, tol=1e-8, max_iter=50000, warm=None):
    """Operator-splitting (ADMM) solve of a box-and-cone quadratic program.

    Fixed penalty rho = 1 with over-relaxation 1.6; residuals are checked
    every 25 iterations and the method reports ``infeasible`` when the primal
    residual stalls for 1000 iterations well above tolerance.  ``warm`` takes
    a previous :class:`Solution` on the same program structure.
    """
    n = program.n_var
    mats = [np.eye(n)] + [C for C, _ in program.cones]
    offs = [np.zeros(n)] + [c0 for _, c0 in program.cones]
    M = np.vstack(mats)
    m_off = np.concatenate(offs)
    groups = _cone_groups(n, [c0.size for _, c0 in program.cones])

    MT = M.T
    K = program.H + _RHO * (MT @ M)
    K_inv = np.linalg.inv(K)
    q = program.f + _RHO * (MT @ m_off)

    if warm is not None and warm.z is not None and warm.z.size == m_off.size:
        z = warm.z.copy()
        y = warm.y.copy()
    else:
        z = m_off.copy()
        y = np.zeros_like(m_off)

    x = np.zeros(n)
    status = "max_iter"
    rp = rd = math.inf
    history = []  # primal residuals at check points, for the stall heuristic
    window = _STALL_WINDOW // _CHECK_EVERY
    it = 0
    for it in range(1, max_iter + 1):
        x = K_inv @ (MT @ (_RHO * z - y) - q)
        v = M @ x + m_off
        vh = _ALPHA * v + (1.0 - _ALPHA) * z
        z = _project(vh + y / _RHO, n, program.lb, program.ub, groups)
        y = y + _RHO * (vh - z)
        if it % _CHECK_EVERY == 0 or it == max_iter:
            rp = float(np.max(np.abs(v - z)))
            rd = float(np.max(np.abs(program.H @ x + program.f + MT @ y)))
            if rp <= tol and rd <= tol:
                status = "optimal"
                break
            history.append(rp)
            # infeasible problems plateau: less than 2x progress over the
            # whole window while still far from tolerance
            if len(history) > window and rp > max(1e3 * tol, 1e-7) \
                    and rp > 0.5 * history[-window - 1]:
                status = "infeasible"
                break
            if not np.all(np.isfinite(x)):
                raise FloatingPointError("cone solver iterates diverged")

    obj = float(0.5 * x @ program.H @ x + program.f @ x + program.const)
    inputs = None
    if program.input_shape is not None and status == "optimal":
        inputs = x.reshape(program.input_shape).copy()
    return Solution(x, obj, status, it, rp, rd, inputs, z, y)


def _cone_groups(n_box, dims):
    """Group cone blocks of equal dimension for vectorized projection."""
    by_dim = {}
    offset = n_box
    for dim in dims:
        by_dim.setdefault(dim, []).append(offset)
        offset += dim
    return [(dim, np.asarray(starts)) for dim, starts in sorted(by_dim.items())]


class _Condensed:
    """Horizon condensation of the expanded dynamics, reusable across steps.

    Everything that does not depend on the current stacked state is
    precomputed: prediction maps, the quadratic objective, the cone rows.
    Only the affine offsets are refreshed per solve.
    """

    def __init__(self, prob, expanded):
        self.prob = prob
        self.expanded = expanded
        size = expanded.basis.size
        n_x, n_u, N = expanded.n_x, expanded.n_u, prob.horizon
        self.n_eta = N * n_u

        a0 = expanded.A_hat[:n_x, :n_x]
        b0 = expanded.B_hat[:n_x, :]
        if prob.policy == "prestabilized":
            K = prob.K if prob.K is not None else lqr_gain(a0, b0, prob.Q, prob.R)
            if K.shape != (n_u, n_x):
                raise ValueError(f"feedback gain has shape {K.shape}, expected "
                                 f"({n_u}, {n_x})")
            sel = np.eye(size)
            sel[0, 0] = 0.0  # feedback ignores the mean block
            a_cl = expanded.A_hat - _expanded_input_matrix(expanded) @ np.kron(sel, K)
            self.K = K
        else:
            a_cl = expanded.A_hat
            self.K = None

        p_f = prob.P_f if prob.P_f is not None else dare_solve(a0, b0, prob.Q, prob.R)
        q_bar = np.kron(np.eye(size), prob.Q)
        if self.K is not None:
            damp = np.kron(np.diag(np.r_[0.0, np.ones(size - 1)]),
                           self.K.T @ prob.R @ self.K)
            q_bar = q_bar + damp
        p_bar = np.kron(np.eye(size), p_f)

        dim = expanded.dim
        # prediction maps: X_k = F[k] X0 + G[k] eta
        F = [np.eye(dim)]
        G = [np.zeros((dim, self.n_eta))]
        for k in range(N):
            F.append(a_cl @ F[k])
            g_next = a_cl @ G[k]
            g_next[:, k * n_u:(k + 1) * n_u] += expanded.B_hat
            G.append(g_next)
        self.F, self.G = F, G

        H = np.kron(np.eye(N), 2.0 * prob.R)
        W = np.zeros((self.n_eta, dim))
        V = np.zeros((dim, dim))
        for k in range(N):
            H += 2.0 * G[k].T @ q_bar @ G[k]
            W += 2.0 * G[k].T @ q_bar @ F[k]
            V += F[k].T @ q_bar @ F[k]
        H += 2.0 * G[N].T @ p_bar @ G[N]
        W += 2.0 * G[N].T @ p_bar @ F[N]
        V += F[N].T @ p_bar @ F[N]
        self.H = 0.5 * (H + H.T)
        self.W, self.V = W, V

        self.lb = np.tile(prob.u_lo, N)
        self.ub = np.tile(prob.u_hi, N)

        # cone rows: one block per (step k >= 1, polytope row i)
        self.cone_C = []
        self.cone_sel = []  # (k, row selector matrices) to refresh offsets
        if prob.polytope is not None:
            if prob.polytope.n_dims != n_x:
                raise ValueError(f"polytope acts on {prob.polytope.n_dims} coordinates "
                                 f"but the state has {n_x}")
            g_all = np.kron(np.eye(size), prob.polytope.G)  # rows (l, i) stacked
            scale = np.sqrt((1.0 - prob.chance.eps) / prob.chance.eps)
            m_rows = prob.polytope.n_rows
            for k in range(1, N + 1):
                rows_eta = g_all @ G[k]  # (size * m, n_eta)
                rows_x0 = g_all @ F[k]
                for i in range(m_rows):
                    mean_row = rows_eta[i]
                    hi_rows = rows_eta[i + m_rows::m_rows]
                    C = np.vstack([-mean_row, scale[i] * hi_rows])
                    sel = np.vstack([-rows_x0[i], scale[i] * rows_x0[i + m_rows::m_rows]])
                    self.cone_C.append(C)
                    self.cone_sel.append((i, sel))

    def program(self, x0_stacked):
        """Cone program for the current stacked initial coefficients."""
        x0 = np.asarray(x0_stacked, dtype=float).reshape(self.expanded.dim)
        f = self.W @ x0
        const = float(x0 @ self.V @ x0)
        cones = []
        d = self.prob.polytope.d if self.prob.polytope is not None else None
        for C, (i, sel) in zip(self.cone_C, self.cone_sel):
            c0 = sel @ x0
            c0[0] += d[i]
            cones.append((C, c0))
        return ConeProgram(self.H, f, self.lb, self.ub, cones, const,
                           input_shape=(self.prob.horizon, self.expanded.n_u))


def _expanded_input_matrix(expanded):
    """Block matrix mapping stacked input coefficients through B(theta).

    Built from the same triple products as the state expansion; needed when
    the applied input is itself uncertain (prestabilized feedback).
    """
    tensor = triple_products(expanded.basis)
    size = expanded.basis.size
    b_stack = expanded.B_hat.reshape(size, expanded.n_x, expanded.n_u)
    blocks = np.einsum("ijl,jmn->limn", tensor.dense, b_stack)
    return blocks.transpose(0, 2, 1, 3).reshape(size * expanded.n_x,
                                                size * expanded.n_u)


def build_surrogate(prob, expanded, x0):
    """Condense the chance-constrained problem into a cone program.

    ``x0`` may be a deterministic state vector, a state :class:`PceVector`,
    or an already-stacked coefficient vector of length ``expanded.dim``.
    """
    cond = _Condensed(prob, expanded)
    return cond.program(_stack_initial(expanded, x0))


def _stack_initial(expanded, x0):
    if isinstance(x0, pce_mod.PceVector):
        return expanded.stack(x0)
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.size == expanded.dim:
        return x0
    if x0.size == expanded.n_x:
        return expanded.stack(pce_mod.dirac(expanded.basis, x0))
    raise ValueError(f"initial condition of size {x0.size} matches neither the state "
                     f"({expanded.n_x}) nor the stacked coefficients ({expanded.dim})")


@dataclass(eq=False)
class ClosedLoopTrace:
    """Receding-horizon record: one row per applied step.

    ``violations[t]`` flags whether the successor state x_{t+1} left the
    polytope (chance constraints speak about predicted successors, so that
    is the state the guarantee covers).  ``fallbacks[t]`` marks steps where
    the solver failed and the shifted previous plan was applied instead.
    """

    states: np.ndarray
    inputs: np.ndarray
    violations: np.ndarray
    stage_costs: np.ndarray
    statuses: list
    iterations: np.ndarray
    fallbacks: np.ndarray
    seed: int

    @property
    def n_steps(self):
        return self.inputs.shape[0]

    def violation_rate(self):
        return float(np.mean(self.violations))

    def write_csv(self, path):
        n_x = self.states.shape[1]
        n_u = self.inputs.shape[1]
        cols = (["step"] + [f"x_{i}" for i in range(n_x)]
                + [f"u_{j}" for j in range(n_u)]
                + ["violated", "stage_cost", "status", "iterations", "fallback"])
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for t in range(self.n_steps):
                cells = [str(t)]
                cells += [repr(float(v)) for v in self.states[t]]
                cells += [repr(float(v)) for v in self.inputs[t]]
                cells.append(str(int(self.violations[t])))
                cells.append(repr(float(self.stage_costs[t])))
                cells.append(self.statuses[t])
                cells.append(str(int(self.iterations[t])))
                cells.append(str(int(self.fallbacks[t])))
                fh.write(",".join(cells) + "\n")


def receding_horizon(prob, system, x0, steps, seed, solver_tol=1e-8,
                     solver_max_iter=50000):
    """Closed-loop run against one sampled realization of the uncertainty.

    The true parameter is drawn once from the germ (time-invariant), the
    expansion is re-initialized to a Dirac at the measured state every step,
    and consecutive solves are warm-started.  If a solve fails mid-run the
    shifted remainder of the previous plan is applied and the step flagged;
    failure at the first step raises.
    """
    if steps < 1:
        raise ValueError("need at least one closed-loop step")
    tensor = triple_products(system.basis)
    expanded = propagate.expand_linear(system, tensor)
    cond = _Condensed(prob, expanded)

    germ_star = propagate.sample_germ(system.basis, seed, 1)[0]
    a_true, b_true = system.sample_matrices(germ_star[None, :])
    a_true, b_true = a_true[0], b_true[0]

    n_x, n_u = system.n_x, system.n_u
    states = np.zeros((steps + 1, n_x))
    states[0] = np.asarray(x0, dtype=float).reshape(n_x)
    inputs = np.zeros((steps, n_u))
    violations = np.zeros(steps, dtype=bool)
    stage_costs = np.zeros(steps)
    iterations = np.zeros(steps, dtype=int)
    fallbacks = np.zeros(steps, dtype=bool)
    statuses = []

    warm = None
    plan = None  # last accepted input sequence, shifted as a fallback
    for t in range(steps):
        x0_stacked = _stack_initial(expanded, states[t])
        sol = solve_cone(cond.program(x0_stacked), tol=solver_tol,
                         max_iter=solver_max_iter, warm=warm)
        warm = sol
        statuses.append(sol.status)
        iterations[t] = sol.iterations
        if sol.status == "optimal":
            plan = sol.inputs
        else:
            if plan is None or plan.shape[0] < 2:
                raise RuntimeError(f"solver returned {sol.status!r} at step {t} with "
                                   "no previous plan to fall back on")
            plan = np.vstack([plan[1:], plan[-1:]])
            fallbacks[t] = True
        u = plan[0]
        inputs[t] = u
        stage_costs[t] = states[t] @ prob.Q @ states[t] + u @ prob.R @ u
        states[t + 1] = a_true @ states[t] + b_true @ u
        if prob.polytope is not None:
            violations[t] = not prob.polytope.contains(states[t + 1])
    return ClosedLoopTrace(states, inputs, violations, stage_costs, statuses,
                           iterations, fallbacks, int(seed))
