"""Intrusive Galerkin propagation of uncertain linear dynamics, plus a
deterministic Monte Carlo reference.

Discrete-time systems x+ = A(theta) x + B(theta) u with polynomial parameter
dependence become exact block-linear dynamics on the stacked chaos
coefficients: block (l, i) of the expanded transition matrix is
sum_j T(i, j, l) A_j, where A_j are the coefficient matrices of A and T is
the triple-product tensor.  The continuous-time counterpart here is the
scalar decay family dy/dt = -theta(xi) y, whose coefficient ODE is linear
and is integrated by fixed-step RK4.

The Monte Carlo path samples the germ in fixed-size chunks, each driven by
its own Philox substream, so results are byte-identical for a given seed no
matter how many worker threads run the chunks.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from polychaos import multibasis, pce

_CHUNK = 4096

DEFAULT_ODE_DT = 1e-3


def worker_count():
    """Worker threads for Monte Carlo chunks; POLYCHAOS_THREADS caps it."""
    raw = os.environ.get("POLYCHAOS_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        n = min(4, os.cpu_count() or 1)
    return n


@dataclass(eq=False)
class ParametricLinearSystem:
    """Discrete-time linear system whose matrices depend on the germ.

    ``A`` has one coefficient row per entry of the transition matrix in
    row-major order (n_x * n_x rows), ``B`` likewise with n_x * n_u rows.
    """

    A: pce.PceVector
    B: pce.PceVector
    n_x: int
    n_u: int

    def __post_init__(self):
        if not self.A.basis.same_basis(self.B.basis):
            raise ValueError("A and B live on different bases")
        if self.A.n_out != self.n_x * self.n_x:
            raise ValueError(f"A needs {self.n_x * self.n_x} coefficient rows, "
                             f"got {self.A.n_out}")
        if self.B.n_out != self.n_x * self.n_u:
            raise ValueError(f"B needs {self.n_x * self.n_u} coefficient rows, "
                             f"got {self.B.n_out}")

    @property
    def basis(self):
        return self.A.basis

    @classmethod
    def from_callbacks(cls, f_a, f_b, basis, n_x, n_u, rule=None):
        """Project matrix callbacks (germ point -> matrix) onto the basis."""
        fa = lambda xi: np.asarray(f_a(xi), dtype=float).reshape(n_x * n_x)
        fb = lambda xi: np.asarray(f_b(xi), dtype=float).reshape(n_x * n_u)
        return cls(pce.project_function(fa, basis, rule=rule),
                   pce.project_function(fb, basis, rule=rule), n_x, n_u)

    def coefficient_matrices(self):
        """A_j and B_j stacks of shape (L+1, n_x, n_x) and (L+1, n_x, n_u)."""
        size = self.basis.size
        a = self.A.coeffs.T.reshape(size, self.n_x, self.n_x)
        b = self.B.coeffs.T.reshape(size, self.n_x, self.n_u)
        return a, b

    def mean_matrices(self):
        a, b = self.coefficient_matrices()
        return a[0], b[0]

    def sample_matrices(self, points):
        """Realize (A, B) at germ points: shapes (P, n_x, n_x), (P, n_x, n_u)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        a = pce.sample_eval(self.A, pts).reshape(-1, self.n_x, self.n_x)
        b = pce.sample_eval(self.B, pts).reshape(-1, self.n_x, self.n_u)
        return a, b


@dataclass(eq=False)
class ExpandedLinearSystem:
    """Deterministic block dynamics on stacked chaos coefficients.

    The stacked state X holds the coefficient vectors of all n_x states,
    ordered coefficient-major: block l (length n_x) is the degree-l
    coefficient of the state vector.
    """

    A_hat: np.ndarray
    B_hat: np.ndarray
    basis: multibasis.TotalDegreeBasis
    n_x: int
    n_u: int

    @property
    def dim(self):
        return self.A_hat.shape[0]

    def stack(self, p):
        """Stacked coefficient vector of a state expansion (n_x rows)."""
        if p.n_out != self.n_x:
            raise ValueError(f"state expansion has {p.n_out} rows, expected {self.n_x}")
        return p.coeffs.T.reshape(-1)

    def unstack(self, x_stacked):
        """Inverse of :meth:`stack`."""
        coeffs = np.asarray(x_stacked, dtype=float).reshape(self.basis.size, self.n_x).T
        return pce.PceVector(coeffs, self.basis)


def expand_linear(system, tensor):
    """Galerkin-expand a parametric linear system into block-linear dynamics."""
    if not tensor.basis.same_basis(system.basis):
        raise ValueError("tensor was built on a different basis")
    size = system.basis.size
    a_stack, b_stack = system.coefficient_matrices()
    # block (l, i) = sum_j T[i, j, l] A_j
    blocks = np.einsum("ijl,jmn->limn", tensor.dense, a_stack)
    a_hat = blocks.transpose(0, 2, 1, 3).reshape(size * system.n_x, size * system.n_x)
    b_hat = b_stack.reshape(size * system.n_x, system.n_u)
    return ExpandedLinearSystem(a_hat, b_hat, system.basis, system.n_x, system.n_u)


def step(expanded, x_stacked, u):
    """One step of the expanded dynamics."""
    x = np.asarray(x_stacked, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.shape != (expanded.dim,):
        raise ValueError(f"stacked state has shape {x.shape}, expected ({expanded.dim},)")
    if u.shape != (expanded.n_u,):
        raise ValueError(f"input has shape {u.shape}, expected ({expanded.n_u},)")
    return expanded.A_hat @ x + expanded.B_hat @ u


@dataclass(eq=False)
class GalerkinOde:
    """Coefficient ODE of scalar decay dy/dt = -theta(xi) y.

    ``rhs`` is the constant matrix R with da/dt = a R^T for coefficient rows
    a; it is -sum_j rate_j T(i, j, l) in entry (l, i).
    """

    rate: pce.PceVector
    tensor: multibasis.TripleProductTensor
    rhs: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.rate.n_out != 1:
            raise ValueError("decay rate must be a scalar expansion")
        if not self.tensor.basis.same_basis(self.rate.basis):
            raise ValueError("tensor was built on a different basis")
        self.rhs = -np.einsum("j,ijl->li", self.rate.coeffs[0], self.tensor.dense)


def galerkin_ode_step(ode, a, dt):
    """One classical RK4 step of the coefficient ODE."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[1] != ode.rate.basis.size:
        raise ValueError(f"coefficient state has {a.shape[1]} columns, expected "
                         f"{ode.rate.basis.size}")
    rt = ode.rhs.T
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = a @ rt
        k2 = (a + 0.5 * dt * k1) @ rt
        k3 = (a + 0.5 * dt * k2) @ rt
        k4 = (a + dt * k3) @ rt
        out = a + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("coefficient ODE diverged; reduce dt")
    return out


def galerkin_ode_integrate(ode, a0, t_final, dt=DEFAULT_ODE_DT, n_record=None):
    """Integrate to ``t_final`` with fixed-step RK4.

    Returns ``(times, states)`` where ``states[k]`` is the coefficient array
    at ``times[k]``.  ``n_record`` thins the stored trajectory (endpoints are
    always kept); by default every step is recorded.
    """
    if t_final < 0 or dt <= 0:
        raise ValueError("need t_final >= 0 and dt > 0")
    n_steps = max(1, int(round(t_final / dt))) if t_final > 0 else 0
    h = t_final / n_steps if n_steps else 0.0
    a = np.atleast_2d(np.asarray(a0, dtype=float)).copy()
    states = [a.copy()]
    for _ in range(n_steps):
        a = galerkin_ode_step(ode, a, h)
        states.append(a.copy())
    times = np.linspace(0.0, t_final, n_steps + 1)
    if n_record is not None and n_record + 1 < len(times):
        keep = np.unique(np.round(np.linspace(0, n_steps, n_record + 1)).astype(int))
        times = times[keep]
        states = [states[k] for k in keep]
    return times, np.asarray(states)


@dataclass(eq=False)
class McSummary:
    """Streaming Monte Carlo moments along a trajectory.

    ``mean``/``variance``/``stderr`` have one row per recorded time and one
    column per state; ``variance`` is the unbiased estimate and ``stderr``
    is the standard error of the mean.
    """

    times: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    stderr: np.ndarray
    n_samples: int
    seed: int

    def write_csv(self, path):
        n_x = self.mean.shape[1]
        cols = (["time"] + [f"mean_{i}" for i in range(n_x)]
                + [f"var_{i}" for i in range(n_x)]
                + [f"stderr_{i}" for i in range(n_x)])
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for k in range(len(self.times)):
                row = [self.times[k], *self.mean[k], *self.variance[k], *self.stderr[k]]
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _chunk_rng(seed, chunk_index):
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(chunk_index,))
    return np.random.Generator(np.random.Philox(ss))


def sample_germ(basis, seed, n_samples, chunk_index=0):
    """Germ draws (n_samples, n_dims) from the chunk's Philox substream."""
    rng = _chunk_rng(seed, chunk_index)
    cols = [fam.measure.sample(rng, n_samples) for fam in basis.families]
    return np.column_stack(cols)


def mc_propagate(model, x0, inputs, n_samples, seed):
    """Monte Carlo reference moments, exact through the sampled dynamics.

    For a :class:`ParametricLinearSystem`, ``inputs`` is the (T, n_u) input
    sequence and moments are recorded at steps 0..T.  For a
    :class:`GalerkinOde`, ``inputs`` is the array of record times and each
    sampled rate is propagated by the closed-form exponential.  Sampling is
    chunked with per-chunk Philox substreams: the summary is byte-identical
    for a given seed regardless of the worker-thread count.
    """
    if n_samples < 2:
        raise ValueError("need at least 2 samples for a variance estimate")
    if isinstance(model, GalerkinOde):
        times = np.asarray(inputs, dtype=float)
        if times.ndim != 1 or times.size == 0:
            raise ValueError("for the decay model, inputs must be a 1-D array of times")
        basis = model.rate.basis
        y0 = float(np.atleast_1d(np.asarray(x0, dtype=float))[0])

        def run_chunk(index, count):
            pts = sample_germ(basis, seed, count, index)
            rates = pce.sample_eval(model.rate, pts)[:, 0]
            traj = y0 * np.exp(-np.outer(rates, times))  # (count, T)
            return traj.sum(axis=0)[:, None], (traj ** 2).sum(axis=0)[:, None]
    elif isinstance(model, ParametricLinearSystem):
        u_seq = np.atleast_2d(np.asarray(inputs, dtype=float))
        if u_seq.shape[1] != model.n_u:
            raise ValueError(f"inputs must have {model.n_u} columns")
        x_init = np.asarray(x0, dtype=float).reshape(model.n_x)
        times = np.arange(u_seq.shape[0] + 1, dtype=float)
        basis = model.basis

        def run_chunk(index, count):
            pts = sample_germ(basis, seed, count, index)
            a_s, b_s = model.sample_matrices(pts)
            x = np.broadcast_to(x_init, (count, model.n_x)).copy()
            s1 = np.zeros((len(times), model.n_x))
            s2 = np.zeros((len(times), model.n_x))
            s1[0] = count * x_init
            s2[0] = count * x_init ** 2
            for k, u in enumerate(u_seq):
                x = np.einsum("cij,cj->ci", a_s, x) + b_s @ u
                s1[k + 1] = x.sum(axis=0)
                s2[k + 1] = (x ** 2).sum(axis=0)
            return s1, s2
    else:
        raise TypeError(f"cannot Monte Carlo propagate a {type(model).__name__}")

    sizes = [_CHUNK] * (n_samples // _CHUNK)
    if n_samples % _CHUNK:
        sizes.append(n_samples % _CHUNK)
    workers = worker_count()
    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(run_chunk, range(len(sizes)), sizes))
    else:
        partials = [run_chunk(i, c) for i, c in enumerate(sizes)]
    # reduce in chunk order so the summation sequence never depends on timing
    s1 = partials[0][0].copy()
    s2 = partials[0][1].copy()
    for p1, p2 in partials[1:]:
        s1 += p1
        s2 += p2
    mean = s1 / n_samples
    var = np.maximum(s2 - n_samples * mean ** 2, 0.0) / (n_samples - 1)
    stderr = np.sqrt(var / n_samples)
    return McSummary(times, mean, var, stderr, int(n_samples), int(seed))
