"""Backward matrix Riccati solvers and deterministic FBSDE two-point solvers.

With deterministic coefficients every backward equation loses its martingale
term and becomes an ODE, so the coupled forward-backward systems reduce to
two-point boundary-value problems.  This module provides:

* classical RK4 backward integration of the generic matrix Riccati equation
  dR = (G + F R - R E - R D R) dt with terminal data,
* the closed-form linearization (Radon's lemma) for dR = -R G R with
  M-matrix-structured G, which never blows up,
* the scalar Riccati closed form,
* the affine-ansatz solver Y = R Q + H for the linear execution game,
* a Picard fixed-point solver for generic Lipschitz two-point problems with
  bisection continuation when the horizon is too long for a contraction.
"""

from dataclasses import dataclass, field

import numpy as np

from . import matrix_core
from ._errors import IntegratorError, ParameterError, SolverError
from .execution_game import DriftOffsets, build_coeff_matrices, isaacs_feedback
from .grids import TimeGrid, sample

BLOWUP_THRESHOLD = 1e8
PICARD_TOL = 1e-10
PICARD_MAX_ITER = 500
MAX_BISECTION_DEPTH = 12


class CaseNotCoveredError(ParameterError):
    """Parameters fall outside the cases the affine ansatz solves."""


# ---------------------------------------------------------------------------
# RK4 building blocks
# ---------------------------------------------------------------------------

def _rk4_backward(f, terminal, ts):
    """Integrate z' = f(t, z) from ts[-1] down to ts[0]; returns z at all ts."""
    m = len(ts)
    z = np.asarray(terminal, dtype=float)
    out = np.empty((m,) + z.shape)
    out[-1] = z
    for k in range(m - 1, 0, -1):
        t1, t0 = ts[k], ts[k - 1]
        h = t1 - t0
        k1 = f(t1, z)
        k2 = f(t1 - 0.5 * h, z - 0.5 * h * k1)
        k3 = f(t1 - 0.5 * h, z - 0.5 * h * k2)
        k4 = f(t0, z - h * k3)
        z = z - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k - 1] = z
    return out


def _rk4_forward(f, initial, ts):
    m = len(ts)
    z = np.asarray(initial, dtype=float)
    out = np.empty((m,) + z.shape)
    out[0] = z
    for k in range(m - 1):
        t0, t1 = ts[k], ts[k + 1]
        h = t1 - t0
        k1 = f(t0, z)
        k2 = f(t0 + 0.5 * h, z + 0.5 * h * k1)
        k3 = f(t0 + 0.5 * h, z + 0.5 * h * k2)
        k4 = f(t1, z + h * k3)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k + 1] = z
    return out


def _dense_fn(fn):
    def wrapped(t):
        out = fn(t)
        if isinstance(out, matrix_core.ExchangeableMatrix):
            return out.to_dense()
        return np.asarray(out, dtype=float)

    return wrapped


# ---------------------------------------------------------------------------
# Riccati equations
# ---------------------------------------------------------------------------

@dataclass
class RiccatiProblem:
    """Backward problem dR = (G + F R - R E - R D R) dt, R(T) = terminal."""

    g_fn: object
    d_fn: object
    e_fn: object
    f_fn: object
    terminal: np.ndarray
    grid: TimeGrid


@dataclass
class RiccatiSolution:
    path: np.ndarray            # (steps+1, n, n); NaN before a blow-up time
    blew_up: bool = False
    blowup_time: float = None

    def at(self, grid, t):
        return grid.interp(self.path, t)


def solve_riccati_backward(prob):
    """RK4 backward integration with blow-up detection.

    Flags blow-up once the inf-norm of R exceeds 1e8; the path before the
    blow-up time is left as NaN.  Non-finite values without norm growth raise
    an integrator error.
    """
    g, d, e, f = (_dense_fn(x) for x in (prob.g_fn, prob.d_fn, prob.e_fn, prob.f_fn))

    def rhs(t, r):
        return g(t) + f(t) @ r - r @ e(t) - r @ d(t) @ r

    ts = prob.grid.nodes
    terminal = np.asarray(prob.terminal, dtype=float)
    path = np.full((len(ts),) + terminal.shape, np.nan)
    path[-1] = terminal
    r = terminal
    prev_norm = np.max(np.abs(r).sum(axis=1))
    for k in range(len(ts) - 1, 0, -1):
        t1, t0 = ts[k], ts[k - 1]
        h = t1 - t0
        k1 = rhs(t1, r)
        k2 = rhs(t1 - 0.5 * h, r - 0.5 * h * k1)
        k3 = rhs(t1 - 0.5 * h, r - 0.5 * h * k2)
        k4 = rhs(t0, r - h * k3)
        r = r - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(r)):
            # overflow of the quadratic term is a blow-up; NaN without prior
            # growth points at bad inputs
            if prev_norm > 1e-4 * BLOWUP_THRESHOLD:
                return RiccatiSolution(path=path, blew_up=True, blowup_time=float(t0))
            raise IntegratorError("Riccati integration produced non-finite values")
        norm = np.max(np.abs(r).sum(axis=1))
        if norm > BLOWUP_THRESHOLD:
            path[k - 1] = r
            return RiccatiSolution(path=path, blew_up=True, blowup_time=float(t0))
        path[k - 1] = r
        prev_norm = norm
    return RiccatiSolution(path=path, blew_up=False, blowup_time=None)


def conjugate_riccati_path(r_path, e_fn, f_fn, grid):
    """Conjugate an R path by the accumulated coefficient exponentials.

    Returns exp(-int_0^t F) R(t) exp(int_0^t E) at every node.  When E and F
    commute with their own time integrals this removes the linear terms from
    the Riccati equation, and for the permutation-symmetric execution game the
    result is an exchangeable matrix at every time.
    """
    e, f = _dense_fn(e_fn), _dense_fn(f_fn)
    int_e = grid.cumulative(e)
    int_f = grid.cumulative(f)
    out = np.empty_like(np.asarray(r_path, dtype=float))
    for k in range(len(out)):
        out[k] = matrix_core.mat_exp(-int_f[k]) @ r_path[k] @ matrix_core.mat_exp(int_e[k])
    return out


def radon_closed_form(g_fn, A, grid):
    """Closed-form solution of dR = -R G R, R(T) = -2A I via linearization.

    Writing R = U V^{-1} turns the equation into a linear system whose V-block
    is I + 2A * int_t^T G ds; for Z-matrices G with non-negative column sums
    that block is an M-matrix shifted by the identity, hence non-singular, so
    the solution exists on all of [0, T] and has non-positive entries.
    """
    if A < 0:
        raise ParameterError("terminal penalty A must be non-negative")
    g = _dense_fn(g_fn)
    probe = list(grid.nodes) + list(grid.mids)
    for t in probe:
        rep = matrix_core.classify_matrix(g(t), tol=1e-12)
        if not rep.is_m_plus:
            raise ParameterError(
                f"G({t:g}) is not a Z-matrix with non-negative column sums"
            )
    cum = grid.cumulative(g)
    tail = cum[-1] - cum
    n = cum.shape[-1]
    eye = np.eye(n)
    path = np.empty_like(cum)
    for k in range(len(path)):
        path[k] = -2.0 * A * np.linalg.inv(eye + 2.0 * A * tail[k])
    if np.max(path) > 1e-12:
        raise IntegratorError("closed-form Riccati solution lost entrywise non-positivity")
    return RiccatiSolution(path=path, blew_up=False, blowup_time=None)


def scalar_riccati(ell_fn, A, grid):
    """Path of d(rho) = -ell * rho^2 dt, rho(T) = -2A, on the grid nodes.

    The substitution u = -1/rho linearizes the equation, giving
    rho(t) = -1 / (1/(2A) + int_t^T ell ds); identically zero when A = 0.
    The path stays inside [-2A, 0).
    """
    if A < 0:
        raise ParameterError("terminal penalty A must be non-negative")
    ell_vals = sample(ell_fn, grid.mids)
    if ell_vals.min() < 0:
        raise ParameterError("ell must be non-negative")
    if A == 0:
        return np.zeros(grid.steps + 1)
    cum = np.concatenate(([0.0], np.cumsum(ell_vals * grid.dt)))
    tail = cum[-1] - cum
    return -1.0 / (1.0 / (2.0 * A) + tail)


def solve_offset_ode(r, d_fn, f_fn, fwd_forcing, bwd_forcing, terminal, grid):
    """Backward linear ODE for the affine offset H.

    Integrates dH = [-R D H + R * fwd_forcing + F H + bwd_forcing] dt from
    H(T) = terminal.  ``r`` may be a callable of time or an array on the grid
    nodes (midpoints then use the cell average).
    """
    d, f = _dense_fn(d_fn), _dense_fn(f_fn)
    if callable(r):
        r_at = lambda t: np.asarray(r(t), dtype=float)
    else:
        r_arr = np.asarray(r, dtype=float)
        r_at = lambda t: grid.interp(r_arr, t)

    def rhs(t, h_vec):
        rt = r_at(t)
        return (-rt @ d(t) + f(t)) @ h_vec + rt @ np.asarray(fwd_forcing(t), float) + np.asarray(
            bwd_forcing(t), float
        )

    path = _rk4_backward(rhs, np.asarray(terminal, dtype=float), grid.nodes)
    if not np.all(np.isfinite(path)):
        raise IntegratorError("offset ODE integration produced non-finite values")
    return path


# ---------------------------------------------------------------------------
# Two-point boundary-value FBSDE solvers
# ---------------------------------------------------------------------------

@dataclass
class FbsdeProblem:
    """Deterministic-coefficient FBSDE as a two-point boundary-value system.

    Forward state Q runs from q0 under fwd_drift(t, q, y); the adjoint Y runs
    backward from terminal_map(Q_T) under bwd_drift(t, q, y).
    """

    fwd_drift: object
    bwd_drift: object
    terminal_map: object
    q0: np.ndarray
    grid: TimeGrid
    lipschitz_hint: float = None

    def __post_init__(self):
        self.q0 = np.atleast_1d(np.asarray(self.q0, dtype=float))


@dataclass
class FbsdeSolution:
    q_path: np.ndarray          # (steps+1, dim)
    y_path: np.ndarray
    picard_iterations: int = 0
    residual: float = 0.0
    subintervals: int = 1
    extras: dict = field(default_factory=dict)


def _sweep_forward(drift, q0, ts, y, ydot):
    """RK4 pass for Q with the frozen Y path interpolated by cubic Hermite."""
    m = len(ts)
    q = np.empty((m,) + q0.shape)
    qdot = np.empty_like(q)
    q[0] = q0
    for k in range(m - 1):
        h = ts[k + 1] - ts[k]
        y_mid = 0.5 * (y[k] + y[k + 1]) + (h / 8.0) * (ydot[k] - ydot[k + 1])
        k1 = drift(ts[k], q[k], y[k])
        k2 = drift(ts[k] + 0.5 * h, q[k] + 0.5 * h * k1, y_mid)
        k3 = drift(ts[k] + 0.5 * h, q[k] + 0.5 * h * k2, y_mid)
        k4 = drift(ts[k + 1], q[k] + h * k3, y[k + 1])
        q[k + 1] = q[k] + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        qdot[k] = k1
    qdot[-1] = drift(ts[-1], q[-1], y[-1])
    return q, qdot


def _sweep_backward(drift, y_term, ts, q, qdot):
    """RK4 pass for Y with the frozen Q path interpolated by cubic Hermite."""
    m = len(ts)
    y = np.empty((m,) + y_term.shape)
    ydot = np.empty_like(y)
    y[-1] = y_term
    for k in range(m - 1, 0, -1):
        h = ts[k] - ts[k - 1]
        q_mid = 0.5 * (q[k - 1] + q[k]) + (h / 8.0) * (qdot[k - 1] - qdot[k])
        k1 = drift(ts[k], q[k], y[k])
        k2 = drift(ts[k] - 0.5 * h, q_mid, y[k] - 0.5 * h * k1)
        k3 = drift(ts[k] - 0.5 * h, q_mid, y[k] - 0.5 * h * k2)
        k4 = drift(ts[k - 1], q[k - 1], y[k] - h * k3)
        y[k - 1] = y[k] - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        ydot[k] = k1
    ydot[0] = drift(ts[0], q[0], y[0])
    return y, ydot


def _picard_on(prob, ts, q0, terminal_map, tol, max_iter, y_init=None):
    """Picard fixed point on a node slice; returns None when non-contractive.

    Oscillatory divergence (the usual failure mode with stabilizing terminal
    penalties) is tamed by blending successive iterates with an adaptive
    relaxation weight; genuine expansion or stalling hands control back to
    the bisection logic.
    """
    dim = q0.shape[0]
    if y_init is not None and y_init.shape == (len(ts), dim):
        y = y_init.copy()
    else:
        y = np.zeros((len(ts), dim))
    ydot = np.zeros_like(y)
    scale = 1.0 + float(np.max(np.abs(q0)))
    omega, prev_update, milestones = 1.0, np.inf, []
    for it in range(1, max_iter + 1):
        q, qdot = _sweep_forward(prob.fwd_drift, q0, ts, y, ydot)
        if not np.all(np.isfinite(q)):
            return None
        y_term = np.atleast_1d(np.asarray(terminal_map(q[-1]), dtype=float))
        y_new, ydot_new = _sweep_backward(prob.bwd_drift, y_term, ts, q, qdot)
        if not np.all(np.isfinite(y_new)):
            return None
        update = float(np.max(np.abs(y_new - y)))
        if update <= tol:
            q, qdot = _sweep_forward(prob.fwd_drift, q0, ts, y_new, ydot_new)
            term_mis = float(
                np.max(np.abs(y_new[-1] - np.atleast_1d(terminal_map(q[-1]))))
            )
            return FbsdeSolution(
                q_path=q,
                y_path=y_new,
                picard_iterations=it,
                residual=max(update, term_mis),
                subintervals=1,
            )
        if update > 1e6 * scale:
            return None
        if update > prev_update:
            if omega > 1.0 / 64.0:
                omega *= 0.5
            calm = 0
        else:
            calm = calm + 1 if "calm" in dir() else 1
        if omega < 1.0 and update < prev_update:
            calm += 1
            if calm >= 4:
                omega, calm = min(1.0, 1.25 * omega), 0
        y = (1.0 - omega) * y + omega * y_new
        ydot = (1.0 - omega) * ydot + omega * ydot_new
        prev_update = update
        if it % 20 == 0:
            milestones.append(update)
            if (
                len(milestones) >= 2
                and update > 1e4 * tol
                and milestones[-1] >= 0.3 * milestones[-2]
            ):
                return None
    return None


def solve_fbsde_picard(prob, tol=PICARD_TOL, max_iter=PICARD_MAX_ITER,
                       max_depth=MAX_BISECTION_DEPTH):
    """Fixed-point solver with decoupling-field continuation.

    Iterates forward/backward sweeps against the latest adjoint guess until
    the sup-norm update drops below ``tol``.  If the iteration fails to
    contract on the full horizon, the time interval is bisected and solved
    backward-inductively: the right half induces a terminal map (evaluated by
    recursive solves) for the left half.  Raises after ``max_depth`` nested
    bisections.
    """
    sol = _solve_recursive(prob, prob.grid.nodes, prob.q0, prob.terminal_map,
                           tol, max_iter, max_depth, depth=0)
    return sol


class _InducedTerminal:
    """Decoupling field of a right subinterval, evaluated by nested solves.

    Successive evaluations happen at nearby states, so the previous adjoint
    path warm-starts the next solve.
    """

    def __init__(self, prob, ts, terminal_map, tol, max_iter, max_depth, depth):
        self.prob, self.ts, self.terminal_map = prob, ts, terminal_map
        self.tol, self.max_iter = tol, max_iter
        self.max_depth, self.depth = max_depth, depth
        self.guess = None

    def __call__(self, q_mid):
        inner = _solve_recursive(
            self.prob, self.ts, np.atleast_1d(np.asarray(q_mid, float)),
            self.terminal_map, self.tol, self.max_iter, self.max_depth,
            self.depth, y_init=self.guess,
        )
        self.guess = inner.y_path
        return inner.y_path[0]


def _solve_recursive(prob, ts, q0, terminal_map, tol, max_iter, max_depth, depth,
                     y_init=None):
    sol = _picard_on(prob, ts, q0, terminal_map, tol, max_iter, y_init=y_init)
    if sol is not None:
        return sol
    if depth >= max_depth or len(ts) < 3:
        raise SolverError(
            "Picard iteration failed to contract",
            diagnostics={"depth": depth, "interval": (float(ts[0]), float(ts[-1]))},
        )
    mid = (len(ts) - 1) // 2
    right_ts = ts[mid:]
    induced_terminal = _InducedTerminal(prob, right_ts, terminal_map, tol,
                                        max_iter, max_depth, depth + 1)
    left = _solve_recursive(prob, ts[: mid + 1], q0, induced_terminal,
                            tol, max_iter, max_depth, depth + 1)
    right = _solve_recursive(prob, right_ts, left.q_path[-1], terminal_map,
                             tol, max_iter, max_depth, depth + 1,
                             y_init=induced_terminal.guess)
    return FbsdeSolution(
        q_path=np.concatenate([left.q_path[:-1], right.q_path]),
        y_path=np.concatenate([left.y_path[:-1], right.y_path]),
        picard_iterations=left.picard_iterations + right.picard_iterations,
        residual=max(left.residual, right.residual),
        subintervals=left.subintervals + right.subintervals,
    )


# ---------------------------------------------------------------------------
# Affine-ansatz solver for the linear execution game
# ---------------------------------------------------------------------------

@dataclass
class AffineSolution:
    fbsde: FbsdeSolution
    r_path: np.ndarray          # R on the grid nodes
    h_path: np.ndarray
    rates: np.ndarray           # equilibrium trading rates on the nodes


def _affine_case(p, grid):
    """Which solvable case applies: 'no-permanent-impact' or 'homogeneous'."""
    ts = grid.nodes
    alpha_vals = sample(p.alpha, ts)
    if np.max(np.abs(alpha_vals)) <= 1e-12:
        return "no-permanent-impact"
    phi_mat = np.array([sample(f, ts) for f in p.phi])
    homogeneous = (
        np.max(phi_mat.max(axis=0) - phi_mat.min(axis=0)) <= 1e-12
        and np.max(p.A) - np.min(p.A) <= 1e-12
    )
    if not homogeneous:
        raise CaseNotCoveredError(
            "affine ansatz needs either zero permanent impact or homogeneous penalties"
        )
    beta_vals = sample(p.beta, ts)
    margin = 2 * (p.n_agents + 1) * beta_vals * phi_mat[0] - alpha_vals**2
    if margin.min() < -1e-12:
        raise CaseNotCoveredError(
            "homogeneous case needs 2(N+1)*beta*phi >= alpha^2 on the whole grid"
        )
    return "homogeneous"


def solve_linear_fbsde_affine(p, grid=None, q0=None):
    """Solve the linear execution-game FBSDE through the ansatz Y = R Q + H.

    R and H are integrated backward jointly (RK4 on a half-step lattice so the
    forward pass sees exact midpoint values), then Q runs forward and Y is
    reconstructed.  Only the two cases with a linear decoupling field are
    accepted; anything else raises CaseNotCoveredError.
    """
    grid = grid or TimeGrid(p.horizon)
    q0 = p.q0 if q0 is None else np.asarray(q0, dtype=float)
    p.validate(grid)
    case = _affine_case(p, grid)
    n = p.n_agents
    fine = grid.refined(2)
    offsets = DriftOffsets(p, fine)

    def coeffs(t):
        c = build_coeff_matrices(p, min(t, p.horizon))
        return c

    def rh_rhs(t, z):
        r = z[:, :n]
        h = z[:, n]
        c = coeffs(t)
        d, e, f, g = c.D.to_dense(), c.E.to_dense(), c.F.to_dense(), c.G
        w = offsets.at(t)
        beta = p.beta_at(t)
        fwd_force = (n / ((n + 1) * beta)) * w * np.ones(n)
        bwd_force = (n * float(p.alpha(t)) / ((n + 1) * beta)) * w * np.ones(n)
        dr = g + f @ r - r @ e - r @ d @ r
        dh = -r @ d @ h + r @ fwd_force + f @ h + bwd_force
        return np.column_stack([dr, dh])

    term_c = coeffs(p.horizon)
    w_term = offsets.at(p.horizon)
    z_term = np.column_stack([-term_c.L, w_term * np.ones(n)])
    z_path = _rk4_backward(rh_rhs, z_term, fine.nodes)
    if not np.all(np.isfinite(z_path)):
        raise IntegratorError("Riccati/offset backward integration diverged")
    r_fine = z_path[:, :, :n]
    h_fine = z_path[:, :, n]
    if np.max(np.abs(r_fine).sum(axis=2)) > BLOWUP_THRESHOLD:
        raise IntegratorError("Riccati path exceeded the blow-up threshold")

    # structural sanity on the solvable cases: R symmetric, NSD
    sym_err = np.max(np.abs(r_fine - np.swapaxes(r_fine, 1, 2)))
    if sym_err > 1e-8:
        raise IntegratorError(f"Riccati path lost symmetry ({sym_err:g})")

    def q_rhs(t, q):
        c = coeffs(t)
        k = min(int(round(t / fine.dt)), fine.steps)
        r, h = r_fine[k], h_fine[k]
        beta = p.beta_at(t)
        fwd_off = -(n / ((n + 1) * beta)) * offsets.at(t) * np.ones(n)
        return c.D.to_dense() @ (r @ q + h) + c.E.to_dense() @ q + fwd_off

    q_path = _rk4_forward(q_rhs, q0, grid.nodes)
    r_path = r_fine[::2]
    h_path = h_fine[::2]
    y_path = np.einsum("kij,kj->ki", r_path, q_path) + h_path
    term_mis = float(
        np.max(np.abs(y_path[-1] - (-term_c.L @ q_path[-1] + w_term * np.ones(n))))
    )
    if term_mis > 1e-6:
        raise IntegratorError(f"terminal consistency {term_mis:g} exceeds 1e-6")
    rates = np.array(
        [
            isaacs_feedback(p, t, y_path[k], q_path[k], offsets.at(t))
            for k, t in enumerate(grid.nodes)
        ]
    )
    fbsde = FbsdeSolution(
        q_path=q_path,
        y_path=y_path,
        picard_iterations=0,
        residual=term_mis,
        subintervals=1,
        extras={"case": case},
    )
    return AffineSolution(fbsde=fbsde, r_path=r_path, h_path=h_path, rates=rates)


def exec_fbsde_problem(p, grid=None, q0=None):
    """Generic two-point formulation of the execution game for the Picard solver."""
    grid = grid or TimeGrid(p.horizon)
    q0 = p.q0 if q0 is None else np.asarray(q0, dtype=float)
    n = p.n_agents
    offsets = DriftOffsets(p, grid.refined(2))

    def fwd(t, q, y):
        c = build_coeff_matrices(p, min(t, p.horizon))
        beta = p.beta_at(t)
        off = -(n / ((n + 1) * beta)) * offsets.at(t) * np.ones(n)
        return c.D.to_dense() @ y + c.E.to_dense() @ q + off

    def bwd(t, q, y):
        c = build_coeff_matrices(p, min(t, p.horizon))
        beta = p.beta_at(t)
        off = (n * float(p.alpha(t)) / ((n + 1) * beta)) * offsets.at(t) * np.ones(n)
        return c.F.to_dense() @ y + c.G @ q + off

    l_mat = np.diag(2.0 * p.A)
    w_term = offsets.at(p.horizon)

    def terminal(q_t):
        return -l_mat @ q_t + w_term * np.ones(n)

    return FbsdeProblem(fwd_drift=fwd, bwd_drift=bwd, terminal_map=terminal,
                        q0=q0, grid=grid)
