"""Optimal-execution game with linear permanent and aggregated temporary impact.

N traders control their trading rates; the market price carries a linear
permanent impact from the aggregate rate plus a drift from exogenous noise
flow.  Stationarity of all Hamiltonians at once has a closed-form solution
(the Isaacs feedback), and the equilibrium is characterized by a linear
forward-backward system whose coefficient matrices are built here.
"""

from dataclasses import dataclass, field

import numpy as np

from . import matrix_core
from ._errors import DimensionError, ParameterError
from .grids import TimeGrid, as_time_fn, sample

BETA_FLOOR = 1e-9


@dataclass
class ExecGameParams:
    """Model coefficients for the N-trader execution game.

    Time-dependent coefficients are callables of t (scalars are promoted).
    ``phi`` holds one running-penalty function per agent, ``A`` one terminal
    penalty per agent, ``q0`` the initial inventories.  ``a``/``b`` are the
    exogenous sell/buy rates; only their difference enters the price drift,
    but both are kept.
    """

    n_agents: int
    horizon: float
    alpha: object = 0.0
    beta: object = 1.0
    phi: object = 0.0
    A: object = 0.0
    a: object = 0.0
    b: object = 0.0
    q0: object = None

    def __post_init__(self):
        if self.n_agents < 1:
            raise ParameterError(f"need at least one agent, got {self.n_agents}")
        if self.horizon <= 0:
            raise ParameterError("horizon must be positive")
        self.alpha = as_time_fn(self.alpha)
        self.beta = as_time_fn(self.beta)
        self.a = as_time_fn(self.a)
        self.b = as_time_fn(self.b)
        self.phi = self._per_agent_fns(self.phi)
        self.A = self._per_agent_consts(self.A)
        if self.q0 is None:
            self.q0 = np.zeros(self.n_agents)
        self.q0 = np.asarray(self.q0, dtype=float)
        if self.q0.shape != (self.n_agents,):
            raise DimensionError(f"q0 must have length {self.n_agents}")

    def _per_agent_fns(self, value):
        if isinstance(value, (list, tuple)):
            if len(value) != self.n_agents:
                raise DimensionError(f"expected {self.n_agents} per-agent entries")
            return [as_time_fn(v) for v in value]
        return [as_time_fn(value)] * self.n_agents

    def _per_agent_consts(self, value):
        arr = np.asarray(value, dtype=float)
        if arr.ndim == 0:
            arr = np.full(self.n_agents, float(arr))
        if arr.shape != (self.n_agents,):
            raise DimensionError(f"expected {self.n_agents} terminal penalties")
        return arr

    def beta_at(self, t):
        bt = float(self.beta(t))
        if bt <= 0.0:
            raise ParameterError(f"temporary impact beta({t:g}) = {bt:g} must be positive")
        return bt

    def phi_vec(self, t):
        return np.array([float(f(t)) for f in self.phi])

    def validate(self, grid=None):
        """Range-check coefficients on the grid; raises on violation."""
        grid = grid or TimeGrid(self.horizon)
        ts = grid.nodes
        beta_vals = sample(self.beta, ts)
        if beta_vals.min() < BETA_FLOOR:
            raise ParameterError(
                f"beta must stay >= {BETA_FLOOR:g} on the grid (min {beta_vals.min():g})"
            )
        for name, fn in (("alpha", self.alpha), ("a", self.a), ("b", self.b)):
            if sample(fn, ts).min() < 0:
                raise ParameterError(f"{name} must be non-negative on the grid")
        for i, f in enumerate(self.phi):
            if sample(f, ts).min() < 0:
                raise ParameterError(f"phi[{i}] must be non-negative on the grid")
        if self.A.min() < 0:
            raise ParameterError("terminal penalties must be non-negative")
        return self


@dataclass(frozen=True)
class CoeffMatrices:
    """Coefficient matrices of the equilibrium forward-backward system at time t.

    D, E scale the (N+1)I - J structure; F and the rank-one part of G come
    from the permanent impact; L holds the terminal penalties.
    """

    L: np.ndarray
    B: matrix_core.ExchangeableMatrix
    D: matrix_core.ExchangeableMatrix
    E: matrix_core.ExchangeableMatrix
    F: matrix_core.ExchangeableMatrix
    G: np.ndarray
    O: matrix_core.ExchangeableMatrix
    t: float


def build_coeff_matrices(p, t):
    if not 0.0 <= t <= p.horizon * (1 + 1e-12):
        raise ParameterError(f"t={t:g} outside [0, {p.horizon:g}]")
    n = p.n_agents
    beta = p.beta_at(t)
    alpha = float(p.alpha(t))
    b_mat = matrix_core.exchangeable(n, float(n), -1.0)
    ones = matrix_core.all_ones(n)
    d_mat = b_mat.scale(n / ((n + 1) * beta))
    e_mat = b_mat.scale(alpha / ((n + 1) * beta))
    f_mat = ones.scale(-alpha / ((n + 1) * beta))
    g_mat = np.diag(2.0 * p.phi_vec(t)) - (alpha**2 / (n * (n + 1) * beta)) * ones.to_dense()
    l_mat = np.diag(2.0 * p.A)
    return CoeffMatrices(L=l_mat, B=b_mat, D=d_mat, E=e_mat, F=f_mat, G=g_mat, O=ones, t=t)


class DriftOffsets:
    """Price drift from the noise flow and the offsets it induces.

    ``flow_drift`` integrates alpha*(b-a) from 0 to t (midpoint rule on the
    grid); the forward/backward offsets are the per-coordinate constants it
    adds to the state and adjoint drifts.
    """

    def __init__(self, p, grid=None):
        self.params = p
        self.grid = grid or TimeGrid(p.horizon)
        alpha, a_fn, b_fn = p.alpha, p.a, p.b
        self.flow_drift = self.grid.cumulative(
            lambda t: float(alpha(t)) * (float(b_fn(t)) - float(a_fn(t)))
        )

    def at(self, t):
        return float(self.grid.interp(self.flow_drift, t))

    def forward_offset(self, t):
        n = self.params.n_agents
        return -n / ((n + 1) * self.params.beta_at(t)) * self.at(t)

    def backward_offset(self, t):
        n = self.params.n_agents
        return n * float(self.params.alpha(t)) / ((n + 1) * self.params.beta_at(t)) * self.at(t)


def isaacs_feedback(p, t, y, q, flow_drift_t=0.0):
    """Equilibrium trading rates from the simultaneous stationarity conditions.

    Solves the coupled first-order system in closed form; ``flow_drift_t`` is
    the integrated noise-flow drift at time t (0 when alpha*(b-a) vanishes).
    """
    y = np.asarray(y, dtype=float)
    q = np.asarray(q, dtype=float)
    n = p.n_agents
    if y.shape != (n,) or q.shape != (n,):
        raise DimensionError(f"y and q must have length {n}")
    beta = p.beta_at(t)
    alpha = float(p.alpha(t))
    scale = 1.0 / ((n + 1) * beta)
    y_term = n * ((n + 1) * y - y.sum())
    q_term = alpha * ((n + 1) * q - q.sum())
    return scale * (y_term + q_term) - n * scale * flow_drift_t * np.ones(n)


def feedback_residual(p, t, v, y, q, flow_drift_t=0.0):
    """Max residual of the per-agent stationarity conditions at rates ``v``."""
    v = np.asarray(v, dtype=float)
    beta = p.beta_at(t)
    alpha = float(p.alpha(t))
    n = p.n_agents
    res = np.empty(n)
    for i in range(n):
        others = v.sum() - v[i]
        res[i] = v[i] - (
            n / (2 * beta) * y[i]
            + alpha / (2 * beta) * q[i]
            - n / (2 * beta) * flow_drift_t
            - 0.5 * others
        )
    return float(np.max(np.abs(res)))


@dataclass(frozen=True)
class ConditionReport:
    passed: bool
    margin: float
    worst_time: float
    details: dict = field(default_factory=dict)


def check_hamiltonian_concavity(p, grid=None):
    """Concavity of each Hamiltonian in (inventory, rate).

    Needs beta bounded away from zero and 4*N*beta*phi_i >= alpha^2 for every
    agent at every grid time; the report carries the worst margin.
    """
    grid = grid or TimeGrid(p.horizon)
    worst, worst_t = np.inf, 0.0
    beta_ok = True
    for t in grid.nodes:
        beta = float(p.beta(t))
        if beta < BETA_FLOOR:
            beta_ok = False
        alpha = float(p.alpha(t))
        margins = 4.0 * p.n_agents * beta * p.phi_vec(t) - alpha**2
        m = float(margins.min())
        if m < worst:
            worst, worst_t = m, t
    return ConditionReport(
        passed=bool(beta_ok and worst >= 0.0),
        margin=worst,
        worst_time=worst_t,
        details={"beta_floor_ok": beta_ok},
    )


def monotone_matrix(p, t):
    """Reduced symmetric matrix whose positive definiteness gives monotonicity."""
    n = p.n_agents
    alpha = float(p.alpha(t))
    beta = p.beta_at(t)
    two_one = matrix_core.exchangeable(n, 2.0, 1.0).to_dense()
    return np.diag(2.0 * p.phi_vec(t)) - alpha**2 / (4.0 * n * beta) * two_one


def check_monotone_condition(p, grid=None):
    """Monotonicity condition sufficient for global well-posedness.

    The reduced matrix must keep a positive diagonal and a positive
    row-dominance gap uniformly in time, and every terminal penalty must be
    positive.  ``margin`` is the uniform dominance gap, which lower-bounds the
    smallest eigenvalue (Varah / Gershgorin), reported as ``r``.
    """
    grid = grid or TimeGrid(p.horizon)
    r, worst_t = np.inf, 0.0
    diag_ok = True
    for t in grid.nodes:
        m = monotone_matrix(p, t)
        if np.min(np.diag(m)) <= 0.0:
            diag_ok = False
        gap, _ = matrix_core.dominance_gaps(m)
        if gap < r:
            r, worst_t = gap, t
    a_ok = bool(p.A.min() > 0.0)
    return ConditionReport(
        passed=bool(diag_ok and r > 0.0 and a_ok),
        margin=float(r),
        worst_time=worst_t,
        details={"positive_diagonal": diag_ok, "terminal_penalties_positive": a_ok, "r": float(r)},
    )
