"""Tests for Riccati solvers, closed forms, and the two-point FBSDE solvers."""

import numpy as np
import pytest

from liqgames._errors import ParameterError, SolverError
from liqgames.execution_game import ExecGameParams
from liqgames.grids import TimeGrid
from liqgames.riccati_fbsde import (
    CaseNotCoveredError,
    FbsdeProblem,
    RiccatiProblem,
    conjugate_riccati_path,
    exec_fbsde_problem,
    radon_closed_form,
    scalar_riccati,
    solve_fbsde_picard,
    solve_linear_fbsde_affine,
    solve_offset_ode,
    solve_riccati_backward,
)

ZERO1 = lambda t: np.zeros((1, 1))
ZERO2 = lambda t: np.zeros((2, 2))


class TestRiccatiBackward:
    def test_constant_solution(self):
        a_pen = 0.7
        prob = RiccatiProblem(ZERO2, ZERO2, ZERO2, ZERO2,
                              terminal=-2 * a_pen * np.eye(2), grid=TimeGrid(1.0, 50))
        sol = solve_riccati_backward(prob)
        assert not sol.blew_up
        assert np.max(np.abs(sol.path - (-2 * a_pen * np.eye(2)))) <= 1e-13

    def test_scalar_closed_form(self):
        # dR = -R^2, R(1) = -1  =>  R(t) = -1/(1 + (1-t)), R(0) = -0.5
        prob = RiccatiProblem(ZERO1, lambda t: np.eye(1), ZERO1, ZERO1,
                              terminal=-np.eye(1), grid=TimeGrid(1.0, 200))
        sol = solve_riccati_backward(prob)
        ts = np.linspace(0, 1, 201)
        expected = -1.0 / (1.0 + (1.0 - ts))
        assert np.max(np.abs(sol.path[:, 0, 0] - expected)) <= 1e-10
        assert sol.path[0, 0, 0] == pytest.approx(-0.5, abs=1e-10)

    def test_homogeneous_two_agent_matches_radon(self):
        # alpha=0, beta=1, phi=0, A=0.5: dR = -R D R with constant D
        p = ExecGameParams(n_agents=2, horizon=1.0, alpha=0.0, beta=1.0,
                           phi=0.0, A=0.5, q0=[1.0, 1.0])
        grid = TimeGrid(1.0, 500)
        d_const = (2.0 / 3.0) * np.array([[2.0, -1.0], [-1.0, 2.0]])
        prob = RiccatiProblem(ZERO2, lambda t: d_const, ZERO2, ZERO2,
                              terminal=-2 * 0.5 * np.eye(2), grid=grid)
        rk4 = solve_riccati_backward(prob)
        radon = radon_closed_form(lambda t: d_const, 0.5, grid)
        assert np.max(np.abs(rk4.path - radon.path)) <= 1e-8

    def test_blowup_detected(self):
        # dR = +R^2 backward from -2 blows up at T - t = 0.5
        prob = RiccatiProblem(ZERO1, lambda t: -np.eye(1), ZERO1, ZERO1,
                              terminal=-2.0 * np.eye(1), grid=TimeGrid(1.0, 2000))
        sol = solve_riccati_backward(prob)
        assert sol.blew_up
        assert sol.blowup_time == pytest.approx(0.5, abs=0.01)
        assert np.isnan(sol.path[0, 0, 0])


class TestConjugateTransform:
    def test_identity_when_linear_terms_vanish(self):
        grid = TimeGrid(1.0, 20)
        r_path = np.repeat(np.eye(2)[None], grid.steps + 1, axis=0) * -0.3
        out = conjugate_riccati_path(r_path, ZERO2, ZERO2, grid)
        assert np.max(np.abs(out - r_path)) <= 1e-14

    def test_homogeneous_case_structure(self):
        # alpha=1, beta=1, N=2, homogeneous phi large enough for case (2)
        p = ExecGameParams(n_agents=2, horizon=1.0, alpha=1.0, beta=1.0,
                           phi=0.5, A=0.5, q0=[1.0, 2.0])
        grid = TimeGrid(1.0, 400)
        from liqgames.execution_game import build_coeff_matrices

        def g_fn(t):
            return build_coeff_matrices(p, t).G

        def d_fn(t):
            return build_coeff_matrices(p, t).D.to_dense()

        def e_fn(t):
            return build_coeff_matrices(p, t).E.to_dense()

        def f_fn(t):
            return build_coeff_matrices(p, t).F.to_dense()

        prob = RiccatiProblem(g_fn, d_fn, e_fn, f_fn, terminal=-np.eye(2), grid=grid)
        sol = solve_riccati_backward(prob)
        assert not sol.blew_up
        tilde = conjugate_riccati_path(sol.path, e_fn, f_fn, grid)
        # exchangeable structure: equal diagonal, equal off-diagonal, symmetric
        for k in range(0, grid.steps + 1, 25):
            m = tilde[k]
            assert abs(m[0, 0] - m[1, 1]) <= 1e-9
            assert abs(m[0, 1] - m[1, 0]) <= 1e-9


class TestRadon:
    def test_identity_coefficient(self):
        grid = TimeGrid(1.0, 100)
        sol = radon_closed_form(lambda t: np.eye(2), 0.5, grid)
        assert np.allclose(sol.path[0], -0.5 * np.eye(2), atol=1e-12)

    def test_zero_terminal_penalty(self):
        grid = TimeGrid(1.0, 50)
        sol = radon_closed_form(lambda t: np.eye(2), 0.0, grid)
        assert np.max(np.abs(sol.path)) == 0.0

    def test_column_m_plus_example(self):
        grid = TimeGrid(1.0, 100)
        g = np.array([[1.0, 0.0], [-1.0, 2.0]])
        sol = radon_closed_form(lambda t: g, 0.5, grid)
        expected = -np.array([[0.5, 0.0], [1.0 / 6.0, 1.0 / 3.0]])
        assert np.allclose(sol.path[0], expected, atol=1e-12)

    def test_rejects_non_m_plus(self):
        grid = TimeGrid(1.0, 10)
        with pytest.raises(ParameterError):
            radon_closed_form(lambda t: np.array([[1.0, 0.5], [0.5, 1.0]]), 0.5, grid)

    def test_entrywise_nonpositive_random(self):
        rng = np.random.default_rng(53)
        grid = TimeGrid(1.0, 60)
        for _ in range(50):
            n = int(rng.integers(2, 4))
            off = -np.abs(rng.normal(size=(n, n)))
            np.fill_diagonal(off, 0.0)
            g = off + np.diag(-off.sum(axis=0) + np.abs(rng.normal(size=n)))
            a_pen = float(rng.uniform(0.05, 2.0))
            sol = radon_closed_form(lambda t: g, a_pen, grid)
            assert sol.path.max() <= 1e-12


class TestScalarRiccati:
    def test_closed_form_value(self):
        beta = 0.5
        grid = TimeGrid(1.0, 100)
        rho = scalar_riccati(lambda t: 1.0 / (2 * beta), 0.5, grid)
        assert rho[0] == pytest.approx(-0.5, abs=1e-12)
        assert rho[-1] == pytest.approx(-1.0)

    def test_zero_penalty(self):
        rho = scalar_riccati(lambda t: 0.3, 0.0, TimeGrid(1.0, 10))
        assert np.all(rho == 0.0)

    def test_zero_decay(self):
        rho = scalar_riccati(lambda t: 0.0, 0.7, TimeGrid(1.0, 10))
        assert np.allclose(rho, -1.4)

    def test_negative_ell_rejected(self):
        with pytest.raises(ParameterError):
            scalar_riccati(lambda t: -0.1, 0.5, TimeGrid(1.0, 10))

    def test_range_and_rk4_agreement(self):
        rng = np.random.default_rng(59)
        grid = TimeGrid(1.0, 400)
        for _ in range(20):
            a_pen = float(rng.uniform(0.05, 2.0))
            c = float(rng.uniform(0.0, 1.0))
            rho = scalar_riccati(lambda t: c, a_pen, grid)
            assert np.all(rho >= -2 * a_pen - 1e-14) and np.all(rho < 0)
            prob = RiccatiProblem(ZERO1, lambda t: c * np.eye(1), ZERO1, ZERO1,
                                  terminal=-2 * a_pen * np.eye(1), grid=grid)
            rk4 = solve_riccati_backward(prob)
            assert np.max(np.abs(rk4.path[:, 0, 0] - rho)) <= 1e-9


class TestOffsetOde:
    def test_zero_forcing(self):
        grid = TimeGrid(1.0, 50)
        r = lambda t: -0.5 * np.eye(2)
        h = solve_offset_ode(r, ZERO2, ZERO2, lambda t: np.zeros(2),
                             lambda t: np.zeros(2), np.zeros(2), grid)
        assert np.max(np.abs(h)) == 0.0

    def test_constant_forcing_linear_solution(self):
        grid = TimeGrid(1.0, 50)
        c = np.array([0.3, -0.2])
        h_term = np.array([1.0, 2.0])
        h = solve_offset_ode(lambda t: np.zeros((2, 2)), ZERO2, ZERO2,
                             lambda t: np.zeros(2), lambda t: c, h_term, grid)
        ts = grid.nodes
        expected = h_term[None] + np.outer(1.0 - ts, c)
        assert np.max(np.abs(h - expected)) <= 1e-12

    def test_step_halving_agreement(self):
        # time-varying linear ODE solved on n and 4n steps
        r = lambda t: np.array([[-0.4 - 0.2 * t, 0.1], [0.1, -0.3]])
        d = lambda t: np.array([[1.0, -0.2], [-0.2, 1.0]])
        f = lambda t: np.array([[0.0, 0.05], [0.05, 0.0]])
        wf = lambda t: np.array([0.2 * t, -0.1])
        wb = lambda t: np.array([0.05, 0.1 * t])
        term = np.array([0.4, -0.6])
        coarse = solve_offset_ode(r, d, f, wf, wb, term, TimeGrid(1.0, 200))
        fine = solve_offset_ode(r, d, f, wf, wb, term, TimeGrid(1.0, 800))
        assert np.max(np.abs(coarse[0] - fine[0])) <= 1e-7


def exec_params(**kw):
    base = dict(n_agents=1, horizon=1.0, alpha=0.0, beta=0.5, phi=0.0, A=0.5, q0=[1.0])
    base.update(kw)
    return ExecGameParams(**base)


class TestAffineSolver:
    def test_zero_initial_zero_drift(self):
        p = exec_params(n_agents=2, q0=[0.0, 0.0], A=[0.5, 0.7], phi=[0.1, 0.2])
        sol = solve_linear_fbsde_affine(p, TimeGrid(1.0, 100))
        assert np.max(np.abs(sol.fbsde.q_path)) <= 1e-14
        assert np.max(np.abs(sol.fbsde.y_path)) <= 1e-14
        assert np.max(np.abs(sol.rates)) <= 1e-14

    def test_single_agent_closed_form_trajectory(self):
        # constant beta, phi=0: Q(t) = q0 (1 + A(T-t)/beta) / (1 + A T/beta)
        a_pen, beta = 0.7, 0.5
        p = exec_params(A=a_pen, beta=beta)
        grid = TimeGrid(1.0, 200)
        sol = solve_linear_fbsde_affine(p, grid)
        ts = grid.nodes
        expected = (1 + a_pen * (1 - ts) / beta) / (1 + a_pen / beta)
        assert np.max(np.abs(sol.fbsde.q_path[:, 0] - expected)) <= 1e-10

    def test_hard_liquidation_limit(self):
        p = exec_params(A=1e6)
        sol = solve_linear_fbsde_affine(p, TimeGrid(1.0, 500))
        q = sol.fbsde.q_path[:, 0]
        assert abs(q[-1]) <= 1e-5
        assert q[250] == pytest.approx(0.5, abs=1e-3)

    def test_constant_adjoint_single_agent(self):
        p = exec_params()
        sol = solve_linear_fbsde_affine(p, TimeGrid(1.0, 200))
        y = sol.fbsde.y_path[:, 0]
        assert np.max(np.abs(y - (-0.5))) <= 1e-10

    def test_case_not_covered(self):
        p = exec_params(n_agents=2, alpha=1.0, beta=1.0, phi=[0.3, 0.9], A=[0.5, 0.5],
                        q0=[1.0, 1.0])
        with pytest.raises(CaseNotCoveredError):
            solve_linear_fbsde_affine(p, TimeGrid(1.0, 50))

    def test_noise_flow_offsets_terminal_consistency(self):
        p = exec_params(n_agents=2, alpha=0.5, beta=1.0, phi=0.5, A=0.8,
                        a=0.2, b=0.6, q0=[2.0, -1.0])
        sol = solve_linear_fbsde_affine(p, TimeGrid(1.0, 300))
        assert sol.fbsde.residual <= 1e-6


class TestPicard:
    def test_linear_one_dim(self):
        a_pen = 0.5
        prob = FbsdeProblem(
            fwd_drift=lambda t, q, y: y,
            bwd_drift=lambda t, q, y: np.zeros_like(y),
            terminal_map=lambda qt: -2 * a_pen * qt,
            q0=np.array([1.0]),
            grid=TimeGrid(1.0, 100),
        )
        sol = solve_fbsde_picard(prob)
        assert np.max(np.abs(sol.y_path - (-0.5))) <= 1e-9
        assert sol.q_path[-1, 0] == pytest.approx(0.5, abs=1e-9)

    def test_decoupled_forward(self):
        prob = FbsdeProblem(
            fwd_drift=lambda t, q, y: np.array([np.cos(t)]),
            bwd_drift=lambda t, q, y: np.zeros(1),
            terminal_map=lambda qt: np.zeros(1),
            q0=np.array([0.0]),
            grid=TimeGrid(1.0, 100),
        )
        sol = solve_fbsde_picard(prob)
        assert np.max(np.abs(sol.y_path)) == 0.0
        assert sol.q_path[-1, 0] == pytest.approx(np.sin(1.0), abs=1e-10)

    def test_matches_affine_on_homogeneous_case(self):
        p = ExecGameParams(n_agents=2, horizon=1.0, alpha=0.4, beta=1.0, phi=0.5,
                           A=0.5, a=0.1, b=0.3, q0=[1.5, -0.5])
        grid = TimeGrid(1.0, 400)
        affine = solve_linear_fbsde_affine(p, grid)
        picard = solve_fbsde_picard(exec_fbsde_problem(p, grid))
        assert np.max(np.abs(affine.fbsde.q_path - picard.q_path)) <= 1e-6
        assert np.max(np.abs(affine.fbsde.y_path - picard.y_path)) <= 1e-6

    def test_bisection_kicks_in_for_long_horizon(self):
        # coupling strength 3 on [0, 1] defeats plain Picard (needs < 1)
        a_pen = 1.5
        prob = FbsdeProblem(
            fwd_drift=lambda t, q, y: y,
            bwd_drift=lambda t, q, y: np.zeros_like(y),
            terminal_map=lambda qt: -2 * a_pen * qt,
            q0=np.array([1.0]),
            grid=TimeGrid(1.0, 256),
        )
        sol = solve_fbsde_picard(prob)
        # closed form: y const, q_T = q0 + y T, y = -2A q_T
        y = -2 * a_pen * 1.0 / (1 + 2 * a_pen)
        assert sol.subintervals > 1
        assert np.max(np.abs(sol.y_path - y)) <= 1e-8

    def test_nonconvergence_raises(self):
        prob = FbsdeProblem(
            fwd_drift=lambda t, q, y: 100.0 * y,
            bwd_drift=lambda t, q, y: 100.0 * q,
            terminal_map=lambda qt: -100.0 * qt,
            q0=np.array([1.0]),
            grid=TimeGrid(4.0, 64),
        )
        with pytest.raises(SolverError):
            solve_fbsde_picard(prob, max_depth=2)


class TestConvergenceOrder:
    def test_rk4_order_on_riccati(self):
        # observed order of the backward RK4 on a smooth Riccati problem
        a_pen, c = 0.8, 0.6
        errs = []
        for steps in (25, 50):
            grid = TimeGrid(1.0, steps)
            prob = RiccatiProblem(ZERO1, lambda t: c * np.eye(1), ZERO1, ZERO1,
                                  terminal=-2 * a_pen * np.eye(1), grid=grid)
            sol = solve_riccati_backward(prob)
            exact = -1.0 / (1.0 / (2 * a_pen) + c * 1.0)
            errs.append(abs(sol.path[0, 0, 0] - exact))
        order = np.log2(errs[0] / errs[1])
        assert 3.5 <= order <= 4.5
