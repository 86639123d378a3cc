import numpy as np
import pytest

from ctfuse.factors import FactorEval
from ctfuse.solver import (
    FactorGraphProblem,
    LMReport,
    SolveError,
    SolverConfig,
    StateLayout,
    solve_lm,
    solve_normal_equations,
)

RNG = np.random.default_rng(3)


def linear_factor(key, a, target):
    """r = a * (x - target) on a 1-dim block."""

    def f(state):
        x = np.atleast_1d(state[key])
        return FactorEval(
            r=a @ (x - target) if a.ndim == 2 else np.atleast_1d(a * (x[0] - target)),
            jac={key: np.atleast_2d(a)},
        )

    return f


def test_linearize_single_scalar_factor():
    layout = StateLayout([(("lm", 0), 1, True)])
    state = {("lm", 0): 0.0}

    def f(s):
        return FactorEval(r=np.array([s[("lm", 0)] - 5.0]), jac={("lm", 0): np.eye(1)})

    prob = FactorGraphProblem(state, layout, [f])
    h, b, cost = prob.linearize()
    assert np.allclose(h, [[1.0]])
    assert np.allclose(b, [-5.0])
    assert np.isclose(cost, 12.5)
    # sign convention: the step solves (H + mu I) dx = -b
    dx = solve_normal_equations(h, b, 0.0)
    assert np.allclose(dx, [5.0])


def test_linearize_block_diagonal_structure():
    layout = StateLayout([(("p", 0), 3, True), (("p", 1), 3, True)])
    state = {("p", 0): np.zeros(3), ("p", 1): np.zeros(3)}
    f0 = lambda s: FactorEval(r=s[("p", 0)] - 1.0, jac={("p", 0): np.eye(3)})
    f1 = lambda s: FactorEval(r=s[("p", 1)] + 2.0, jac={("p", 1): np.eye(3)})
    h, b, cost = FactorGraphProblem(state, layout, [f0, f1]).linearize()
    assert np.allclose(h[:3, 3:], 0.0)
    assert np.allclose(h[3:, :3], 0.0)


def test_linearize_cost_matches_direct_sum():
    layout = StateLayout([(("p", 0), 3, True)])
    state = {("p", 0): RNG.normal(size=3)}
    facs = []
    for _ in range(7):
        a = RNG.normal(size=(2, 3))
        c = RNG.normal(size=2)
        w = RNG.uniform(0.5, 2.0, size=2)
        facs.append(
            lambda s, a=a, c=c, w=w: FactorEval(
                r=a @ s[("p", 0)] + c, jac={("p", 0): a}, sqrt_w=w
            )
        )
    prob = FactorGraphProblem(state, layout, facs)
    _, _, cost = prob.linearize()
    direct = 0.0
    for f in facs:
        ev = f(state)
        wr = ev.sqrt_w * ev.r
        direct += 0.5 * wr @ wr
    assert abs(cost - direct) < 1e-12


def test_solve_normal_equations_identity():
    h = np.eye(4)
    b = np.ones(4)
    assert np.allclose(solve_normal_equations(h, b, 0.0), -b)


def test_solve_normal_equations_hand_2x2():
    h = np.array([[2.0, 1.0], [1.0, 2.0]])
    b = np.array([1.0, 1.0])
    assert np.allclose(solve_normal_equations(h, b, 0.0), [-1 / 3, -1 / 3])


def test_solve_normal_equations_damping_shrinks_step():
    h = np.array([[2.0, 1.0], [1.0, 2.0]])
    b = np.array([1.0, -0.5])
    norms = [
        np.linalg.norm(solve_normal_equations(h, b, mu))
        for mu in [0.0, 0.1, 1.0, 10.0, 1e3, 1e6]
    ]
    assert all(n1 > n2 for n1, n2 in zip(norms, norms[1:]))


def test_solve_normal_equations_indefinite_raises():
    h = np.array([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(SolveError):
        solve_normal_equations(h, np.ones(2), 1e-9)


def make_linear_problem(x0):
    # quadratic cost: two linear factors on a 2-dim block
    a1 = np.array([[2.0, 0.3], [0.1, 1.5]])
    c1 = np.array([0.4, -0.2])
    a2 = np.array([[0.5, -1.0]])
    c2 = np.array([0.3])
    layout = StateLayout([(("p", 0), 2, True)])
    state = {("p", 0): np.asarray(x0, dtype=float)}
    facs = [
        lambda s: FactorEval(r=a1 @ s[("p", 0)] + c1, jac={("p", 0): a1}),
        lambda s: FactorEval(r=a2 @ s[("p", 0)] + c2, jac={("p", 0): a2}),
    ]
    h = a1.T @ a1 + a2.T @ a2
    g = a1.T @ c1 + a2.T @ c2
    x_star = np.linalg.solve(h, -g)
    return FactorGraphProblem(state, layout, facs), x_star


def test_lm_linear_least_squares_fast_convergence():
    # from a nearby start the damped solver reaches the closed-form optimum
    # within two accepted steps
    prob, x_star = make_linear_problem(None)
    prob.state[("p", 0)] = x_star + np.array([0.02, -0.015])
    report = solve_lm(prob)
    assert report.converged
    assert report.accepted_steps <= 2
    assert np.linalg.norm(prob.state[("p", 0)] - x_star) < 1e-10


def test_lm_linear_least_squares_from_far():
    prob, x_star = make_linear_problem(None)
    prob.state[("p", 0)] = x_star + np.array([250.0, -180.0])
    report = solve_lm(prob)
    assert report.converged
    assert np.linalg.norm(prob.state[("p", 0)] - x_star) < 1e-9


def test_lm_zero_residual_start_terminates_immediately():
    layout = StateLayout([(("p", 0), 2, True)])
    state = {("p", 0): np.array([1.0, 2.0])}
    f = lambda s: FactorEval(r=s[("p", 0)] - np.array([1.0, 2.0]), jac={("p", 0): np.eye(2)})
    report = solve_lm(FactorGraphProblem(state, layout, [f]))
    assert report.converged
    assert report.accepted_steps == 0
    assert np.allclose(state[("p", 0)], [1.0, 2.0])


def test_lm_rosenbrock():
    layout = StateLayout([(("p", 0), 2, True)])
    state = {("p", 0): np.array([-1.2, 1.0])}

    def f(s):
        x, y = s[("p", 0)]
        r = np.array([10.0 * (y - x * x), 1.0 - x])
        jac = np.array([[-20.0 * x, 10.0], [-1.0, 0.0]])
        return FactorEval(r=r, jac={("p", 0): jac})

    report = solve_lm(FactorGraphProblem(state, layout, [f]), SolverConfig(max_iterations=100))
    assert report.converged
    assert np.allclose(state[("p", 0)], [1.0, 1.0], atol=1e-6)


def test_lm_accepted_costs_monotone_and_rejects_restore():
    prob, _ = make_linear_problem(None)
    prob.state[("p", 0)] = np.array([50.0, -30.0])
    report = solve_lm(prob)
    costs = [it.cost for it in report.iterations if it.accepted]
    assert all(c1 >= c2 for c1, c2 in zip(costs, costs[1:]))


def test_lm_all_static_returns_input_unchanged():
    layout = StateLayout([(("p", 0), 3, False)])
    state = {("p", 0): np.array([1.0, 2.0, 3.0])}
    f = lambda s: FactorEval(r=s[("p", 0)] * 2.0, jac={("p", 0): 2 * np.eye(3)})
    report = solve_lm(FactorGraphProblem(state, layout, [f]))
    assert np.allclose(state[("p", 0)], [1.0, 2.0, 3.0])
    assert report.converged


def test_lm_reports_unconstrained_blocks():
    layout = StateLayout([(("p", 0), 3, True), (("p", 1), 3, True)])
    state = {("p", 0): np.zeros(3), ("p", 1): np.zeros(3)}
    f = lambda s: FactorEval(r=s[("p", 0)] - 1.0, jac={("p", 0): np.eye(3)})
    report = solve_lm(FactorGraphProblem(state, layout, [f]))
    assert ("p", 1) in report.unconstrained_keys


def test_lm_determinism():
    def run():
        prob, _ = make_linear_problem(None)
        prob.state[("p", 0)] = np.array([7.0, -3.0])
        rep = solve_lm(prob)
        return [(it.cost, it.mu, it.accepted) for it in rep.iterations], prob.state[("p", 0)].copy()

    a, xa = run()
    b, xb = run()
    assert a == b
    assert np.array_equal(xa, xb)


def test_layout_duplicate_key_rejected():
    with pytest.raises(ValueError):
        StateLayout([(("p", 0), 3, True), (("p", 0), 3, True)])


def test_offset_clamp_retraction():
    layout = StateLayout([(("ti", 0), 1, True)])
    state = {("ti", 0): 0.045}
    prob = FactorGraphProblem(state, layout, [], offset_max=0.05)
    prob.apply_step(np.array([0.02]))
    assert state[("ti", 0)] == pytest.approx(0.05)
    prob.apply_step(np.array([-0.2]))
    assert state[("ti", 0)] == pytest.approx(-0.05)
