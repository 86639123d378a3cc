"""Manifold Levenberg-Marquardt over an indexed error-state layout.

The solver works against a problem object exposing:

    linearize()      -> (H, b, cost) with H = sum J^T W J, b = sum J^T W r
    evaluate_cost()  -> cost at the current state (no Jacobians)
    apply_step(dx)   -> retract the error-state step into the state
    snapshot() / restore(s)

Steps solve (H + mu * diag_scale) dx = -b; accepted steps never increase the
cost and rejected steps restore the state exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .factors import FactorEval
from .lie import exp_so3

BLOCK_DIMS = {"R": 3, "p": 3, "bg": 3, "ba": 3, "lm": 1, "ti": 1, "tc": 1}


class SolveError(RuntimeError):
    """Normal-equation factorization failure (indefinite after damping)."""


@dataclass
class StateLayout:
    """Ordered error-state blocks; only active blocks receive columns."""

    blocks: list  # (key, dim, active)

    def __post_init__(self):
        self._offsets: dict = {}
        off = 0
        seen = set()
        for key, dim, active in self.blocks:
            if key in seen:
                raise ValueError(f"duplicate state block {key}")
            seen.add(key)
            if active:
                self._offsets[key] = (off, dim)
                off += dim
        self.dim = off

    @classmethod
    def from_keys(cls, active_keys, static_keys=()) -> "StateLayout":
        blocks = [(k, BLOCK_DIMS[k[0]], True) for k in active_keys]
        blocks += [(k, BLOCK_DIMS[k[0]], False) for k in static_keys]
        return cls(blocks)

    def offset(self, key):
        """(offset, dim) for an active block, or None if static/absent."""
        return self._offsets.get(key)

    def active_keys(self) -> list:
        return [k for k, _, a in self.blocks if a]

    def slices(self) -> dict:
        return {k: slice(o, o + d) for k, (o, d) in self._offsets.items()}


def scatter_factor(layout: StateLayout, ev: FactorEval, h: np.ndarray, b: np.ndarray) -> float:
    """Accumulate one whitened factor into normal equations; returns its cost."""
    r, jac = ev.whitened()
    items = [(layout.offset(k), j) for k, j in jac.items()]
    items = [(o, j) for o, j in items if o is not None]
    for (o1, d1), j1 in items:
        b[o1 : o1 + d1] += j1.T @ r
        for (o2, d2), j2 in items:
            if o2 < o1:
                continue
            blk = j1.T @ j2
            h[o1 : o1 + d1, o2 : o2 + d2] += blk
            if o2 > o1:
                h[o2 : o2 + d2, o1 : o1 + d1] += blk.T
    return 0.5 * float(r @ r)


def retract_key(key, value, delta: np.ndarray, offset_max: float = 0.05):
    """Default retraction: SO(3) right-multiply, offsets clamp, vectors add."""
    kind = key[0]
    if kind == "R":
        return value @ exp_so3(delta)
    if kind in ("ti", "tc"):
        return float(np.clip(value + delta[0], -offset_max, offset_max))
    if kind == "lm":
        return float(value + delta[0])
    return value + delta


class FactorGraphProblem:
    """Generic problem over keyed state values and FactorEval factors.

    `state` maps block key -> value; `factors` are callables state -> FactorEval
    (or None to skip). Used for small problems and tests; the smoother builds
    a batched problem with the same interface.
    """

    def __init__(self, state: dict, layout: StateLayout, factors: list, offset_max: float = 0.05):
        self.state = state
        self.layout = layout
        self.factors = factors
        self.offset_max = offset_max
        self.skipped = 0

    def _evals(self):
        self.skipped = 0
        for f in self.factors:
            ev = f(self.state)
            if ev is None:
                self.skipped += 1
                continue
            yield ev

    def linearize(self):
        n = self.layout.dim
        h = np.zeros((n, n))
        b = np.zeros(n)
        cost = 0.0
        for ev in self._evals():
            if not np.all(np.isfinite(ev.r)):
                raise SolveError(f"non-finite residual in factor over {list(ev.jac)}")
            cost += scatter_factor(self.layout, ev, h, b)
        return h, b, cost

    def evaluate_cost(self) -> float:
        return sum(ev.cost() for ev in self._evals())

    def apply_step(self, dx: np.ndarray) -> None:
        for key, sl in self.layout.slices().items():
            self.state[key] = retract_key(key, self.state[key], dx[sl], self.offset_max)

    def snapshot(self):
        return {
            k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.state.items()
        }

    def restore(self, snap) -> None:
        self.state.clear()
        self.state.update(snap)


@dataclass
class SolverConfig:
    max_iterations: int = 50
    mu0: float = 1e-4
    mu_up: float = 10.0
    mu_down: float = 0.1
    mu_max: float = 1e10
    rel_cost_tol: float = 1e-8
    grad_tol: float = 1e-10
    step_tol: float = 1e-10


@dataclass
class IterationRecord:
    cost: float
    mu: float
    step_norm: float
    accepted: bool


@dataclass
class LMReport:
    converged: bool
    termination: str
    initial_cost: float
    final_cost: float
    iterations: list = field(default_factory=list)
    unconstrained_keys: list = field(default_factory=list)

    @property
    def accepted_steps(self) -> int:
        return sum(1 for it in self.iterations if it.accepted)


def solve_normal_equations(h: np.ndarray, b: np.ndarray, mu: float) -> np.ndarray:
    """Solve (H + mu * diag_scale) dx = -b by Cholesky; raises SolveError."""
    d = np.maximum(np.diag(h), 1e-12)
    a = h + mu * np.diag(d)
    try:
        np.linalg.cholesky(a)  # positive-definiteness check
    except np.linalg.LinAlgError as e:
        raise SolveError("normal equations not positive definite") from e
    return np.linalg.solve(a, -b)


def solve_lm(problem, config: SolverConfig | None = None) -> LMReport:
    """Levenberg-Marquardt with diagonal damping and monotone accepted costs."""
    cfg = config or SolverConfig()
    mu = cfg.mu0
    try:
        h, b, cost = problem.linearize()
    except SolveError as e:
        return LMReport(False, f"linearize failed: {e}", np.nan, np.nan)
    report = LMReport(True, "max_iterations", cost, cost)
    layout = getattr(problem, "layout", None)
    if layout is not None:
        diag = np.diag(h)
        report.unconstrained_keys = [
            k for k, sl in layout.slices().items() if np.max(diag[sl], initial=0.0) <= 1e-12
        ]

    for _ in range(cfg.max_iterations):
        if np.max(np.abs(b), initial=0.0) < cfg.grad_tol:
            report.termination = "gradient"
            break
        try:
            dx = solve_normal_equations(h, b, mu)
        except SolveError:
            mu *= cfg.mu_up
            if mu > cfg.mu_max:
                report.converged = False
                report.termination = "diverged: damping exhausted"
                break
            continue
        step_norm = float(np.linalg.norm(dx))
        if step_norm < cfg.step_tol:
            report.iterations.append(IterationRecord(cost, mu, step_norm, False))
            report.termination = "step"
            break
        snap = problem.snapshot()
        problem.apply_step(dx)
        new_cost = problem.evaluate_cost()
        if np.isfinite(new_cost) and new_cost <= cost:
            decrease = cost - new_cost
            report.iterations.append(IterationRecord(new_cost, mu, step_norm, True))
            cost = new_cost
            mu = max(mu * cfg.mu_down, 1e-14)
            if decrease <= cfg.rel_cost_tol * max(cost, 1e-300):
                report.termination = "cost"
                break
            h, b, cost = problem.linearize()
        else:
            problem.restore(snap)
            report.iterations.append(IterationRecord(cost, mu, step_norm, False))
            mu *= cfg.mu_up
            if mu > cfg.mu_max:
                report.converged = False
                report.termination = "diverged: damping exhausted"
                break
    report.final_cost = cost
    return report
