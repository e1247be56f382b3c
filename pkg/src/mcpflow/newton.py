"""Josephy-Newton method for box-constrained complementarity problems.

Each iteration linearizes ``F`` at the current point and solves the boxed LCP

    l - x <= d <= u - x   _|_   J(x) d + F(x)

for the step ``d``, followed by an Armijo backtracking search on the squared
natural residual with a nonmonotone reference value.  If the subproblem
cannot be solved, ``level * I`` is added to ``J`` with geometrically growing
``level`` until it can.
"""

from __future__ import annotations

import enum
import logging
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .blcp import (AT_LOWER, AT_UPPER, BASIC, BLCPOptions, BLCPResult, BoxedLCP, PivotState,
                   SingularBasis, assignment_from_point, basic_step, solve_blcp)
from .blcp import Status as BLCPStatus
from .mcp import Bounds, EvaluationError, MCPProblem, natural_residual_from

logger = logging.getLogger(__name__)

# pivot budget for deciding whether the first subproblem is tractable
PROBE_PIVOTS = 30


class SolveStatus(str, enum.Enum):
    CONVERGED = "converged"
    DIVERGED = "diverged"
    ITERATION_LIMIT = "iteration_limit"
    SUBPROBLEM_FAILURE = "subproblem_failure"


@dataclass
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 50
    damping: str = "armijo_on_merit"
    sigma: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 1e-6
    nonmonotone_window: int = 5
    perturb_start: float = 1e-6
    perturb_growth: float = 10.0
    perturb_cap: float = 1e3
    crash: str = "auto"
    crash_tol: float = 1e-3
    crash_max_iter: int = 20
    subproblem: BLCPOptions = field(default_factory=BLCPOptions)
    verbose: bool = False
    trace: Optional[Callable[[dict], None]] = None

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.damping not in ("none", "armijo_on_merit"):
            raise ValueError(f"unknown damping {self.damping!r}")
        if self.crash not in ("none", "auto", "always"):
            raise ValueError(f"unknown crash mode {self.crash!r}")


@dataclass
class SolveReport:
    status: SolveStatus
    x: np.ndarray
    iterations: int
    residual_history: list
    merit_history: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    pivots: list = field(default_factory=list)
    wall_time: float = 0.0
    q_order: Optional[float] = None
    message: str = ""
    summary: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status is SolveStatus.CONVERGED

    @property
    def residual(self) -> float:
        return self.residual_history[-1]


def linearize(problem: MCPProblem, x: np.ndarray, f: Optional[np.ndarray] = None) -> BoxedLCP:
    """The Newton subproblem at ``x`` in step coordinates ``d = x_next - x``."""
    f = problem.F(x) if f is None else f
    b = problem.bounds
    return BoxedLCP(problem.J(x), f, Bounds(b.lower - x, b.upper - x))


def perturbed_subproblem(lcp: BoxedLCP, level: float) -> BoxedLCP:
    """Proximal perturbation ``M + level * I``; ``level = 0`` returns ``lcp`` unchanged."""
    if level < 0:
        raise ValueError("perturbation level must be nonnegative")
    if level == 0:
        return lcp
    return BoxedLCP(lcp.M + level * sp.identity(lcp.n, format="csc"), lcp.q, lcp.bounds)


def perturbed_retry(problem: MCPProblem, x: np.ndarray, level: float) -> BoxedLCP:
    return perturbed_subproblem(linearize(problem, x), level)


def perturbation_levels(opts: SolverOptions):
    level = opts.perturb_start
    while level <= opts.perturb_cap * (1 + 1e-12):
        yield level
        level *= opts.perturb_growth


def estimate_q_order(residuals, window: int = 5, floor: float = 1e-14) -> float:
    """Least-squares slope of ``log r[k+1]`` against ``log r[k]`` on the tail.

    The tail is the last ``window`` points of the longest strictly decreasing
    suffix of residuals above ``floor`` (values at round-off level carry no
    rate information).  Raises ``ValueError`` with fewer than 4 such points.
    """
    r = np.asarray([v for v in residuals], dtype=float)
    r = r[r > floor]
    if r.size < 4:
        raise ValueError("insufficient data: need at least 4 residuals above the floor")
    start = r.size - 1
    while start > 0 and r[start - 1] > r[start]:
        start -= 1
    tail = r[start:][-window:]
    if tail.size < 4:
        raise ValueError("insufficient data: fewer than 4 strictly decreasing tail residuals")
    lx, ly = np.log(tail[:-1]), np.log(tail[1:])
    slope = np.polyfit(lx, ly, 1)[0]
    return float(slope)


def _start_assignment(bounds: Bounds, x: np.ndarray, f: np.ndarray) -> np.ndarray:
    # d = 0 sits on the bound for active indices; keep those whose residual points outward
    a = assignment_from_point(bounds, np.zeros_like(x), f, tol=0.0)
    a[(a == AT_LOWER) & (f < 0)] = BASIC
    a[(a == AT_UPPER) & (f > 0)] = BASIC
    a[bounds.is_fixed] = AT_LOWER
    return a


def _relaxed_crash(problem: MCPProblem, x: np.ndarray, f: np.ndarray, opts: SolverOptions):
    """Newton iterations on ``F(x) = 0`` with the bounds ignored.

    Far from a solution the linearized complementarity subproblem may have
    no solution reachable by pivoting.  Solving the bound-free equations
    first and projecting the result onto the box gives a starting point
    close to the regime where the subproblems are well behaved.  Yields
    projected iterates; stops early when the equations are singular or the
    line search on ``|F|^2`` fails.
    """
    b = problem.bounds
    y, fy = x, f
    for _ in range(opts.crash_max_iter):
        if np.max(np.abs(fy)) <= opts.crash_tol:
            return
        lcp = BoxedLCP(problem.J(y), fy, Bounds.free(y.size))
        try:
            d = basic_step(lcp)
        except SingularBasis:
            return
        t = 1.0
        if problem.max_step is not None:
            t = min(1.0, float(problem.max_step(y, d)))
        norm = float(fy @ fy)
        while t >= opts.min_step:
            cand = y + t * d
            try:
                fc = problem.F(cand)
            except EvaluationError:
                t *= opts.backtrack
                continue
            if float(fc @ fc) <= (1.0 - 2.0 * opts.sigma * t) * norm:
                break
            t *= opts.backtrack
        else:
            return
        y, fy = cand, fc
        xp = b.project(y)
        yield xp, (fy if np.array_equal(xp, y) else problem.F(xp)), t


def solve(problem: MCPProblem, x0: np.ndarray, opts: Optional[SolverOptions] = None) -> SolveReport:
    """Solve ``problem`` from ``x0`` (projected onto the box first).

    Returns a SolveReport whose ``x`` is the last accepted iterate; on
    ``converged`` it satisfies ``is_solution(problem, x, opts.tol)``.
    """
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    b = problem.bounds
    x = b.project(np.asarray(x0, dtype=float).copy())
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 must be finite")
    f = problem.F(x)
    r = natural_residual_from(x, f, b)
    res = float(np.max(np.abs(r), initial=0.0))
    merit = float(r @ r)
    report = SolveReport(SolveStatus.ITERATION_LIMIT, x, 0, [res], [merit])
    recent = deque([merit], maxlen=max(1, opts.nonmonotone_window))
    assignment = None

    def finish(status, message=""):
        report.status = status
        report.x = x
        report.message = message
        report.wall_time = time.perf_counter() - t0
        try:
            report.q_order = estimate_q_order(report.residual_history)
        except ValueError:
            report.q_order = None
        return report

    def line_search(d):
        t = 1.0
        if problem.max_step is not None:
            t = min(1.0, float(problem.max_step(x, d)))
        ref = max(recent)
        best = None
        while t >= opts.min_step:
            xt = b.project(x + t * d)
            try:
                ft = problem.F(xt)
            except EvaluationError:
                t *= opts.backtrack
                continue
            rt = natural_residual_from(xt, ft, b)
            mt = float(rt @ rt)
            if opts.damping == "none" or mt <= (1.0 - 2.0 * opts.sigma * t) * ref:
                return mt, t, xt, ft, rt
            if best is None or mt < best[0]:
                best = (mt, t, xt, ft, rt)
            t *= opts.backtrack
        if best is not None and best[0] < merit:
            return best
        return None

    def directions(lcp, start):
        """Candidate steps: exact subproblem, then perturbed subproblems."""
        sub = solve_blcp(lcp, start, opts.subproblem)
        if sub.solved:
            yield "newton", 0.0, sub
        for level in perturbation_levels(opts):
            sub = solve_blcp(perturbed_subproblem(lcp, level), start, opts.subproblem)
            if sub.solved:
                yield "perturbed", level, sub

    def record(kind, level, t, pivots):
        report.iterations += 1
        report.residual_history.append(res)
        report.merit_history.append(merit)
        report.steps.append(t)
        report.pivots.append(pivots)
        rec = {"iteration": report.iterations, "residual": res, "merit": merit, "step": t,
               "pivots": pivots, "direction": kind, "perturbation": level}
        if opts.trace is not None:
            opts.trace(rec)
        if opts.verbose:
            logger.info("iter %3d  |r|=%.3e  merit=%.3e  step=%.3g  pivots=%d  %s %.1e",
                        rec["iteration"], res, merit, t, pivots, kind, level)

    crash = opts.crash == "always"
    if opts.crash == "auto" and res > opts.tol:
        lcp = linearize(problem, x, f)
        probe = replace(opts.subproblem, max_pivots=min(opts.subproblem.max_pivots, PROBE_PIVOTS),
                        lemke=False, log=None)
        first = solve_blcp(lcp, _start_assignment(lcp.bounds, x, f), probe)
        crash = not first.solved
    if crash:
        for y, fy, t in _relaxed_crash(problem, x, f, opts):
            ry = natural_residual_from(y, fy, b)
            my = float(ry @ ry)
            if report.iterations and my > 0.5 * merit:
                break  # projection no longer profits from the bound-free iterates
            x, f, r, merit = y, fy, ry, my
            res = float(np.max(np.abs(r), initial=0.0))
            recent.append(merit)
            record("crash", 0.0, t, 0)
            if report.iterations >= opts.max_iter:
                break

    while report.iterations < opts.max_iter:
        k = report.iterations
        if res <= opts.tol:
            return finish(SolveStatus.CONVERGED)
        lcp = linearize(problem, x, f)
        start = assignment if assignment is not None else _start_assignment(lcp.bounds, x, f)
        found = None
        tried = 0
        for kind, level, sub in directions(lcp, start):
            tried += 1
            found = line_search(sub.x)
            if found is not None:
                break
        if found is None:
            if tried == 0:
                return finish(SolveStatus.SUBPROBLEM_FAILURE,
                              f"iteration {k}: no subproblem solvable up to perturbation "
                              f"{opts.perturb_cap:g}")
            return finish(SolveStatus.DIVERGED, f"iteration {k}: line search failed")
        merit, t, x, f, r = found
        assignment = sub.state.assignment if kind == "newton" else None
        res = float(np.max(np.abs(r), initial=0.0))
        recent.append(merit)
        record(kind, level, t, sub.state.pivots)
    if res <= opts.tol:
        return finish(SolveStatus.CONVERGED)
    return finish(SolveStatus.ITERATION_LIMIT, f"no convergence in {opts.max_iter} iterations")
