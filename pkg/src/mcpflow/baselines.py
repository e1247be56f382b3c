"""Reference methods: Newton-Raphson with PV-PQ switching, and a
Fischer-Burmeister reformulation solved by semismooth Newton.

The Newton-Raphson solver here is self-contained (it only shares the
residual and Jacobian evaluation of ``grid``) so that it can serve as an
independent check of the complementarity solver on the plain power-flow
equations.
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import BusType, GridCase, GridState, _frozen, pf_jacobian, pf_residual
from .mcp import EvaluationError, MCPProblem, natural_residual_from
from .newton import SolveReport, SolveStatus, estimate_q_order

logger = logging.getLogger(__name__)

SWITCH_TOL = 1e-8
MAX_REVERSALS = 3
KINK = 1.0 - 1.0 / np.sqrt(2.0)


# ---------------------------------------------------------------------------
# Newton-Raphson on the power-flow equations

@dataclass
class NROptions:
    tol: float = 1e-8
    max_iter: int = 20
    max_outer: int = 50
    switch_tol: float = SWITCH_TOL
    max_reversals: int = MAX_REVERSALS
    enforce_q_limits: bool = True


def newton_raphson(case: GridCase, state: GridState, tol: float = 1e-8, max_iter: int = 20):
    """Plain full-step Newton-Raphson with PV magnitudes held at their values.

    Unknowns are the angles of all non-slack buses and the magnitudes of PQ
    buses.  Returns ``(state, converged, iterations, residual_history)``.
    """
    st = state.copy()
    pq = np.flatnonzero(case.bus_type == BusType.PQ)
    ns = np.flatnonzero(case.bus_type != BusType.SLACK)
    nb = case.n_bus
    rows = np.concatenate([ns, nb + pq])
    history = []
    for it in range(max_iter + 1):
        P, Q = pf_residual(case, st)
        mis = np.concatenate([P, Q])[rows]
        err = float(np.max(np.abs(mis), initial=0.0))
        history.append(err)
        if not np.isfinite(err):
            return st, False, it, history
        if err <= tol:
            return st, True, it, history
        if it == max_iter:
            break
        J = pf_jacobian(case, st, ("delta", "v")).tocsc()[rows][:, rows]
        try:
            dx = spla.spsolve(J.tocsc(), -mis)
        except RuntimeError:
            return st, False, it, history
        if not np.all(np.isfinite(dx)):
            return st, False, it, history
        st.delta[ns] += dx[:ns.size]
        st.v[pq] += dx[ns.size:]
        if np.any(st.v[pq] <= 0):
            return st, False, it + 1, history
    return st, False, max_iter, history


class BusMode(str, enum.Enum):
    PV = "PV"
    PQ_AT_QMIN = "PQ_at_qmin"
    PQ_AT_QMAX = "PQ_at_qmax"


@dataclass
class SwitchState:
    """Per-PV-bus mode and the switching history."""

    modes: dict
    history: list = field(default_factory=list)
    reversals: dict = field(default_factory=dict)

    @property
    def switches(self) -> int:
        return len(self.history)


def _bus_q_limits(case: GridCase):
    lo = np.zeros(case.n_bus)
    hi = np.zeros(case.n_bus)
    np.add.at(lo, case.gen_bus, case.q_min)
    np.add.at(hi, case.gen_bus, case.q_max)
    return lo, hi


def _switched_case(case: GridCase, modes: dict) -> GridCase:
    """The case with PQ-mode buses turned into PQ buses at the bound output."""
    types = case.bus_type.copy()
    v_sp = case.v_sp.copy()
    qg = case.qg.copy()
    for bus, mode in modes.items():
        if mode is BusMode.PV:
            continue
        types[bus] = BusType.PQ
        v_sp[bus] = np.nan
        gens = case.gen_bus == bus
        qg[gens] = case.q_max[gens] if mode is BusMode.PQ_AT_QMAX else case.q_min[gens]
    return replace(case, bus_type=_frozen(types, int), v_sp=_frozen(v_sp), qg=_frozen(qg))


def _complete_q(case: GridCase, st: GridState) -> np.ndarray:
    """Per-bus generator reactive output that closes the bus balances."""
    _, Q = pf_residual(case, st)
    cg = case.gen_incidence()
    return cg @ st.qg - Q


def nr_pv_pq(case: GridCase, opts: Optional[NROptions] = None,
             state: Optional[GridState] = None):
    """Newton-Raphson with reactive-limit PV-PQ switching.

    After each inner solve, PV buses whose required reactive output leaves
    ``[sum q_min, sum q_max]`` by more than ``switch_tol`` become PQ buses at
    the violated limit; a PQ-mode bus whose voltage crosses back over its set
    point returns to PV, at most ``max_reversals`` times per bus.

    Returns ``(report, state, switch_state)``.
    """
    opts = opts or NROptions()
    t0 = time.perf_counter()
    st = state.copy() if state is not None else GridState.from_case(case, flat=True)
    if state is None:
        st.v[case.bus_type == BusType.PQ] = 1.0
    reg = ~np.isnan(case.v_sp)
    st.v[reg] = case.v_sp[reg]
    pv = np.flatnonzero(case.bus_type == BusType.PV)
    sw = SwitchState(modes={int(b): BusMode.PV for b in pv})
    qlo, qhi = _bus_q_limits(case)
    history = []
    iterations = 0
    status, message = SolveStatus.ITERATION_LIMIT, ""
    for outer in range(opts.max_outer):
        work = _switched_case(case, sw.modes)
        st.qg = work.qg.copy()
        st, ok, its, hist = newton_raphson(work, st, opts.tol, opts.max_iter)
        iterations += its
        history.extend(hist if not history else hist[1:])
        if not ok:
            status = SolveStatus.DIVERGED
            message = f"inner Newton-Raphson failed after {its} iterations (outer pass {outer})"
            break
        if not opts.enforce_q_limits:
            status = SolveStatus.CONVERGED
            break
        q = _complete_q(work, st)
        changes = []
        for bus, mode in sw.modes.items():
            if mode is BusMode.PV:
                if q[bus] > qhi[bus] + opts.switch_tol:
                    changes.append((bus, BusMode.PQ_AT_QMAX))
                elif q[bus] < qlo[bus] - opts.switch_tol:
                    changes.append((bus, BusMode.PQ_AT_QMIN))
            else:
                back = ((mode is BusMode.PQ_AT_QMAX and st.v[bus] > case.v_sp[bus] + opts.switch_tol)
                        or (mode is BusMode.PQ_AT_QMIN
                            and st.v[bus] < case.v_sp[bus] - opts.switch_tol))
                if back:
                    n = sw.reversals.get(bus, 0)
                    if n < opts.max_reversals:
                        sw.reversals[bus] = n + 1
                        changes.append((bus, BusMode.PV))
        if not changes:
            status = SolveStatus.CONVERGED
            break
        for bus, mode in changes:
            sw.history.append((outer, int(case.bus_id[bus]), sw.modes[bus].value, mode.value))
            sw.modes[bus] = mode
            if mode is BusMode.PV:
                st.v[bus] = case.v_sp[bus]
    else:
        message = f"switching did not settle in {opts.max_outer} passes"
    # report generator outputs that close the balances of the final network
    final = _switched_case(case, sw.modes)
    st.qg = final.qg.copy()
    _fill_outputs(final, st)
    dev = float(np.max(np.abs(st.v[reg] - case.v_sp[reg]), initial=0.0))
    report = SolveReport(status, np.concatenate([st.delta, st.v]), iterations, history,
                         wall_time=time.perf_counter() - t0, message=message)
    report.summary = {"max_v_deviation": dev, "switches": sw.switches}
    try:
        report.q_order = estimate_q_order(history)
    except ValueError:
        report.q_order = None
    return report, st, sw


def _fill_outputs(case: GridCase, st: GridState) -> None:
    P, Q = pf_residual(case, st)
    slack = case.slack
    gens = np.flatnonzero(case.gen_bus == slack)
    if gens.size:
        st.pg[gens] -= P[slack] / gens.size
    for bus in np.flatnonzero(case.bus_type != BusType.PQ):
        gens = np.flatnonzero(case.gen_bus == bus)
        if gens.size:
            st.qg[gens] -= Q[bus] / gens.size


# ---------------------------------------------------------------------------
# Fischer-Burmeister reformulation

def fischer_burmeister(a, b):
    """``sqrt(a^2 + b^2) - a - b``; zero iff ``a >= 0, b >= 0, a b = 0``."""
    return np.hypot(a, b) - a - b


def _fb_partials(a, b):
    r = np.hypot(a, b)
    kink = r < 1e-14
    safe = np.where(kink, 1.0, r)
    da = np.where(kink, -KINK, a / safe - 1.0)
    db = np.where(kink, -KINK, b / safe - 1.0)
    return da, db


def _fb_parts(problem: MCPProblem, x: np.ndarray, f: np.ndarray):
    lo, hi = problem.bounds.lower, problem.bounds.upper
    has_lo, has_hi = np.isfinite(lo), np.isfinite(hi)
    h = f.copy()
    # d h / d x = diag(alpha) + diag(beta) J
    alpha = np.zeros(x.size)
    beta = np.ones(x.size)
    only_lo = has_lo & ~has_hi
    only_hi = has_hi & ~has_lo
    both = has_lo & has_hi
    a = x - lo
    c = hi - x
    if np.any(only_lo):
        i = only_lo
        h[i] = fischer_burmeister(a[i], f[i])
        da, db = _fb_partials(a[i], f[i])
        alpha[i], beta[i] = da, db
    if np.any(only_hi):
        i = only_hi
        h[i] = fischer_burmeister(c[i], -f[i])
        da, db = _fb_partials(c[i], -f[i])
        alpha[i], beta[i] = -da, -db
    if np.any(both):
        i = both
        inner = fischer_burmeister(c[i], -f[i])
        h[i] = fischer_burmeister(a[i], inner)
        ia, ib = _fb_partials(c[i], -f[i])
        oa, ob = _fb_partials(a[i], inner)
        alpha[i] = oa - ob * ia
        beta[i] = -ob * ib
    return h, alpha, beta


def fb_residual(problem: MCPProblem, x: np.ndarray) -> np.ndarray:
    """Componentwise Fischer-Burmeister residual of the MCP.

    Free rows give ``F_i``, one-sided rows ``phi(x - l, F)`` or
    ``phi(u - x, -F)``, and two-sided rows the composition
    ``phi(x - l, phi(u - x, -F))``.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")
    return _fb_parts(problem, x, problem.F(x))[0]


@dataclass
class FBOptions:
    tol: float = 1e-8
    max_iter: int = 200
    sigma: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 1e-12
    descent_rho: float = 1e-10
    descent_p: float = 2.1


def fb_solve(problem: MCPProblem, x0: np.ndarray, opts: Optional[FBOptions] = None) -> SolveReport:
    """Semismooth Newton method on the Fischer-Burmeister system with Armijo
    damping on ``0.5 |H|^2``; falls back to the steepest-descent direction
    when the Newton direction is unavailable or not sufficiently descending.
    """
    opts = opts or FBOptions()
    t0 = time.perf_counter()
    x = np.asarray(x0, dtype=float).copy()
    f = problem.F(x)
    h, alpha, beta = _fb_parts(problem, x, f)
    psi = 0.5 * float(h @ h)
    history = [float(np.max(np.abs(h), initial=0.0))]
    steps = []
    status, message = SolveStatus.ITERATION_LIMIT, ""
    it = 0
    for it in range(opts.max_iter):
        if history[-1] <= opts.tol:
            status = SolveStatus.CONVERGED
            break
        J = problem.J(x)
        V = (sp.diags(alpha) + sp.diags(beta) @ J).tocsc()
        grad = V.T @ h
        try:
            d = spla.spsolve(V, -h)
            ok = np.all(np.isfinite(d))
        except RuntimeError:
            ok = False
        if not ok or grad @ d > -opts.descent_rho * np.linalg.norm(d) ** opts.descent_p:
            d = -grad
        t = 1.0
        if problem.max_step is not None:
            t = min(1.0, float(problem.max_step(x, d)))
        slope = float(grad @ d)
        accepted = False
        while t >= opts.min_step:
            xt = x + t * d
            try:
                ft = problem.F(xt)
            except EvaluationError:
                t *= opts.backtrack
                continue
            ht, at, bt = _fb_parts(problem, xt, ft)
            pt = 0.5 * float(ht @ ht)
            if pt <= psi + opts.sigma * t * slope:
                accepted = True
                break
            t *= opts.backtrack
        if not accepted:
            status = SolveStatus.DIVERGED
            message = f"iteration {it}: line search failed"
            break
        x, f, h, alpha, beta, psi = xt, ft, ht, at, bt, pt
        history.append(float(np.max(np.abs(h), initial=0.0)))
        steps.append(t)
    else:
        it = opts.max_iter
        if history[-1] <= opts.tol:
            status = SolveStatus.CONVERGED
    iterations = len(history) - 1
    report = SolveReport(status, x, iterations, history, steps=steps,
                         wall_time=time.perf_counter() - t0, message=message)
    r = natural_residual_from(x, f, problem.bounds)
    report.summary = {"natural_residual": float(np.max(np.abs(r), initial=0.0))}
    try:
        report.q_order = estimate_q_order(history)
    except ValueError:
        report.q_order = None
    return report
