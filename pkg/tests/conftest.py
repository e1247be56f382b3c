"""Shared fixtures: cached MATPOWER cases and solved stages, random problem
generators, and the acceptance summary printed at the end of a run."""

from __future__ import annotations

import functools

import numpy as np
import pytest
import scipy.sparse as sp

from mcpflow import RegulationConfig, assemble, load_case
from mcpflow.mcp import Bounds, MCPProblem
from mcpflow.newton import SolverOptions, solve

ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split(".")[0]), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:<4} {'PASS' if ok else 'FAIL'}  {detail}")


def have_case(name: str) -> bool:
    try:
        case_by_name(name)
    except FileNotFoundError:
        return False
    return True


@functools.lru_cache(maxsize=None)
def case_by_name(name: str):
    return load_case(name)


def needs_case(name: str):
    return pytest.mark.skipif(not have_case(name), reason=f"{name} not available")


@functools.lru_cache(maxsize=None)
def solved_stage(name: str, controls: str = "gen-voltage"):
    """Solve ``name`` with the given controls from a flat start (cached)."""
    case = case_by_name(name)
    model = assemble(case, RegulationConfig.from_controls(controls))
    report = solve(model.problem, model.initial_point(), SolverOptions())
    return model, report


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_p_matrix(rng, n: int, kind: str = "mixed") -> np.ndarray:
    """Random P-matrices of a few families: positive definite (possibly
    nonsymmetric) and strictly diagonally dominant with positive diagonal."""
    if kind == "mixed":
        kind = ("pd", "dominant")[rng.integers(2)]
    if kind == "pd":
        a = rng.normal(size=(n, n))
        skew = rng.normal(size=(n, n))
        return a @ a.T + 0.1 * np.eye(n) + (skew - skew.T)
    a = rng.normal(size=(n, n))
    np.fill_diagonal(a, 0.0)
    np.fill_diagonal(a, np.abs(a).sum(axis=1) + rng.uniform(0.1, 1.0, n))
    return a


def random_bounds(rng, n: int) -> Bounds:
    """Mix of free, one-sided, two-sided and occasionally fixed bounds."""
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    for i in range(n):
        kind = rng.integers(5)
        a = rng.uniform(-1, 0.5)
        if kind == 1:
            lo[i] = a
        elif kind == 2:
            hi[i] = a
        elif kind == 3:
            lo[i], hi[i] = a, a + rng.uniform(0.1, 2.0)
        elif kind == 4 and rng.random() < 0.2:
            lo[i] = hi[i] = a
        elif kind == 4:
            lo[i], hi[i] = a, a + rng.uniform(0.1, 2.0)
    return Bounds(lo, hi)


def regular_mcp(rng, n: int, curvature: float = 0.5):
    """Smooth MCP with a known strongly regular solution.

    ``F(x) = A (x - x*) + c * sin(x - x*)**2 + f*`` with ``A`` positive
    definite; ``f*`` vanishes on interior components and points inward at
    active bounds, so ``x*`` is a nondegenerate solution.
    """
    a = rng.normal(size=(n, n))
    A = a @ a.T / n + np.eye(n)
    bounds = random_bounds(rng, n)
    lo, hi = bounds.lower, bounds.upper
    xs = np.zeros(n)
    fs = np.zeros(n)
    for i in range(n):
        choice = rng.integers(3)
        if choice == 1 and np.isfinite(lo[i]):
            xs[i], fs[i] = lo[i], rng.uniform(0.5, 2.0)
        elif choice == 2 and np.isfinite(hi[i]):
            xs[i], fs[i] = hi[i], -rng.uniform(0.5, 2.0)
        elif lo[i] == hi[i]:
            xs[i], fs[i] = lo[i], rng.normal()
        else:
            l = lo[i] if np.isfinite(lo[i]) else -3.0
            u = hi[i] if np.isfinite(hi[i]) else 3.0
            xs[i] = l + (u - l) * rng.uniform(0.3, 0.7)
    c = curvature * rng.uniform(0.5, 1.0, n)

    def residual(x):
        d = x - xs
        return A @ d + c * np.sin(d) ** 2 + fs

    def jacobian(x):
        d = x - xs
        return sp.csc_matrix(A + np.diag(c * np.sin(2 * d)))

    return MCPProblem(bounds, residual, jacobian), xs


def quadratic_probe(rng, n: int, coupling: float = 0.3, curvature: float = 1.0):
    """Strongly regular MCP for measuring the local convergence order.

    ``F(x) = A (x - x*) + c (x - x*)**2 + f*`` with ``A = I + coupling * S``
    (``S`` positive semidefinite) and a uniform curvature ``c``.  With weak
    coupling the Newton error keeps a stable direction from the first step,
    so the four residuals that fit above round-off are already asymptotic.
    At least two components stay interior; the rest are split over active
    lower and upper bounds with strictly inward residuals.
    """
    a = rng.normal(size=(n, n))
    A = np.eye(n) + coupling * (a @ a.T) / n
    xs = rng.uniform(-1.0, 1.0, n)
    lo, hi = xs - 1.0, xs + 1.0
    fs = np.zeros(n)
    for i in range(2, n):
        choice = rng.integers(3)
        if choice == 1:
            lo[i], fs[i] = xs[i], rng.uniform(0.5, 2.0)
        elif choice == 2:
            hi[i], fs[i] = xs[i], -rng.uniform(0.5, 2.0)

    def residual(x):
        d = x - xs
        return A @ d + curvature * d ** 2 + fs

    def jacobian(x):
        return sp.csc_matrix(A + np.diag(2.0 * curvature * (x - xs)))

    return MCPProblem(Bounds(lo, hi), residual, jacobian), xs


def structure_violations(model, x, tol: float = 1e-6) -> list:
    """Case-analysis checks of the regulation rows at a solution ``x``.

    Voltage control: interior reactive output pins the voltage to its set
    point, output at the lower limit allows only higher voltage and at the
    upper limit only lower; fixed output (equal limits) leaves it free.  Devices: a positive bound slack means the
    setting sits on that bound and a positive drift means the voltage row it
    pairs with is tight.  Droop: interior real output lies on the droop line.
    """
    case, L = model.case, model.layout
    st = model.state(x)
    lo, hi = model.problem.bounds.lower, model.problem.bounds.upper
    bad = []
    for j, bus in enumerate(L.q_buses):
        p = L.q_pos[j]
        q, v, vsp = x[p], st.v[bus], case.v_sp[bus]
        tag = f"bus {case.bus_id[bus]}"
        if lo[p] == hi[p]:
            continue  # fixed output: the voltage row is unconstrained
        if lo[p] + tol < q < hi[p] - tol and abs(v - vsp) > tol:
            bad.append(f"{tag}: interior q but |v - v_sp| = {abs(v - vsp):.2e}")
        if q <= lo[p] + tol and v < vsp - tol:
            bad.append(f"{tag}: q at minimum but v below set point")
        if q >= hi[p] - tol and v > vsp + tol:
            bad.append(f"{tag}: q at maximum but v above set point")
    for d in L.devices:
        u, v = x[d.setting], st.v[d.bus]
        tag = f"{d.kind} {d.key}"
        if x[d.at_lo] > tol and abs(u - d.lo) > tol:
            bad.append(f"{tag}: lower slack active off the bound")
        if x[d.at_hi] > tol and abs(u - d.hi) > tol:
            bad.append(f"{tag}: upper slack active off the bound")
        vmin, vmax = case.v_min[d.bus], case.v_max[d.bus]
        if x[d.up] > tol and abs(v + x[d.raise_limit] - vmin) > tol:
            bad.append(f"{tag}: upward drift without a tight lower voltage row")
        if x[d.down] > tol and abs(vmax - v + x[d.lower_limit]) > tol:
            bad.append(f"{tag}: downward drift without a tight upper voltage row")
        if abs(u - d.sp - d.sign * (x[d.up] - x[d.down])) > tol:
            bad.append(f"{tag}: setting off set point plus drift")
    if L.dfreq is not None:
        df = x[L.dfreq]
        for g, p in zip(L.p_gens, L.p_pos):
            if lo[p] + tol < x[p] < hi[p] - tol:
                line = case.pg[g] - model.droop[g] * df
                if abs(x[p] - line) > tol:
                    bad.append(f"gen {case.gen_id[g]}: interior p off the droop line")
    return bad


def tap_scenario(width: float = 0.02, v_cap: float = 1.04):
    """case14 with all three transformers regulating their to-side buses and
    the load-side upper voltage limits lowered so that drifts and bounds bind."""
    from dataclasses import replace
    from mcpflow.grid import TapDevice

    case = case_by_name("case14")
    taps = [TapDevice(branch=int(k), regulated_bus=int(case.br_t[k]),
                      u_min=case.br_tap[k] - width, u_max=case.br_tap[k] + width)
            for k in np.flatnonzero(case.br_transformer)]
    case = case.with_devices(taps=taps)
    v_max = case.v_max.copy()
    v_max[[case.bus_index(b) for b in (7, 9)]] = v_cap
    return replace(case, v_max=v_max)
