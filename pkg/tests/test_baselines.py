import numpy as np
import pytest
import scipy.sparse as sp
from dataclasses import replace
from hypothesis import given, settings
from hypothesis import strategies as st

from mcpflow.baselines import (KINK, BusMode, FBOptions, NROptions, fb_residual, fb_solve,
                               fischer_burmeister, newton_raphson, nr_pv_pq)
from mcpflow.formulation import RegulationConfig, assemble
from mcpflow.grid import BusType, GridState
from mcpflow.mcp import Bounds, MCPProblem, is_solution, natural_residual
from mcpflow.newton import SolverOptions, SolveStatus, solve

from conftest import case_by_name, needs_case, regular_mcp, solved_stage

INF = np.inf


def constant_problem(f, lo, hi):
    f = np.asarray(f, float)
    return MCPProblem(Bounds(lo, hi), lambda _x: f, lambda _x: sp.identity(f.size, format="csc"))


def random_point_problem(rng, n):
    """Constant-F problem with each component placed at a bound or inside and
    each residual drawn from {0, +-m} with m well away from zero, so the
    complementarity verdict is unambiguous."""
    lo, hi, x, f = np.empty(n), np.empty(n), np.empty(n), np.empty(n)
    for i in range(n):
        kind = rng.integers(4)
        base = rng.uniform(-2, 2)
        width = rng.uniform(0.1, 2)
        lo[i] = base if kind in (1, 3) else -INF
        hi[i] = base + width if kind in (2, 3) else INF
        where = rng.integers(3)
        if where == 0 and np.isfinite(lo[i]):
            x[i] = lo[i]
        elif where == 1 and np.isfinite(hi[i]):
            x[i] = hi[i]
        else:
            x[i] = base + 0.5 * width if kind == 3 else (base - width if kind == 2 else base + width)
        f[i] = rng.choice([-1.0, 0.0, 1.0]) * rng.uniform(0.01, 3.0)
    return constant_problem(f, lo, hi), x


class TestFischerBurmeister:
    def test_examples(self):
        assert fischer_burmeister(0.0, 2.0) == 0.0
        assert fischer_burmeister(1.0, 1.0) == pytest.approx(np.sqrt(2) - 2, abs=1e-15)

    @settings(max_examples=300, deadline=None)
    @given(st.sampled_from([-1.0, 0.0, 1.0]), st.floats(1e-3, 10),
           st.sampled_from([-1.0, 0.0, 1.0]), st.floats(1e-3, 10))
    def test_zero_iff_complementary(self, sa, ma, sb, mb):
        # magnitudes are zero or clearly nonzero, so the verdict is unambiguous
        a, b = sa * ma, sb * mb
        zero = abs(fischer_burmeister(a, b)) <= 1e-12
        comp = a >= 0 and b >= 0 and a * b == 0
        assert zero == comp

    def test_row_forms(self):
        x = np.array([0.3, 0.3, 0.3, 0.3])
        f = np.array([0.7, 0.2, -0.4, 0.5])
        prob = constant_problem(f, [-INF, 0.0, -INF, 0.0], [INF, INF, 1.0, 1.0])
        h = fb_residual(prob, x)
        phi = fischer_burmeister
        np.testing.assert_allclose(h, [0.7, phi(0.3, 0.2), phi(0.7, 0.4), phi(0.3, phi(0.7, -0.5))])

    def test_zero_sets_agree(self, rng):
        agree = 0
        zeros = 0
        for _ in range(1000):
            prob, x = random_point_problem(rng, int(rng.integers(1, 6)))
            nat = np.max(np.abs(natural_residual(prob, x))) <= 1e-10
            fb = np.max(np.abs(fb_residual(prob, x))) <= 1e-10
            agree += nat == fb
            zeros += nat
        assert agree == 1000
        assert 50 <= zeros <= 950  # both verdicts well represented

    def test_solution_accepted(self, rng):
        for _ in range(20):
            prob, xs = regular_mcp(rng, 5)
            assert np.max(np.abs(fb_residual(prob, xs))) <= 1e-12

    def test_generalized_jacobian_off_kinks(self, rng):
        from mcpflow.baselines import _fb_parts
        for _ in range(20):
            prob, xs = regular_mcp(rng, 5)
            x = prob.bounds.project(xs + rng.normal(scale=0.3, size=5)) + 1e-3 * rng.random(5)
            x = np.minimum(x, prob.bounds.upper - 1e-3)
            _, a, b = _fb_parts(prob, x, prob.F(x))
            V = (np.diag(a) + np.diag(b) @ prob.J(x).toarray())
            h = 1e-7
            fd = np.column_stack([(fb_residual(prob, x + h * e) - fb_residual(prob, x - h * e))
                                  / (2 * h) for e in np.eye(5)])
            np.testing.assert_allclose(V, fd, atol=1e-5)

    def test_kink_convention(self):
        from mcpflow.baselines import _fb_partials
        da, db = _fb_partials(np.array([0.0]), np.array([0.0]))
        assert da[0] == db[0] == -KINK == pytest.approx(1 / np.sqrt(2) - 1)

    def test_non_finite(self):
        prob = constant_problem([1.0], [0.0], [INF])
        with pytest.raises(ValueError):
            fb_residual(prob, np.array([np.inf]))


class TestFBSolve:
    def test_agrees_with_josephy_newton(self, rng):
        both = 0
        for _ in range(40):
            n = int(rng.integers(1, 8))
            prob, xs = regular_mcp(rng, n)
            x0 = prob.bounds.project(xs + rng.normal(scale=0.5, size=n))
            a = solve(prob, x0)
            b = fb_solve(prob, x0)
            if a.converged and b.converged:
                both += 1
                np.testing.assert_allclose(a.x, b.x, atol=1e-6)
        assert both >= 30

    def test_converged_means_small_residual(self, rng):
        for _ in range(20):
            prob, xs = regular_mcp(rng, 6)
            opts = FBOptions()
            rep = fb_solve(prob, xs + rng.normal(scale=0.3, size=6), opts)
            if rep.converged:
                assert np.max(np.abs(fb_residual(prob, rep.x))) <= opts.tol
                assert rep.summary["natural_residual"] <= 10 * opts.tol

    def test_start_at_solution(self, rng):
        prob, xs = regular_mcp(rng, 4)
        rep = fb_solve(prob, xs)
        assert rep.converged and rep.iterations == 0

    def test_iteration_limit(self, rng):
        prob, xs = regular_mcp(rng, 6, curvature=2.0)
        rep = fb_solve(prob, xs + 2.0, FBOptions(max_iter=1))
        assert rep.status is SolveStatus.ITERATION_LIMIT
        assert len(rep.residual_history) == rep.iterations + 1 == 2

    def test_case9_stage_b(self):
        model = assemble(case_by_name("case9"), RegulationConfig(gen_voltage_control=True))
        rep = fb_solve(model.problem, model.initial_point())
        assert rep.converged
        assert is_solution(model.problem, rep.x, 1e-7)

    @pytest.mark.slow
    @needs_case("case1354pegase")
    def test_pegase1354_slower_than_mcp(self):
        model, mcp = solved_stage("case1354pegase")
        rep = fb_solve(model.problem, model.initial_point())
        assert rep.converged
        assert rep.iterations > mcp.iterations
        assert model.regulation_summary(rep.x)["max_v_deviation"] == pytest.approx(
            model.regulation_summary(mcp.x)["max_v_deviation"], abs=1e-6)


class TestNRSwitching:
    def test_no_limits_equals_stage_a(self):
        for name in ("case9", "case14", "case118"):
            case = case_by_name(name)
            free = replace(case, q_min=np.full(case.n_gen, -INF), q_max=np.full(case.n_gen, INF))
            rep, st_nr, sw = nr_pv_pq(free, NROptions(tol=1e-11))
            assert rep.converged and sw.switches == 0
            model = assemble(case)
            mcp = solve(model.problem, model.initial_point(), SolverOptions(tol=1e-11))
            got = model.state(mcp.x)
            np.testing.assert_allclose(st_nr.v, got.v, atol=1e-8)
            np.testing.assert_allclose(st_nr.delta, got.delta, atol=1e-8)

    def test_no_binding_limits_is_plain_nr(self):
        case = case_by_name("case9")
        rep, st_nr, sw = nr_pv_pq(case)
        assert rep.converged and sw.switches == 0
        start = GridState.from_case(case)
        ref, ok, _, _ = newton_raphson(case, start)
        assert ok
        np.testing.assert_allclose(st_nr.v, ref.v, atol=1e-12)

    def test_switch_to_limit(self):
        case = case_by_name("case14")
        # clamp one PV bus so tightly that it must switch
        k = int(np.flatnonzero(case.bus_type[case.gen_bus] == BusType.PV)[0])
        q_max = case.q_max.copy()
        q_min = case.q_min.copy()
        q_max[k], q_min[k] = 0.0, -0.001
        tight = replace(case, q_max=q_max, q_min=q_min)
        rep, st_nr, sw = nr_pv_pq(tight)
        assert rep.converged
        bus = int(case.gen_bus[k])
        assert sw.modes[bus] is not BusMode.PV
        assert st_nr.qg[k] in (q_max[k], q_min[k])
        assert rep.summary["max_v_deviation"] > 0

    @pytest.mark.parametrize("name", ["case14", "case30", "case118", "case300"])
    def test_switch_count_bound(self, name):
        case = case_by_name(name)
        opts = NROptions()
        rep, _, sw = nr_pv_pq(case, opts)
        n_pv = case.buses_of_type(BusType.PV).size
        assert sw.switches <= 2 * n_pv + opts.max_reversals
        assert all(n <= opts.max_reversals for n in sw.reversals.values())

    @pytest.mark.parametrize("name", ["case14", "case30", "case118"])
    def test_matches_mcp_when_switching_settles(self, name):
        # both enforce the same reactive limits, so the maxima agree
        rep, _, _ = nr_pv_pq(case_by_name(name))
        model, mcp = solved_stage(name)
        assert rep.converged and mcp.converged
        assert rep.summary["max_v_deviation"] == pytest.approx(
            model.regulation_summary(mcp.x)["max_v_deviation"], abs=1e-6)

    def test_divergence_reported(self):
        case = case_by_name("case9")
        heavy = replace(case, pd=case.pd * 20, qd=case.qd * 20)
        rep, _, _ = nr_pv_pq(heavy, NROptions(max_iter=8))
        assert not rep.converged
        assert rep.message

    @pytest.mark.slow
    @needs_case("case1354pegase")
    def test_pegase1354(self):
        rep, _, _ = nr_pv_pq(case_by_name("case1354pegase"))
        assert rep.converged
        assert rep.summary["max_v_deviation"] == pytest.approx(2.64e-2, abs=5e-4)
