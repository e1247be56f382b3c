import numpy as np
import pytest
from dataclasses import replace

from mcpflow.baselines import NROptions, nr_pv_pq
from mcpflow.grid import (Branch, Bus, BusType, CaseError, Generator, GridCase, GridState,
                          SwitchedShunt, TapDevice, build_admittance, pf_jacobian, pf_residual)
from mcpflow.matpower_io import find_case, parse_raw, to_grid_case

from conftest import case_by_name, needs_case

SLACK, PQ = BusType.SLACK, BusType.PQ


def two_bus(x=1.0, r=0.0, b=0.0, tap=1.0, pd=0.0, qd=0.0):
    buses = [Bus(1, SLACK), Bus(2, PQ, pd=pd, qd=qd)]
    gens = [Generator(bus=1, pg=0.0, vg=1.0, id=1)]
    branches = [Branch(1, 2, r, x, b, tap, transformer=tap != 1.0, id=1)]
    return GridCase.from_elements(buses, gens, branches, base_mva=100.0, name="two_bus",
                                  v_sp=[1.0, np.nan])


def dense_admittance(case: GridCase, tap=None, bsh=None) -> np.ndarray:
    """Textbook per-branch pi-model stamping into a dense matrix."""
    tap = case.br_tap if tap is None else tap
    Y = np.diag(case.gs + 1j * case.bs).astype(complex)
    for k in range(case.n_branch):
        f, t = case.br_f[k], case.br_t[k]
        y = 1.0 / complex(case.br_r[k], case.br_x[k])
        a = tap[k] * np.exp(1j * case.br_shift[k])
        Y[f, f] += (y + 0.5j * case.br_b[k]) / abs(a) ** 2
        Y[t, t] += y + 0.5j * case.br_b[k]
        Y[f, t] -= y / np.conj(a)
        Y[t, f] -= y / a
    if bsh is not None:
        for s, b in zip(case.shunts, bsh):
            Y[s.bus, s.bus] += 1j * b
    return Y


def random_state(rng, case: GridCase) -> GridState:
    st = GridState.from_case(case)
    st.v = rng.uniform(0.9, 1.1, case.n_bus)
    st.delta = rng.uniform(-0.3, 0.3, case.n_bus)
    st.pg = rng.uniform(0.0, 1.0, case.n_gen)
    st.qg = rng.uniform(-0.5, 0.5, case.n_gen)
    for d in case.taps:
        st.tap[d.branch] = rng.uniform(0.9, 1.1)
    st.bsh = rng.uniform(-0.2, 0.2, len(case.shunts))
    st.dfreq = rng.uniform(-0.01, 0.01)
    return st


def with_test_devices(case: GridCase) -> GridCase:
    """Two taps and two switched shunts on arbitrary elements."""
    taps = [TapDevice(branch=k, regulated_bus=int(case.br_t[k]), u_min=0.9, u_max=1.1)
            for k in (0, case.n_branch // 2)]
    shunts = [SwitchedShunt(bus=i, b_min=-0.5, b_max=0.5) for i in (1, case.n_bus - 1)]
    return case.with_devices(taps=taps, shunts=shunts)


GROUPS = ("delta", "v", "pg", "qg", "tap", "shunt", "dfreq")


def group_view(case: GridCase, st: GridState, group: str):
    """Return (getter, setter) for a variable group as a flat vector."""
    if group == "tap":
        idx = np.array([d.branch for d in case.taps], dtype=int)
        return (lambda s: s.tap[idx].copy(),
                lambda s, v: s.tap.__setitem__(idx, v))
    if group == "shunt":
        return lambda s: s.bsh.copy(), lambda s, v: setattr(s, "bsh", v.copy())
    if group == "dfreq":
        return (lambda s: np.array([s.dfreq]), lambda s, v: setattr(s, "dfreq", float(v[0])))
    return (lambda s: getattr(s, group).copy(), lambda s, v: setattr(s, group, v.copy()))


def central_differences(case: GridCase, st: GridState, group: str, h: float = 1e-6):
    get, put = group_view(case, st, group)
    base = get(st)
    cols = []
    for j in range(base.size):
        hi, lo = st.copy(), st.copy()
        e = np.zeros(base.size)
        e[j] = h
        put(hi, base + e)
        put(lo, base - e)
        cols.append((np.concatenate(pf_residual(case, hi)) - np.concatenate(pf_residual(case, lo)))
                    / (2 * h))
    return np.column_stack(cols) if cols else np.zeros((2 * case.n_bus, 0))


class TestAdmittance:
    def test_single_line(self):
        adm = build_admittance(two_bus())
        np.testing.assert_allclose(adm.B.toarray(), [[-1.0, 1.0], [1.0, -1.0]], atol=1e-15)
        assert abs(adm.G).max() == 0.0

    def test_tap_ratio_two(self):
        adm = build_admittance(two_bus(tap=2.0))
        np.testing.assert_allclose(adm.B.toarray(), [[-0.25, 0.5], [0.5, -1.0]], atol=1e-15)

    def test_case9_matches_dense_oracle(self):
        case = case_by_name("case9")
        Y = build_admittance(case).Y.toarray()
        assert np.max(np.abs(Y - dense_admittance(case))) <= 1e-12

    def test_devices_match_dense_oracle(self, rng):
        case = with_test_devices(case_by_name("case9"))
        st = random_state(rng, case)
        Y = build_admittance(case, st).Y.toarray()
        assert np.max(np.abs(Y - dense_admittance(case, st.tap, st.bsh))) <= 1e-12

    def test_neutral_devices_equal_tapless(self):
        case = case_by_name("case9")
        taps = [TapDevice(branch=k, regulated_bus=int(case.br_t[k]), u_min=0.9, u_max=1.1,
                          u_sp=1.0) for k in range(3)]
        shunts = [SwitchedShunt(bus=i, b_min=-1.0, b_max=1.0, b_sp=0.0) for i in (2, 4)]
        devices = case.with_devices(taps=taps, shunts=shunts)
        a = build_admittance(case).Y
        b = build_admittance(devices, GridState.from_case(devices)).Y
        assert (a != b).nnz == 0

    def test_symmetric_pattern(self):
        Y = build_admittance(case_by_name("case118")).Y
        pattern = (Y != 0).astype(int)
        assert (pattern != pattern.T).nnz == 0

    def test_zero_reactance_rejected(self):
        with pytest.raises(CaseError, match="reactance"):
            two_bus(x=0.0)


class TestResidual:
    def test_lossless_unloaded_flat_state_balances(self):
        P, Q = pf_residual(two_bus(), GridState.from_case(two_bus()))
        assert np.all(P == 0.0) and np.all(Q == 0.0)

    def test_load_at_flat_start(self):
        case = two_bus(x=0.1, pd=0.5, qd=0.2)
        P, Q = pf_residual(case, GridState.from_case(case))
        assert P[1] == pytest.approx(-0.5, abs=1e-15)
        assert Q[1] == pytest.approx(-0.2, abs=1e-15)

    def test_explicit_formula(self, rng):
        # sum form written out term by term
        case = case_by_name("case9")
        st = random_state(rng, case)
        Y = dense_admittance(case)
        G, B = Y.real, Y.imag
        P, Q = pf_residual(case, st)
        cg = case.gen_incidence().toarray()
        for i in range(case.n_bus):
            d = st.delta[i] - st.delta
            p = cg[i] @ st.pg - case.pd[i] - np.sum(st.v[i] * st.v * (G[i] * np.cos(d) + B[i] * np.sin(d)))
            q = cg[i] @ st.qg - case.qd[i] - np.sum(st.v[i] * st.v * (G[i] * np.sin(d) - B[i] * np.cos(d)))
            assert P[i] == pytest.approx(p, abs=1e-12)
            assert Q[i] == pytest.approx(q, abs=1e-12)

    def test_lossless_balance(self, rng):
        case = case_by_name("case9")
        lossless = replace(case, br_r=np.zeros(case.n_branch), gs=np.zeros(case.n_bus))
        cg = lossless.gen_incidence()
        for _ in range(20):
            st = random_state(rng, lossless)
            P, _ = pf_residual(lossless, st)
            flows = cg @ st.pg - lossless.pd - P
            assert abs(flows.sum()) <= 1e-12

    def test_non_finite_state(self):
        case = two_bus()
        st = GridState.from_case(case)
        st.v[1] = np.nan
        with pytest.raises(FloatingPointError):
            pf_residual(case, st)

    @needs_case("case14")
    def test_case14_solved_state(self):
        case = case_by_name("case14")
        rep, st, _ = nr_pv_pq(case, NROptions(tol=1e-12, enforce_q_limits=False))
        assert rep.converged
        P, Q = pf_residual(case, st)
        assert max(np.abs(P).max(), np.abs(Q).max()) <= 1e-6
        # and the published voltages agree to their printed precision
        np.testing.assert_allclose(st.v, case.vm, atol=2e-3)


class TestJacobian:
    @pytest.mark.parametrize("name", ["case9", "case14", "case30"])
    def test_central_differences(self, rng, name):
        case = with_test_devices(case_by_name(name))
        for _ in range(20):
            st = random_state(rng, case)
            J = pf_jacobian(case, st, GROUPS).toarray()
            fd = np.hstack([central_differences(case, st, g) for g in GROUPS])
            scale = np.maximum(np.abs(fd), 1.0)
            assert np.max(np.abs(J - fd) / scale) <= 1e-6

    def test_generator_columns_are_unit(self):
        case = case_by_name("case9")
        st = GridState.from_case(case)
        J = pf_jacobian(case, st, ("qg",)).toarray()
        nb = case.n_bus
        for k in range(case.n_gen):
            assert J[nb + case.gen_bus[k], k] == 1.0
            assert np.count_nonzero(J[:, k]) == 1

    def test_no_incidence_zero(self, rng):
        case = with_test_devices(case_by_name("case9"))
        st = random_state(rng, case)
        J = pf_jacobian(case, st, ("tap", "shunt", "dfreq")).toarray()
        nb = case.n_bus
        for j, d in enumerate(case.taps):
            touched = {case.br_f[d.branch], case.br_t[d.branch]}
            rows = np.flatnonzero(J[:, j]) % nb
            assert set(rows.tolist()) <= touched
        for j, s in enumerate(case.shunts):
            assert set((np.flatnonzero(J[:, len(case.taps) + j]) % nb).tolist()) == {s.bus}
        assert not J[:, -1].any()

    def test_pattern_fixed(self, rng):
        case = with_test_devices(case_by_name("case14"))
        a = pf_jacobian(case, random_state(rng, case), GROUPS)
        b = pf_jacobian(case, random_state(rng, case), GROUPS)
        assert a.shape == b.shape and ((a != 0) != (b != 0)).nnz == 0

    def test_unknown_selection(self):
        case = two_bus()
        with pytest.raises(ValueError, match="unknown"):
            pf_jacobian(case, GridState.from_case(case), ("theta",))


class TestCaseModel:
    def test_per_unit_round_trip(self):
        raw = parse_raw(find_case("case118").read_text())
        case = to_grid_case(raw)
        live = raw.bus[:, 1] != 4
        np.testing.assert_allclose(case.pd * case.base_mva, raw.bus[live, 2], rtol=1e-12, atol=0)
        np.testing.assert_allclose(case.qd * case.base_mva, raw.bus[live, 3], rtol=1e-12, atol=0)
        on = raw.gen[:, 7] > 0
        np.testing.assert_allclose(case.pg * case.base_mva, raw.gen[on, 1], rtol=1e-12, atol=0)

    def test_disconnected_rejected(self):
        buses = [Bus(1, SLACK), Bus(2, PQ), Bus(3, PQ)]
        with pytest.raises(CaseError, match="island"):
            GridCase.from_elements(buses, [Generator(bus=1, pg=0.0, id=1)],
                                   [Branch(1, 2, 0.0, 0.1, id=1)], base_mva=100.0,
                                   v_sp=[1.0, np.nan, np.nan])

    def test_two_slacks_rejected(self):
        buses = [Bus(1, SLACK), Bus(2, SLACK)]
        gens = [Generator(bus=1, pg=0.0, id=1), Generator(bus=2, pg=0.0, id=2)]
        with pytest.raises(CaseError, match="slack"):
            GridCase.from_elements(buses, gens, [Branch(1, 2, 0.0, 0.1, id=1)],
                                   base_mva=100.0, v_sp=[1.0, 1.0])

    def test_generators_on_one_bus_stay_distinct(self):
        case = case_by_name("case9")
        extra = [case.generator(k) for k in range(case.n_gen)]
        extra.append(replace(extra[1], id=99, pg=0.1))
        buses = [case.bus(i) for i in range(case.n_bus)]
        branches = [case.branch(k) for k in range(case.n_branch)]
        two = GridCase.from_elements(buses, extra, branches, base_mva=case.base_mva,
                                     v_sp=case.v_sp)
        assert two.n_gen == case.n_gen + 1
        st = GridState.from_case(two)
        P, _ = pf_residual(two, st)
        P0, _ = pf_residual(case, GridState.from_case(case))
        assert P[two.gen_bus[-1]] - P0[case.gen_bus[1]] == pytest.approx(0.1)

    def test_removing_generator_demotes_pv(self):
        case = case_by_name("case9")
        pv_gen = int(case.gen_id[1])
        out = case.without_generators([pv_gen])
        assert out.bus_type[case.gen_bus[1]] == BusType.PQ
        assert np.isnan(out.v_sp[case.gen_bus[1]])

    def test_cases_are_immutable(self):
        case = case_by_name("case9")
        with pytest.raises(ValueError):
            case.pd[0] = 1.0
