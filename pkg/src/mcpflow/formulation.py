"""Power flow with voltage and frequency regulation as a single MCP.

The variable vector is built in blocks, each paired one-to-one with a row:

=============  ==========================  ====================================
block          bounds                      row
=============  ==========================  ====================================
delta_pq       free                        real-power mismatch at PQ buses
v_pq           free                        reactive-power mismatch at PQ buses
delta_pv       free                        real-power mismatch at PV buses
v_pv           free                        reactive-power mismatch at PV buses
q_pv           [sum q_min, sum q_max]      v - v_sp at the PV bus
u, b           free                        setting - set point - drift
drift up/down  [0, inf)                    distance of v inside [v_min, v_max]
limit slacks   [0, inf)                    distance of the setting to its bounds
dfreq          free                        real-power mismatch at the slack bus
pg             [p_min, p_max]              droop line of the generator
=============  ==========================  ====================================

Blocks that are switched off by the RegulationConfig are absent, and the
corresponding quantities stay at their case values.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import BusType, CaseError, GridCase, GridState, build_admittance, pf_jacobian, pf_residual
from .mcp import Bounds, MCPProblem

logger = logging.getLogger(__name__)

F_NOM = 60.0
V_FLOOR = 0.1
VIOLATION_TOL = 1e-6
CONTROLS = ("gen-voltage", "taps", "shunts", "frequency")


@dataclass(frozen=True)
class RegulationConfig:
    """Which regulation mechanisms enter the problem.

    ``tap_control`` and ``shunt_control`` hold external branch ids and bus
    ids of attached devices, or the string ``"all"``.
    """

    gen_voltage_control: bool = False
    tap_control: Union[frozenset, str] = frozenset()
    shunt_control: Union[frozenset, str] = frozenset()
    frequency_control: bool = False
    droop_regulation: float = 0.05
    droop_scale: float = 1.0

    def __post_init__(self):
        for name in ("tap_control", "shunt_control"):
            val = getattr(self, name)
            if isinstance(val, str):
                if val != "all":
                    raise ValueError(f"{name} must be a set of ids or 'all'")
            else:
                object.__setattr__(self, name, frozenset(int(v) for v in val))
        if self.droop_regulation <= 0 or self.droop_scale <= 0:
            raise ValueError("droop parameters must be positive")

    @classmethod
    def from_controls(cls, controls: Union[str, Iterable[str]], **kw) -> "RegulationConfig":
        """Parse ``"gen-voltage,taps,shunts,frequency"`` style toggles."""
        if isinstance(controls, str):
            controls = [c.strip() for c in controls.split(",") if c.strip()]
        controls = set(controls) - {"none"}
        unknown = controls - set(CONTROLS)
        if unknown:
            raise ValueError(f"unknown controls {sorted(unknown)}; choose from {CONTROLS}")
        return cls(gen_voltage_control="gen-voltage" in controls,
                   tap_control="all" if "taps" in controls else frozenset(),
                   shunt_control="all" if "shunts" in controls else frozenset(),
                   frequency_control="frequency" in controls, **kw)

    @property
    def controls(self) -> list:
        out = []
        if self.gen_voltage_control:
            out.append("gen-voltage")
        if self.tap_control:
            out.append("taps")
        if self.shunt_control:
            out.append("shunts")
        if self.frequency_control:
            out.append("frequency")
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("tap_control", "shunt_control"):
            if not isinstance(d[name], str):
                d[name] = sorted(d[name])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RegulationConfig":
        d = dict(d)
        for name in ("tap_control", "shunt_control"):
            if name in d and not isinstance(d[name], str):
                d[name] = frozenset(d[name])
        return cls(**d)


@dataclass(frozen=True)
class DeviceBlock:
    """Positions and data of one controlled tap changer or switched shunt."""

    kind: str            # "tap" or "shunt"
    device: int          # index into case.taps / case.shunts
    key: int             # external branch id (tap) or bus id (shunt)
    bus: int             # internal index of the regulated bus
    lo: float
    hi: float
    sp: float
    sign: int            # +1 if raising the setting raises the regulated voltage
    setting: int
    up: int
    down: int
    at_lo: int           # slack active when the setting sits at its lower bound
    at_hi: int

    @property
    def raise_limit(self) -> int:
        return self.at_hi if self.sign > 0 else self.at_lo

    @property
    def lower_limit(self) -> int:
        return self.at_lo if self.sign > 0 else self.at_hi


@dataclass(frozen=True)
class VariableLayout:
    """Ordered variable blocks and the index maps between names and positions."""

    blocks: dict
    names: tuple
    delta_buses: np.ndarray
    delta_pos: np.ndarray
    v_buses: np.ndarray
    v_pos: np.ndarray
    q_buses: np.ndarray
    q_pos: np.ndarray
    devices: tuple
    dfreq: Optional[int]
    p_gens: np.ndarray
    p_pos: np.ndarray
    _index: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self._index[name]

    def block_of(self, i: int) -> str:
        for name, sl in self.blocks.items():
            if sl.start <= i < sl.stop:
                return name
        raise IndexError(i)

    def size(self, block: str) -> int:
        sl = self.blocks.get(block)
        return 0 if sl is None else sl.stop - sl.start


class _Builder:
    def __init__(self):
        self.names, self.lower, self.upper, self.blocks = [], [], [], {}
        self._open = None

    def block(self, name):
        self._close()
        self._open = (name, len(self.names))

    def _close(self):
        if self._open is not None:
            name, start = self._open
            if len(self.names) > start:
                self.blocks[name] = slice(start, len(self.names))
            self._open = None

    def add(self, name, lo=-np.inf, hi=np.inf) -> int:
        self.names.append(name)
        self.lower.append(lo)
        self.upper.append(hi)
        return len(self.names) - 1


def _group_share(buses: np.ndarray, gens: np.ndarray, gen_bus: np.ndarray, lo: np.ndarray,
                 hi: np.ndarray):
    """Split a per-bus total among the bus's generators.

    Returns per-generator ``(scale, offset, group)`` with the generator value
    ``scale * total[group] + offset``, and per-bus summed limits.  With finite
    limits the split keeps every unit at the same fraction of its range;
    otherwise the total is shared equally.
    """
    pos = {int(b): i for i, b in enumerate(buses)}
    group = np.array([pos[int(gen_bus[g])] for g in gens], dtype=int)
    nb = buses.size
    lo_b = np.zeros(nb)
    hi_b = np.zeros(nb)
    count = np.bincount(group, minlength=nb).astype(float)
    np.add.at(lo_b, group, lo[gens])
    np.add.at(hi_b, group, hi[gens])
    rng = hi_b - lo_b
    proportional = np.isfinite(rng) & (rng > 0)
    scale = np.empty(gens.size)
    offset = np.zeros(gens.size)
    for k, (g, j) in enumerate(zip(gens, group)):
        if proportional[j]:
            scale[k] = (hi[g] - lo[g]) / rng[j]
            offset[k] = lo[g] - scale[k] * lo_b[j]
        else:
            scale[k] = 1.0 / count[j]
    return scale, offset, group, lo_b, hi_b


def _selection(rows, cols, shape) -> sp.csr_matrix:
    rows, cols = np.asarray(rows, int), np.asarray(cols, int)
    return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=shape)


def droop_coefficients(case: GridCase, config: RegulationConfig) -> np.ndarray:
    """Per-generator droop in per unit power per per unit frequency.

    Values set on the case (e.g. from a sidecar) win; the rest default to
    ``p_max / droop_regulation``, all multiplied by ``droop_scale``.
    """
    cap = np.where(np.isfinite(case.p_max) & (case.p_max > 0), case.p_max, np.abs(case.pg))
    nu = np.where(np.isnan(case.droop), cap / config.droop_regulation, case.droop)
    return nu * config.droop_scale


class PowerFlowMCP:
    """An assembled power-flow MCP together with the maps back to the grid."""

    def __init__(self, case: GridCase, config: RegulationConfig, layout: VariableLayout,
                 problem: MCPProblem, base: GridState, droop: np.ndarray, share: dict):
        self.case = case
        self.config = config
        self.layout = layout
        self.problem = problem
        self.base = base
        self.droop = droop
        self._share = share

    @property
    def n(self) -> int:
        return self.layout.n

    # -- x <-> state --------------------------------------------------------

    def _state(self, x: np.ndarray) -> GridState:
        L = self.layout
        st = self.base.copy()
        st.delta[L.delta_buses] = x[L.delta_pos]
        st.v[L.v_buses] = x[L.v_pos]
        if L.q_pos.size:
            gens, scale, offset, group = self._share["q"]
            st.qg[gens] = scale * x[L.q_pos][group] + offset
        for d in L.devices:
            if d.kind == "tap":
                st.tap[self.case.taps[d.device].branch] = x[d.setting]
            else:
                st.bsh[d.device] = x[d.setting]
        if L.dfreq is not None:
            st.dfreq = float(x[L.dfreq])
            st.pg[L.p_gens] = x[L.p_pos]
        return st

    def state(self, x: np.ndarray, complete: bool = True) -> GridState:
        """Grid operating point encoded by ``x``.

        With ``complete`` the outputs that are not variables (slack real and
        reactive power, reactive power at PV buses without voltage control)
        are filled in so that the bus balances close.
        """
        x = np.asarray(x, dtype=float)
        st = self._state(x)
        if not complete:
            return st
        case = self.case
        P, Q = pf_residual(case, st)
        gens, scale, _, group, buses = self._share["fill_q"]
        if gens.size:
            st.qg[gens] -= scale * Q[buses][group]
        if self.layout.dfreq is None:
            gens, scale, _, group, buses = self._share["fill_p"]
            st.pg[gens] -= scale * P[buses][group]
        return st

    def vector(self, state: GridState) -> np.ndarray:
        """Inverse of ``state``: encode an operating point of this case."""
        L = self.layout
        x = np.zeros(L.n)
        x[L.delta_pos] = state.delta[L.delta_buses]
        x[L.v_pos] = state.v[L.v_buses]
        if L.q_pos.size:
            gens, _, _, group = self._share["q"]
            q = np.zeros(L.q_pos.size)
            np.add.at(q, group, state.qg[gens])
            x[L.q_pos] = q
        for d in L.devices:
            val = (state.tap[self.case.taps[d.device].branch] if d.kind == "tap"
                   else state.bsh[d.device])
            x[d.setting] = val
            move = d.sign * (val - d.sp)
            x[d.up], x[d.down] = max(move, 0.0), max(-move, 0.0)
            # bound slacks are implied by the voltage rows their drift pairs with
            v = state.v[d.bus]
            if x[d.up] > 0:
                x[d.raise_limit] = max(self.case.v_min[d.bus] - v, 0.0)
            if x[d.down] > 0:
                x[d.lower_limit] = max(v - self.case.v_max[d.bus], 0.0)
        if L.dfreq is not None:
            x[L.dfreq] = state.dfreq
            x[L.p_pos] = state.pg[L.p_gens]
        return self.problem.bounds.project(x)

    # -- starting points ----------------------------------------------------

    def initial_point(self, warm: Union[None, GridState, Mapping] = None) -> np.ndarray:
        """Flat start, optionally overwritten by values from a previous solve.

        ``warm`` is a GridState of this case or a mapping as produced by
        ``warm_values`` (keyed by external ids, so it survives generator
        removal).  Blocks absent from ``warm`` keep their flat-start values.
        """
        L, case = self.layout, self.case
        b = self.problem.bounds
        st = GridState.from_case(case, flat=True)
        st.pg = np.clip(case.pg, case.p_min, case.p_max)
        x = self.vector(st)
        x[L.v_pos] = 1.0  # variable magnitudes start flat; fixed ones keep their set points
        if L.q_pos.size:
            lo, hi = b.lower[L.q_pos], b.upper[L.q_pos]
            finite = np.isfinite(lo) & np.isfinite(hi)
            mid = np.zeros(lo.size)
            mid[finite] = 0.5 * (lo[finite] + hi[finite])
            x[L.q_pos] = np.clip(mid, lo, hi)
        if warm is None:
            return x
        if isinstance(warm, GridState):
            if warm.v.size != case.n_bus or warm.qg.size != case.n_gen:
                raise ValueError("warm state does not match the case dimensions")
            return self.vector(warm)
        if not isinstance(warm, Mapping):
            raise TypeError("warm must be a GridState or a mapping from warm_values")
        unknown = set(warm) - {"v", "delta", "qg", "pg", "tap", "bsh", "dfreq"}
        if unknown:
            raise ValueError(f"incompatible warm start: unknown blocks {sorted(unknown)}")
        for key, arr, ids in (("v", st.v, case.bus_id), ("delta", st.delta, case.bus_id),
                              ("qg", st.qg, case.gen_id), ("pg", st.pg, case.gen_id),
                              ("bsh", None, None), ("tap", None, None)):
            if key not in warm or arr is None:
                continue
            vals = {int(k): float(v) for k, v in warm[key].items()}
            for i, ident in enumerate(ids):
                if int(ident) in vals:
                    arr[i] = vals[int(ident)]
        if "tap" in warm:
            vals = {int(k): float(v) for k, v in warm["tap"].items()}
            for k, bid in enumerate(case.br_id):
                if int(bid) in vals:
                    st.tap[k] = vals[int(bid)]
        if "bsh" in warm:
            vals = {int(k): float(v) for k, v in warm["bsh"].items()}
            for s, dev in enumerate(case.shunts):
                bid = int(case.bus_id[dev.bus])
                if bid in vals:
                    st.bsh[s] = vals[bid]
        st.dfreq = float(warm.get("dfreq", 0.0))
        # fixed quantities stay at their case values
        fixed_v = np.setdiff1d(np.arange(case.n_bus), L.v_buses)
        st.v[fixed_v] = self.base.v[fixed_v]
        st.delta[case.slack] = self.base.delta[case.slack]
        warm_x = self.vector(st)
        if "qg" not in warm:
            warm_x[L.q_pos] = x[L.q_pos]
        return warm_x

    def warm_values(self, x: np.ndarray) -> dict:
        """Solution values keyed by external ids, for warm-starting later stages."""
        st = self.state(x)
        case = self.case
        return {
            "v": {int(i): float(v) for i, v in zip(case.bus_id, st.v)},
            "delta": {int(i): float(d) for i, d in zip(case.bus_id, st.delta)},
            "qg": {int(i): float(q) for i, q in zip(case.gen_id, st.qg)},
            "pg": {int(i): float(p) for i, p in zip(case.gen_id, st.pg)},
            "tap": {int(case.br_id[d.branch]): float(st.tap[d.branch]) for d in case.taps},
            "bsh": {int(case.bus_id[s.bus]): float(st.bsh[k]) for k, s in enumerate(case.shunts)},
            "dfreq": float(st.dfreq),
        }

    # -- reporting ------------------------------------------------------------

    def regulation_summary(self, x: np.ndarray, tol: float = VIOLATION_TOL) -> dict:
        return regulation_summary(self, x, tol)


def regulation_summary(model: PowerFlowMCP, x: np.ndarray, tol: float = VIOLATION_TOL) -> dict:
    """Regulation statistics of a solved point.

    ``max_v_deviation`` is taken over buses with a voltage set point;
    violations list buses outside ``[v_min - tol, v_max + tol]``.
    """
    case = model.case
    st = model.state(x)
    reg = ~np.isnan(case.v_sp)
    dev = np.abs(st.v[reg] - case.v_sp[reg])
    worst = int(np.flatnonzero(reg)[np.argmax(dev)]) if dev.size else None
    low = st.v < case.v_min - tol
    high = st.v > case.v_max + tol
    violations = [{"bus": int(case.bus_id[i]), "v": float(st.v[i]),
                   "v_min": float(case.v_min[i]), "v_max": float(case.v_max[i])}
                  for i in np.flatnonzero(low | high)]
    at_bounds = 0
    for d in model.layout.devices:
        val = x[d.setting]
        if val <= d.lo + tol or val >= d.hi - tol:
            at_bounds += 1
    excess = np.concatenate([case.v_min - st.v, st.v - case.v_max])
    return {
        "max_v_deviation": float(dev.max()) if dev.size else 0.0,
        "max_v_deviation_bus": int(case.bus_id[worst]) if worst is not None else None,
        "devices": len(model.layout.devices),
        "devices_at_bounds": at_bounds,
        "dfreq": float(st.dfreq),
        "frequency_hz": F_NOM * (1.0 + float(st.dfreq)),
        "violations": violations,
        "violation_count": len(violations),
        "max_violation": float(max(excess.max(), 0.0)),
    }


# ---------------------------------------------------------------------------
# assembly

def _selected(devices, wanted, key) -> list:
    if wanted == "all":
        return list(range(len(devices)))
    keys = [key(d) for d in devices]
    missing = set(wanted) - set(keys)
    if missing:
        raise CaseError(f"no controllable device for ids {sorted(missing)[:5]}")
    return [k for k, d in enumerate(devices) if key(d) in wanted]


def _orientation(case: GridCase, state: GridState, kinds) -> np.ndarray:
    """Sign of d v_regulated / d setting at ``state`` with every non-slack voltage
    free and the reactive injections held, so PV-bus devices get a sign too."""
    if not kinds:
        return np.zeros(0, int)
    nonslack = np.flatnonzero(case.bus_type != BusType.SLACK)
    nb = case.n_bus
    J = pf_jacobian(case, state, ("delta", "v", "tap", "shunt")).tocsc()
    rows = np.concatenate([nonslack, nb + nonslack])
    net = J[rows][:, rows]
    nt = len(case.taps)
    cols = np.array([2 * nb + k if kind == "tap" else 2 * nb + nt + k for kind, k, _ in kinds])
    rhs = -J[rows][:, cols].toarray()
    sens = spla.splu(net.tocsc()).solve(rhs)
    vrow = {int(b): nonslack.size + i for i, b in enumerate(nonslack)}
    signs = np.ones(len(kinds), int)
    for j, (kind, k, bus) in enumerate(kinds):
        if bus in vrow:
            s = sens[vrow[bus], j]
            signs[j] = 1 if s >= 0 else -1
            if s < 0:
                logger.info("%s device %d lowers its regulated voltage when raised; "
                            "drift directions swapped", kind, k)
    return signs


def assemble(case: GridCase, config: RegulationConfig = RegulationConfig()) -> PowerFlowMCP:
    """Build the MCP for ``case`` with the regulation mechanisms in ``config``."""
    nb = case.n_bus
    slack = case.slack
    pq = case.buses_of_type(BusType.PQ)
    pv = case.buses_of_type(BusType.PV)
    bid = case.bus_id
    gvc = config.gen_voltage_control
    base = GridState.from_case(case, flat=True)

    tap_idx = _selected(case.taps, config.tap_control, lambda d: int(case.br_id[d.branch]))
    sh_idx = _selected(case.shunts, config.shunt_control, lambda s: int(bid[s.bus]))
    if config.frequency_control:
        on_reg = case.bus_type[case.gen_bus] != BusType.PQ
        p_gens = np.flatnonzero(on_reg)
        if np.any(~np.isfinite(case.p_min[p_gens])) or np.any(~np.isfinite(case.p_max[p_gens])):
            raise CaseError("frequency control requires finite generator real-power limits")
    else:
        p_gens = np.zeros(0, int)

    B = _Builder()
    B.block("delta_pq")
    d_pq = [B.add(f"delta[bus {bid[i]}]") for i in pq]
    B.block("v_pq")
    v_pq = [B.add(f"v[bus {bid[i]}]") for i in pq]
    B.block("delta_pv")
    d_pv = [B.add(f"delta[bus {bid[i]}]") for i in pv]
    v_pv, q_pv = [], []
    q_gens = np.flatnonzero(case.bus_type[case.gen_bus] == BusType.PV) if gvc else np.zeros(0, int)
    q_scale, q_off, q_group, q_lo, q_hi = _group_share(pv, q_gens, case.gen_bus, case.q_min,
                                                       case.q_max)
    if gvc:
        B.block("v_pv")
        v_pv = [B.add(f"v[bus {bid[i]}]") for i in pv]
        B.block("q_pv")
        q_pv = [B.add(f"q[bus {bid[i]}]", q_lo[j], q_hi[j]) for j, i in enumerate(pv)]

    vpos = {int(i): p for i, p in zip(pq, v_pq)}
    vpos.update({int(i): p for i, p in zip(pv, v_pv)})
    raw = []
    for k in tap_idx:
        d = case.taps[k]
        raw.append(("tap", k, int(d.regulated_bus), int(case.br_id[d.branch]), d.u_min, d.u_max,
                    d.u_sp))
    for k in sh_idx:
        s = case.shunts[k]
        raw.append(("shunt", k, int(s.bus), int(bid[s.bus]), s.b_min, s.b_max, s.b_sp))
    active = []
    for item in raw:
        kind, k, bus, key, lo, hi, spv = item
        if hi - lo <= 0:
            continue  # zero-width range: the setting is a parameter
        if bus not in vpos:
            raise CaseError(f"{kind} device {key} regulates bus {bid[bus]} whose voltage is "
                            "not a variable in this configuration")
        active.append(item)
    signs = _orientation(case, base, [(kind, k, bus) for kind, k, bus, *_ in active])
    devices = []
    if active:
        B.block("devices")
    for (kind, k, bus, key, lo, hi, spv), sgn in zip(active, signs):
        tag = f"{kind} {key}"
        pos = [B.add(f"setting[{tag}]"), B.add(f"up[{tag}]", 0.0), B.add(f"down[{tag}]", 0.0),
               B.add(f"at_min[{tag}]", 0.0), B.add(f"at_max[{tag}]", 0.0)]
        devices.append(DeviceBlock(kind, k, key, bus, float(lo), float(hi), float(spv), int(sgn),
                                   *pos))

    dfreq = None
    p_pos = []
    nu = droop_coefficients(case, config)
    if config.frequency_control:
        B.block("dfreq")
        dfreq = B.add("dfreq")
        B.block("pg")
        p_pos = [B.add(f"pg[gen {case.gen_id[g]}]", case.p_min[g], case.p_max[g]) for g in p_gens]
    B._close()

    n = len(B.names)
    layout = VariableLayout(
        blocks=B.blocks, names=tuple(B.names),
        delta_buses=np.concatenate([pq, pv]).astype(int),
        delta_pos=np.array(d_pq + d_pv, dtype=int),
        v_buses=np.concatenate([pq, pv if gvc else []]).astype(int),
        v_pos=np.array(v_pq + v_pv, dtype=int),
        q_buses=pv.astype(int) if gvc else np.zeros(0, int), q_pos=np.array(q_pv, dtype=int),
        devices=tuple(devices), dfreq=dfreq, p_gens=p_gens.astype(int),
        p_pos=np.array(p_pos, dtype=int),
        _index={name: i for i, name in enumerate(B.names)})
    covered = sum(sl.stop - sl.start for sl in B.blocks.values())
    if covered != n or len(layout._index) != n:
        raise AssertionError("variable blocks do not partition the layout")

    # network rows: P at every delta bus, Q at every v bus, P at slack for dfreq
    pf_rows = [*layout.delta_buses, *(nb + layout.v_buses)]
    mcp_rows = [*layout.delta_pos, *layout.v_pos]
    if dfreq is not None:
        pf_rows.append(slack)
        mcp_rows.append(dfreq)
    R = _selection(mcp_rows, pf_rows, (n, 2 * nb))
    nt, ns = len(case.taps), len(case.shunts)
    pf_cols = [*layout.delta_buses, *(nb + layout.v_buses)]
    mcp_cols = [*layout.delta_pos, *layout.v_pos]
    for d in devices:
        pf_cols.append(2 * nb + d.device if d.kind == "tap" else 2 * nb + nt + d.device)
        mcp_cols.append(d.setting)
    C = _selection(pf_cols, mcp_cols, (2 * nb + nt + ns, n))

    # constant part: injections and control rows
    ri, ci, vals = [], [], []

    def put(r, c, v):
        ri.append(r)
        ci.append(c)
        vals.append(v)

    prow = {int(b): p for b, p in zip(layout.delta_buses, layout.delta_pos)}
    if dfreq is not None:
        prow[slack] = dfreq
    qrow = {int(b): p for b, p in zip(layout.v_buses, layout.v_pos)}
    for j, bus in enumerate(layout.q_buses):
        put(qrow[int(bus)], layout.q_pos[j], 1.0)
        put(layout.q_pos[j], vpos[int(bus)], 1.0)
    for d in devices:
        put(d.setting, d.setting, 1.0)
        put(d.setting, d.up, -float(d.sign))
        put(d.setting, d.down, float(d.sign))
        put(d.up, vpos[d.bus], 1.0)
        put(d.up, d.raise_limit, 1.0)
        put(d.down, vpos[d.bus], -1.0)
        put(d.down, d.lower_limit, 1.0)
        put(d.at_lo, d.setting, 1.0)
        put(d.at_hi, d.setting, -1.0)
    for g, p in zip(p_gens, p_pos):
        put(prow[int(case.gen_bus[g])], p, 1.0)
        put(p, p, 1.0)
        put(p, dfreq, float(nu[g]))
    J_const = sp.csr_matrix((vals, (ri, ci)), shape=(n, n))

    q_vsp = case.v_sp[layout.q_buses]
    p_sp = case.pg[p_gens]
    p_nu = nu[p_gens]
    vmin = np.array([case.v_min[d.bus] for d in devices])
    vmax = np.array([case.v_max[d.bus] for d in devices])
    dsp = np.array([d.sp for d in devices])
    dlo = np.array([d.lo for d in devices])
    dhi = np.array([d.hi for d in devices])
    dsign = np.array([d.sign for d in devices], dtype=float)
    dpos = {name: np.array([getattr(d, name) for d in devices], dtype=int)
            for name in ("setting", "up", "down", "at_lo", "at_hi")}
    d_raise = np.array([d.raise_limit for d in devices], dtype=int)
    d_lower = np.array([d.lower_limit for d in devices], dtype=int)
    d_vpos = np.array([vpos[d.bus] for d in devices], dtype=int)
    floor_pos = np.concatenate([layout.v_pos, [d.setting for d in devices if d.kind == "tap"]])
    floor_pos = floor_pos.astype(int)

    model_ref = {}

    def residual(x):
        st = model_ref["model"]._state(x)
        P, Q = pf_residual(case, st)
        f = R @ np.concatenate([P, Q])
        f[layout.q_pos] = st.v[layout.q_buses] - q_vsp
        if devices:
            u = x[dpos["setting"]]
            f[dpos["setting"]] = u - dsp - dsign * (x[dpos["up"]] - x[dpos["down"]])
            f[dpos["up"]] = x[d_vpos] + x[d_raise] - vmin
            f[dpos["down"]] = vmax - x[d_vpos] + x[d_lower]
            f[dpos["at_lo"]] = u - dlo
            f[dpos["at_hi"]] = dhi - u
        if dfreq is not None:
            f[layout.p_pos] = x[layout.p_pos] - p_sp + p_nu * x[dfreq]
        return f

    def jacobian(x):
        st = model_ref["model"]._state(x)
        Jpf = pf_jacobian(case, st, ("delta", "v", "tap", "shunt"))
        return (R @ Jpf @ C + J_const).tocsc()

    def max_step(x, d):
        xs, ds = x[floor_pos], d[floor_pos]
        shrink = ds < 0
        if not np.any(shrink):
            return 1.0
        room = (xs[shrink] - V_FLOOR) / -ds[shrink]
        return float(np.clip(room.min(), 0.0, 1.0))

    problem = MCPProblem(Bounds(np.array(B.lower, float), np.array(B.upper, float)),
                         residual, jacobian, names=layout.names, max_step=max_step)

    # generator sharing for reporting: q at PV buses (when free) and slack, p at slack
    fill_q_buses = np.array([slack] + ([] if gvc else list(pv)), dtype=int)
    fill_q_gens = np.flatnonzero(np.isin(case.gen_bus, fill_q_buses))
    fq = _group_share(fill_q_buses, fill_q_gens, case.gen_bus, case.q_min, case.q_max)
    fill_p_gens = np.flatnonzero(case.gen_bus == slack)
    fp = _group_share(np.array([slack]), fill_p_gens, case.gen_bus, case.p_min, case.p_max)
    share = {"q": (q_gens, q_scale, q_off, q_group),
             "fill_q": (fill_q_gens, fq[0], fq[1], fq[2], fill_q_buses),
             "fill_p": (fill_p_gens, fp[0], fp[1], fp[2], np.array([slack]))}
    model = PowerFlowMCP(case, config, layout, problem, base, nu, share)
    model_ref["model"] = model
    return model
