"""Network data model, nodal admittance assembly and AC power-flow residuals.

All quantities are stored in per unit on the system MVA base; angles are in
radians.  The residuals follow the usual polar injection form

    P_i = p_inj_i - sum_k v_i v_k (G_ik cos d_ik + B_ik sin d_ik)
    Q_i = q_inj_i - sum_k v_i v_k (G_ik sin d_ik - B_ik cos d_ik)

which is ``S_inj - V * conj(Y V)`` split into real and imaginary parts.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph

logger = logging.getLogger(__name__)


class BusType(enum.IntEnum):
    PQ = 1
    PV = 2
    SLACK = 3


class CaseError(ValueError):
    """Network data is inconsistent or unsupported."""


@dataclass(frozen=True)
class Bus:
    id: int
    type: BusType
    pd: float = 0.0
    qd: float = 0.0
    gs: float = 0.0
    bs: float = 0.0
    v_min: float = 0.9
    v_max: float = 1.1
    vm: float = 1.0
    va: float = 0.0
    base_kv: float = 0.0


@dataclass(frozen=True)
class Generator:
    bus: int
    pg: float
    qg: float = 0.0
    q_min: float = -np.inf
    q_max: float = np.inf
    p_min: float = 0.0
    p_max: float = np.inf
    vg: float = 1.0
    droop: float = np.nan
    id: Optional[int] = None


@dataclass(frozen=True)
class Branch:
    f: int
    t: int
    r: float
    x: float
    b: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    transformer: bool = False
    id: Optional[int] = None


@dataclass(frozen=True)
class TapDevice:
    """Continuously adjustable off-nominal ratio on a branch (from-side winding)."""

    branch: int
    regulated_bus: int
    u_min: float
    u_max: float
    u_sp: Optional[float] = None


@dataclass(frozen=True)
class SwitchedShunt:
    """Continuously adjustable bus susceptance, per unit."""

    bus: int
    b_min: float
    b_max: float
    b_sp: Optional[float] = None


def _frozen(arr, dtype=float):
    a = np.array(arr, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class GridCase:
    """A validated, in-service-only network.

    Element references (``gen_bus``, ``br_f``, ``br_t``, device buses) are
    internal 0-based bus positions; ``bus_id``, ``gen_id`` and ``br_id`` keep
    the external identifiers (MATPOWER bus number, 1-based table row).
    """

    name: str
    base_mva: float
    bus_id: np.ndarray
    bus_type: np.ndarray
    pd: np.ndarray
    qd: np.ndarray
    gs: np.ndarray
    bs: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray
    vm: np.ndarray
    va: np.ndarray
    base_kv: np.ndarray
    v_sp: np.ndarray
    gen_id: np.ndarray
    gen_bus: np.ndarray
    pg: np.ndarray
    qg: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray
    vg: np.ndarray
    droop: np.ndarray
    br_id: np.ndarray
    br_f: np.ndarray
    br_t: np.ndarray
    br_r: np.ndarray
    br_x: np.ndarray
    br_b: np.ndarray
    br_tap: np.ndarray
    br_shift: np.ndarray
    br_transformer: np.ndarray
    taps: tuple = ()
    shunts: tuple = ()

    # -- construction -----------------------------------------------------

    @classmethod
    def from_elements(cls, buses: Sequence[Bus], gens: Sequence[Generator],
                      branches: Sequence[Branch], base_mva: float = 100.0, name: str = "case",
                      taps: Iterable[TapDevice] = (), shunts: Iterable[SwitchedShunt] = (),
                      v_sp: Optional[Sequence[float]] = None) -> "GridCase":
        """Build a case from per-element records.

        Element ``bus`` / ``f`` / ``t`` fields refer to ``Bus.id`` values.  All
        values are per unit already.  Voltage set points default to the first
        generator's ``vg`` on PV and slack buses.
        """
        pos = {b.id: i for i, b in enumerate(buses)}
        if len(pos) != len(buses):
            raise CaseError("duplicate bus ids")
        try:
            gen_bus = [pos[g.bus] for g in gens]
            br_f = [pos[br.f] for br in branches]
            br_t = [pos[br.t] for br in branches]
        except KeyError as exc:
            raise CaseError(f"element references unknown bus {exc.args[0]}") from None
        nb = len(buses)
        types = np.array([int(b.type) for b in buses])
        if v_sp is None:
            v_sp_arr = np.full(nb, np.nan)
            for g, gb in zip(gens, gen_bus):
                if types[gb] != BusType.PQ and np.isnan(v_sp_arr[gb]):
                    v_sp_arr[gb] = g.vg
        else:
            v_sp_arr = np.asarray(v_sp, dtype=float)
        bid = [b.id for b in buses]
        case = cls(
            name=name, base_mva=float(base_mva),
            bus_id=_frozen(bid, int), bus_type=_frozen(types, int),
            pd=_frozen([b.pd for b in buses]), qd=_frozen([b.qd for b in buses]),
            gs=_frozen([b.gs for b in buses]), bs=_frozen([b.bs for b in buses]),
            v_min=_frozen([b.v_min for b in buses]), v_max=_frozen([b.v_max for b in buses]),
            vm=_frozen([b.vm for b in buses]), va=_frozen([b.va for b in buses]),
            base_kv=_frozen([b.base_kv for b in buses]), v_sp=_frozen(v_sp_arr),
            gen_id=_frozen([g.id if g.id is not None else k + 1 for k, g in enumerate(gens)], int),
            gen_bus=_frozen(gen_bus, int),
            pg=_frozen([g.pg for g in gens]), qg=_frozen([g.qg for g in gens]),
            q_min=_frozen([g.q_min for g in gens]), q_max=_frozen([g.q_max for g in gens]),
            p_min=_frozen([g.p_min for g in gens]), p_max=_frozen([g.p_max for g in gens]),
            vg=_frozen([g.vg for g in gens]), droop=_frozen([g.droop for g in gens]),
            br_id=_frozen([br.id if br.id is not None else k + 1
                           for k, br in enumerate(branches)], int),
            br_f=_frozen(br_f, int), br_t=_frozen(br_t, int),
            br_r=_frozen([br.r for br in branches]), br_x=_frozen([br.x for br in branches]),
            br_b=_frozen([br.b for br in branches]), br_tap=_frozen([br.tap for br in branches]),
            br_shift=_frozen([br.shift for br in branches]),
            br_transformer=_frozen([br.transformer for br in branches], bool),
        )
        case = case.with_devices(
            taps=[replace(d, branch=case.branch_index(d.branch),
                          regulated_bus=pos[d.regulated_bus]) for d in taps],
            shunts=[replace(s, bus=pos[s.bus]) for s in shunts])
        case.validate()
        return case

    def with_devices(self, taps: Iterable[TapDevice] = (),
                     shunts: Iterable[SwitchedShunt] = ()) -> "GridCase":
        """Attach controllable devices (internal indices).  Set points default
        to the branch's tap ratio and the bus's fixed susceptance, which the
        shunt device then absorbs."""
        taps = tuple(d if d.u_sp is not None else replace(d, u_sp=float(self.br_tap[d.branch]))
                     for d in taps)
        bs = self.bs.copy()
        for s in self.shunts:
            bs[s.bus] += s.b_sp
        out = []
        for s in shunts:
            if s.b_sp is None:
                s = replace(s, b_sp=float(bs[s.bus]))
            bs[s.bus] = 0.0
            out.append(s)
        return replace(self, taps=taps, shunts=tuple(out), bs=_frozen(bs))

    def validate(self) -> None:
        nb = self.n_bus
        if np.any(self.br_x == 0):
            raise CaseError(f"zero-reactance branches: {self.br_id[self.br_x == 0][:5].tolist()}")
        if np.any(self.br_tap <= 0):
            raise CaseError("tap ratios must be positive")
        slack = np.flatnonzero(self.bus_type == BusType.SLACK)
        if slack.size != 1:
            raise CaseError(f"expected exactly one slack bus, found {slack.size}")
        if np.any(self.q_min > self.q_max) or np.any(self.p_min > self.p_max):
            raise CaseError("generator limits inverted")
        regulated = self.bus_type != BusType.PQ
        if np.any(np.isnan(self.v_sp[regulated])):
            raise CaseError("PV/slack bus without voltage set point")
        adj = sp.coo_matrix((np.ones(self.n_branch), (self.br_f, self.br_t)), shape=(nb, nb))
        _, labels = csgraph.connected_components(adj, directed=False)
        island = labels == labels[slack[0]]
        if not np.all(island):
            stray = self.bus_id[~island]
            raise CaseError(f"{stray.size} buses outside the slack bus island, e.g. "
                            f"{stray[:5].tolist()}")
        for d in self.taps:
            if not d.u_min <= d.u_max:
                raise CaseError(f"tap device on branch {self.br_id[d.branch]}: u_min > u_max")
            if d.u_min <= 0:
                raise CaseError("tap bounds must be positive")
        for s in self.shunts:
            if not s.b_min <= s.b_max:
                raise CaseError(f"shunt device at bus {self.bus_id[s.bus]}: b_min > b_max")

    # -- lookups ----------------------------------------------------------

    @property
    def n_bus(self) -> int:
        return self.bus_id.size

    @property
    def n_gen(self) -> int:
        return self.gen_id.size

    @property
    def n_branch(self) -> int:
        return self.br_id.size

    @property
    def slack(self) -> int:
        return int(np.flatnonzero(self.bus_type == BusType.SLACK)[0])

    def buses_of_type(self, kind: BusType) -> np.ndarray:
        return np.flatnonzero(self.bus_type == kind)

    def bus_index(self, bus_id: int) -> int:
        hit = np.flatnonzero(self.bus_id == bus_id)
        if hit.size == 0:
            raise KeyError(f"unknown bus {bus_id}")
        return int(hit[0])

    def gen_index(self, gen_id: int) -> int:
        hit = np.flatnonzero(self.gen_id == gen_id)
        if hit.size == 0:
            raise KeyError(f"unknown or out-of-service generator {gen_id}")
        return int(hit[0])

    def branch_index(self, branch_id: int) -> int:
        hit = np.flatnonzero(self.br_id == branch_id)
        if hit.size == 0:
            raise KeyError(f"unknown or out-of-service branch {branch_id}")
        return int(hit[0])

    def gen_incidence(self) -> sp.csr_matrix:
        """Bus-by-generator 0/1 matrix."""
        return sp.csr_matrix((np.ones(self.n_gen), (self.gen_bus, np.arange(self.n_gen))),
                             shape=(self.n_bus, self.n_gen))

    def bus(self, i: int) -> Bus:
        return Bus(int(self.bus_id[i]), BusType(int(self.bus_type[i])), self.pd[i], self.qd[i],
                   self.gs[i], self.bs[i], self.v_min[i], self.v_max[i], self.vm[i], self.va[i],
                   self.base_kv[i])

    def generator(self, k: int) -> Generator:
        return Generator(int(self.bus_id[self.gen_bus[k]]), self.pg[k], self.qg[k], self.q_min[k],
                         self.q_max[k], self.p_min[k], self.p_max[k], self.vg[k], self.droop[k],
                         int(self.gen_id[k]))

    def branch(self, k: int) -> Branch:
        return Branch(int(self.bus_id[self.br_f[k]]), int(self.bus_id[self.br_t[k]]),
                      self.br_r[k], self.br_x[k], self.br_b[k], self.br_tap[k],
                      self.br_shift[k], bool(self.br_transformer[k]), int(self.br_id[k]))

    # -- editing ----------------------------------------------------------

    def without_generators(self, gen_ids: Iterable[int]) -> "GridCase":
        """Copy with the listed generators removed.

        A PV bus left without generators becomes PQ, mirroring how the case
        would parse with those generators out of service.
        """
        drop = {self.gen_index(g) for g in gen_ids}
        keep = np.array([k for k in range(self.n_gen) if k not in drop], dtype=int)
        changes = {name: _frozen(getattr(self, name)[keep], getattr(self, name).dtype)
                   for name in ("gen_id", "gen_bus", "pg", "qg", "q_min", "q_max", "p_min",
                                "p_max", "vg", "droop")}
        types = self.bus_type.copy()
        v_sp = self.v_sp.copy()
        has_gen = np.zeros(self.n_bus, bool)
        has_gen[self.gen_bus[keep]] = True
        orphan = (types == BusType.PV) & ~has_gen
        types[orphan] = BusType.PQ
        v_sp[orphan] = np.nan
        if not has_gen[self.slack]:
            raise CaseError("removing these generators leaves the slack bus without generation")
        case = replace(self, bus_type=_frozen(types, int), v_sp=_frozen(v_sp), **changes)
        return case

    def with_generation(self, pg: np.ndarray) -> "GridCase":
        return replace(self, pg=_frozen(pg))

    def __eq__(self, other):
        if not isinstance(other, GridCase):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray):
                if a.shape != b.shape or not np.array_equal(a, b, equal_nan=a.dtype.kind == "f"):
                    return False
            elif a != b:
                return False
        return True

    __hash__ = None


@dataclass
class GridState:
    """Full operating point: per-bus voltages, per-generator outputs, device settings."""

    v: np.ndarray
    delta: np.ndarray
    pg: np.ndarray
    qg: np.ndarray
    tap: np.ndarray
    bsh: np.ndarray
    dfreq: float = 0.0

    @classmethod
    def from_case(cls, case: GridCase, flat: bool = True) -> "GridState":
        if flat:
            v = np.where(np.isnan(case.v_sp), 1.0, case.v_sp)
            delta = np.full(case.n_bus, case.va[case.slack])
        else:
            v, delta = case.vm.copy(), case.va.copy()
        bsh = np.array([s.b_sp for s in case.shunts], dtype=float)
        tap = case.br_tap.copy()
        for d in case.taps:
            tap[d.branch] = d.u_sp
        return cls(v=np.array(v, float), delta=np.array(delta, float), pg=case.pg.copy(),
                   qg=case.qg.copy(), tap=tap, bsh=bsh, dfreq=0.0)

    def copy(self) -> "GridState":
        return GridState(self.v.copy(), self.delta.copy(), self.pg.copy(), self.qg.copy(),
                         self.tap.copy(), self.bsh.copy(), float(self.dfreq))


# ---------------------------------------------------------------------------
# admittance

@dataclass(frozen=True)
class AdmittanceModel:
    Y: sp.csr_matrix
    # per tap device: from bus, to bus, d(Yff)/du, d(Yft)/du, d(Ytf)/du
    tap_f: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    tap_t: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    d_ff: np.ndarray = field(default_factory=lambda: np.zeros(0, complex))
    d_ft: np.ndarray = field(default_factory=lambda: np.zeros(0, complex))
    d_tf: np.ndarray = field(default_factory=lambda: np.zeros(0, complex))
    shunt_bus: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    @property
    def G(self) -> sp.csr_matrix:
        return self.Y.real

    @property
    def B(self) -> sp.csr_matrix:
        return self.Y.imag


def branch_admittances(r, x, b, tap, shift):
    ys = 1.0 / (r + 1j * x)
    tau = tap * np.exp(1j * shift)
    ytt = ys + 0.5j * b
    yff = ytt / (tap * tap)
    yft = -ys / np.conj(tau)
    ytf = -ys / tau
    return yff, yft, ytf, ytt


def build_admittance(case: GridCase, state: Optional[GridState] = None) -> AdmittanceModel:
    """Nodal admittance with the state's tap ratios and switched-shunt susceptances."""
    if np.any(case.br_x == 0):
        raise CaseError("zero-reactance branch")
    tap = case.br_tap if state is None else state.tap
    nb = case.n_bus
    f, t = case.br_f, case.br_t
    yff, yft, ytf, ytt = branch_admittances(case.br_r, case.br_x, case.br_b, tap, case.br_shift)
    ysh = case.gs + 1j * case.bs
    sh_bus = np.array([s.bus for s in case.shunts], dtype=int)
    bsh = (np.array([s.b_sp for s in case.shunts], dtype=float) if state is None
           else np.asarray(state.bsh, dtype=float))
    diag = np.arange(nb)
    rows = np.concatenate([f, f, t, t, diag, sh_bus])
    cols = np.concatenate([f, t, f, t, diag, sh_bus])
    vals = np.concatenate([yff, yft, ytf, ytt, ysh, 1j * bsh])
    Y = sp.csr_matrix((vals, (rows, cols)), shape=(nb, nb))
    Y.sum_duplicates()
    k = np.array([d.branch for d in case.taps], dtype=int)
    u = tap[k]
    return AdmittanceModel(Y=Y, tap_f=f[k], tap_t=t[k], d_ff=-2.0 * yff[k] / u,
                           d_ft=-yft[k] / u, d_tf=-ytf[k] / u, shunt_bus=sh_bus)


def _complex_voltage(state: GridState) -> np.ndarray:
    return state.v * np.exp(1j * state.delta)


def injections(case: GridCase, state: GridState):
    cg = case.gen_incidence()
    return cg @ state.pg - case.pd, cg @ state.qg - case.qd


def pf_residual(case: GridCase, state: GridState, adm: Optional[AdmittanceModel] = None):
    """Real and reactive power mismatches ``(P, Q)`` at every bus."""
    adm = adm or build_admittance(case, state)
    V = _complex_voltage(state)
    if not np.all(np.isfinite(V)):
        raise FloatingPointError("non-finite voltage in state")
    s_calc = V * np.conj(adm.Y @ V)
    p_inj, q_inj = injections(case, state)
    return p_inj - s_calc.real, q_inj - s_calc.imag


WRT = ("delta", "v", "pg", "qg", "tap", "shunt", "dfreq")


def pf_jacobian(case: GridCase, state: GridState, wrt: Sequence[str] = ("delta", "v"),
                adm: Optional[AdmittanceModel] = None) -> sp.csr_matrix:
    """Analytic Jacobian of ``[P; Q]`` (2*nb rows) with respect to the selected
    variable groups, columns concatenated in the order given.

    Groups: ``delta``, ``v`` (per bus), ``pg``, ``qg`` (per generator), ``tap``
    (per tap device), ``shunt`` (per switched shunt), ``dfreq`` (one column).
    """
    unknown = [w for w in wrt if w not in WRT]
    if unknown:
        raise ValueError(f"unknown variable selection {unknown}; choose from {WRT}")
    adm = adm or build_admittance(case, state)
    nb = case.n_bus
    V = _complex_voltage(state)
    Y = adm.Y
    Ibus = Y @ V
    dv = sp.diags(V)
    vnorm = sp.diags(V / np.abs(V))
    blocks = []
    for w in wrt:
        if w == "delta":
            ds = 1j * dv @ (sp.diags(Ibus) - Y @ dv).conj()
        elif w == "v":
            ds = dv @ (Y @ vnorm).conj() + sp.diags(np.conj(Ibus)) @ vnorm
        elif w in ("pg", "qg"):
            cg = case.gen_incidence()
            blocks.append(sp.vstack([cg if w == "pg" else cg * 0, cg * 0 if w == "pg" else cg]))
            continue
        elif w == "tap":
            nt = len(case.taps)
            f, t = adm.tap_f, adm.tap_t
            dsf = V[f] * np.conj(adm.d_ff * V[f] + adm.d_ft * V[t])
            dst = V[t] * np.conj(adm.d_tf * V[f])
            cols = np.arange(nt)
            ds = sp.csr_matrix((np.concatenate([dsf, dst]),
                                (np.concatenate([f, t]), np.concatenate([cols, cols]))),
                               shape=(nb, nt))
        elif w == "shunt":
            ns = len(case.shunts)
            b = adm.shunt_bus
            ds = sp.csr_matrix((-1j * state.v[b] ** 2, (b, np.arange(ns))), shape=(nb, ns))
        else:  # dfreq: no direct dependence
            blocks.append(sp.csr_matrix((2 * nb, 1)))
            continue
        ds = sp.csr_matrix(ds)
        blocks.append(sp.vstack([-ds.real, -ds.imag]))
    return sp.hstack(blocks, format="csr")
