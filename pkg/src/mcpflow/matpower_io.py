"""MATPOWER version 2 case files, regulation sidecar files and solution output.

Only the numeric matrices ``bus``, ``gen`` and ``branch`` plus ``baseMVA``
are used; ``gencost``, ``dcline`` and cell arrays are skipped.  Out-of-service
elements and isolated (type 4) buses are dropped while parsing so that the
solver works on a fixed structure.
"""

from __future__ import annotations

import csv
import importlib.util
import io
import json
import logging
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .grid import (Branch, Bus, BusType, CaseError, Generator, GridCase, GridState,
                   SwitchedShunt, TapDevice)

logger = logging.getLogger(__name__)

SOLUTION_SCHEMA = "mcpflow-solution/1"
SIDECAR_SCHEMA = "mcpflow-regulation/1"
F_NOM = 60.0
CSV_HEADER = ["element", "id", "bus", "v_pu", "va_deg", "p_mw", "q_mvar", "p_pu", "q_pu",
              "setting"]

# MATPOWER column indices
BUS_I, BUS_TYPE, PD, QD, GS, BS, VM, VA, BASE_KV, VMAX, VMIN = 0, 1, 2, 3, 4, 5, 7, 8, 9, 11, 12
GEN_BUS, PG, QG, QMAX, QMIN, VG, GEN_STATUS, PMAX, PMIN = 0, 1, 2, 3, 4, 5, 7, 8, 9
F_BUS, T_BUS, BR_R, BR_X, BR_B, TAP, SHIFT, BR_STATUS = 0, 1, 2, 3, 4, 8, 9, 10
MIN_COLS = {"bus": 13, "gen": 10, "branch": 11}


class CaseFormatError(CaseError):
    pass


@dataclass
class RawCase:
    name: str
    version: str
    base_mva: float
    bus: np.ndarray
    gen: np.ndarray
    branch: np.ndarray
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# tokenizing

_FUNC = re.compile(r"^\s*function\s+(\w+)\s*=\s*(\w+)", re.M)
_ASSIGN = re.compile(r"(\w+)\.(\w+)\s*=\s*")
_NUMBER_WORDS = {"inf": np.inf, "+inf": np.inf, "-inf": -np.inf, "nan": np.nan}


def _strip_comments(text: str) -> str:
    out = []
    for line in text.splitlines():
        quote = False
        for k, ch in enumerate(line):
            if ch == "'":
                quote = not quote
            elif ch == "%" and not quote:
                line = line[:k]
                break
        out.append(line)
    # join "..." continuation lines
    return re.sub(r"\.\.\.[^\n]*\n", " ", "\n".join(out))


def _parse_number(tok: str) -> float:
    low = tok.lower()
    if low in _NUMBER_WORDS:
        return _NUMBER_WORDS[low]
    return float(tok)


def _parse_matrix(body: str, name: str) -> np.ndarray:
    body = re.sub(r"\.\.\.[^\n]*\n", " ", body)
    rows = []
    for chunk in re.split(r"[;\n]", body):
        toks = [t for t in re.split(r"[\s,]+", chunk.strip()) if t]
        if not toks:
            continue
        try:
            rows.append([_parse_number(t) for t in toks])
        except ValueError as exc:
            raise CaseFormatError(f"mpc.{name}: non-numeric entry ({exc})") from None
    if not rows:
        return np.zeros((0, 0))
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise CaseFormatError(f"mpc.{name}: rows have inconsistent column counts {sorted(widths)}")
    return np.array(rows, dtype=float)


def parse_raw(text: str) -> RawCase:
    m = _FUNC.search(text)
    if m is None:
        raise CaseFormatError("no case function found")
    out_var, name = m.group(1), m.group(2)
    body = _strip_comments(text[m.end():])
    fields_: dict = {}
    pos = 0
    while True:
        a = _ASSIGN.search(body, pos)
        if a is None:
            break
        if a.group(1) != out_var:
            pos = a.end()
            continue
        key, start = a.group(2), a.end()
        opener = body[start:start + 1]
        if opener in "[{":
            closer = "]" if opener == "[" else "}"
            end = body.find(closer, start)
            if end < 0:
                raise CaseFormatError(f"unterminated matrix for mpc.{key}")
            if opener == "[":
                fields_[key] = _parse_matrix(body[start + 1:end], key)
            else:
                logger.info("skipping cell array mpc.%s", key)
            pos = end + 1
        else:
            end = body.find(";", start)
            end = len(body) if end < 0 else end
            raw = body[start:end].strip()
            fields_[key] = raw.strip("'\"") if raw[:1] in "'\"" else _parse_number(raw)
            pos = end + 1
    version = str(fields_.get("version", "1"))
    if version != "2":
        raise CaseFormatError(f"unsupported MATPOWER case format version {version!r}; only 2")
    for key in ("baseMVA", "bus", "gen", "branch"):
        if key not in fields_:
            raise CaseFormatError(f"mpc.{key} missing")
    for key, cols in MIN_COLS.items():
        mat = fields_[key]
        if mat.size and mat.shape[1] < cols:
            raise CaseFormatError(f"mpc.{key} has {mat.shape[1]} columns, need >= {cols}")
        check = [c for c in range(cols) if key != "gen" or c not in (QMAX, QMIN, PMAX, PMIN)]
        if mat.size and not np.all(np.isfinite(mat[:, check])):
            raise CaseFormatError(f"mpc.{key} contains non-finite required entries")
    for ignored in ("gencost", "dcline", "areas"):
        if ignored in fields_:
            logger.info("ignoring mpc.%s", ignored)
    extra = {k: v for k, v in fields_.items()
             if k not in ("version", "baseMVA", "bus", "gen", "branch")}
    return RawCase(name=name, version=version, base_mva=float(fields_["baseMVA"]),
                   bus=fields_["bus"], gen=fields_["gen"], branch=fields_["branch"], extra=extra)


# ---------------------------------------------------------------------------
# raw -> GridCase

def _ids(raw: RawCase, key: str, n: int) -> np.ndarray:
    vec = raw.extra.get(key)
    if isinstance(vec, np.ndarray) and vec.size == n:
        return vec.ravel().astype(int)
    return np.arange(1, n + 1)


def to_grid_case(raw: RawCase) -> GridCase:
    base = raw.base_mva
    bus, gen, branch = raw.bus, raw.gen, raw.branch
    if bus.size == 0:
        raise CaseFormatError("case has no buses")
    bus_numbers = bus[:, BUS_I].astype(int)
    if np.unique(bus_numbers).size != bus_numbers.size:
        raise CaseFormatError("duplicate bus numbers")
    known = set(bus_numbers.tolist())
    for mat, cols, label in ((gen, (GEN_BUS,), "generator"), (branch, (F_BUS, T_BUS), "branch")):
        for c in cols:
            dangling = [int(b) for b in mat[:, c] if int(b) not in known] if mat.size else []
            if dangling:
                raise CaseFormatError(f"{label} references unknown bus {dangling[0]}")
    live = bus[:, BUS_TYPE].astype(int) != 4
    live_buses = set(bus_numbers[live].tolist())
    gen_ids = _ids(raw, "gen_id", gen.shape[0])
    br_ids = _ids(raw, "branch_id", branch.shape[0])

    gens = []
    if gen.size:
        for k, row in enumerate(gen):
            if row[GEN_STATUS] <= 0 or int(row[GEN_BUS]) not in live_buses:
                continue
            gens.append((int(gen_ids[k]), row))
    has_gen = {int(row[GEN_BUS]) for _, row in gens}

    types = {}
    for row in bus[live]:
        b, t = int(row[BUS_I]), int(row[BUS_TYPE])
        if t in (2, 3) and b not in has_gen:
            t = 1
        types[b] = t
    if not np.any(bus[live, BUS_TYPE].astype(int) == 3):
        raise CaseFormatError("no slack bus")
    refs = [b for b, t in types.items() if t == 3]
    if not refs:
        pv = [b for b, t in types.items() if t == 2]
        if not pv:
            raise CaseFormatError("no slack bus and no PV bus to promote")
        logger.warning("no slack bus with generation; promoting PV bus %d", pv[0])
        types[pv[0]] = 3
    elif len(refs) > 1:
        raise CaseFormatError(f"multiple slack buses {refs[:5]}")

    v_sp = {}
    for gid, row in gens:
        b = int(row[GEN_BUS])
        if types[b] == 1:
            continue
        if b in v_sp and v_sp[b] != row[VG]:
            logger.warning("bus %d: conflicting generator voltage set points, keeping %.4f",
                           b, v_sp[b])
            continue
        v_sp.setdefault(b, row[VG])

    buses = []
    for row in bus[live]:
        b = int(row[BUS_I])
        buses.append(Bus(id=b, type=BusType(types[b]), pd=row[PD] / base, qd=row[QD] / base,
                         gs=row[GS] / base, bs=row[BS] / base, v_min=row[VMIN], v_max=row[VMAX],
                         vm=row[VM], va=np.deg2rad(row[VA]), base_kv=row[BASE_KV]))
    generators = [Generator(bus=int(row[GEN_BUS]), pg=row[PG] / base, qg=row[QG] / base,
                            q_min=row[QMIN] / base, q_max=row[QMAX] / base,
                            p_min=row[PMIN] / base, p_max=row[PMAX] / base, vg=row[VG], id=gid)
                  for gid, row in gens]
    branches = []
    for k, row in enumerate(branch):
        if row[BR_STATUS] <= 0:
            continue
        f, t = int(row[F_BUS]), int(row[T_BUS])
        if f not in live_buses or t not in live_buses:
            continue
        ratio, shift = row[TAP], row[SHIFT]
        branches.append(Branch(f=f, t=t, r=row[BR_R], x=row[BR_X], b=row[BR_B],
                               tap=ratio if ratio != 0 else 1.0, shift=np.deg2rad(shift),
                               transformer=bool(ratio != 0 or shift != 0), id=int(br_ids[k])))
    vsp = [v_sp.get(b.id, np.nan) for b in buses]
    return GridCase.from_elements(buses, generators, branches, base_mva=base, name=raw.name,
                                  v_sp=vsp)


def parse_case(text: str) -> GridCase:
    """Parse MATPOWER v2 case text into a validated GridCase."""
    return to_grid_case(parse_raw(text))


def matpower_data_dir() -> Optional[Path]:
    spec = importlib.util.find_spec("matpower")
    if spec is None or not spec.submodule_search_locations:
        return None
    path = Path(list(spec.submodule_search_locations)[0]) / "data"
    return path if path.is_dir() else None


def find_case(name: Union[str, os.PathLike]) -> Path:
    """Resolve a case path or a bare case name (``case9``, ``1354pegase``,
    ``ACTIVSg25k``) against ``MCPFLOW_CASE_PATH`` and the ``matpower`` package data."""
    p = Path(name)
    if p.is_file():
        return p
    dirs = [Path(d) for d in os.environ.get("MCPFLOW_CASE_PATH", "").split(os.pathsep) if d]
    data = matpower_data_dir()
    if data is not None:
        dirs.append(data)
    stem = p.name[:-2] if p.name.endswith(".m") else p.name
    candidates = [stem, "case" + stem, "case_" + stem]
    for d in dirs:
        for c in candidates:
            hit = d / (c + ".m")
            if hit.is_file():
                return hit
    raise FileNotFoundError(f"case file not found: {name}")


def load_case(name: Union[str, os.PathLike], sidecar=None) -> GridCase:
    path = find_case(name)
    case = parse_case(path.read_text())
    if sidecar is not None:
        case = apply_sidecar(case, sidecar if isinstance(sidecar, Sidecar) else load_sidecar(sidecar))
    return case


# ---------------------------------------------------------------------------
# writing cases

def _fmt(v: float) -> str:
    if np.isposinf(v):
        return "Inf"
    if np.isneginf(v):
        return "-Inf"
    return repr(float(v))


def _deg(rad: float) -> float:
    """Degrees whose conversion back to radians reproduces ``rad`` exactly."""
    d = float(np.rad2deg(rad))
    for _ in range(8):
        back = float(np.deg2rad(d))
        if back == rad:
            break
        d = float(np.nextafter(d, np.inf if back < rad else -np.inf))
    return d


def write_case(case: GridCase) -> str:
    """Serialize a GridCase back to MATPOWER v2 text (in-service elements only).

    Generator and branch identifiers are kept in the extra fields
    ``mpc.gen_id`` and ``mpc.branch_id``.
    """
    base = case.base_mva
    bs = case.bs.copy()
    for s in case.shunts:
        bs[s.bus] += s.b_sp
    lines = [f"function mpc = {case.name}", "mpc.version = '2';", f"mpc.baseMVA = {_fmt(base)};",
             "", "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin",
             "mpc.bus = ["]
    for i in range(case.n_bus):
        row = [case.bus_id[i], case.bus_type[i], case.pd[i] * base, case.qd[i] * base,
               case.gs[i] * base, bs[i] * base, 1, case.vm[i], _deg(case.va[i]),
               case.base_kv[i], 1, case.v_max[i], case.v_min[i]]
        lines.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    lines += ["];", "", "%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin", "mpc.gen = ["]
    for k in range(case.n_gen):
        b = case.gen_bus[k]
        vg = case.vg[k]
        row = [case.bus_id[b], case.pg[k] * base, case.qg[k] * base, case.q_max[k] * base,
               case.q_min[k] * base, vg, base, 1, case.p_max[k] * base, case.p_min[k] * base]
        lines.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    lines += ["];", "", "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus",
              "mpc.branch = ["]
    for k in range(case.n_branch):
        ratio = case.br_tap[k] if case.br_transformer[k] else 0.0
        row = [case.bus_id[case.br_f[k]], case.bus_id[case.br_t[k]], case.br_r[k], case.br_x[k],
               case.br_b[k], 0, 0, 0, ratio, _deg(case.br_shift[k]), 1]
        lines.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    lines += ["];", "", "mpc.gen_id = [" + " ".join(str(int(i)) for i in case.gen_id) + "];",
              "mpc.branch_id = [" + " ".join(str(int(i)) for i in case.br_id) + "];", ""]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# sidecar

@dataclass
class Sidecar:
    """Experimenter-specified regulation data that MATPOWER files lack.

    Bus and branch references use external identifiers (bus number, 1-based
    branch row).  Susceptances are in MVAr at 1 p.u. voltage.
    """

    taps: list = field(default_factory=list)
    shunts: list = field(default_factory=list)
    droop: dict = field(default_factory=dict)
    droop_regulation: Optional[float] = None
    raw: dict = field(default_factory=dict)


def load_sidecar(source) -> Sidecar:
    if isinstance(source, dict):
        data = source
    else:
        data = json.loads(Path(source).read_text())
    schema = data.get("schema", SIDECAR_SCHEMA)
    if schema != SIDECAR_SCHEMA:
        raise CaseFormatError(f"unsupported sidecar schema {schema!r}")
    droop = data.get("droop", {})
    return Sidecar(taps=list(data.get("taps", [])), shunts=list(data.get("shunts", [])),
                   droop={int(k): float(v) for k, v in droop.get("gens", {}).items()},
                   droop_regulation=droop.get("regulation"), raw=data)


def apply_sidecar(case: GridCase, sidecar: Sidecar) -> GridCase:
    base = case.base_mva
    taps = []
    for entry in sidecar.taps:
        k = case.branch_index(int(entry["branch"]))
        reg = entry.get("regulated_bus")
        reg_i = case.bus_index(int(reg)) if reg is not None else int(case.br_t[k])
        taps.append(TapDevice(branch=k, regulated_bus=reg_i, u_min=float(entry["u_min"]),
                              u_max=float(entry["u_max"]),
                              u_sp=float(entry["u_sp"]) if "u_sp" in entry else None))
    shunts = []
    for entry in sidecar.shunts:
        i = case.bus_index(int(entry["bus"]))
        sp_val = entry.get("b_sp_mvar")
        shunts.append(SwitchedShunt(bus=i, b_min=float(entry["b_min_mvar"]) / base,
                                    b_max=float(entry["b_max_mvar"]) / base,
                                    b_sp=float(sp_val) / base if sp_val is not None else None))
    case = case.with_devices(taps=taps, shunts=shunts)
    if sidecar.droop:
        droop = case.droop.copy()
        for gid, nu in sidecar.droop.items():
            droop[case.gen_index(gid)] = nu
        droop.flags.writeable = False
        case = replace(case, droop=droop)
    case.validate()
    return case


def sidecar_for(case: GridCase) -> dict:
    """The sidecar dictionary describing the devices attached to ``case``."""
    base = case.base_mva
    return {
        "schema": SIDECAR_SCHEMA,
        "taps": [{"branch": int(case.br_id[d.branch]),
                  "regulated_bus": int(case.bus_id[d.regulated_bus]),
                  "u_min": d.u_min, "u_max": d.u_max, "u_sp": d.u_sp} for d in case.taps],
        "shunts": [{"bus": int(case.bus_id[s.bus]), "b_min_mvar": s.b_min * base,
                    "b_max_mvar": s.b_max * base, "b_sp_mvar": s.b_sp * base}
                   for s in case.shunts],
        "droop": {"gens": {str(int(case.gen_id[k])): float(case.droop[k])
                           for k in np.flatnonzero(~np.isnan(case.droop))}},
    }


# ---------------------------------------------------------------------------
# solutions

def frequency_hz(dfreq: float, f_nom: float = F_NOM) -> float:
    return f_nom * (1.0 + dfreq)


def _report_fields(report) -> dict:
    if report is None:
        return {}
    if isinstance(report, dict):
        return dict(report)
    out = {}
    for key in ("status", "iterations", "wall_time", "q_order"):
        val = getattr(report, key, None)
        out[key] = getattr(val, "value", val)
    hist = getattr(report, "residual_history", None)
    if hist:
        out["residual"] = float(hist[-1])
    out["summary"] = getattr(report, "summary", None) or {}
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else None
    return obj


def solution_dict(case: GridCase, state: GridState, report=None, f_nom: float = F_NOM) -> dict:
    base = case.base_mva
    rep = _report_fields(report)
    meta = {"wall_time": rep.pop("wall_time", None)}
    f_hz = frequency_hz(state.dfreq, f_nom)
    return {
        "schema": SOLUTION_SCHEMA,
        "case": case.name,
        "base_mva": base,
        "report": _jsonable(rep),
        "frequency": {"df_pu": state.dfreq, "f_nom_hz": f_nom, "f_hz": f_hz,
                      "label": f"{f_hz:.2f} Hz"},
        "buses": [{"id": int(case.bus_id[i]), "type": int(case.bus_type[i]),
                   "v_pu": float(state.v[i]), "va_rad": float(state.delta[i]),
                   "va_deg": float(np.rad2deg(state.delta[i]))} for i in range(case.n_bus)],
        "generators": [{"id": int(case.gen_id[k]), "bus": int(case.bus_id[case.gen_bus[k]]),
                        "pg_pu": float(state.pg[k]), "qg_pu": float(state.qg[k]),
                        "pg_mw": float(state.pg[k] * base), "qg_mvar": float(state.qg[k] * base)}
                       for k in range(case.n_gen)],
        "taps": [{"branch": int(case.br_id[d.branch]), "u": float(state.tap[d.branch])}
                 for d in case.taps],
        "shunts": [{"bus": int(case.bus_id[s.bus]), "b_pu": float(state.bsh[j]),
                    "b_mvar": float(state.bsh[j] * base)} for j, s in enumerate(case.shunts)],
        "metadata": _jsonable(meta),
    }


def write_solution(case: GridCase, state: GridState, report=None, format: str = "json",
                   f_nom: float = F_NOM) -> str:
    """Render a solved state as JSON or CSV text with a fixed field order.

    The JSON ``metadata`` member holds run-dependent values (wall time) and
    is the only part that may differ between identical runs.
    """
    data = solution_dict(case, state, report, f_nom)
    if format == "json":
        return json.dumps(data, indent=1) + "\n"
    if format != "csv":
        raise ValueError(f"unknown solution format {format!r}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for b in data["buses"]:
        w.writerow(["bus", b["id"], b["id"], repr(b["v_pu"]), repr(b["va_deg"]), "", "", "", "", ""])
    for g in data["generators"]:
        w.writerow(["gen", g["id"], g["bus"], "", "", repr(g["pg_mw"]), repr(g["qg_mvar"]),
                    repr(g["pg_pu"]), repr(g["qg_pu"]), ""])
    for t in data["taps"]:
        w.writerow(["tap", t["branch"], "", "", "", "", "", "", "", repr(t["u"])])
    for s in data["shunts"]:
        w.writerow(["shunt", s["bus"], s["bus"], "", "", "", repr(s["b_mvar"]), "", repr(s["b_pu"]),
                    repr(s["b_pu"])])
    fr = data["frequency"]
    w.writerow(["frequency", "", "", "", "", "", "", "", "", repr(fr["f_hz"])])
    return buf.getvalue()


def read_solution(text: str) -> dict:
    data = json.loads(text)
    if data.get("schema") != SOLUTION_SCHEMA:
        raise CaseFormatError(f"not a solution file (schema {data.get('schema')!r})")
    return data


def state_from_solution(case: GridCase, data: dict) -> GridState:
    """Rebuild a GridState for ``case`` from a solution dictionary, by element id.

    Elements absent from the solution keep their flat-start values.
    """
    state = GridState.from_case(case)
    for b in data.get("buses", []):
        try:
            i = case.bus_index(b["id"])
        except KeyError:
            continue
        state.v[i] = b["v_pu"]
        state.delta[i] = b["va_rad"]
    gid = {int(g): k for k, g in enumerate(case.gen_id)}
    for g in data.get("generators", []):
        k = gid.get(int(g["id"]))
        if k is not None:
            state.pg[k] = g["pg_pu"]
            state.qg[k] = g["qg_pu"]
    for t in data.get("taps", []):
        try:
            state.tap[case.branch_index(t["branch"])] = t["u"]
        except KeyError:
            continue
    sh = {int(case.bus_id[s.bus]): j for j, s in enumerate(case.shunts)}
    for s in data.get("shunts", []):
        j = sh.get(int(s["bus"]))
        if j is not None:
            state.bsh[j] = s["b_pu"]
    state.dfreq = float(data.get("frequency", {}).get("df_pu", 0.0))
    return state
