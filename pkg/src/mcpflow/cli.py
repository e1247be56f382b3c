"""Command-line driver: single solves, solver comparisons, generator-outage
frequency sweeps and tap/shunt bound sweeps.

Exit codes: 0 when every solve converged, 2 when at least one did not (the
artifact is still written), 1 on input errors.  JSON artifacts are
deterministic; run-dependent values (wall times) live in ``metadata``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .baselines import FBOptions, NROptions, fb_solve, nr_pv_pq
from .formulation import CONTROLS, RegulationConfig, assemble
from .grid import CaseError, GridCase, SwitchedShunt, TapDevice
from .matpower_io import (_jsonable, apply_sidecar, load_case, load_sidecar, read_solution,
                          state_from_solution, write_solution)
from .newton import SolverOptions, SolveStatus, solve

logger = logging.getLogger("mcpflow")

TABLE_SCHEMA = "mcpflow-table/1"
EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2
DEFAULT_WIDTHS = (0.0, 0.02, 0.04, 0.06, 0.08, 0.10)
# shunt widths are fractions of max(|b_sp|, this reference), per unit
SHUNT_REFERENCE = 1.0
SOLVERS = ("mcp", "nr", "fb")


class InputError(Exception):
    """Bad command-line input; reported with exit code 1."""


@dataclass
class RunSpec:
    cases: list = field(default_factory=list)
    sidecar: Optional[str] = None
    controls: tuple = ("gen-voltage",)
    solver: str = "mcp"
    tol: float = 1e-8
    max_iter: Optional[int] = None  # None: each solver's own default
    warm_start: Optional[str] = None
    outages: Optional[str] = None
    widths: tuple = DEFAULT_WIDTHS
    droop_regulation: Optional[float] = None
    format: str = "json"
    out: Optional[str] = None
    verbose: bool = False


# ---------------------------------------------------------------------------
# argument handling

def _split(text) -> list:
    if text is None:
        return []
    if isinstance(text, (list, tuple)):
        out = []
        for t in text:
            out.extend(_split(t))
        return out
    return [t.strip() for t in str(text).split(",") if t.strip()]


def parse_controls(text) -> tuple:
    items = _split(text)
    if items in (["none"], ["stage-a"]):
        return ()
    bad = [c for c in items if c not in CONTROLS]
    if bad:
        raise InputError(f"unknown control(s) {bad}; choose from {', '.join(CONTROLS)}")
    return tuple(c for c in CONTROLS if c in items)


def parse_widths(text) -> tuple:
    try:
        widths = tuple(float(w) for w in _split(text))
    except ValueError as exc:
        raise InputError(f"bad width list {text!r}") from exc
    if not widths or any(w < 0 or not np.isfinite(w) for w in widths):
        raise InputError("widths must be a nonempty list of nonnegative numbers")
    return widths


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--case", action="append", help="case file or MATPOWER case name")
    common.add_argument("--sidecar", help="JSON regulation data (taps, shunts, droop)")
    common.add_argument("--controls", help="comma list of " + ",".join(CONTROLS) + ", or none")
    common.add_argument("--solver", choices=SOLVERS)
    common.add_argument("--tol", type=float)
    common.add_argument("--max-iter", type=int)
    common.add_argument("--warm-start", help="solution JSON to start from")
    common.add_argument("--outages", help="generator ids id,id,... or largest:K")
    common.add_argument("--widths", help="bound widths as fractions, e.g. 0,0.02,0.04")
    common.add_argument("--droop-regulation", type=float,
                        help="per-unit speed regulation for default droop coefficients")
    common.add_argument("--format", choices=("json", "csv"))
    common.add_argument("--out", help="output path (default stdout)")
    common.add_argument("--config", help="JSON file with any of the flags above")
    common.add_argument("--verbose", action="store_true", default=None)

    p = argparse.ArgumentParser(prog="mcpflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve one case")
    sub.add_parser("compare", parents=[common], help="NR / MCP / FB table over cases")
    sub.add_parser("outage-sweep", parents=[common], help="cumulative generator outages")
    sub.add_parser("bound-sweep", parents=[common], help="widen tap/shunt bounds")
    return p


COMMAND_DEFAULTS = {
    "solve": {"controls": ("gen-voltage",)},
    "compare": {"controls": ("gen-voltage",)},
    "outage-sweep": {"controls": ("gen-voltage", "frequency"), "outages": "largest:5"},
    "bound-sweep": {"controls": ("gen-voltage", "taps", "shunts")},
}


def make_spec(args: argparse.Namespace) -> RunSpec:
    """Merge defaults, the config file and flags (flags win)."""
    values = {}
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise InputError(f"cannot read config {args.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"config {args.config} is not valid JSON: {exc}") from exc
        values = {k.replace("-", "_"): v for k, v in values.items()}
        if "case" in values:
            values["cases"] = values.pop("case")
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("command", "config")}
    if "case" in flags:
        flags["cases"] = flags.pop("case")
    values.update(flags)
    known = set(RunSpec.__dataclass_fields__)
    unknown = set(values) - known
    if unknown:
        raise InputError(f"unknown option(s) {sorted(unknown)}")
    spec = RunSpec(**COMMAND_DEFAULTS.get(args.command, {}))
    for key, val in values.items():
        setattr(spec, key, val)
    spec.cases = _split(spec.cases)
    spec.controls = parse_controls(spec.controls)
    spec.widths = parse_widths(spec.widths)
    if spec.solver not in SOLVERS:
        raise InputError(f"unknown solver {spec.solver!r}")
    if spec.format not in ("json", "csv"):
        raise InputError(f"unknown format {spec.format!r}")
    if spec.tol <= 0 or (spec.max_iter is not None and spec.max_iter < 1):
        raise InputError("tol must be positive and max-iter at least 1")
    return spec


def regulation_config(spec: RunSpec) -> RegulationConfig:
    kw = {}
    if spec.droop_regulation is not None:
        kw["droop_regulation"] = float(spec.droop_regulation)
    return RegulationConfig.from_controls(spec.controls, **kw)


def read_case(name: str, spec: RunSpec) -> GridCase:
    try:
        case = load_case(name)
        if spec.sidecar:
            sidecar = load_sidecar(spec.sidecar)
            case = apply_sidecar(case, sidecar)
            if sidecar.droop_regulation is not None and spec.droop_regulation is None:
                spec.droop_regulation = float(sidecar.droop_regulation)
    except FileNotFoundError as exc:
        raise InputError(str(exc) if str(exc) else f"file not found: {name}") from exc
    except (CaseError, KeyError, ValueError) as exc:
        raise InputError(f"{name}: {exc}") from exc
    return case


def read_warm(case: GridCase, spec: RunSpec):
    if not spec.warm_start:
        return None
    try:
        return state_from_solution(case, read_solution(Path(spec.warm_start).read_text()))
    except OSError as exc:
        raise InputError(f"cannot read warm start {spec.warm_start}: {exc.strerror}") from exc
    except (ValueError, KeyError) as exc:
        raise InputError(f"warm start {spec.warm_start}: {exc}") from exc


def thread_limit() -> int:
    try:
        return max(1, int(os.environ.get("MCP_PF_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# solving

@dataclass
class Outcome:
    """One solve: the report, the grid state and the regulation summary."""

    solver: str
    report: object
    state: object
    summary: dict
    model: object = None

    @property
    def converged(self) -> bool:
        return self.report.status is SolveStatus.CONVERGED


def _iter_limit(spec: RunSpec) -> dict:
    return {} if spec.max_iter is None else {"max_iter": int(spec.max_iter)}


def run_solver(case: GridCase, spec: RunSpec, solver: Optional[str] = None, warm=None,
               config: Optional[RegulationConfig] = None) -> Outcome:
    solver = solver or spec.solver
    config = config or regulation_config(spec)
    if solver == "nr":
        if set(config.controls) - {"gen-voltage"}:
            raise InputError("the nr solver supports only the gen-voltage control")
        opts = NROptions(tol=spec.tol, enforce_q_limits=config.gen_voltage_control,
                         **_iter_limit(spec))
        report, state, _ = nr_pv_pq(case, opts, state=warm)
        summary = dict(report.summary)
        report.summary = summary
        return Outcome(solver, report, state, summary)
    model = assemble(case, config)
    x0 = model.initial_point(warm)
    if solver == "fb":
        report = fb_solve(model.problem, x0, FBOptions(tol=spec.tol, **_iter_limit(spec)))
    else:
        report = solve(model.problem, x0, SolverOptions(tol=spec.tol, verbose=spec.verbose,
                                                         **_iter_limit(spec)))
    summary = model.regulation_summary(report.x)
    report.summary = {**report.summary, **summary}
    return Outcome(solver, report, model.state(report.x), summary, model)


def summary_line(case: GridCase, out: Outcome) -> str:
    rep = out.report
    iters = str(rep.iterations) if out.converged else "f"
    dev = f"{out.summary.get('max_v_deviation', float('nan')):.2e}" if out.converged else "n/a"
    return (f"{case.name}  {out.solver}  {rep.status.value}  iter {iters}  "
            f"time {rep.wall_time:.2f}s  max|v-v_sp| {dev}  |r| {rep.residual_history[-1]:.1e}")


# ---------------------------------------------------------------------------
# output

def render_table(title: str, columns: Sequence[str], rows: list, metadata: dict,
                 fmt: str, extra: Optional[dict] = None) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow(["" if row.get(c) is None else row.get(c) for c in columns])
        return buf.getvalue()
    data = {"schema": TABLE_SCHEMA, "table": title, "columns": list(columns), "rows": rows}
    if extra:
        data.update(extra)
    data["metadata"] = metadata
    return json.dumps(_jsonable(data), indent=1) + "\n"


def emit(text: str, spec: RunSpec) -> None:
    if spec.out:
        Path(spec.out).write_text(text)
    else:
        sys.stdout.write(text)


def note(line: str, spec: RunSpec) -> None:
    # keep stdout clean for the artifact when it goes there
    print(line, file=sys.stdout if spec.out else sys.stderr)


# ---------------------------------------------------------------------------
# commands

def cmd_solve(spec: RunSpec) -> int:
    if len(spec.cases) != 1:
        raise InputError("solve needs exactly one --case")
    case = read_case(spec.cases[0], spec)
    out = run_solver(case, spec, warm=read_warm(case, spec))
    emit(write_solution(case, out.state, out.report, spec.format), spec)
    note(summary_line(case, out), spec)
    return EXIT_OK if out.converged else EXIT_NONCONVERGED


def _compare_case(name: str, spec: RunSpec):
    case = read_case(name, spec)
    row, times = {"case": case.name}, {}
    for solver in ("nr", "mcp", "fb"):
        try:
            out = run_solver(case, spec, solver)
        except InputError:
            raise
        except Exception as exc:  # a failing cell never aborts the table
            logger.warning("%s on %s raised %s", solver, case.name, exc)
            row.update({f"{solver}_iter": "f", f"{solver}_max_dev": "n/a"})
            times[solver] = None
            continue
        ok = out.converged
        row[f"{solver}_iter"] = out.report.iterations if ok else "f"
        row[f"{solver}_max_dev"] = out.summary.get("max_v_deviation") if ok else "n/a"
        times[solver] = out.report.wall_time
    return row, times


def cmd_compare(spec: RunSpec) -> int:
    for name in spec.cases:
        read_case(name, spec)  # fail fast on bad input before solving anything
    with ThreadPoolExecutor(max_workers=thread_limit()) as pool:
        results = list(pool.map(lambda n: _compare_case(n, spec), spec.cases))
    rows = [r for r, _ in results]
    columns = ["case"] + [f"{s}_{c}" for s in ("nr", "mcp", "fb") for c in ("iter", "max_dev")]
    meta = {"time": {r["case"]: t for r, t in results}}
    if spec.format == "csv":
        for r, t in results:
            r.update({f"{s}_time": t[s] for s in t})
        columns += [f"{s}_time" for s in ("nr", "mcp", "fb")]
    emit(render_table("solver-comparison", columns, rows, meta, spec.format,
                      {"controls": list(spec.controls)}), spec)
    failed = any(r[f"{s}_iter"] == "f" for r in rows for s in ("nr", "mcp", "fb"))
    return EXIT_NONCONVERGED if failed else EXIT_OK


def outage_order(case: GridCase, text: Optional[str]) -> list:
    """Generator ids to remove, in order; ``largest:K`` takes the K largest
    outputs among generators away from the slack bus."""
    items = _split(text)
    if len(items) == 1 and items[0].startswith("largest:"):
        try:
            k = int(items[0].split(":", 1)[1])
        except ValueError as exc:
            raise InputError(f"bad outage spec {text!r}") from exc
        # stable sort keeps file order among equal outputs
        order = np.argsort(-case.pg, kind="stable")
        order = order[case.gen_bus[order] != case.slack][:k]
        return [int(case.gen_id[g]) for g in order]
    try:
        ids = [int(t) for t in items]
    except ValueError as exc:
        raise InputError(f"bad outage list {text!r}") from exc
    known = set(int(g) for g in case.gen_id)
    missing = [g for g in ids if g not in known]
    if missing:
        raise InputError(f"outage ids {missing} are not in-service generators of {case.name}")
    if len(set(ids)) != len(ids):
        raise InputError("outage ids must be distinct")
    return ids


def cmd_outage_sweep(spec: RunSpec) -> int:
    if len(spec.cases) != 1:
        raise InputError("outage-sweep needs exactly one --case")
    if "frequency" not in spec.controls:
        raise InputError("outage-sweep needs the frequency control")
    case = read_case(spec.cases[0], spec)
    ids = outage_order(case, spec.outages)
    config = regulation_config(spec)
    base_controls = [c for c in spec.controls if c != "frequency"]
    warm = read_warm(case, spec)
    # operating point before any outage: set points rebalanced to the solved dispatch
    pre = run_solver(case, spec, "mcp", warm, RegulationConfig.from_controls(base_controls))
    if not pre.converged:
        note(f"{case.name}: pre-outage solve failed: {pre.report.message}", spec)
        return EXIT_NONCONVERGED
    current = case.with_generation(pre.state.pg)
    warm = pre.model.warm_values(pre.report.x)
    rows, times, lost, failed = [], [], 0.0, False
    for k in range(len(ids) + 1):
        removed = None
        if k:
            removed = ids[k - 1]
            lost += float(case.pg[case.gen_index(removed)] * case.base_mva)
            try:
                current = current.without_generators([removed])
            except CaseError as exc:
                raise InputError(str(exc)) from exc
        out = run_solver(current, spec, "mcp", warm, config)
        ok = out.converged
        failed |= not ok
        s = out.summary
        rows.append({"outages": k, "removed_gen": removed, "lost_mw": lost,
                     "status": out.report.status.value, "iterations": out.report.iterations,
                     "dfreq_pu": s["dfreq"] if ok else None,
                     "frequency_hz": s["frequency_hz"] if ok else None,
                     "max_v_deviation": s["max_v_deviation"] if ok else None})
        times.append(out.report.wall_time)
        note(f"{k} outages  lost {lost:9.1f} MW  {out.report.status.value}  "
             f"{s['frequency_hz']:.4f} Hz  max|v-v_sp| {s['max_v_deviation']:.2e}", spec)
        if ok:
            warm = out.model.warm_values(out.report.x)
    columns = ["outages", "removed_gen", "lost_mw", "status", "iterations", "dfreq_pu",
               "frequency_hz", "max_v_deviation"]
    if spec.format == "csv":
        for r, t in zip(rows, times):
            r["time"] = t
        columns.append("time")
    emit(render_table("outage-sweep", columns, rows, {"time": times}, spec.format,
                      {"case": case.name, "outage_order": ids}), spec)
    return EXIT_NONCONVERGED if failed else EXIT_OK


def sweep_devices(case: GridCase, stage_b: Outcome) -> tuple:
    """Default devices for a bound sweep: taps on the transformers at buses that
    violate their voltage limits in the stage-B solution, or a switched shunt
    at such a bus when no transformer touches it."""
    taps, shunts = [], []
    for v in stage_b.summary["violations"]:
        i = case.bus_index(v["bus"])
        br = np.flatnonzero(((case.br_f == i) | (case.br_t == i)) & case.br_transformer)
        if br.size:
            taps.extend(TapDevice(int(k), i, float(case.br_tap[k]), float(case.br_tap[k]))
                        for k in br)
        else:
            shunts.append(SwitchedShunt(i, float(case.bs[i]), float(case.bs[i])))
    return tuple(taps), tuple(shunts)


def widen(case: GridCase, taps, shunts, width: float) -> GridCase:
    """Devices with ranges ``sp * (1 +- width)`` (taps) and
    ``sp +- width * max(|sp|, SHUNT_REFERENCE)`` (shunts), kept inside any
    limits the devices already carry when those are wider than zero."""
    def clip(lo, hi, d_lo, d_hi):
        if d_hi > d_lo:
            return max(lo, d_lo), min(hi, d_hi)
        return lo, hi

    new_taps = []
    for d in taps:
        u = d.u_sp if d.u_sp is not None else float(case.br_tap[d.branch])
        lo, hi = clip(u * (1 - width), u * (1 + width), d.u_min, d.u_max)
        new_taps.append(TapDevice(d.branch, d.regulated_bus, lo, hi, u))
    new_shunts = []
    for s in shunts:
        b = s.b_sp if s.b_sp is not None else float(case.bs[s.bus])
        half = width * max(abs(b), SHUNT_REFERENCE)
        lo, hi = clip(b - half, b + half, s.b_min, s.b_max)
        new_shunts.append(SwitchedShunt(s.bus, lo, hi, b))
    return case.with_devices(taps=new_taps, shunts=new_shunts)


def cmd_bound_sweep(spec: RunSpec) -> int:
    if len(spec.cases) != 1:
        raise InputError("bound-sweep needs exactly one --case")
    if not {"taps", "shunts"} & set(spec.controls):
        raise InputError("bound-sweep needs the taps or shunts control")
    case = read_case(spec.cases[0], spec)
    base_controls = [c for c in spec.controls if c not in ("taps", "shunts")]
    stage_b = run_solver(case, spec, "mcp", read_warm(case, spec),
                         RegulationConfig.from_controls(base_controls))
    if not stage_b.converged:
        note(f"{case.name}: stage-B solve failed: {stage_b.report.message}", spec)
        return EXIT_NONCONVERGED
    if case.taps or case.shunts:
        taps, shunts = case.taps, case.shunts
    else:
        taps, shunts = sweep_devices(case, stage_b)
    bare = case.with_devices()
    config = regulation_config(spec)
    warm = stage_b.model.warm_values(stage_b.report.x)
    rows, times, failed = [], [], False
    for w in spec.widths:
        out = run_solver(widen(bare, taps, shunts, w), spec, "mcp", warm, config)
        ok = out.converged
        failed |= not ok
        s = out.summary
        rows.append({"width": w, "status": out.report.status.value,
                     "iterations": out.report.iterations,
                     "violations": s["violation_count"] if ok else None,
                     "max_violation": s["max_violation"] if ok else None,
                     "devices": s["devices"], "devices_at_bounds": s["devices_at_bounds"],
                     "max_v_deviation": s["max_v_deviation"] if ok else None})
        times.append(out.report.wall_time)
        note(f"width {w:.3f}  {out.report.status.value}  violations {s['violation_count']}  "
             f"max violation {s['max_violation']:.2e}", spec)
        if ok:
            warm = out.model.warm_values(out.report.x)
    columns = ["width", "status", "iterations", "violations", "max_violation", "devices",
               "devices_at_bounds", "max_v_deviation"]
    if spec.format == "csv":
        for r, t in zip(rows, times):
            r["time"] = t
        columns.append("time")
    device_list = ([{"kind": "tap", "branch": int(case.br_id[d.branch]),
                     "regulated_bus": int(case.bus_id[d.regulated_bus])} for d in taps]
                   + [{"kind": "shunt", "bus": int(case.bus_id[s.bus])} for s in shunts])
    emit(render_table("bound-sweep", columns, rows, {"time": times}, spec.format,
                      {"case": case.name, "devices": device_list}), spec)
    return EXIT_NONCONVERGED if failed else EXIT_OK


COMMANDS = {"solve": cmd_solve, "compare": cmd_compare, "outage-sweep": cmd_outage_sweep,
            "bound-sweep": cmd_bound_sweep}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = make_spec(args)
        logging.basicConfig(level=logging.INFO if spec.verbose else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        return COMMANDS[args.command](spec)
    except InputError as exc:
        print(f"mcpflow: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
