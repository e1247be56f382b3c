"""Boxed linear complementarity problems ``l <= x <= u  _|_  Mx + q``.

The main solver is block principal pivoting on the (lower, upper, basic)
assignment of every index, safeguarded by single least-index pivots when the
number of infeasibilities stops decreasing (Judice-Pires), with Lemke's
complementary pivoting on the reduced standard-form problem as a last resort.
"""

from __future__ import annotations

import enum
import itertools
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, TextIO

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mcp import Bounds, DimensionError, natural_residual_from

logger = logging.getLogger(__name__)

AT_LOWER, AT_UPPER, BASIC = 0, 1, 2
DENSE_LIMIT = 150


class Status(str, enum.Enum):
    SOLVED = "solved"
    RAY_TERMINATION = "ray_termination"
    PIVOT_LIMIT = "pivot_limit"
    SINGULAR_BASIS = "singular_basis"


class SingularBasis(ArithmeticError):
    pass


@dataclass(frozen=True)
class BoxedLCP:
    M: sp.csc_matrix
    q: np.ndarray
    bounds: Bounds

    def __post_init__(self):
        m = sp.csc_matrix(self.M, dtype=float)
        q = np.asarray(self.q, dtype=float).copy()
        n = q.size
        if m.shape != (n, n) or len(self.bounds) != n:
            raise DimensionError(f"inconsistent BLCP dimensions: M {m.shape}, q {n}, "
                                 f"bounds {len(self.bounds)}")
        if n < 1:
            raise DimensionError("empty BLCP")
        if not np.all(np.isfinite(m.data)) or not np.all(np.isfinite(q)):
            raise ValueError("M and q must be finite")
        q.flags.writeable = False
        object.__setattr__(self, "M", m)
        object.__setattr__(self, "q", q)

    @property
    def n(self) -> int:
        return self.q.size

    def affine(self, x: np.ndarray) -> np.ndarray:
        return self.M @ x + self.q

    def residual(self, x: np.ndarray) -> np.ndarray:
        return natural_residual_from(x, self.affine(x), self.bounds)


@dataclass
class BLCPOptions:
    tol: float = 1e-10
    max_pivots: int = 500
    stall_limit: int = 3
    lemke: bool = True
    lemke_max_dim: int = 1500
    log: Optional[TextIO] = None


@dataclass
class PivotState:
    assignment: np.ndarray
    pivots: int = 0
    block_pivots: int = 0
    single_pivots: int = 0
    lemke_pivots: int = 0
    factor: object = field(default=None, repr=False)


@dataclass
class BLCPResult:
    x: np.ndarray
    state: PivotState
    status: Status
    residual: float
    message: str = ""

    @property
    def solved(self) -> bool:
        return self.status is Status.SOLVED


def default_assignment(bounds: Bounds) -> np.ndarray:
    lo, hi = bounds.lower, bounds.upper
    a = np.full(lo.size, BASIC, dtype=np.int8)
    a[np.isfinite(lo)] = AT_LOWER
    a[np.isneginf(lo) & np.isfinite(hi)] = AT_UPPER
    return a


def assignment_from_point(bounds: Bounds, x: np.ndarray, w: Optional[np.ndarray] = None,
                          tol: float = 0.0) -> np.ndarray:
    """Guess an assignment from a point (and optionally the affine values there)."""
    lo, hi = bounds.lower, bounds.upper
    a = np.full(lo.size, BASIC, dtype=np.int8)
    at_lo = np.isfinite(lo) & (x <= lo + tol)
    at_hi = np.isfinite(hi) & (x >= hi - tol) & ~at_lo
    if w is not None:
        both = at_lo & np.isfinite(hi) & (x >= hi - tol)
        at_lo &= ~(both & (w < 0))
        at_hi |= both & (w < 0)
    a[at_lo] = AT_LOWER
    a[at_hi] = AT_UPPER
    return _sanitize(a, bounds)


def _sanitize(a: np.ndarray, bounds: Bounds) -> np.ndarray:
    lo, hi = bounds.lower, bounds.upper
    a = np.asarray(a, dtype=np.int8).copy()
    a[(a == AT_LOWER) & np.isneginf(lo)] = BASIC
    a[(a == AT_UPPER) & np.isposinf(hi)] = BASIC
    a[bounds.is_fixed] = AT_LOWER
    return a


class _Basis:
    """Solves the basic subsystem for a given assignment."""

    def __init__(self, lcp: BoxedLCP):
        self.lcp = lcp
        self.dense = lcp.M.toarray() if lcp.n <= DENSE_LIMIT else None
        self.csc = lcp.M.tocsc()
        self.csr = lcp.M.tocsr()

    def solve(self, a: np.ndarray):
        lcp = self.lcp
        lo, hi = lcp.bounds.lower, lcp.bounds.upper
        x = np.where(a == AT_LOWER, lo, np.where(a == AT_UPPER, hi, 0.0))
        x[a == BASIC] = 0.0
        basic = np.flatnonzero(a == BASIC)
        factor = None
        if basic.size:
            nonbasic = np.flatnonzero(a != BASIC)
            if self.dense is not None:
                m_bb = self.dense[np.ix_(basic, basic)]
                rhs = -(lcp.q[basic] + self.dense[np.ix_(basic, nonbasic)] @ x[nonbasic])
                try:
                    with warnings.catch_warnings():
                        # singularity is detected from the pivots below
                        warnings.simplefilter("ignore", sla.LinAlgWarning)
                        factor = sla.lu_factor(m_bb, check_finite=False)
                except (ValueError, np.linalg.LinAlgError) as exc:
                    raise SingularBasis(str(exc)) from exc
                piv = np.abs(np.diag(factor[0]))
                if piv.min() <= 1e-14 * max(piv.max(), 1.0):
                    raise SingularBasis("basic submatrix numerically singular")
                x[basic] = sla.lu_solve(factor, rhs, check_finite=False)
            else:
                rows = self.csr[basic]
                m_bb = rows[:, basic].tocsc()
                rhs = -(lcp.q[basic] + rows[:, nonbasic] @ x[nonbasic])
                try:
                    factor = spla.splu(m_bb, permc_spec="COLAMD")
                except RuntimeError as exc:
                    raise SingularBasis(str(exc)) from exc
                x[basic] = factor.solve(rhs)
            if not np.all(np.isfinite(x[basic])):
                raise SingularBasis("non-finite basic solution")
        w = lcp.affine(x)
        w[basic] = 0.0
        return x, w, factor


def basic_step(lcp: BoxedLCP, assignment: Optional[np.ndarray] = None) -> np.ndarray:
    """Solution of the basic subsystem for ``assignment``, ignoring feasibility.

    Nonbasic components sit at their bounds and the basic ones solve their
    rows exactly; the result may violate bounds.  Without an assignment every
    component is basic, i.e. ``M x + q = 0``.  Raises SingularBasis.
    """
    if assignment is None:
        a = np.full(lcp.n, BASIC, dtype=np.int8)
    else:
        a = _sanitize(assignment, lcp.bounds)
    x, _, _ = _Basis(lcp).solve(a)
    return x


def _infeasible(a, x, w, bounds, tol):
    lo, hi = bounds.lower, bounds.upper
    scale_x = tol * np.maximum(1.0, np.abs(x))
    below = (a == BASIC) & (x < lo - scale_x)
    above = (a == BASIC) & (x > hi + scale_x)
    lo_bad = (a == AT_LOWER) & (w < -tol) & (hi > lo)
    hi_bad = (a == AT_UPPER) & (w > tol) & (hi > lo)
    return below, above, lo_bad, hi_bad


def _apply(a, idx, below, above, lo_bad, hi_bad, bounds):
    a = a.copy()
    a[idx[below[idx]]] = AT_LOWER
    a[idx[above[idx]]] = AT_UPPER
    a[idx[lo_bad[idx] | hi_bad[idx]]] = BASIC
    return _sanitize(a, bounds)


def solve_blcp(lcp: BoxedLCP, start: Optional[np.ndarray] = None,
               opts: Optional[BLCPOptions] = None) -> BLCPResult:
    """Solve a boxed LCP.

    Parameters
    ----------
    lcp : BoxedLCP
    start : array of {AT_LOWER, AT_UPPER, BASIC}, optional
        Initial assignment; an optimal assignment terminates with 0 pivots.
    opts : BLCPOptions, optional

    Returns
    -------
    BLCPResult
        ``status`` is one of solved, ray_termination, pivot_limit,
        singular_basis.
    """
    opts = opts or BLCPOptions()
    bounds = lcp.bounds
    a = _sanitize(default_assignment(bounds) if start is None else start, bounds)
    state = PivotState(assignment=a)
    basis = _Basis(lcp)
    best, stall = np.inf, 0
    previous = None
    message = ""
    seen = set()
    while True:
        try:
            x, w, factor = basis.solve(a)
        except SingularBasis as exc:
            if previous is None or state.pivots >= opts.max_pivots:
                message = f"singular basic submatrix: {exc}"
                break
            # fall back to one least-index pivot from the last good assignment
            a_prev, inf_prev = previous
            cand = np.flatnonzero(np.any(inf_prev, axis=0))
            a = _apply(a_prev, cand[-1:], *inf_prev, bounds)
            previous = None
            stall = opts.stall_limit
            state.pivots += 1
            state.single_pivots += 1
            _log(opts, state, "single*", cand[-1:], -1)
            continue
        inf = _infeasible(a, x, w, bounds, opts.tol)
        idx = np.flatnonzero(inf[0] | inf[1] | inf[2] | inf[3])
        if idx.size == 0:
            state.assignment = a
            state.factor = factor
            res = float(np.max(np.abs(lcp.residual(x)), initial=0.0))
            return BLCPResult(x, state, Status.SOLVED, res)
        if state.pivots >= opts.max_pivots:
            message = f"pivot limit {opts.max_pivots} reached with {idx.size} infeasibilities"
            break
        previous = (a, np.vstack(inf))
        if idx.size < best:
            best, stall = idx.size, 0
            mode, move = "block", idx
        elif stall < opts.stall_limit:
            stall += 1
            mode, move = "block", idx
        else:
            # the single-pivot rule is deterministic: a repeated assignment is a cycle
            key = a.tobytes()
            if key in seen:
                message = "single-pivot cycle (matrix is not a P-matrix)"
                break
            seen.add(key)
            mode, move = "single", idx[-1:]
        a = _apply(a, move, *inf, bounds)
        state.pivots += 1
        if mode == "block":
            state.block_pivots += 1
        else:
            state.single_pivots += 1
        _log(opts, state, mode, move, idx.size)

    if opts.lemke and lcp.n - int(bounds.is_free.sum()) <= opts.lemke_max_dim:
        res = _lemke_fallback(lcp, state, opts)
        if res is not None:
            return res
    status = Status.SINGULAR_BASIS if message.startswith("singular") else Status.PIVOT_LIMIT
    state.assignment = a
    x = bounds.project(np.zeros(lcp.n))
    return BLCPResult(x, state, status, np.inf, message)


def _log(opts, state, mode, moved, ninf):
    if opts.log is not None:
        opts.log.write(f"pivot {state.pivots} {mode} ninf={ninf} moved={list(map(int, moved))}\n")


# ---------------------------------------------------------------------------
# Lemke fallback

def lemke(M: np.ndarray, q: np.ndarray, max_pivots: Optional[int] = None):
    """Lemke's method with covering vector ``e`` and lexicographic ratio test.

    Solves ``w = Mz + q, w >= 0, z >= 0, w.z = 0``.  Returns ``(z, status,
    pivots)`` with status ``solved``, ``ray_termination`` or ``pivot_limit``.
    """
    M = np.asarray(M, dtype=float)
    q = np.asarray(q, dtype=float)
    m = q.size
    if np.all(q >= 0):
        return np.zeros(m), Status.SOLVED, 0
    max_pivots = max_pivots or 50 * m + 100
    # columns: w (0..m-1), z (m..2m-1), z0 (2m)
    tab = np.hstack([np.eye(m), -M, -np.ones((m, 1))])
    rhs = q.copy()
    basis = np.arange(m)
    z0 = 2 * m

    def ratio_row(col):
        d = tab[:, col]
        cand = np.flatnonzero(d > 1e-12)
        if cand.size == 0:
            return None
        ratios = rhs[cand] / d[cand]
        rmin = ratios.min()
        ties = cand[ratios <= rmin + 1e-12 * max(1.0, abs(rmin))]
        # prefer z0 leaving on ties, then lexicographic order on B^-1 rows
        if np.any(basis[ties] == z0):
            return int(ties[basis[ties] == z0][0])
        k = 0
        while ties.size > 1 and k < m:
            vals = tab[ties, k] / d[ties]
            ties = ties[vals <= vals.min() + 1e-14]
            k += 1
        return int(ties[0])

    def pivot(r, col):
        nonlocal rhs
        p = tab[r, col]
        tab[r] /= p
        rhs[r] /= p
        other = np.arange(m) != r
        factor = tab[other, col].copy()
        tab[other] -= np.outer(factor, tab[r])
        rhs[other] -= factor * rhs[r]
        leaving = basis[r]
        basis[r] = col
        return leaving

    r = int(np.argmin(q))
    ties = np.flatnonzero(q <= q[r] + 1e-14 * max(1.0, abs(q[r])))
    r = int(ties[-1]) if ties.size > 1 else r
    leaving = pivot(r, z0)
    pivots = 1
    while pivots < max_pivots:
        entering = leaving + m if leaving < m else leaving - m
        r = ratio_row(entering)
        if r is None:
            return None, Status.RAY_TERMINATION, pivots
        leaving = pivot(r, entering)
        pivots += 1
        if leaving == z0:
            z = np.zeros(m)
            sel = (basis >= m) & (basis < 2 * m)
            z[basis[sel] - m] = rhs[sel]
            return np.maximum(z, 0.0), Status.SOLVED, pivots
    return None, Status.PIVOT_LIMIT, pivots


def _lemke_fallback(lcp: BoxedLCP, state: PivotState, opts: BLCPOptions) -> Optional[BLCPResult]:
    """Eliminate free and fixed variables, convert to standard form, run Lemke."""
    n = lcp.n
    lo, hi = lcp.bounds.lower, lcp.bounds.upper
    M = lcp.M.tocsr()
    fixed = lcp.bounds.is_fixed
    free = lcp.bounds.is_free
    bnd = ~fixed & ~free
    fi, bi, xi = np.flatnonzero(free), np.flatnonzero(bnd), np.flatnonzero(fixed)
    q = lcp.q + M[:, xi] @ lo[xi]
    if fi.size:
        m_ff = M[fi][:, fi].tocsc()
        try:
            lu = spla.splu(m_ff)
        except RuntimeError:
            return None
        g = lu.solve(np.column_stack([M[fi][:, bi].toarray(), q[fi]]))
        s = M[bi][:, bi].toarray() - M[bi][:, fi] @ g[:, :-1]
        c = q[bi] - M[bi][:, fi] @ g[:, -1]
    else:
        s = M[bi][:, bi].toarray()
        c = q[bi]
    k = bi.size
    if k == 0:
        return None
    l_b, u_b = lo[bi], hi[bi]
    lower_type = np.isfinite(l_b)
    sign = np.where(lower_type, 1.0, -1.0)
    base = np.where(lower_type, l_b, u_b)
    two = np.flatnonzero(lower_type & np.isfinite(u_b))
    e = np.zeros((k, two.size))
    e[two, np.arange(two.size)] = 1.0
    top = np.hstack([sign[:, None] * s * sign[None, :], e])
    bottom = np.hstack([-e.T, np.zeros((two.size, two.size))])
    big = np.vstack([top, bottom])
    qq = np.concatenate([sign * (s @ base + c), (u_b - l_b)[two]])
    z, status, piv = lemke(big, qq)
    state.lemke_pivots += piv
    state.pivots += piv
    if status is not Status.SOLVED:
        x = lcp.bounds.project(np.zeros(n))
        return BLCPResult(x, state, status, np.inf, f"Lemke fallback: {status.value}")
    x = np.zeros(n)
    x[xi] = lo[xi]
    x[bi] = np.clip(base + sign * z[:k], l_b, u_b)
    if fi.size:
        x[fi] = g[:, -1] * -1 - g[:, :-1] @ x[bi]
    # polish with the assignment implied by the Lemke point
    a = assignment_from_point(lcp.bounds, x, lcp.affine(x), tol=1e-9)
    polish = BLCPOptions(tol=opts.tol, max_pivots=20, lemke=False, log=opts.log)
    res = solve_blcp(lcp, a, polish)
    res.state.pivots += state.pivots
    res.state.lemke_pivots = state.lemke_pivots
    if res.solved:
        res.message = "solved by Lemke fallback"
        return res
    r = float(np.max(np.abs(lcp.residual(x)), initial=0.0))
    state.assignment = a
    if r <= max(opts.tol, 1e-9) * 10:
        return BLCPResult(x, state, Status.SOLVED, r, "solved by Lemke fallback (unpolished)")
    return None


# ---------------------------------------------------------------------------
# brute-force oracle

def brute_force_blcp(lcp: BoxedLCP, tol: float = 1e-9, max_dim: int = 12) -> list:
    """Every solution found by enumerating all 3^n activity patterns."""
    n = lcp.n
    if n > max_dim:
        raise DimensionError(f"brute force limited to n <= {max_dim}, got {n}")
    M = lcp.M.toarray()
    lo, hi = lcp.bounds.lower, lcp.bounds.upper
    options = []
    for i in range(n):
        opts_i = [BASIC]
        if np.isfinite(lo[i]):
            opts_i.append(AT_LOWER)
        if np.isfinite(hi[i]) and hi[i] > lo[i]:
            opts_i.append(AT_UPPER)
        if lo[i] == hi[i]:
            opts_i = [AT_LOWER]
        options.append(opts_i)
    found = []
    for pattern in itertools.product(*options):
        a = np.array(pattern)
        x = np.where(a == AT_LOWER, lo, np.where(a == AT_UPPER, hi, 0.0))
        basic = np.flatnonzero(a == BASIC)
        nb = np.flatnonzero(a != BASIC)
        if basic.size:
            m_bb = M[np.ix_(basic, basic)]
            if abs(np.linalg.det(m_bb)) < 1e-12:
                continue
            x[basic] = np.linalg.solve(m_bb, -(lcp.q[basic] + M[np.ix_(basic, nb)] @ x[nb]))
        w = M @ x + lcp.q
        if np.any(x < lo - tol) or np.any(x > hi + tol):
            continue
        if np.max(np.abs(natural_residual_from(x, w, lcp.bounds)), initial=0.0) > tol * 10:
            continue
        if not any(np.max(np.abs(x - y)) <= 1e-8 for y in found):
            found.append(x)
    return found
