"""Mixed complementarity problems: definition, solution tests and strong regularity.

A problem ``MCP(B, F)`` asks for ``x`` in the box ``B = [l, u]`` such that for
every component either ``x_i = l_i`` and ``F_i(x) >= 0``, or ``l_i <= x_i <= u_i``
and ``F_i(x) = 0``, or ``x_i = u_i`` and ``F_i(x) <= 0``.  Infinite bounds are
allowed everywhere.
"""

from __future__ import annotations

import enum
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)

ACTIVITY_TOL = 1e-7
COND_LIMIT = 1e12
MAX_EXACT_BETA = 20


class DimensionError(ValueError):
    pass


class EvaluationError(ArithmeticError):
    """The residual evaluator returned non-finite values."""


@dataclass(frozen=True)
class Bounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).copy()
        hi = np.asarray(self.upper, dtype=float).copy()
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DimensionError(f"bound vectors differ in shape: {lo.shape} vs {hi.shape}")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ValueError("bounds must not be NaN")
        if np.any(lo > hi):
            bad = np.flatnonzero(lo > hi)[:5]
            raise ValueError(f"lower bound exceeds upper bound at indices {bad.tolist()}")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def free(cls, n: int) -> "Bounds":
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    def __len__(self):
        return self.lower.size

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.minimum(np.maximum(x, self.lower), self.upper)

    @property
    def is_free(self) -> np.ndarray:
        return np.isneginf(self.lower) & np.isposinf(self.upper)

    @property
    def is_fixed(self) -> np.ndarray:
        return self.lower == self.upper


@dataclass(frozen=True)
class MCPProblem:
    """Box-constrained complementarity problem ``l <= x <= u  _|_  F(x)``.

    ``jacobian`` must return a sparse matrix whose pattern does not change
    between calls.  ``max_step`` optionally limits the step length along a
    direction so that iterates stay inside the evaluator's domain (for power
    flow: positive voltage magnitudes).
    """

    bounds: Bounds
    residual: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], sp.spmatrix]
    names: Sequence[str] = ()
    max_step: Optional[Callable[[np.ndarray, np.ndarray], float]] = None

    @property
    def n(self) -> int:
        return len(self.bounds)

    def F(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise DimensionError(f"expected vector of length {self.n}, got shape {x.shape}")
        f = np.asarray(self.residual(x), dtype=float)
        if f.shape != (self.n,):
            raise DimensionError(f"residual has shape {f.shape}, expected ({self.n},)")
        if not np.all(np.isfinite(f)):
            bad = np.flatnonzero(~np.isfinite(f))[:5]
            raise EvaluationError(f"non-finite residual at {[self.name(i) for i in bad]}")
        return f

    def J(self, x: np.ndarray) -> sp.csc_matrix:
        jac = sp.csc_matrix(self.jacobian(np.asarray(x, dtype=float)))
        if jac.shape != (self.n, self.n):
            raise DimensionError(f"jacobian has shape {jac.shape}, expected ({self.n}, {self.n})")
        return jac

    def name(self, i: int) -> str:
        if len(self.names) == self.n:
            return self.names[i]
        return f"x[{i}]"


def mid(lower: np.ndarray, upper: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Componentwise median of ``lower``, ``upper`` and ``z`` (``lower <= upper``)."""
    return np.minimum(np.maximum(z, lower), upper)


def natural_residual_from(x, f, bounds: Bounds) -> np.ndarray:
    return x - mid(bounds.lower, bounds.upper, x - f)


def natural_residual(problem: MCPProblem, x: np.ndarray) -> np.ndarray:
    """Return ``x - mid(l, u, x - F(x))``, which vanishes exactly at solutions."""
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.n,):
        raise DimensionError(f"expected vector of length {problem.n}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")
    return natural_residual_from(x, problem.F(x), problem.bounds)


def is_solution(problem: MCPProblem, x: np.ndarray, tol: float = 1e-8) -> bool:
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = np.asarray(x, dtype=float)
    b = problem.bounds
    if np.any(x < b.lower - tol) or np.any(x > b.upper + tol):
        return False
    return float(np.max(np.abs(natural_residual(problem, x)), initial=0.0)) <= tol


@dataclass(frozen=True)
class IndexPartition:
    """Index sets at an approximate solution.

    ``alpha``: strictly between bounds, ``F_i = 0``; ``beta``: at a bound with
    ``F_i = 0`` (degenerate); ``gamma``: at a bound with ``F_i != 0``.
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            arr = np.asarray(getattr(self, name), dtype=np.intp)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def size(self) -> int:
        return self.alpha.size + self.beta.size + self.gamma.size


def classify_indices(problem: MCPProblem, x: np.ndarray,
                     activity_tol: float = ACTIVITY_TOL) -> IndexPartition:
    x = np.asarray(x, dtype=float)
    if not is_solution(problem, x, activity_tol):
        raise ValueError("x is not an approximate solution; index partition is meaningless")
    f = problem.F(x)
    b = problem.bounds
    at_bound = (np.abs(x - b.lower) <= activity_tol) | (np.abs(x - b.upper) <= activity_tol)
    zero = np.abs(f) <= activity_tol
    alpha = np.flatnonzero(~at_bound)
    beta = np.flatnonzero(at_bound & zero)
    gamma = np.flatnonzero(at_bound & ~zero)
    part = IndexPartition(alpha, beta, gamma)
    assert part.size == problem.n
    return part


# ---------------------------------------------------------------------------
# P-matrices

def is_p_matrix(a: np.ndarray) -> bool:
    """Exact P-matrix test by recursive Schur complementation.

    Uses the identity: ``A`` is a P-matrix iff ``a_11 > 0`` and both the
    trailing principal submatrix and the Schur complement ``A / a_11`` are
    P-matrices.  Every principal minor is visited once, so the cost is
    ``O(2^n n^2)``.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError("P-matrix test needs a square matrix")
    return _p_rec(a)


def _p_rec(a: np.ndarray) -> bool:
    n = a.shape[0]
    if n == 0:
        return True
    if a[0, 0] <= 0:
        return False
    if n == 1:
        return True
    rest = a[1:, 1:]
    schur = rest - np.outer(a[1:, 0], a[0, 1:]) / a[0, 0]
    return _p_rec(schur) and _p_rec(rest)


def principal_minors(a: np.ndarray) -> dict:
    """All principal minors keyed by index tuple (brute force, small n only)."""
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    out = {}
    for k in range(1, n + 1):
        for idx in itertools.combinations(range(n), k):
            out[idx] = float(np.linalg.det(a[np.ix_(idx, idx)]))
    return out


def sampled_min_minor(a: np.ndarray, samples: int = 2000, seed: int = 0):
    """Smallest principal minor over random index subsets plus all 1x1 and 2x2 minors."""
    rng = np.random.default_rng(seed)
    n = a.shape[0]
    worst, worst_idx = np.inf, ()
    candidates = [(i,) for i in range(n)]
    candidates += list(itertools.combinations(range(n), 2)) if n <= 200 else []
    for _ in range(samples):
        k = int(rng.integers(1, n + 1))
        candidates.append(tuple(sorted(rng.choice(n, size=k, replace=False).tolist())))
    for idx in candidates:
        d = float(np.linalg.det(a[np.ix_(idx, idx)]))
        if d < worst:
            worst, worst_idx = d, idx
    return worst, worst_idx


# ---------------------------------------------------------------------------
# strong regularity

class Verdict(str, enum.Enum):
    REGULAR = "regular"
    NOT_REGULAR = "not_regular"
    INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class Certificate:
    verdict: Verdict
    condition_estimate: float
    schur_size: int
    message: str = ""
    min_sampled_minor: Optional[float] = None
    schur: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def regular(self) -> bool:
        return self.verdict is Verdict.REGULAR


def _cond1(a: sp.csc_matrix) -> float:
    """1-norm condition estimate of a sparse square matrix (inf if singular)."""
    n = a.shape[0]
    if n == 0:
        return 1.0
    if n <= 400:
        dense = a.toarray()
        try:
            return float(np.linalg.cond(dense, 1))
        except np.linalg.LinAlgError:
            return np.inf
    try:
        lu = spla.splu(a.tocsc())
    except RuntimeError:
        return np.inf
    inv = spla.LinearOperator((n, n), matvec=lu.solve, rmatvec=lambda y: lu.solve(y, trans="T"),
                              dtype=float)
    return float(spla.onenormest(a) * spla.onenormest(inv))


def strong_regularity_certificate(problem: MCPProblem, x: np.ndarray, partition: IndexPartition,
                                  cond_limit: float = COND_LIMIT,
                                  max_exact: int = MAX_EXACT_BETA) -> Certificate:
    """Sufficient test for strong regularity of a solution.

    Checks that the Jacobian block on the inactive set ``alpha`` is
    nonsingular (1-norm condition estimate below ``cond_limit``) and that the
    Schur complement on the degenerate set ``beta`` is a P-matrix.  For
    ``|beta| > max_exact`` only sampled minors are checked; a negative one
    disproves the condition, otherwise the verdict is inconclusive.
    """
    jac = problem.J(x).tocsc()
    a, b = partition.alpha, partition.beta
    j_aa = jac[a][:, a].tocsc()
    cond = _cond1(j_aa)
    if not np.isfinite(cond) or cond >= cond_limit:
        return Certificate(Verdict.NOT_REGULAR, cond, b.size,
                           f"inactive block singular or ill conditioned (cond ~ {cond:.3g})")
    if b.size == 0:
        return Certificate(Verdict.REGULAR, cond, 0, "no degenerate indices")
    j_bb = jac[b][:, b].toarray()
    j_ba = jac[b][:, a].toarray()
    j_ab = jac[a][:, b].toarray()
    if a.size:
        if a.size <= 400:
            sol = np.linalg.solve(j_aa.toarray(), j_ab)
        else:
            sol = spla.splu(j_aa).solve(j_ab)
        schur = j_bb - j_ba @ sol
    else:
        schur = j_bb
    if b.size <= max_exact:
        if is_p_matrix(schur):
            return Certificate(Verdict.REGULAR, cond, b.size, "Schur complement is a P-matrix",
                               schur=schur)
        return Certificate(Verdict.NOT_REGULAR, cond, b.size,
                           "Schur complement has a non-positive principal minor", schur=schur)
    worst, idx = sampled_min_minor(schur)
    if worst <= 0:
        return Certificate(Verdict.NOT_REGULAR, cond, b.size,
                           f"non-positive principal minor on {idx}", worst, schur=schur)
    return Certificate(Verdict.INCONCLUSIVE, cond, b.size,
                       f"|beta| = {b.size} too large for exhaustive minors; sampled minors positive",
                       worst, schur=schur)
