"""Linear programming kernel.

Problems are stored in a solver-neutral form (sparse rows with senses and
column bounds). Solves go through the HiGHS dual simplex shipped with SciPy,
after max-abs row equilibration; every optimal answer is re-checked for
primal feasibility and for strong duality before it is reported.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

SENSES = ("=", "<", ">")

_SCIPY_STATUS = {0: "optimal", 1: "iteration-limit", 2: "infeasible", 3: "unbounded", 4: "iteration-limit"}


@dataclass(frozen=True)
class LpProblem:
    """``min (or max) c.x`` subject to ``A x (sense) rhs`` and ``lb <= x <= ub``."""

    c: np.ndarray
    A: sp.csr_matrix
    senses: tuple[str, ...]
    rhs: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    minimize: bool = True
    col_names: tuple[str, ...] | None = None
    row_names: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        c = np.asarray(self.c, dtype=float)
        A = sp.csr_matrix(self.A, dtype=float)
        rhs = np.asarray(self.rhs, dtype=float)
        lb = np.asarray(self.lb, dtype=float)
        ub = np.asarray(self.ub, dtype=float)
        m, n = A.shape
        if c.shape != (n,) or lb.shape != (n,) or ub.shape != (n,):
            raise ValueError(f"column data must have length {n}")
        if rhs.shape != (m,) or len(self.senses) != m:
            raise ValueError(f"row data must have length {m}")
        if any(s not in SENSES for s in self.senses):
            raise ValueError(f"row senses must be one of {SENSES}")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(A.data)) and np.all(np.isfinite(rhs))):
            raise ValueError("objective, matrix and rhs must be finite")
        if np.any(np.isnan(lb)) or np.any(np.isnan(ub)):
            raise ValueError("bounds must not be NaN")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "senses", tuple(self.senses))
        object.__setattr__(self, "rhs", rhs)
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def with_bounds(self, lb: np.ndarray, ub: np.ndarray) -> LpProblem:
        return replace(self, lb=np.asarray(lb, float), ub=np.asarray(ub, float))

    def with_objective(self, c: np.ndarray) -> LpProblem:
        return replace(self, c=np.asarray(c, float))

    def row_violation(self, x: np.ndarray) -> np.ndarray:
        """Per-row amount by which ``x`` violates its constraint (>= 0)."""
        ax = self.A @ x
        viol = np.zeros(self.m)
        for k, s in enumerate(self.senses):
            d = ax[k] - self.rhs[k]
            viol[k] = abs(d) if s == "=" else (max(d, 0.0) if s == "<" else max(-d, 0.0))
        return viol

    def primal_residual(self, x: np.ndarray) -> float:
        """Largest row or bound violation of ``x``."""
        r = float(self.row_violation(x).max()) if self.m else 0.0
        b = float(np.max(np.maximum(self.lb - x, 0.0), initial=0.0))
        b = max(b, float(np.max(np.maximum(x - self.ub, 0.0), initial=0.0)))
        return max(r, b)


@dataclass
class SolveOutcome:
    """Result of any solver in this package.

    ``status`` is one of ``optimal``, ``infeasible``, ``unbounded``,
    ``iteration-limit`` or (SLP only) ``infeasible-local``.
    """

    status: str
    x: np.ndarray | None
    objective: float
    diagnostics: dict = field(default_factory=dict)
    iterations: int = 0
    wall_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def _row_scale(A: sp.csr_matrix) -> np.ndarray:
    mx = np.zeros(A.shape[0])
    if A.nnz:
        absA = abs(A)
        mx = np.asarray(absA.max(axis=1).todense()).ravel()
    return np.where(mx > 0, 1.0 / np.where(mx > 0, mx, 1.0), 1.0)


def solve_lp(p: LpProblem, tol: float = 1e-9, dump_path=None) -> SolveOutcome:
    """Solve ``p`` to an optimal basic solution.

    Args:
        p: the problem.
        tol: primal/dual feasibility tolerance handed to the simplex and used
            for the post-solve checks.
        dump_path: if given, the problem is also written there in MPS format.

    Returns:
        A :class:`SolveOutcome`. Optimal outcomes carry ``primal_residual``,
        ``dual_objective``, ``duality_gap`` and row ``duals`` (sensitivity of
        the objective to each original rhs) in ``diagnostics``.
    """
    t0 = time.perf_counter()
    if dump_path is not None:
        write_mps(p, dump_path)
    sign = 1.0 if p.minimize else -1.0
    if np.any(p.lb > p.ub):
        return SolveOutcome("infeasible", None, float("nan"), {"reason": "crossed bounds"},
                            wall_time=time.perf_counter() - t0)

    scale = _row_scale(p.A)
    As = sp.diags(scale) @ p.A
    bs = p.rhs * scale
    senses = np.array(p.senses)
    eq = np.flatnonzero(senses == "=")
    le = np.flatnonzero(senses == "<")
    ge = np.flatnonzero(senses == ">")
    ub_rows = np.concatenate([le, ge])
    A_ub = sp.vstack([As[le], -As[ge]]).tocsr() if ub_rows.size else None
    b_ub = np.concatenate([bs[le], -bs[ge]]) if ub_rows.size else None
    A_eq = As[eq] if eq.size else None
    b_eq = bs[eq] if eq.size else None
    bounds = np.column_stack([p.lb, p.ub])

    opts = {"primal_feasibility_tolerance": max(tol, 1e-10), "dual_feasibility_tolerance": max(tol, 1e-10)}
    if p.n == 0:
        viol = p.row_violation(np.zeros(0)) if p.m else np.zeros(0)
        st = "optimal" if viol.size == 0 or viol.max() <= tol else "infeasible"
        return SolveOutcome(st, np.zeros(0), 0.0, {"primal_residual": 0.0}, wall_time=time.perf_counter() - t0)
    res = linprog(sign * p.c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds,
                  method="highs-ds", options=opts)
    status = _SCIPY_STATUS.get(res.status, "iteration-limit")
    diag = {"message": res.message}
    iters = int(getattr(res, "nit", 0) or 0)
    if status != "optimal":
        return SolveOutcome(status, None, float("nan"), diag, iters, time.perf_counter() - t0)

    x = np.asarray(res.x, dtype=float)
    obj = float(p.c @ x)
    # duals in scaled space -> original rows; marginals are d(obj)/d(rhs)
    y = np.zeros(p.m)
    if eq.size:
        y[eq] = res.eqlin.marginals
    if le.size:
        y[le] = res.ineqlin.marginals[: le.size]
    if ge.size:
        y[ge] = -res.ineqlin.marginals[le.size:]
    y_orig = sign * y * scale
    ml = sign * np.asarray(res.lower.marginals)
    mu = sign * np.asarray(res.upper.marginals)
    dual_obj = float(p.rhs @ y_orig)
    dual_obj += float(np.sum(np.where(np.isfinite(p.lb), p.lb, 0.0) * ml))
    dual_obj += float(np.sum(np.where(np.isfinite(p.ub), p.ub, 0.0) * mu))
    gap = abs(obj - dual_obj)
    diag.update(
        primal_residual=p.primal_residual(x),
        dual_objective=dual_obj,
        duality_gap=gap,
        duals=y_orig,
        reduced_lower=ml,
        reduced_upper=mu,
    )
    if gap > 1e-6 * (1.0 + abs(obj)):
        diag["warning"] = "duality check failed"
    return SolveOutcome("optimal", x, obj, diag, iters, time.perf_counter() - t0)


def write_mps(p: LpProblem, path) -> None:
    """Write ``p`` in free-format MPS (for cross-checking with other solvers)."""
    cols = p.col_names or tuple(f"x{j}" for j in range(p.n))
    rows = p.row_names or tuple(f"r{i}" for i in range(p.m))
    sense_code = {"=": "E", "<": "L", ">": "G"}
    A = p.A.tocsc()
    c = p.c if p.minimize else -p.c
    lines = ["NAME vvo", "ROWS", " N obj"]
    lines += [f" {sense_code[s]} {rows[i]}" for i, s in enumerate(p.senses)]
    lines.append("COLUMNS")
    for j in range(p.n):
        if c[j] != 0.0:
            lines.append(f" {cols[j]} obj {c[j]!r}")
        for k in range(A.indptr[j], A.indptr[j + 1]):
            lines.append(f" {cols[j]} {rows[A.indices[k]]} {A.data[k]!r}")
    lines.append("RHS")
    lines += [f" rhs {rows[i]} {v!r}" for i, v in enumerate(p.rhs) if v != 0.0]
    lines.append("BOUNDS")
    for j in range(p.n):
        lo, hi = p.lb[j], p.ub[j]
        if lo == hi:
            lines.append(f" FX bnd {cols[j]} {lo!r}")
            continue
        if np.isinf(lo) and np.isinf(hi):
            lines.append(f" FR bnd {cols[j]}")
            continue
        if np.isinf(lo):
            lines.append(f" MI bnd {cols[j]}")
        elif lo != 0.0:
            lines.append(f" LO bnd {cols[j]} {lo!r}")
        if np.isfinite(hi):
            lines.append(f" UP bnd {cols[j]} {hi!r}")
    lines.append("ENDATA")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
