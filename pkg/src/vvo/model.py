"""Incremental assembly of sparse optimisation models."""

from __future__ import annotations

import copy
import math

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .solvers import LpProblem, QuadraticRows


class ModelBuilder:
    """Collects named columns, linear rows and quadratic equality rows.

    Entries may be added to an existing row after creation, which is how the
    optimiser attaches device columns to network balance rows.
    """

    def __init__(self) -> None:
        self.names: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.cost: list[float] = []
        self._r: list[int] = []
        self._c: list[int] = []
        self._v: list[float] = []
        self.senses: list[str] = []
        self.rhs: list[float] = []
        self.row_names: list[str] = []
        self._q_rows: list[tuple[list, list, float]] = []
        self.q_names: list[str] = []

    @property
    def n(self) -> int:
        return len(self.names)

    @property
    def m(self) -> int:
        return len(self.senses)

    def copy(self) -> ModelBuilder:
        return copy.deepcopy(self)

    def var(self, name: str, lb: float = -math.inf, ub: float = math.inf, cost: float = 0.0) -> int:
        if lb > ub:
            raise ValueError(f"column {name}: lower bound {lb} exceeds upper bound {ub}")
        self.names.append(name)
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.cost.append(float(cost))
        return len(self.names) - 1

    def row(self, terms, sense: str, rhs: float, name: str = "") -> int:
        """Add ``sum(coef * x[col]) (sense) rhs`` with ``terms = [(col, coef), ...]``."""
        r = len(self.senses)
        for col, val in terms:
            if val != 0.0:
                self._r.append(r)
                self._c.append(int(col))
                self._v.append(float(val))
        self.senses.append(sense)
        self.rhs.append(float(rhs))
        self.row_names.append(name or f"r{r}")
        return r

    def add_to_row(self, r: int, col: int, val: float) -> None:
        if val != 0.0:
            self._r.append(r)
            self._c.append(int(col))
            self._v.append(float(val))

    def quad_row(self, bilinear, linear=(), const: float = 0.0, name: str = "") -> int:
        """Add ``sum(coef*x_i*x_j) + sum(coef*x_k) + const = 0``."""
        self._q_rows.append((list(bilinear), list(linear), float(const)))
        self.q_names.append(name or f"q{len(self._q_rows) - 1}")
        return len(self._q_rows) - 1

    def matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((self._v, (self._r, self._c)), shape=(self.m, self.n))

    def to_lp(self, minimize: bool = True) -> LpProblem:
        return LpProblem(
            np.array(self.cost), self.matrix(), tuple(self.senses), np.array(self.rhs),
            np.array(self.lb), np.array(self.ub), minimize, tuple(self.names), tuple(self.row_names),
        )

    def to_quadratic_rows(self) -> QuadraticRows:
        row, ii, jj, cf = [], [], [], []
        lr, lc, lv = [], [], []
        const = np.zeros(len(self._q_rows))
        for r, (bil, lin, k) in enumerate(self._q_rows):
            for i, j, c in bil:
                row.append(r)
                ii.append(i)
                jj.append(j)
                cf.append(c)
            for col, c in lin:
                lr.append(r)
                lc.append(col)
                lv.append(c)
            const[r] = k
        lin_m = sp.csr_matrix((lv, (lr, lc)), shape=(len(self._q_rows), self.n))
        return QuadraticRows(self.n, np.array(row, int), np.array(ii, int), np.array(jj, int),
                             np.array(cf, float), lin_m, const, tuple(self.q_names))


def solve_square(lp: LpProblem, fixed: dict[int, float] | None = None) -> np.ndarray:
    """Solve the equality rows of ``lp`` as a square linear system.

    Columns with equal bounds, plus any in ``fixed``, are substituted as
    constants; the remaining columns must match the equality rows one to one.
    """
    vals = np.full(lp.n, np.nan)
    pinned = lp.lb == lp.ub
    vals[pinned] = lp.lb[pinned]
    for j, v in (fixed or {}).items():
        vals[j] = v
        pinned[j] = True
    eq = np.array([s == "=" for s in lp.senses], dtype=bool)
    A = lp.A[np.flatnonzero(eq)].tocsc()
    free = np.flatnonzero(~pinned)
    rhs = lp.rhs[eq] - A[:, np.flatnonzero(pinned)] @ vals[pinned]
    Af = A[:, free]
    if Af.shape[0] != Af.shape[1]:
        raise ValueError(f"system is not square: {Af.shape[0]} rows, {Af.shape[1]} free columns")
    sol = spla.spsolve(Af.tocsc(), rhs)
    if not np.all(np.isfinite(sol)):
        raise np.linalg.LinAlgError("singular network system")
    vals[free] = sol
    return vals
