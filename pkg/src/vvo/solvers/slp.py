"""Sequential linear programming for linear objectives with quadratic equalities.

Each outer iteration linearises the quadratic rows about the iterate and
solves an elastic LP (l1 penalty on every row violation) inside a box trust
region. Steps are accepted on the ratio of actual to predicted reduction of
the merit ``c.x + mu * (row violations)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .lp import LpProblem, SolveOutcome, solve_lp


@dataclass(frozen=True)
class QuadraticRows:
    """Equalities ``sum coef*x_i*x_j + lin @ x + const = 0``, one per row.

    Bilinear terms are given as parallel arrays ``(row, i, j, coef)``.
    """

    n: int
    row: np.ndarray
    i: np.ndarray
    j: np.ndarray
    coef: np.ndarray
    lin: sp.csr_matrix
    const: np.ndarray
    names: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        nq = self.const.shape[0]
        if self.lin.shape != (nq, self.n):
            raise ValueError("linear part of quadratic rows has the wrong shape")
        for arr in (self.i, self.j):
            if arr.size and (arr.min() < 0 or arr.max() >= self.n):
                raise ValueError("quadratic row references an unknown column")
        if self.row.size and (self.row.min() < 0 or self.row.max() >= nq):
            raise ValueError("quadratic term references an unknown row")

    @property
    def count(self) -> int:
        return int(self.const.shape[0])

    @classmethod
    def empty(cls, n: int) -> QuadraticRows:
        z = np.zeros(0, dtype=int)
        return cls(n, z, z, z, np.zeros(0), sp.csr_matrix((0, n)), np.zeros(0))

    @classmethod
    def from_shapes(cls, n: int, sum_squares=(), squares=(), names=None) -> QuadraticRows:
        """Build ``x_a^2 + x_b^2 = x_c*x_d`` and ``x_e^2 = x_f*x_g`` rows."""
        row, ii, jj, cf = [], [], [], []
        r = 0
        for a, b, c, d in sum_squares:
            row += [r, r, r]
            ii += [a, b, c]
            jj += [a, b, d]
            cf += [1.0, 1.0, -1.0]
            r += 1
        for e, f, g in squares:
            row += [r, r]
            ii += [e, f]
            jj += [e, g]
            cf += [1.0, -1.0]
            r += 1
        return cls(n, np.array(row, int), np.array(ii, int), np.array(jj, int), np.array(cf, float),
                   sp.csr_matrix((r, n)), np.zeros(r), names)

    def value(self, x: np.ndarray) -> np.ndarray:
        h = self.lin @ x + self.const
        if self.row.size:
            h = h + np.bincount(self.row, self.coef * x[self.i] * x[self.j], minlength=self.count)
        return h

    def jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        rows = np.concatenate([self.row, self.row])
        cols = np.concatenate([self.i, self.j])
        vals = np.concatenate([self.coef * x[self.j], self.coef * x[self.i]])
        J = sp.csr_matrix((vals, (rows, cols)), shape=(self.count, self.n))
        return (J + self.lin).tocsr()


@dataclass(frozen=True)
class NlpProblem:
    """Linear program augmented with quadratic equality rows."""

    lp: LpProblem
    quad: QuadraticRows

    def __post_init__(self) -> None:
        if self.quad.n != self.lp.n:
            raise ValueError("quadratic rows and LP disagree on the column count")

    def residuals(self, x: np.ndarray) -> tuple[float, float]:
        """(max linear-row violation, max quadratic-row violation)."""
        lin = float(self.lp.row_violation(x).max()) if self.lp.m else 0.0
        quad = float(np.abs(self.quad.value(x)).max()) if self.quad.count else 0.0
        return lin, quad


def solve_slp(
    p: NlpProblem,
    start: np.ndarray,
    trust0: float = 0.1,
    tol: float = 1e-8,
    max_outer: int = 200,
    mu0: float | None = None,
    mu_max: float = 1e10,
    scale: np.ndarray | None = None,
) -> SolveOutcome:
    """Run SLP from ``start`` (clipped into the column bounds).

    Optimal when every row is satisfied to ``tol`` and the last accepted
    step is no longer than ``tol`` (or the LP model predicts no further
    improvement). ``diagnostics`` records the merit history of accepted
    iterates together with the penalty in force, trust radii and residuals.
    """
    t0 = time.perf_counter()
    lp = p.lp if p.lp.minimize else p.lp.with_objective(-p.lp.c)
    sign = 1.0 if p.lp.minimize else -1.0
    n = lp.n
    x = np.clip(np.asarray(start, float), lp.lb, lp.ub)
    s = np.ones(n) if scale is None else np.asarray(scale, float)
    if p.quad.count == 0:
        out = solve_lp(LpProblem(lp.c, lp.A, lp.senses, lp.rhs, lp.lb, lp.ub, True), tol=min(tol, 1e-9))
        if out.ok:
            out.objective = sign * out.objective
        out.wall_time = time.perf_counter() - t0
        return out

    mu = mu0 if mu0 is not None else 10.0 * (1.0 + float(np.abs(lp.c).max(initial=0.0)))
    radius = trust0
    history = []
    merit_log = []
    persistent = 0
    status = None
    it = 0
    phase = "optimise"
    c = lp.c.copy()

    def merit(xv, cv, muv):
        return float(cv @ xv) + muv * _violation(lp, p.quad, xv)

    for it in range(1, max_outer + 1):
        viol_x = _violation(lp, p.quad, x)
        phi = merit(x, c, mu)
        step = _lp_step(lp, p.quad, x, c, mu, radius, s, tol)
        if step is None:
            status = "iteration-limit"
            break
        d, model_viol = step
        pred = phi - (float(c @ (x + d)) + mu * model_viol)
        res_x = _max_residual(lp, p.quad, x)
        small_pred = pred <= 1e-13 * (1.0 + abs(phi))
        if small_pred:
            if res_x <= tol:
                status = "optimal"
                break
            if model_viol > 0.5 * viol_x and mu < mu_max:
                mu *= 2.0
                continue
            radius *= 0.5
            if radius < 1e-14:
                status = "infeasible-local"
                break
            continue
        x_new = x + d
        phi_new = merit(x_new, c, mu)
        rho = (phi - phi_new) / pred
        dnorm = float(np.max(np.abs(d) / s))
        history.append({"iter": it, "radius": radius, "rho": rho, "mu": mu, "residual": res_x})
        if not (rho >= 0.1 and phi_new < phi):
            # second-order correction: pull the trial point back onto the rows
            x_soc = _correct(lp, p.quad, x_new)
            phi_soc = merit(x_soc, c, mu)
            rho_soc = (phi - phi_soc) / pred
            if rho_soc >= 0.1 and phi_soc < phi:
                x_new, phi_new, rho = x_soc, phi_soc, rho_soc
                history[-1]["soc"] = True
        if rho >= 0.1 and phi_new < phi:
            x = x_new
            merit_log.append((mu, phi_new))
            if rho > 0.75 and dnorm >= 0.9 * radius:
                radius = min(2.0 * radius, 1e3)
            elif rho < 0.25:
                radius *= 0.5
            res_new = _max_residual(lp, p.quad, x)
            if res_new <= tol and dnorm <= tol:
                status = "optimal"
                break
        else:
            radius *= 0.5
            if res_x <= tol and radius <= tol:
                status = "optimal"
                break
            if radius < 1e-14:
                status = "infeasible-local"
                break
        # penalty growth when the linearised model stays infeasible
        persistent = persistent + 1 if model_viol > max(tol, 0.5 * viol_x) else 0
        if persistent >= 3 and mu < mu_max:
            mu *= 2.0
            persistent = 0
    else:
        status = "iteration-limit"

    restored = False
    if status != "optimal" and _max_residual(lp, p.quad, x) > tol:
        x = _restore(lp, p.quad, x, s, tol)
        restored = True
        phase = "restoration"
    lin_r, quad_r = p.residuals(x)
    if status == "optimal" and max(lin_r, quad_r) > 10 * tol:
        status = "infeasible-local"
    diag = {
        "linear_residual": lin_r,
        "quadratic_residual": quad_r,
        "merit_history": merit_log,
        "trace": history,
        "final_radius": radius,
        "penalty": mu,
        "restored": restored,
        "phase": phase,
    }
    return SolveOutcome(status, x, sign * float(lp.c @ x), diag, it, time.perf_counter() - t0)


def _violation(lp: LpProblem, quad: QuadraticRows, x: np.ndarray) -> float:
    v = float(lp.row_violation(x).sum()) if lp.m else 0.0
    v += float(np.abs(quad.value(x)).sum())
    return v


def _max_residual(lp, quad, x) -> float:
    a = float(lp.row_violation(x).max()) if lp.m else 0.0
    b = float(np.abs(quad.value(x)).max()) if quad.count else 0.0
    return max(a, b)


def _lp_step(lp: LpProblem, quad: QuadraticRows, x, c, mu, radius, s, tol):
    """Elastic trust-region LP; returns (step, model violation) or None."""
    n, m, nq = lp.n, lp.m, quad.count
    senses = np.array(lp.senses)
    eq = senses == "="
    n_eq = int(eq.sum())
    # slack columns: linear eq (+,-), linear ineq (one), quad (+,-)
    ns = 2 * n_eq + (m - n_eq) + 2 * nq
    r_lin = lp.rhs - lp.A @ x
    # one slack per inequality, a +/- pair per equality
    per_row = np.where(eq, 2, 1)
    first = (np.cumsum(per_row) - per_row).astype(int)
    sign_one = np.where(senses == "<", -1.0, 1.0)
    rows = np.concatenate([np.arange(m), np.flatnonzero(eq)])
    cols = np.concatenate([first, first[eq] + 1])
    vals = np.concatenate([sign_one, -np.ones(n_eq)])
    S = sp.csr_matrix((vals, (rows, cols)), shape=(m, int(per_row.sum())))
    J = quad.jacobian(x)
    h = quad.value(x)
    top = sp.hstack([lp.A, S, sp.csr_matrix((m, 2 * nq))])
    Iq = sp.identity(nq, format="csr")
    bot = sp.hstack([J, sp.csr_matrix((nq, S.shape[1])), Iq, -Iq])
    A = sp.vstack([top, bot]).tocsr()
    rhs = np.concatenate([r_lin, -h])
    senses_all = tuple(lp.senses) + ("=",) * nq
    lo = np.maximum(lp.lb - x, -radius * s)
    hi = np.minimum(lp.ub - x, radius * s)
    lo = np.minimum(lo, 0.0)
    hi = np.maximum(hi, 0.0)
    cost = np.concatenate([c, np.full(ns, mu)])
    lb = np.concatenate([lo, np.zeros(ns)])
    ub = np.concatenate([hi, np.full(ns, np.inf)])
    out = solve_lp(LpProblem(cost, A, senses_all, rhs, lb, ub), tol=min(tol, 1e-9))
    if not out.ok:
        return None
    d = out.x[:n]
    return d, float(out.x[n:].sum())


def _correct(lp: LpProblem, quad: QuadraticRows, x: np.ndarray) -> np.ndarray:
    """Minimum-norm Gauss-Newton correction onto the equality rows at ``x``.

    Columns sitting at a bound are held fixed; the result is clipped back
    into the bounds.
    """
    eq = np.array([s == "=" for s in lp.senses], dtype=bool)
    free = (x > lp.lb + 1e-12) & (x < lp.ub - 1e-12)
    if not np.any(free):
        return x
    J = sp.vstack([quad.jacobian(x), lp.A[np.flatnonzero(eq)]]).tocsc()[:, np.flatnonzero(free)]
    r = np.concatenate([-quad.value(x), (lp.rhs - lp.A @ x)[eq]])
    if not np.any(r):
        return x
    JJ = (J @ J.T).tocsc()
    reg = 1e-12 * max(1.0, float(abs(JJ).max()))
    try:
        y = spla.spsolve(JJ + reg * sp.identity(JJ.shape[0], format="csc"), r)
    except RuntimeError:
        return x
    if not np.all(np.isfinite(y)):
        return x
    dc = J.T @ y
    out = x.copy()
    out[free] += dc
    return np.clip(out, lp.lb, lp.ub)


def _restore(lp, quad, x, s, tol, max_iter: int = 60) -> np.ndarray:
    """Feasibility-only SLP (zero objective) from ``x``; returns best iterate."""
    best, best_r = x.copy(), _max_residual(lp, quad, x)
    radius = 0.1
    zero = np.zeros(lp.n)
    for _ in range(max_iter):
        step = _lp_step(lp, quad, x, zero, 1.0, radius, s, tol)
        if step is None:
            break
        d, model_viol = step
        v0 = _violation(lp, quad, x)
        v1 = _violation(lp, quad, x + d)
        pred = v0 - model_viol
        if pred <= 1e-15:
            break
        if (v0 - v1) / pred >= 0.1:
            x = x + d
            radius = min(2 * radius, 1e3)
            r = _max_residual(lp, quad, x)
            if r < best_r:
                best, best_r = x.copy(), r
            if r <= tol:
                break
        else:
            radius *= 0.5
            if radius < 1e-14:
                break
    return best
