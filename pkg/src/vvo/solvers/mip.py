"""Best-bound branch-and-bound over LP relaxations.

Integer variables are branched on most-fractional first. When that variable
belongs to an SOS1 group (an ordered one-hot vector such as a tap selector)
the whole group is split at its weighted mean position instead, which cuts
the tree far more evenly than single-binary dichotomies.
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .lp import LpProblem, SolveOutcome, solve_lp

INT_TOL = 1e-6


@dataclass(frozen=True)
class MipProblem:
    """An :class:`LpProblem` plus integrality mask and SOS1 groups."""

    lp: LpProblem
    integer: np.ndarray
    sos1: tuple[tuple[int, ...], ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        mask = np.asarray(self.integer, dtype=bool)
        if mask.shape != (self.lp.n,):
            raise ValueError("integrality mask must cover every column")
        if np.any(~np.isfinite(self.lp.lb[mask])) or np.any(~np.isfinite(self.lp.ub[mask])):
            raise ValueError("integer variables need finite bounds")
        object.__setattr__(self, "integer", mask)
        groups = tuple(tuple(int(j) for j in g) for g in self.sos1)
        for g in groups:
            if any(not 0 <= j < self.lp.n for j in g):
                raise ValueError("SOS1 group references an unknown column")
        object.__setattr__(self, "sos1", groups)


@dataclass(order=True)
class _Node:
    bound: float
    nid: int
    lb: np.ndarray = field(compare=False)
    ub: np.ndarray = field(compare=False)
    x: np.ndarray = field(compare=False)
    depth: int = field(compare=False, default=0)


def solve_mip(
    p: MipProblem,
    rel_gap: float = 1e-6,
    time_limit: float | None = None,
    abs_gap: float = 1e-9,
    max_nodes: int = 200_000,
    lp_tol: float = 1e-9,
) -> SolveOutcome:
    """Solve ``p`` by best-bound branch-and-bound.

    Returns the incumbent with ``gap``, ``best_bound``, ``nodes`` and the
    ``bound_history``/``incumbent_history`` traces in ``diagnostics``. When a
    limit stops the search the status is ``iteration-limit`` and
    ``diagnostics["limit"]`` says which one.
    """
    t0 = time.perf_counter()
    sign = 1.0 if p.lp.minimize else -1.0
    base = p.lp if p.lp.minimize else p.lp.with_objective(-p.lp.c)
    base = LpProblem(base.c, base.A, base.senses, base.rhs, base.lb, base.ub, True,
                     base.col_names, base.row_names)
    lb0 = np.where(p.integer, np.ceil(base.lb - INT_TOL), base.lb)
    ub0 = np.where(p.integer, np.floor(base.ub + INT_TOL), base.ub)
    group_of = {}
    for gi, g in enumerate(p.sos1):
        for j in g:
            group_of[j] = gi

    lp_solves = 0

    def relax(lb, ub):
        nonlocal lp_solves
        lp_solves += 1
        return solve_lp(base.with_bounds(lb, ub), tol=lp_tol)

    root = relax(lb0, ub0)
    if root.status != "optimal":
        st = root.status if root.status in ("infeasible", "unbounded") else "iteration-limit"
        return SolveOutcome(st, None, float("nan"), {"nodes": 1, "root": root.diagnostics},
                            lp_solves, time.perf_counter() - t0)

    inc_x, inc_obj = None, math.inf
    counter = 0
    heap = [_Node(root.objective, counter, lb0, ub0, root.x)]
    bound_hist, inc_hist = [], []
    nodes = 0
    limit = None
    best_bound = root.objective

    while heap:
        if time_limit is not None and time.perf_counter() - t0 > time_limit:
            limit = "time"
            break
        if nodes >= max_nodes:
            limit = "nodes"
            break
        node = heapq.heappop(heap)
        best_bound = node.bound
        bound_hist.append(best_bound)
        if _closed(inc_obj, best_bound, rel_gap, abs_gap):
            heap.clear()
            break
        nodes += 1
        j = _pick_fractional(node.x, p.integer)
        if j is None:
            # integral: polish by fixing integers and re-solving
            xi = np.where(p.integer, np.round(node.x), node.x)
            flb = np.where(p.integer, xi, node.lb)
            fub = np.where(p.integer, xi, node.ub)
            fix = relax(flb, fub)
            cand_x, cand_obj = (fix.x, fix.objective) if fix.ok else (node.x, node.bound)
            if cand_obj < inc_obj:
                inc_x, inc_obj = cand_x, cand_obj
                inc_hist.append(inc_obj)
            continue
        for clb, cub in _branch(node, j, group_of, p.sos1):
            out = relax(clb, cub)
            if out.ok and out.objective < inc_obj - abs_gap:
                counter += 1
                heapq.heappush(heap, _Node(out.objective, counter, clb, cub, out.x, node.depth + 1))

    if heap:
        best_bound = min(best_bound, heap[0].bound)
    elif inc_x is not None:
        best_bound = inc_obj
    diag = {
        "nodes": nodes,
        "lp_solves": lp_solves,
        "best_bound": sign * best_bound,
        "bound_history": [sign * b for b in bound_hist],
        "incumbent_history": [sign * v for v in inc_hist],
    }
    if inc_x is None:
        diag["gap"] = math.inf
        if limit:
            diag["limit"] = limit
            return SolveOutcome("iteration-limit", None, float("nan"), diag, lp_solves, time.perf_counter() - t0)
        return SolveOutcome("infeasible", None, float("nan"), diag, lp_solves, time.perf_counter() - t0)
    diag["gap"] = _gap(inc_obj, best_bound)
    diag["primal_residual"] = p.lp.primal_residual(inc_x)
    status = "optimal"
    if limit and not _closed(inc_obj, best_bound, rel_gap, abs_gap):
        status = "iteration-limit"
        diag["limit"] = limit
    return SolveOutcome(status, inc_x, sign * inc_obj, diag, lp_solves, time.perf_counter() - t0)


def _gap(inc: float, bound: float) -> float:
    if not math.isfinite(inc):
        return math.inf
    return max(inc - bound, 0.0) / max(1.0, abs(inc))


def _closed(inc, bound, rel_gap, abs_gap) -> bool:
    return math.isfinite(inc) and (inc - bound <= abs_gap or _gap(inc, bound) <= rel_gap)


def _pick_fractional(x: np.ndarray, mask: np.ndarray) -> int | None:
    frac = np.abs(x - np.round(x))
    frac = np.where(mask, frac, 0.0)
    j = int(np.argmax(frac))
    return j if frac[j] > INT_TOL else None


def _branch(node: _Node, j: int, group_of: dict, groups) -> list[tuple[np.ndarray, np.ndarray]]:
    gi = group_of.get(j)
    if gi is not None:
        g = np.array(groups[gi])
        vals = np.abs(node.x[g])
        nz = np.flatnonzero(vals > INT_TOL)
        if nz.size >= 2:
            pos = np.arange(g.size, dtype=float)
            mean = float(np.sum(pos * vals) / np.sum(vals))
            split = int(nz[nz <= mean].max()) if np.any(nz <= mean) else int(nz[0])
            if split >= nz[-1]:
                split = int(nz[-2])
            left_ub = node.ub.copy()
            left_ub[g[split + 1:]] = 0.0
            right_ub = node.ub.copy()
            right_ub[g[: split + 1]] = 0.0
            return [(node.lb, left_ub), (node.lb, right_ub)]
    down_ub = node.ub.copy()
    down_ub[j] = math.floor(node.x[j])
    up_lb = node.lb.copy()
    up_lb[j] = math.ceil(node.x[j])
    return [(node.lb, down_ub), (up_lb, node.ub)]
