"""
LP and MILP engines for MilpModel.

solve_lp   - LP relaxation: HiGHS dual simplex (default) or a dense
             two-phase tableau simplex with Bland's rule.
solve_milp - exact branch-and-bound over solve_lp: best-bound node
             selection, lowest-index fractional binary (one-hot groups
             branch on their largest member), 0-branch first. Rounding
             dives seed the incumbent until one is found; binaries are
             then fixed by reduced cost against it. Free columns defined by a
             single equality are substituted out first and the rest is
             split into blocks that share no row, each searched on its own.
solve_external - HiGHS MILP through scipy, used behind the `export` choice.
"""

import heapq
import logging
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import Bounds, LinearConstraint, linprog, milp
from scipy.sparse.csgraph import connected_components

from milp import Solution
from utils import get_lp_engine, get_node_limit, log_solver_usage

log = logging.getLogger(__name__)

# Centralized numerical tolerances
FEAS_TOL = 1e-7
INT_TOL = 1e-6
GAP_REL = 1e-9
PIVOT_TOL = 1e-9
SIMPLEX_MAX_PIVOTS = 50_000
SNAP_TOL = 1e-10
MAX_DIVES = 8
RC_MARGIN = 1e-7


class InfeasibleError(RuntimeError):
    pass


class UnboundedError(RuntimeError):
    pass


class SolverLimitError(RuntimeError):
    pass


def require_optimal(solution, context=""):
    """Raises the exception matching a non-optimal status."""
    where = f" ({context})" if context else ""
    if solution.status == "optimal":
        return solution
    if solution.status == "infeasible":
        raise InfeasibleError(f"model is infeasible{where}")
    if solution.status == "unbounded":
        raise UnboundedError(f"model is unbounded{where}")
    raise SolverLimitError(f"solver stopped at {solution.status}{where}")


# --- LP engines ---

def _highs_lp(c, A_ub, b_ub, A_eq, b_eq, lb, ub):
    res = linprog(
        c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
        bounds=np.column_stack([lb, ub]), method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-9, "dual_feasibility_tolerance": 1e-9},
    )
    status = {0: "optimal", 1: "iteration-limit", 2: "infeasible", 3: "unbounded"}.get(res.status, "iteration-limit")
    stats = {"engine": "highs", "status": status, "pivots": int(getattr(res, "nit", 0) or 0)}
    if status != "optimal":
        return Solution(status=status, stats=stats)

    # dual bound from HiGHS marginals (sensitivities of the optimum)
    dual = 0.0
    if A_ub is not None:
        dual += float(np.dot(b_ub, res.ineqlin.marginals))
    if A_eq is not None:
        dual += float(np.dot(b_eq, res.eqlin.marginals))
    for bound, marg in ((lb, res.lower.marginals), (ub, res.upper.marginals)):
        finite = np.isfinite(bound)
        dual += float(np.dot(bound[finite], np.asarray(marg)[finite]))
    stats["dual_bound"] = dual
    reduced = (np.asarray(res.lower.marginals, dtype=float), np.asarray(res.upper.marginals, dtype=float))
    return Solution(status="optimal", objective=float(res.fun), values=np.asarray(res.x, dtype=float), stats=stats,
                    reduced_costs=reduced)


def _to_standard_form(c, A_ub, b_ub, A_eq, b_eq, lb, ub):
    """
    Rewrites min c'x, A_ub x <= b_ub, A_eq x = b_eq, lb <= x <= ub as
    min c's y, A y (=) b, y >= 0. Returns the pieces plus the map back to x.
    """
    n = len(c)
    cols = []          # (original var, sign) per standard column
    offset = np.zeros(n)
    for j in range(n):
        if math.isfinite(lb[j]):
            cols.append((j, 1.0))
            offset[j] = lb[j]
        elif math.isfinite(ub[j]):
            cols.append((j, -1.0))
            offset[j] = ub[j]
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
    T = np.zeros((n, len(cols)))
    for k, (j, s) in enumerate(cols):
        T[j, k] = s
    # x = T y + offset

    rows, rhs, kinds = [], [], []
    if A_ub is not None:
        Au = A_ub.toarray()
        for i in range(Au.shape[0]):
            rows.append(Au[i] @ T); rhs.append(b_ub[i] - Au[i] @ offset); kinds.append("<=")
    if A_eq is not None:
        Ae = A_eq.toarray()
        for i in range(Ae.shape[0]):
            rows.append(Ae[i] @ T); rhs.append(b_eq[i] - Ae[i] @ offset); kinds.append("=")
    for j in range(n):
        if math.isfinite(lb[j]) and math.isfinite(ub[j]):
            row = np.zeros(len(cols))
            row[[k for k, (jj, _) in enumerate(cols) if jj == j]] = 1.0
            rows.append(row); rhs.append(ub[j] - lb[j]); kinds.append("<=")

    return c @ T, rows, rhs, kinds, T, offset


def _pivot(tab, basis, r, k):
    tab[r] /= tab[r, k]
    for i in range(tab.shape[0]):
        if i != r and tab[i, k] != 0.0:
            tab[i] -= tab[i, k] * tab[r]
    basis[r] = k


def _bland_phase(tab, basis, ncols, pivots):
    """Runs simplex pivots on `tab` (last row = reduced costs). Returns status, pivots."""
    m = tab.shape[0] - 1
    while True:
        if pivots >= SIMPLEX_MAX_PIVOTS:
            return "iteration-limit", pivots
        costs = tab[-1, :ncols]
        entering = next((k for k in range(ncols) if costs[k] < -PIVOT_TOL), None)
        if entering is None:
            return "optimal", pivots
        col = tab[:m, entering]
        best, leave = None, None
        for i in range(m):
            if col[i] > PIVOT_TOL:
                ratio = tab[i, -1] / col[i]
                if best is None or ratio < best - 1e-12 or (abs(ratio - best) <= 1e-12 and basis[i] < basis[leave]):
                    best, leave = ratio, i
        if leave is None:
            return "unbounded", pivots
        _pivot(tab, basis, leave, entering)
        pivots += 1


def _simplex_lp(c, A_ub, b_ub, A_eq, b_eq, lb, ub):
    cs, rows, rhs, kinds, T, offset = _to_standard_form(c, A_ub, b_ub, A_eq, b_eq, lb, ub)
    ny = len(cs)
    m = len(rows)
    n_slack = sum(1 for k in kinds if k == "<=")
    width = ny + n_slack + m + 1           # structural, slacks, artificials, rhs
    tab = np.zeros((m + 1, width))
    basis = [-1] * m
    art_cols = []
    s = ny
    for i, (row, b, kind) in enumerate(zip(rows, rhs, kinds)):
        tab[i, :ny] = row
        slack = None
        if kind == "<=":
            tab[i, s] = 1.0
            slack = s
            s += 1
        tab[i, -1] = b
        if b < 0:
            tab[i, :-1] *= -1.0
            tab[i, -1] *= -1.0
        if slack is not None and tab[i, slack] > 0:
            basis[i] = slack
        else:
            a = ny + n_slack + len(art_cols)
            tab[i, a] = 1.0
            art_cols.append(a)
            basis[i] = a
    n_struct = ny + n_slack
    pivots = 0

    if art_cols:
        tab[-1, :] = 0.0
        for a in art_cols:
            tab[-1, a] = 1.0
        for i in range(m):
            if basis[i] in art_cols:
                tab[-1] -= tab[i]
        status, pivots = _bland_phase(tab, basis, n_struct + len(art_cols), pivots)
        if status != "optimal":
            return Solution(status=status, stats={"engine": "simplex", "status": status, "pivots": pivots})
        if -tab[-1, -1] > FEAS_TOL:
            return Solution(status="infeasible", stats={"engine": "simplex", "status": "infeasible", "pivots": pivots})
        # drive remaining artificials out of the basis; drop redundant rows
        keep = []
        for i in range(m):
            if basis[i] in art_cols:
                k = next((k for k in range(n_struct) if abs(tab[i, k]) > PIVOT_TOL), None)
                if k is None:
                    continue
                _pivot(tab, basis, i, k)
                pivots += 1
            keep.append(i)
        tab = np.vstack([tab[keep], tab[-1:]])
        basis = [basis[i] for i in keep]
        tab = np.delete(tab, art_cols, axis=1)
        m = len(basis)

    tab[-1, :] = 0.0
    tab[-1, :ny] = cs
    for i in range(m):
        k = basis[i]
        if tab[-1, k] != 0.0:
            tab[-1] -= tab[-1, k] * tab[i]
    status, pivots = _bland_phase(tab, basis, n_struct, pivots)
    stats = {"engine": "simplex", "status": status, "pivots": pivots}
    if status != "optimal":
        return Solution(status=status, stats=stats)

    y = np.zeros(n_struct)
    for i, k in enumerate(basis):
        y[k] = tab[i, -1]
    x = T @ y[:ny] + offset
    return Solution(status="optimal", objective=float(c @ x), values=x, stats=stats)


def _lp_arrays(model):
    A_ub, b_ub, A_eq, b_eq = model.matrices()
    lb, ub = model.bounds()
    return model.cost_vector(), A_ub, b_ub, A_eq, b_eq, lb, ub


def _solve_arrays(arrays, lb, ub, engine):
    c, A_ub, b_ub, A_eq, b_eq, _, _ = arrays
    if np.any(lb > ub + FEAS_TOL):
        return Solution(status="infeasible", stats={"engine": engine, "status": "infeasible", "pivots": 0})
    if engine == "simplex":
        return _simplex_lp(c, A_ub, b_ub, A_eq, b_eq, lb, ub)
    return _highs_lp(c, A_ub, b_ub, A_eq, b_eq, lb, ub)


def solve_lp(model, engine=None, lb=None, ub=None, stage="lp"):
    """
    Solves the LP relaxation of `model` (binaries relaxed to [0, 1]).
    `lb` / `ub` override the variable bounds, e.g. to fix binaries.
    """
    start = time.perf_counter()
    if not model.variables:
        raise ValueError("cannot solve an empty model")
    engine = engine or get_lp_engine()
    arrays = _lp_arrays(model)
    lo = arrays[5] if lb is None else np.asarray(lb, dtype=float)
    hi = arrays[6] if ub is None else np.asarray(ub, dtype=float)
    sol = _solve_arrays(arrays, lo, hi, engine)
    sol.stats.setdefault("nodes", 0)
    log_solver_usage(stage, start, sol.stats)
    return sol


# --- branch and bound ---

def _gap(incumbent):
    return GAP_REL * max(1.0, abs(incumbent))


def _fractional(x, binaries):
    return [j for j in binaries if min(x[j], 1.0 - x[j]) > INT_TOL]


def _branch_and_bound(arrays, binaries, groups, engine, node_limit, stats):
    """
    Best-bound search over one block. Returns (status, incumbent) with
    incumbent = (objective, values) or None. `stats` is shared across blocks.
    """
    bin_idx = np.asarray(binaries, dtype=int)
    group_of = {}
    for g, members in enumerate(groups):
        for h in members:
            group_of.setdefault(h, g)

    def relax(lb, ub):
        sol = _solve_arrays(arrays, lb, ub, engine)
        stats["lp_solves"] += 1
        stats["pivots"] += sol.stats.get("pivots", 0)
        return sol

    lb0, ub0 = arrays[5].copy(), arrays[6].copy()
    root = relax(lb0, ub0)
    stats["nodes"] += 1
    if root.status in ("infeasible", "unbounded"):
        return root.status, None
    if root.status != "optimal":
        return "iteration-limit", None

    incumbent = None          # (objective, values)

    def polish(lb, ub, sol):
        """Binaries snapped to 0/1; re-solves only when snapping moves a value."""
        x = sol.values
        if not binaries:
            return sol.objective, x
        snapped = np.round(x[bin_idx])
        if np.max(np.abs(x[bin_idx] - snapped)) <= SNAP_TOL:
            values = x.copy()
            values[bin_idx] = snapped
            return sol.objective, values
        lo, hi = lb.copy(), ub.copy()
        lo[bin_idx] = hi[bin_idx] = snapped
        fixed = relax(lo, hi)
        return (fixed.objective, fixed.values) if fixed.status == "optimal" else None

    def consider(lb, ub, sol):
        nonlocal incumbent
        frac = _fractional(sol.values, binaries)
        if frac:
            return frac
        found = polish(lb, ub, sol)
        if found is not None and (incumbent is None or found[0] < incumbent[0] - _gap(incumbent[0])):
            incumbent = found
        return None

    def fix_by_reduced_cost(lb, ub, bound, x, reduced):
        """
        Binaries whose reduced cost alone lifts the node bound past the
        incumbent are fixed at their current value for the whole subtree.
        """
        if incumbent is None or reduced is None or not binaries:
            return
        lower, upper = reduced
        threshold = incumbent[0] + RC_MARGIN * max(1.0, abs(incumbent[0])) - bound
        free = (lb[bin_idx] == 0.0) & (ub[bin_idx] == 1.0)
        at_zero = free & (x[bin_idx] <= INT_TOL) & (lower[bin_idx] > threshold)
        at_one = free & (x[bin_idx] >= 1.0 - INT_TOL) & (-upper[bin_idx] > threshold)
        ub[bin_idx[at_zero]] = 0.0
        lb[bin_idx[at_one]] = 1.0
        stats["rc_fixed"] += int(at_zero.sum() + at_one.sum())

    def branch_var(frac, x):
        j = frac[0]
        if j in group_of:
            j = max(groups[group_of[j]], key=lambda h: (x[h], -h))
        return j

    def dive(lb, ub, sol, frac):
        """
        Rounding dive for an early incumbent: fix the branching variable
        (largest one-hot member to 1, plain binaries to the nearest value),
        re-solve, repeat. A failed fix is flipped once before giving up.
        """
        for _ in range(2 * len(binaries)):
            if stats["nodes"] >= node_limit:
                return
            j = branch_var(frac, sol.values)
            first = 1.0 if j in group_of else float(round(sol.values[j]))
            for value in (first, 1.0 - first):
                lo, hi = lb.copy(), ub.copy()
                lo[j] = hi[j] = value
                child = relax(lo, hi)
                stats["nodes"] += 1
                stats["dive_nodes"] += 1
                if child.status == "optimal":
                    break
            if child.status != "optimal":
                return
            if incumbent is not None and child.objective >= incumbent[0] - _gap(incumbent[0]):
                return
            lb, ub, sol = lo, hi, child
            frac = consider(lb, ub, sol)
            if not frac:
                return

    heap = []
    seq = 0
    dives = 0
    frac = consider(lb0, ub0, root)
    if frac:
        heapq.heappush(heap, (root.objective, seq, lb0, ub0, root.values, frac, root.reduced_costs))

    while heap:
        bound, _, lb, ub, x, frac, reduced = heapq.heappop(heap)
        if incumbent is not None and bound >= incumbent[0] - _gap(incumbent[0]):
            continue
        if stats["nodes"] >= node_limit:
            log.warning("⚠️ Node limit %d reached with %d open nodes", node_limit, len(heap) + 1)
            return "iteration-limit", incumbent
        if incumbent is None and dives < MAX_DIVES:
            dives += 1
            stats["dives"] += 1
            dive(lb, ub, Solution(status="optimal", objective=bound, values=x), frac)
            if incumbent is not None and bound >= incumbent[0] - _gap(incumbent[0]):
                continue
        fix_by_reduced_cost(lb, ub, bound, x, reduced)

        j = branch_var(frac, x)
        for value in (0.0, 1.0):
            lo, hi = lb.copy(), ub.copy()
            lo[j] = hi[j] = value
            child = relax(lo, hi)
            stats["nodes"] += 1
            if child.status == "unbounded":
                return "unbounded", None
            if child.status == "iteration-limit":
                return "iteration-limit", incumbent
            if child.status != "optimal":
                continue
            if incumbent is not None and child.objective >= incumbent[0] - _gap(incumbent[0]):
                continue
            child_frac = consider(lo, hi, child)
            if child_frac:
                seq += 1
                heapq.heappush(heap, (child.objective, seq, lo, hi, child.values, child_frac, child.reduced_costs))

    if incumbent is None:
        return "infeasible", None
    return "optimal", incumbent


@dataclass
class _Block:
    columns: np.ndarray
    arrays: tuple
    binaries: list
    groups: list


def _decompose(model, arrays):
    """
    Presolve for solve_milp. Free continuous columns that appear in exactly
    one equality row are dropped together with that row (their value follows
    from it afterwards, their cost moves onto the row's other columns), then
    the remaining columns are split into blocks that share no row. Blocks
    without binaries are merged into one LP block.

    Returns (blocks, eliminated) where eliminated lists (column, eq row, coeff),
    or None when some row left without columns is violated.
    """
    c, A_ub, b_ub, A_eq, b_eq, lb, ub = arrays
    n = len(c)
    is_bin = np.zeros(n, dtype=bool)
    is_bin[model.binaries] = True
    ub_nnz = np.diff(A_ub.tocsc().indptr) if A_ub is not None else np.zeros(n, dtype=int)
    A_eq_csc = A_eq.tocsc() if A_eq is not None else None
    eq_nnz = np.diff(A_eq_csc.indptr) if A_eq is not None else np.zeros(n, dtype=int)

    cost = c.copy()
    eliminated, used_rows = [], set()
    candidates = ~is_bin & np.isinf(lb) & np.isinf(ub) & (ub_nnz == 0) & (eq_nnz == 1)
    for j in np.flatnonzero(candidates):
        ptr = A_eq_csc.indptr[j]
        r, a = int(A_eq_csc.indices[ptr]), float(A_eq_csc.data[ptr])
        if r in used_rows or a == 0.0:
            continue
        used_rows.add(r)
        eliminated.append((int(j), r, a))
        if cost[j] != 0.0:
            cost -= (cost[j] / a) * A_eq.getrow(r).toarray().ravel()
            cost[j] = 0.0

    keep_col = np.ones(n, dtype=bool)
    keep_col[[j for j, _, _ in eliminated]] = False
    eq_keep = np.array([r for r in range(A_eq.shape[0]) if r not in used_rows], dtype=int) if A_eq is not None \
        else np.empty(0, dtype=int)

    parts = []
    if A_ub is not None:
        parts.append(abs(A_ub))
    if A_eq is not None and len(eq_keep):
        parts.append(abs(A_eq[eq_keep]))
    rows = sparse.vstack(parts).tocsr() if parts else sparse.csr_matrix((0, n))
    rows = rows[:, np.flatnonzero(keep_col)]
    kept = np.flatnonzero(keep_col)

    # rows with no remaining columns: 0 <= b or 0 = b
    empty = np.diff(rows.indptr) == 0
    if empty.any():
        n_ub = A_ub.shape[0] if A_ub is not None else 0
        rhs = np.concatenate([b_ub if A_ub is not None else np.empty(0), b_eq[eq_keep] if len(eq_keep) else np.empty(0)])
        for i in np.flatnonzero(empty):
            if (i < n_ub and rhs[i] < -FEAS_TOL) or (i >= n_ub and abs(rhs[i]) > FEAS_TOL):
                return None, eliminated

    adjacency = (rows.T @ rows).tocsr()
    n_comp, labels = connected_components(adjacency, directed=False)
    has_bin = np.zeros(n_comp, dtype=bool)
    has_bin[labels[is_bin[kept]]] = True
    lp_label = n_comp
    labels = np.where(has_bin[labels], labels, lp_label)

    blocks = []
    for label in sorted(set(labels.tolist())):
        cols = kept[labels == label]
        local = {int(j): i for i, j in enumerate(cols)}
        sub_ub = sub_eq = sub_bub = sub_beq = None
        if A_ub is not None:
            r_ub = np.flatnonzero(abs(A_ub[:, cols]).sum(axis=1).A1 > 0)
            if len(r_ub):
                sub_ub, sub_bub = A_ub[r_ub][:, cols].tocsr(), b_ub[r_ub]
        if len(eq_keep):
            r_eq = eq_keep[abs(A_eq[eq_keep][:, cols]).sum(axis=1).A1 > 0]
            if len(r_eq):
                sub_eq, sub_beq = A_eq[r_eq][:, cols].tocsr(), b_eq[r_eq]
        binaries = [local[int(j)] for j in cols if is_bin[j]]
        groups = []
        for members in model.one_hot_groups:
            mine = [local[h] for h in members if h in local]
            if mine:
                groups.append(mine)
        blocks.append(_Block(columns=cols, arrays=(cost[cols], sub_ub, sub_bub, sub_eq, sub_beq, lb[cols], ub[cols]),
                             binaries=binaries, groups=groups))
    return blocks, eliminated


def solve_milp(model, engine=None, node_limit=None, stage="milp"):
    """
    Exact branch-and-bound. Returns a Solution whose status is one of
    optimal / infeasible / unbounded / iteration-limit.
    """
    start = time.perf_counter()
    engine = engine or get_lp_engine()
    node_limit = node_limit or get_node_limit()
    arrays = _lp_arrays(model)
    stats = {"engine": engine, "nodes": 0, "pivots": 0, "lp_solves": 0, "dives": 0, "dive_nodes": 0,
             "rc_fixed": 0, "blocks": 0}

    def finish(status, best=None):
        stats["status"] = status
        stats["seconds"] = time.perf_counter() - start
        if best is None:
            sol = Solution(status=status, stats=stats)
        else:
            sol = Solution(status=status, objective=best[0], values=best[1], stats=stats)
            stats["objective"] = best[0]
        log_solver_usage(stage, start, stats)
        return sol

    blocks, eliminated = _decompose(model, arrays)
    if blocks is None:
        return finish("infeasible")
    stats["blocks"] = len(blocks)

    x = np.zeros(len(arrays[0]))
    limited = False
    for block in blocks:
        status, best = _branch_and_bound(block.arrays, block.binaries, block.groups, engine, node_limit, stats)
        if status in ("infeasible", "unbounded"):
            return finish(status)
        if status == "iteration-limit":
            limited = True
            if best is None:
                return finish("iteration-limit")
        x[block.columns] = best[1]

    if eliminated:
        A_eq, b_eq = arrays[3], arrays[4]
        for j, r, a in reversed(eliminated):
            row = A_eq.getrow(r).toarray().ravel()
            row[j] = 0.0
            x[j] = (b_eq[r] - row @ x) / a
    best = (float(arrays[0] @ x), x)
    return finish("iteration-limit" if limited else "optimal", best)


def solve_external(model, stage="external"):
    """HiGHS MILP through scipy; same Solution contract as solve_milp."""
    start = time.perf_counter()
    c, A_ub, b_ub, A_eq, b_eq, lb, ub = _lp_arrays(model)
    constraints = []
    if A_ub is not None:
        constraints.append(LinearConstraint(A_ub, -np.inf, b_ub))
    if A_eq is not None:
        constraints.append(LinearConstraint(A_eq, b_eq, b_eq))
    integrality = np.array([1 if v.binary else 0 for v in model.variables])
    res = milp(c, constraints=constraints, integrality=integrality, bounds=Bounds(lb, ub),
               options={"mip_rel_gap": GAP_REL})
    status = {0: "optimal", 1: "iteration-limit", 2: "infeasible", 3: "unbounded"}.get(res.status, "iteration-limit")
    stats = {"engine": "highs-milp", "status": status, "nodes": int(getattr(res, "mip_node_count", 0) or 0), "pivots": 0}
    log_solver_usage(stage, start, stats)
    if status != "optimal":
        return Solution(status=status, stats=stats)
    x = np.asarray(res.x, dtype=float)
    for j in model.binaries:
        x[j] = float(round(x[j]))
    return Solution(status="optimal", objective=float(c @ x), values=x, stats=stats)
