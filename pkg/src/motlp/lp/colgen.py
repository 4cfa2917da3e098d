"""Column generation for relaxed MOT programs too large to materialise.

The master problem holds every row of the slack-form LP but only a subset of
the plan columns.  After each master solve the reduced cost of every product
atom is evaluated from the row duals, in chunks, and the most attractive
columns for each first-marginal atom are added.  The loop stops when no plan
column has a positive reduced cost above the tolerance, at which point the
restricted optimum is optimal for the full program; the largest reduced cost
found in that last pass is kept as the dual certificate.

Artificial columns with a large penalty keep every master feasible.  If they
still carry mass when pricing has converged the penalty is raised; if it
stays positive the instance is reported infeasible.
"""

from __future__ import annotations

import logging
import math
import time
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from ..errors import IterationLimit, NotOptimal
from ..measures import DiscreteMeasure
from .model import EQ, GE, LE, LPModel, build_relaxed_mot_lp, evaluate_cost, product_indices
from .solve import LPSolution, SolverOptions, certificate

log = logging.getLogger(__name__)

CHUNK = 1 << 20


def _reduced_costs(marginals, cost, y, model: LPModel, flat: np.ndarray, sizes) -> tuple:
    """Reduced costs c - A^T y of the plan columns with the given flat indices."""
    idx = product_indices(sizes, flat)
    red = evaluate_cost(cost, marginals, idx)
    N = len(marginals)
    d = marginals[0].dim
    for k in range(N):
        start = model.row_blocks[f"m{k + 1}"][0]
        red -= y[start + idx[:, k]]
    for k in range(N - 1):
        up = model.row_blocks[f"u{k + 1}"][0]
        lo = model.row_blocks[f"l{k + 1}"][0]
        prefix = np.ravel_multi_index(tuple(idx[:, : k + 1].T), tuple(sizes[: k + 1]))
        diff = marginals[k + 1].points[idx[:, k + 1]] - marginals[k].points[idx[:, k]]
        for c in range(d):
            slot = prefix * d + c
            red -= diff[:, c] * (y[up + slot] + y[lo + slot])
    return red, idx


def _price(marginals, cost, y, model, sizes, per_row: int, tol: float):
    """Best new columns per first-marginal atom, and the largest reduced cost per first atom."""
    total = math.prod(sizes)
    row_best = np.full(sizes[0], -math.inf)
    picks = []
    for start in range(0, total, CHUNK):
        flat = np.arange(start, min(start + CHUNK, total))
        red, idx = _reduced_costs(marginals, cost, y, model, flat, sizes)
        # flat C-order indices keep the first coordinate sorted within a chunk
        rows, at = np.unique(idx[:, 0], return_index=True)
        row_best[rows] = np.maximum(row_best[rows], np.maximum.reduceat(red, at))
        pos = red > tol
        if pos.any():
            picks.append((red[pos], idx[pos]))
    if not picks:
        return np.zeros((0, len(sizes)), dtype=np.int64), row_best
    red = np.concatenate([p[0] for p in picks])
    idx = np.concatenate([p[1] for p in picks])
    # keep the per_row largest reduced costs for every first-marginal atom
    order = np.lexsort((-red, idx[:, 0]))
    red, idx = red[order], idx[order]
    first = idx[:, 0]
    starts = np.r_[0, np.flatnonzero(np.diff(first)) + 1]
    rank = np.arange(len(first)) - np.repeat(starts, np.diff(np.r_[starts, len(first)]))
    return idx[rank < per_row], row_best


def _repair_signs(model: LPModel, y: np.ndarray) -> np.ndarray:
    """Project duals onto the sign constraints and make every slack column dual feasible.

    Each slack column carries +1 in its step's budget row, so raising that
    budget dual by the largest positive slack reduced cost of the step fixes
    the whole step at the price of eps times the raise in the dual bound.
    """
    y = y.copy()
    y[model.senses == LE] = np.maximum(y[model.senses == LE], 0.0)
    y[model.senses == GE] = np.minimum(y[model.senses == GE], 0.0)
    P = model.num_primal
    S = model.A[:, P:]
    red = -(S.T @ y)
    b0 = model.row_blocks["budget"][0]
    step = sp.csc_matrix(S[b0:, :]).indices  # one budget entry per slack column
    over = np.zeros(model.num_rows - b0)
    np.maximum.at(over, step, red)
    y[b0:] += over
    return y


class _Master:
    """HiGHS master in split-slack form.

    The pair of drift rows  sum p D - delta <= 0 <= sum p D + delta  of every
    slot becomes one equality  sum p D - s+ + s- = 0  with s+ + s- charged to
    the step budget.  The two forms have the same value, and a master dual w
    on the equality maps back to y_U = max(w, 0), y_L = min(w, 0).  Plan
    columns touch one row fewer per coordinate, which is what the interior
    point solver pays for.
    """

    def __init__(self, model: LPModel, penalty: float, opts: SolverOptions):
        import highspy

        self.hs = highspy
        self.h = highspy.Highs()
        h = self.h
        h.setOptionValue("output_flag", False)
        h.setOptionValue("random_seed", 0)
        h.setOptionValue("threads", 1)
        h.setOptionValue("primal_feasibility_tolerance", 1e-10)
        h.setOptionValue("dual_feasibility_tolerance", 1e-10)
        inf = highspy.kHighsInf
        N = model.n_marginals
        blocks = model.row_blocks
        marg = np.concatenate([np.arange(*blocks[f"m{k + 1}"][:2]) for k in range(N)])
        up = np.concatenate([np.arange(*blocks[f"u{k + 1}"][:2]) for k in range(N - 1)] + [np.zeros(0, int)])
        lo = np.concatenate([np.arange(*blocks[f"l{k + 1}"][:2]) for k in range(N - 1)] + [np.zeros(0, int)])
        bud = np.arange(*blocks["budget"][:2])
        self.marg, self.up, self.lo, self.bud = marg, up, lo, bud
        self.rows = np.concatenate([marg, up, bud])  # shell row of every master row
        self.shell_rows = model.num_rows
        nm, ne, nb = len(marg), len(up), len(bud)
        rlo = np.concatenate([model.rhs[marg], np.zeros(ne), np.full(nb, -inf)])
        rhi = np.concatenate([model.rhs[marg], np.zeros(ne), model.rhs[bud]])
        h.addRows(len(rlo), rlo, rhi, 0, np.zeros(1, dtype=np.int32), np.zeros(0, dtype=np.int32), np.zeros(0))
        # budget row of each slot, read off the delta columns of the model
        P = model.num_primal
        S = sp.csc_matrix(model.A[:, P:])
        where_up = np.full(model.num_rows, -1)
        where_up[up] = np.arange(ne)
        slot_budget = np.empty(ne, dtype=np.int64)
        for col in range(S.shape[1]):
            r = S.indices[S.indptr[col] : S.indptr[col + 1]]
            e = where_up[r[np.isin(r, up)][0]]
            slot_budget[e] = r[np.isin(r, bud)][0] - bud[0]
        e = np.repeat(np.arange(ne), 2)
        idx = np.stack([nm + e, nm + ne + np.repeat(slot_budget, 2)], axis=1).ravel()
        val = np.stack([np.tile([-1.0, 1.0], ne), np.ones(2 * ne)], axis=1).ravel()
        k = 2 * ne
        h.addCols(k, np.zeros(k), np.zeros(k), np.full(k, inf), 2 * k, np.arange(0, 2 * k, 2, dtype=np.int32),
                  idx.astype(np.int32), val)
        # artificials: both signs on marginal rows, relief on budgets
        arows = np.concatenate([np.arange(nm), np.arange(nm), nm + ne + np.arange(nb)])
        avals = np.concatenate([np.ones(nm), -np.ones(nm), -np.ones(nb)])
        na = len(arows)
        self.n_slack = k
        self.n_art = na
        self.penalty = penalty
        h.addCols(na, np.full(na, penalty), np.zeros(na), np.full(na, inf), na,
                  np.arange(na, dtype=np.int32), arows.astype(np.int32), avals)
        self.n_plan = 0
        self.opts = opts

    def add_plan_columns(self, A_plan: sp.spmatrix, cost: np.ndarray):
        """Plan columns given with shell rows; only marginal and upper drift rows are kept."""
        inf = self.hs.kHighsInf
        block = sp.csc_matrix(sp.csr_matrix(A_plan)[self.rows, :])
        k = block.shape[1]
        self.h.addCols(
            k, -cost, np.zeros(k), np.full(k, inf), block.nnz,
            block.indptr[:-1].astype(np.int32), block.indices.astype(np.int32), block.data,
        )
        self.n_plan += k

    def shell_dual(self, y: np.ndarray) -> np.ndarray:
        nm, ne = len(self.marg), len(self.up)
        out = np.zeros(self.shell_rows)
        out[self.marg] = y[:nm]
        w = y[nm : nm + ne]
        out[self.up] = np.maximum(w, 0.0)
        out[self.lo] = np.minimum(w, 0.0)
        out[self.bud] = y[nm + ne :]
        return out

    def set_penalty(self, penalty: float):
        start = self.n_slack
        idx = np.arange(start, start + self.n_art, dtype=np.int32)
        self.h.changeColsCost(self.n_art, idx, np.full(self.n_art, penalty))
        self.penalty = penalty

    def run(self, method: str, ipm_tol: float = 1e-8):
        h = self.h
        h.setOptionValue("ipm_optimality_tolerance", ipm_tol)
        if method == "ipm":
            h.setOptionValue("solver", "ipm")
            h.setOptionValue("run_crossover", "off")
        elif method == "ipm_crossover":
            h.setOptionValue("solver", "ipm")
            h.setOptionValue("run_crossover", "on")
        else:
            h.setOptionValue("solver", "simplex")
        h.run()
        status = h.getModelStatus()
        if status != self.hs.HighsModelStatus.kOptimal and method != "simplex":
            # interior point can stall on tiny or degenerate masters; simplex settles it
            log.debug("master %s ended with %s, retrying with simplex", method, h.modelStatusToString(status))
            h.setOptionValue("solver", "simplex")
            h.run()
            status = h.getModelStatus()
        if status != self.hs.HighsModelStatus.kOptimal:
            raise NotOptimal(f"master LP ended with {h.modelStatusToString(status)}")
        sol = h.getSolution()
        x = np.array(sol.col_value)
        y = -np.array(sol.row_dual)
        info = h.getInfo()
        iters = int(info.simplex_iteration_count) + int(info.ipm_iteration_count)
        return x, y, iters


def nearest_columns(marginals: Sequence[DiscreteMeasure], per_row: int = 4) -> np.ndarray:
    """Starting columns for two marginals: each first atom with its nearest second atoms."""
    if len(marginals) != 2:
        raise ValueError("nearest_columns handles two marginals")
    from scipy.spatial import cKDTree

    a, b = marginals
    k = min(per_row, b.size)
    _, j = cKDTree(b.points).query(a.points, k=k, p=1)
    j = np.asarray(j).reshape(a.size, k)
    return np.stack([np.repeat(np.arange(a.size), k), j.ravel()], axis=1)


def solve_colgen(
    marginals: Sequence[DiscreteMeasure],
    cost: Callable,
    eps: float,
    options: Optional[SolverOptions] = None,
    *,
    init_columns: Optional[np.ndarray] = None,
    per_row: int = 10,
    max_rounds: int = 500,
    master: str = "auto",
    rough_tol: float = 1e-6,
) -> tuple:
    """Solve by column generation; returns the restricted model and its solution.

    Every round the master duals are repaired into duals feasible for the
    full program: signs are projected, budget duals absorb positive slack
    reduced costs, and each first-marginal dual is raised by the largest
    reduced cost in its row over the whole product.  The best such dual bound
    is kept, and the loop stops once a vertex of the master is within a tenth
    of the gap tolerance of it.  The returned duals are those repaired ones,
    so the reported gap certifies the full problem.

    Large masters are solved by interior point without crossover, first at
    ``rough_tol`` and then tightly; only the last solve computes a vertex.
    """
    opts = options or SolverOptions()
    tol = opts.feas_tol * 0.1
    stop_gap = opts.gap_tol * 0.1
    marginals = list(marginals)
    sizes = [m.size for m in marginals]
    N = len(marginals)
    if N == 2:
        seed_cols = nearest_columns(marginals)
    else:
        seed_cols = np.zeros((sizes[0], N), dtype=np.int64)
        seed_cols[:, 0] = np.arange(sizes[0])
    if init_columns is not None:
        seed_cols = np.vstack([seed_cols, np.asarray(init_columns, dtype=np.int64).reshape(-1, N)])
    cols = np.unique(seed_cols, axis=0)

    shell = build_relaxed_mot_lp(marginals, cost, eps, columns=cols)
    scale = max(1.0, float(np.abs(shell.objective).max(initial=0.0)))
    m = _Master(shell, penalty=100.0 * scale, opts=opts)
    plan_obj = [shell.objective[: shell.num_primal]]
    m.add_plan_columns(shell.A[:, : shell.num_primal], plan_obj[0])
    all_cols = [cols]
    known = set(map(tuple, cols.tolist()))
    if master == "auto":
        master = "ipm" if shell.num_rows > 4000 else "simplex"
    phase = "rough" if master == "ipm" else "simplex"
    m1 = shell.row_blocks["m1"][0]
    a = marginals[0].weights
    few = max(50, sizes[0] // 100)
    n_slack, n_art = m.n_slack, m.n_art

    t0 = time.perf_counter()
    iterations = rounds = raises = 0
    best_ub, best_y = math.inf, None
    while True:
        rounds += 1
        if rounds > max_rounds:
            raise IterationLimit(f"column generation did not converge in {max_rounds} rounds")
        if phase == "rough":
            x, y, it = m.run("ipm", rough_tol)
        elif phase == "tight":
            x, y, it = m.run("ipm", 1e-9)
        elif phase == "vertex":
            x, y, it = m.run("ipm_crossover", 1e-9)
        else:
            x, y, it = m.run("simplex")
        iterations += it
        y = _repair_signs(shell, m.shell_dual(y))
        new, row_best = _price(marginals, cost, y, shell, sizes, per_row, tol)
        y[m1 : m1 + sizes[0]] += np.maximum(row_best, 0.0)
        ub = float(shell.rhs @ y)
        if ub < best_ub:
            best_ub, best_y = ub, y
        value = float(np.concatenate(plan_obj) @ x[n_slack + n_art :])
        art = float(x[n_slack : n_slack + n_art].max(initial=0.0))
        gap = best_ub - value
        fresh = [c for c in map(tuple, new.tolist()) if c not in known]
        log.info(
            "colgen round %d (%s): %d columns, %d priced in, gap %.3g, %.1fs",
            rounds, phase, len(known), len(fresh), gap, time.perf_counter() - t0,
        )
        vertex = phase in ("vertex", "simplex")
        if vertex and art > tol and not fresh:
            if raises >= 3:
                n, rws = shell.num_vars, shell.num_rows
                return shell, LPSolution(
                    "infeasible", np.full(n, np.nan), np.full(rws, np.nan), -math.inf, iterations, "colgen"
                )
            raises += 1
            m.set_penalty(m.penalty * 100.0)
            continue
        if vertex and art <= tol and (gap <= stop_gap or not fresh):
            break
        if phase in ("rough", "tight") and ((art <= tol and gap <= stop_gap) or not fresh):
            phase = "vertex"
            continue
        if phase == "vertex" or (phase == "rough" and len(fresh) <= few):
            phase = "tight"
        fresh = np.array(fresh, dtype=np.int64)
        known.update(map(tuple, fresh.tolist()))
        block = build_relaxed_mot_lp(marginals, cost, eps, columns=fresh)
        plan_obj.append(block.objective[: block.num_primal])
        m.add_plan_columns(block.A[:, : block.num_primal], plan_obj[-1])
        all_cols.append(fresh)

    # assemble the restricted model in the master's column order
    cols = np.concatenate(all_cols)
    model = build_relaxed_mot_lp(marginals, cost, eps, columns=cols)
    p = x[n_slack + n_art :]
    drift = np.abs(model.A[m.up, : model.num_primal] @ p)
    primal = np.concatenate([p, drift])
    sol = LPSolution("optimal", primal, best_y, float(model.objective @ primal), iterations, "colgen")
    sol.residuals = certificate(model, sol)
    sol.residuals["rounds"] = rounds
    sol.residuals["columns"] = int(len(cols))
    return model, sol


def _parents(fine: np.ndarray, coarse: np.ndarray, coarse_n: int) -> np.ndarray:
    """Index of the coarse atom whose grid cell contains each fine atom (-1 if none)."""
    key = lambda pts: [tuple(r) for r in np.floor(pts * coarse_n + 1e-9).astype(np.int64).tolist()]
    table = {k: i for i, k in enumerate(key(coarse))}
    return np.array([table.get(k, -1) for k in key(fine)], dtype=np.int64)


def lift_columns(
    coarse: Sequence[DiscreteMeasure],
    coarse_index: np.ndarray,
    coarse_n: int,
    fine: Sequence[DiscreteMeasure],
) -> np.ndarray:
    """Fine product atoms whose cells refine the support of a coarse plan.

    Both levels must be grid measures with atoms at lower-left cell corners
    and the fine grid must refine the coarse one.  Fine atoms whose cell has
    no coarse atom are dropped; pricing brings them in later.
    """
    from collections import defaultdict

    N = len(fine)
    children = []
    for c, f in zip(coarse, fine):
        par = _parents(f.points, c.points, coarse_n)
        ch = defaultdict(list)
        for j, p in enumerate(par.tolist()):
            if p >= 0:
                ch[p].append(j)
        children.append(ch)
    out = set()
    for row in np.asarray(coarse_index).tolist():
        lists = [children[k].get(row[k], []) for k in range(N)]
        if all(lists):
            for combo in np.stack(np.meshgrid(*lists, indexing="ij"), -1).reshape(-1, N).tolist():
                out.add(tuple(combo))
    return np.array(sorted(out), dtype=np.int64).reshape(-1, N)
