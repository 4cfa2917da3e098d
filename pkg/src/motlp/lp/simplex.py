"""Revised primal simplex for ``max c.x  s.t.  A x (<=,=,>=) b,  x >= 0``.

Two phases with artificial columns, dense LU of the basis refreshed every
``refactor_every`` pivots and product-form (eta) updates in between.  Pricing
is Dantzig's largest reduced cost with a Harris two-pass ratio test; after
``bland_after`` consecutive degenerate pivots the rule switches to Bland's
smallest-index choice until the objective moves again, which rules out
cycling.  Everything is deterministic for a given input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from ..errors import IterationLimit


@dataclass
class SimplexResult:
    status: str  # optimal | infeasible | unbounded
    x: np.ndarray
    y: np.ndarray
    objective: float
    iterations: int


class _Basis:
    def __init__(self, M: sp.csc_matrix, basis: np.ndarray):
        self.M = M
        self.basis = basis
        self.refactor()

    def refactor(self):
        B = self.M[:, self.basis].toarray()
        self.lu = la.lu_factor(B, check_finite=False)
        self.etas = []

    def ftran(self, a: np.ndarray) -> np.ndarray:
        v = la.lu_solve(self.lu, a, check_finite=False)
        for r, alpha in self.etas:
            vr = v[r] / alpha[r]
            v -= alpha * vr
            v[r] = vr
        return v

    def btran(self, c: np.ndarray) -> np.ndarray:
        w = c.copy()
        for r, alpha in reversed(self.etas):
            wr = w[r]
            w[r] = 0.0
            w[r] = (wr - w @ alpha) / alpha[r]
        return la.lu_solve(self.lu, w, trans=1, check_finite=False)

    def column(self, j: int) -> np.ndarray:
        col = np.zeros(self.M.shape[0])
        lo, hi = self.M.indptr[j], self.M.indptr[j + 1]
        col[self.M.indices[lo:hi]] = self.M.data[lo:hi]
        return col

    def pivot(self, r: int, q: int, alpha: np.ndarray):
        self.basis[r] = q
        self.etas.append((r, alpha.copy()))


def simplex(
    c: np.ndarray,
    A: sp.spmatrix,
    senses: np.ndarray,
    b: np.ndarray,
    *,
    pivot_tol: float = 1e-10,
    opt_tol: float = 1e-10,
    feas_tol: float = 1e-9,
    refactor_every: int = 50,
    bland_after: int = 50,
    max_iter: int = 200_000,
) -> SimplexResult:
    A = sp.csr_matrix(A, dtype=float)
    m, n = A.shape
    c = np.asarray(c, dtype=float)
    b = np.asarray(b, dtype=float)
    senses = np.asarray(senses)

    # make every right hand side nonnegative
    sign = np.where(b < 0, -1.0, 1.0)
    A = sp.diags(sign) @ A
    b = b * sign
    senses = senses.copy()
    flip = sign < 0
    senses[flip & (senses == "<")] = "#"
    senses[flip & (senses == ">")] = "<"
    senses[senses == "#"] = ">"

    le = np.flatnonzero(senses == "<")
    ge = np.flatnonzero(senses == ">")
    need_art = np.flatnonzero(senses != "<")
    n_slack = len(le) + len(ge)
    slack_rows = np.concatenate([le, ge])
    slack_vals = np.concatenate([np.ones(len(le)), -np.ones(len(ge))])
    S = sp.csc_matrix((slack_vals, (slack_rows, np.arange(n_slack))), shape=(m, n_slack))
    R = sp.csc_matrix(
        (np.ones(len(need_art)), (need_art, np.arange(len(need_art)))), shape=(m, len(need_art))
    )
    M = sp.hstack([A.tocsc(), S, R], format="csc")
    MT = M.T.tocsr()
    n_total = M.shape[1]
    art_start = n + n_slack

    basis = np.empty(m, dtype=np.int64)
    basis[le] = n + np.arange(len(le))
    basis[need_art] = art_start + np.arange(len(need_art))
    eligible = np.ones(n_total, dtype=bool)
    eligible[art_start:] = False

    B = _Basis(M, basis)
    x_B = b.copy()
    iterations = 0

    def run_phase(cost: np.ndarray) -> str:
        nonlocal x_B, iterations
        since_refactor = 0
        degenerate = 0
        bland = False
        confirmed = False
        while True:
            if since_refactor >= refactor_every:
                B.refactor()
                x_B = la.lu_solve(B.lu, b, check_finite=False)
                since_refactor = 0
            y = B.btran(cost[B.basis])
            d = cost - MT @ y
            d[B.basis] = 0.0
            cand = eligible & (d > opt_tol)
            if not cand.any():
                if since_refactor == 0 and confirmed:
                    return "optimal"
                # verify with a fresh factorisation before declaring optimality
                B.refactor()
                x_B = la.lu_solve(B.lu, b, check_finite=False)
                since_refactor = 0
                confirmed = True
                continue
            confirmed = False
            if iterations >= max_iter:
                raise IterationLimit(f"simplex stopped after {iterations} pivots")
            if bland:
                q = int(np.flatnonzero(cand)[0])
            else:
                q = int(np.argmax(np.where(cand, d, -np.inf)))
            alpha = B.ftran(B.column(q))
            pos = alpha > pivot_tol
            if not pos.any():
                return "unbounded"
            idx = np.flatnonzero(pos)
            xb = np.maximum(x_B[idx], 0.0)
            ratios = xb / alpha[idx]
            if bland:
                tmin = ratios.min()
                ties = idx[ratios <= tmin + 1e-15]
                r = int(ties[np.argmin(B.basis[ties])])
            else:
                bound = ((xb + feas_tol * 1e-2) / alpha[idx]).min()
                ok = idx[ratios <= bound]
                r = int(ok[np.argmax(alpha[ok])])
            theta = max(x_B[r], 0.0) / alpha[r]
            x_B = x_B - theta * alpha
            x_B[r] = theta
            B.pivot(r, q, alpha)
            iterations += 1
            since_refactor += 1
            if theta * d[q] <= 1e-14:
                degenerate += 1
                if degenerate >= bland_after:
                    bland = True
            else:
                degenerate = 0
                bland = False

    # phase one: drive artificial mass to zero
    if len(need_art):
        cost1 = np.zeros(n_total)
        cost1[art_start:] = -1.0
        eligible_art = eligible.copy()
        status = run_phase(cost1)
        art_basic = B.basis >= art_start
        infeas = float(np.sum(np.maximum(x_B[art_basic], 0.0)))
        if status != "optimal" or infeas > feas_tol:
            return SimplexResult("infeasible", np.full(n, np.nan), np.full(m, np.nan), -np.inf, iterations)
        # pivot artificials out of the basis where a structural column can replace them
        for r in np.flatnonzero(B.basis >= art_start):
            e = np.zeros(m)
            e[r] = 1.0
            row = MT @ B.btran(e)
            row[B.basis] = 0.0
            row[~eligible_art] = 0.0
            j = int(np.argmax(np.abs(row)))
            if abs(row[j]) > 1e-7:
                alpha = B.ftran(B.column(j))
                theta = x_B[r] / alpha[r]
                x_B = x_B - theta * alpha
                x_B[r] = theta
                B.pivot(r, j, alpha)
                iterations += 1
        B.refactor()
        x_B = la.lu_solve(B.lu, b, check_finite=False)

    cost2 = np.zeros(n_total)
    cost2[:n] = c
    status = run_phase(cost2)
    if status == "unbounded":
        return SimplexResult("unbounded", np.full(n, np.nan), np.full(m, np.nan), np.inf, iterations)

    B.refactor()
    x_B = la.lu_solve(B.lu, b, check_finite=False)
    y = la.lu_solve(B.lu, cost2[B.basis], trans=1, check_finite=False)
    x_full = np.zeros(n_total)
    x_full[B.basis] = x_B
    x = x_full[:n]
    return SimplexResult("optimal", x, y * sign, float(c @ x), iterations)
