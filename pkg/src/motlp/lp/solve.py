"""Solver front end: backend dispatch, certificates and plan extraction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from ..errors import NotOptimal, SizeCap
from .model import EQ, GE, LE, LPModel, TransportPlan, plan_from_primal
from .simplex import simplex

log = logging.getLogger(__name__)

DEFAULT_CAP_VARS = 200_000


@dataclass
class SolverOptions:
    backend: str = "auto"  # auto | simplex | highs
    cap_vars: int = DEFAULT_CAP_VARS
    pivot_tol: float = 1e-10
    feas_tol: float = 1e-9
    gap_tol: float = 1e-7
    max_iter: int = 200_000
    refactor_every: int = 50
    # auto picks the internal simplex up to these sizes, HiGHS beyond
    simplex_max_rows: int = 1200
    simplex_max_vars: int = 15_000


@dataclass
class LPSolution:
    status: str
    primal: np.ndarray
    dual: np.ndarray
    objective_value: float
    iterations: int
    backend: str = ""
    residuals: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def _row_bounds(model: LPModel):
    inf = np.inf
    lo = np.where(model.senses == LE, -inf, model.rhs)
    hi = np.where(model.senses == GE, inf, model.rhs)
    return lo, hi


def _solve_highs(model: LPModel, opts: SolverOptions) -> LPSolution:
    import highspy

    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    h.setOptionValue("primal_feasibility_tolerance", min(opts.feas_tol * 0.1, 1e-10))
    h.setOptionValue("dual_feasibility_tolerance", min(opts.feas_tol * 0.1, 1e-10))
    h.setOptionValue("random_seed", 0)
    h.setOptionValue("threads", 1)
    A = sp.csc_matrix(model.A)
    lo, hi = _row_bounds(model)
    lp = highspy.HighsLp()
    lp.num_col_ = model.num_vars
    lp.num_row_ = model.num_rows
    # HiGHS minimises -c; its row duals are then the negatives of ours
    lp.col_cost_ = -model.objective
    lp.col_lower_ = np.zeros(model.num_vars)
    lp.col_upper_ = np.full(model.num_vars, highspy.kHighsInf)
    lp.row_lower_ = np.where(np.isinf(lo), -highspy.kHighsInf, lo)
    lp.row_upper_ = np.where(np.isinf(hi), highspy.kHighsInf, hi)
    lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
    lp.a_matrix_.start_ = A.indptr.astype(np.int32)
    lp.a_matrix_.index_ = A.indices.astype(np.int32)
    lp.a_matrix_.value_ = A.data
    h.passModel(lp)
    h.run()
    status = h.getModelStatus()
    S = highspy.HighsModelStatus
    if status == S.kUnboundedOrInfeasible:
        h.setOptionValue("presolve", "off")
        h.run()
        status = h.getModelStatus()
    iters = int(h.getInfo().simplex_iteration_count)
    n, m = model.num_vars, model.num_rows
    if status == S.kInfeasible:
        return LPSolution("infeasible", np.full(n, np.nan), np.full(m, np.nan), -np.inf, iters, "highs")
    if status == S.kUnbounded:
        return LPSolution("unbounded", np.full(n, np.nan), np.full(m, np.nan), np.inf, iters, "highs")
    if status != S.kOptimal:
        raise RuntimeError(f"HiGHS returned {h.modelStatusToString(status)}")
    sol = h.getSolution()
    x = np.array(sol.col_value)
    y = -np.array(sol.row_dual)
    return LPSolution("optimal", x, y, float(model.objective @ x), iters, "highs")


def choose_backend(model: LPModel, opts: SolverOptions) -> str:
    if opts.backend != "auto":
        return opts.backend
    if model.num_rows <= opts.simplex_max_rows and model.num_vars <= opts.simplex_max_vars:
        return "simplex"
    return "highs"


def solve(model: LPModel, options: Optional[SolverOptions] = None, **overrides) -> LPSolution:
    """Solve the model; an optimal result carries its residual certificate."""
    opts = options or SolverOptions()
    for k, v in overrides.items():
        setattr(opts, k, v)
    if model.num_primal > opts.cap_vars:
        raise SizeCap(
            f"model has {model.num_primal} plan columns, above cap_vars={opts.cap_vars}; "
            "export it with export_lp_text for an external solver or raise the cap"
        )
    backend = choose_backend(model, opts)
    log.debug("solving %d x %d LP with %s", model.num_rows, model.num_vars, backend)
    if backend == "simplex":
        r = simplex(
            model.objective,
            model.A,
            model.senses,
            model.rhs,
            pivot_tol=opts.pivot_tol,
            feas_tol=opts.feas_tol,
            refactor_every=opts.refactor_every,
            max_iter=opts.max_iter,
        )
        sol = LPSolution(r.status, r.x, r.y, r.objective, r.iterations, "simplex")
    elif backend == "highs":
        sol = _solve_highs(model, opts)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    if sol.optimal:
        sol.residuals = certificate(model, sol)
    return sol


def primal_residual(model: LPModel, x: np.ndarray) -> float:
    ax = model.A @ x
    diff = ax - model.rhs
    viol = np.where(
        model.senses == EQ, np.abs(diff), np.where(model.senses == LE, np.maximum(diff, 0), np.maximum(-diff, 0))
    )
    neg = np.maximum(-x, 0)
    return float(max(viol.max(initial=0.0), neg.max(initial=0.0)))


def dual_residual(model: LPModel, y: np.ndarray) -> float:
    """Largest violation of dual feasibility for the maximisation form."""
    red = model.objective - model.A.T @ y
    sign_viol = np.where(
        model.senses == LE, np.maximum(-y, 0), np.where(model.senses == GE, np.maximum(y, 0), 0.0)
    )
    return float(max(np.maximum(red, 0).max(initial=0.0), sign_viol.max(initial=0.0)))


def duality_gap(sol: LPSolution, model: LPModel) -> float:
    if not sol.optimal:
        raise NotOptimal(f"solution status is {sol.status}")
    return float(abs(model.objective @ sol.primal - model.rhs @ sol.dual))


def certificate(model: LPModel, sol: LPSolution) -> dict:
    return {
        "primal_residual": primal_residual(model, sol.primal),
        "dual_residual": dual_residual(model, sol.dual),
        "duality_gap": duality_gap(sol, model),
    }


def extract_plan(model: LPModel, sol: LPSolution) -> TransportPlan:
    if not sol.optimal:
        raise NotOptimal(f"solution status is {sol.status}")
    return plan_from_primal(model, sol.primal)
