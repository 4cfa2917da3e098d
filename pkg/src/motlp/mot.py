"""End-to-end relaxed MOT: instances, schedules, solves, defects, sweeps."""

from __future__ import annotations

import logging
import math
import pickle
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .discretization import DiscretizationResult
from .errors import DimensionMismatch, MotlpError
from .lp.model import TransportPlan, build_relaxed_mot_lp, product_size
from .lp.solve import LPSolution, SolverOptions, extract_plan, solve
from .measures import DiscreteMeasure, moments
from .wasserstein import w1_product

log = logging.getLogger(__name__)

DEFECT_TOL = 1e-9


@dataclass(frozen=True)
class MOTInstance:
    marginal_specs: tuple
    cost: Callable
    lipschitz_c: float
    dyy_bound: Optional[float] = None
    name: str = "instance"

    def __post_init__(self):
        specs = tuple(self.marginal_specs)
        object.__setattr__(self, "marginal_specs", specs)
        if len(specs) < 2:
            raise ValueError("an instance needs at least two marginals")
        dims = {s.dim for s in specs}
        if len(dims) != 1:
            raise DimensionMismatch("marginals have different dimensions")
        if not self.lipschitz_c >= 0:
            raise ValueError("lipschitz_c must be nonnegative")

    @property
    def n_marginals(self) -> int:
        return len(self.marginal_specs)

    @property
    def dim(self) -> int:
        return self.marginal_specs[0].dim


class Epsilon(float):
    """A float that remembers whether it bounds W1 only in expectation."""

    stochastic: bool = False

    def __new__(cls, value: float, stochastic: bool = False):
        obj = super().__new__(cls, value)
        obj.stochastic = stochastic
        return obj


def epsilon_from_bounds(results: Sequence[DiscretizationResult]) -> Epsilon:
    bounds = [r.w1_bound for r in results]
    if not all(math.isfinite(b) for b in bounds):
        raise ValueError("all bounds must be finite")
    return Epsilon(math.fsum(bounds), any(r.stochastic for r in results))


@dataclass(frozen=True)
class ScheduleEntry:
    n: int
    eps: float
    results: tuple

    @property
    def measures(self) -> list:
        return [r.measure for r in self.results]

    @property
    def bound_sum(self) -> float:
        return math.fsum(r.w1_bound for r in self.results)


@dataclass(frozen=True)
class RelaxationSchedule:
    entries: tuple

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    def check(self, tol: float = 1e-12) -> list:
        """Problems with the schedule: eps below the certified bound, or not decreasing."""
        issues = []
        for e in self.entries:
            if e.eps < e.bound_sum - tol:
                issues.append(f"n={e.n}: eps {e.eps:.6g} below the bound sum {e.bound_sum:.6g}")
        eps = [e.eps for e in self.entries]
        if any(b > a + tol for a, b in zip(eps, eps[1:])):
            issues.append("eps does not decrease along the schedule")
        return issues


# ---------------------------------------------------------------- defects


def martingale_defect_steps(plan: TransportPlan) -> list:
    """Per step k: sum over prefixes (i_1..i_k) of |sum_rest p (x^{k+1} - x^k)|_1."""
    out = []
    sizes = [len(s) for s in plan.supports]
    for k in range(plan.n_marginals - 1):
        prefix = np.ravel_multi_index(tuple(plan.index[:, : k + 1].T), tuple(sizes[: k + 1]))
        drift = plan.mass[:, None] * (plan.points(k + 1) - plan.points(k))
        uniq, inv = np.unique(prefix, return_inverse=True)
        acc = np.zeros((len(uniq), plan.dim))
        np.add.at(acc, np.asarray(inv).reshape(-1), drift)
        out.append(float(np.abs(acc).sum()))
    return out


def martingale_defect(plan: TransportPlan) -> float:
    """Largest per-step defect; a plan is epsilon-approximating iff this is <= epsilon."""
    return max(martingale_defect_steps(plan))


# ---------------------------------------------------------------- solves


@dataclass
class RelaxedResult:
    value: float
    plan: Optional[TransportPlan]
    defect: Optional[float]
    status: str
    eps: float
    defect_steps: list = field(default_factory=list)
    lp_sizes: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)
    backend: str = ""
    iterations: int = 0
    wall_ms: float = 0.0

    def __iter__(self):
        return iter((self.value, self.plan, self.defect))


def solve_relaxed(
    instance: Optional[MOTInstance],
    discretized: Sequence[DiscreteMeasure],
    eps: float,
    options: Optional[SolverOptions] = None,
    *,
    cost: Optional[Callable] = None,
    init_columns: Optional[np.ndarray] = None,
) -> RelaxedResult:
    """Optimal value, plan and defect of the relaxed problem on discrete marginals.

    Infeasibility is a status, with value -inf.  Products above the solver
    cap go through column generation (two marginals and more).
    """
    from .lp import colgen

    opts = options or SolverOptions()
    cost = cost if cost is not None else instance.cost
    discretized = list(discretized)
    if instance is not None:
        if len(discretized) != instance.n_marginals:
            raise ValueError("number of discretized marginals differs from the instance")
        if any(m.dim != instance.dim for m in discretized):
            raise DimensionMismatch("discretized marginal dimension differs from the instance")
    t0 = time.perf_counter()
    P = product_size(discretized)
    if P > opts.cap_vars or init_columns is not None:
        model, sol = colgen.solve_colgen(discretized, cost, eps, opts, init_columns=init_columns)
    else:
        model = build_relaxed_mot_lp(discretized, cost, eps)
        sol = solve(model, opts)
    sizes = {
        "num_vars": int(model.num_vars),
        "num_rows": int(model.num_rows),
        "num_primal": int(model.num_primal),
        "product_size": int(P),
    }
    wall = (time.perf_counter() - t0) * 1e3
    if sol.status != "optimal":
        value = -math.inf if sol.status == "infeasible" else math.inf
        return RelaxedResult(value, None, None, sol.status, eps, [], sizes, {}, sol.backend, sol.iterations, wall)
    plan = extract_plan(model, sol)
    steps = martingale_defect_steps(plan)
    return RelaxedResult(
        float(sol.objective_value),
        plan,
        max(steps),
        "optimal",
        eps,
        steps,
        sizes,
        dict(sol.residuals),
        sol.backend,
        sol.iterations,
        wall,
    )


# ---------------------------------------------------------------- theoretical bounds


def _check_1d(*ms):
    if any(m.dim != 1 for m in ms):
        raise DimensionMismatch("this bound is stated for one dimensional measures")


def default_R_grid(nu: DiscreteMeasure) -> list:
    return sorted({0.0, *np.abs(nu.points[:, 0]).tolist()})


def _tail(nu: DiscreteMeasure, R: float) -> float:
    y = np.abs(nu.points[:, 0])
    over = np.maximum(y - R, 0.0)
    return float(nu.weights @ over**2)


def rate_bound_lambda(eps: float, nu: DiscreteMeasure, R_grid: Optional[Sequence[float]] = None) -> tuple:
    """min over R of (R+1) eps + int_{|y|>R} (|y|-R)^2 nu(dy); returns (value, argmin R)."""
    _check_1d(nu)
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    grid = default_R_grid(nu) if R_grid is None else list(R_grid)
    vals = [(R + 1) * eps + _tail(nu, R) for R in grid]
    i = int(np.argmin(vals))
    return float(vals[i]), float(grid[i])


def stability_bound(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    mu2: DiscreteMeasure,
    nu2: DiscreteMeasure,
    R_grid: Optional[Sequence[float]] = None,
    L: float = 1.0,
) -> float:
    """Shape of the stability estimate between (mu, nu) and (mu2, nu2).

    min over R of (R+1) W(+) + int (|y|-R)^2 (nu + nu2)(dy), plus
    (L/2) |m2(nu2) - m2(nu)|.  Multiply by the problem constant to get a bound.
    """
    _check_1d(mu, nu, mu2, nu2)
    w = w1_product([(mu, mu2), (nu, nu2)])
    grid = R_grid
    if grid is None:
        grid = sorted(set(default_R_grid(nu)) | set(default_R_grid(nu2)))
    lam = min((R + 1) * w + _tail(nu, R) + _tail(nu2, R) for R in grid)
    m2 = abs(moments(nu2, 2).second_moment - moments(nu, 2).second_moment)
    return float(lam + 0.5 * L * m2)


# ---------------------------------------------------------------- sweeps


@dataclass
class EntryRecord:
    n: int
    eps: float
    value: float
    defect: Optional[float]
    status: str
    wall_ms: float
    lp_sizes: dict
    defect_steps: list = field(default_factory=list)
    error: Optional[str] = None
    plan: Any = None

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "eps": self.eps,
            "value": _json_float(self.value),
            "defect": self.defect,
            "defect_steps": self.defect_steps,
            "status": self.status,
            "lp_sizes": self.lp_sizes,
            "error": self.error,
        }


def _json_float(v):
    if v is None or math.isfinite(v):
        return v
    return "-inf" if v < 0 else "inf"


@dataclass
class ConvergenceReport:
    entries: list
    reference: dict
    successive_differences: list
    fitted_constants: list
    sandwich: list

    def to_dict(self) -> dict:
        return {
            "entries": [e.to_dict() for e in self.entries],
            "reference": self.reference,
            "successive_differences": self.successive_differences,
            "fitted_constants": self.fitted_constants,
            "sandwich": self.sandwich,
        }

    def csv_rows(self) -> list:
        rows = [("n", "eps", "value", "defect", "status", "wall_ms")]
        for e in self.entries:
            rows.append(
                (
                    e.n,
                    repr(e.eps),
                    repr(e.value),
                    "" if e.defect is None else repr(e.defect),
                    e.status,
                    f"{e.wall_ms:.1f}",
                )
            )
        return rows


def _run_entry(args) -> EntryRecord:
    instance, entry, options = args
    try:
        r = solve_relaxed(instance, entry.measures, entry.eps, options)
        return EntryRecord(
            entry.n, entry.eps, r.value, r.defect, r.status, r.wall_ms, r.lp_sizes, r.defect_steps, plan=r.plan
        )
    except MotlpError as exc:
        return EntryRecord(entry.n, entry.eps, math.nan, None, "error", 0.0, {}, [], f"{type(exc).__name__}: {exc}")


def _picklable(obj) -> bool:
    try:
        pickle.dumps(obj)
        return True
    except Exception:
        return False


def sweep(
    instance: MOTInstance,
    schedule: RelaxationSchedule,
    options: Optional[SolverOptions] = None,
    jobs: int = 1,
    keep_plans: bool = False,
) -> ConvergenceReport:
    """Solve every schedule entry and compare against the finest one.

    The reference value is the entry with the largest n, a numerical proxy
    for the unrelaxed value.  For every other optimal entry the report holds
    value_ref <= value_n + Lip(c) eps_n (checked to 1e-6) and the fitted
    constant |value_n - value_ref| / eps_n.
    """
    entries = list(schedule.entries)
    tasks = [(instance, e, options) for e in entries]
    if jobs > 1 and len(tasks) > 1 and _picklable(tasks[0]):
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_entry, tasks))
    else:
        records = [_run_entry(t) for t in tasks]
    if not keep_plans:
        for r in records:
            r.plan = None

    ok = [r for r in records if r.status == "optimal"]
    reference = {"label": "finest optimal entry (numerical proxy for the unrelaxed value)"}
    diffs, fitted, sandwich = [], [], []
    if ok:
        ref = max(ok, key=lambda r: r.n)
        reference.update({"n": ref.n, "eps": ref.eps, "value": ref.value})
        ordered = sorted(ok, key=lambda r: r.n)
        for a, b in zip(ordered, ordered[1:]):
            diffs.append({"from_n": a.n, "to_n": b.n, "difference": b.value - a.value})
        for r in ordered:
            if r is ref:
                continue
            fitted.append({"n": r.n, "C": abs(r.value - ref.value) / r.eps if r.eps > 0 else None})
            rhs = r.value + instance.lipschitz_c * r.eps
            sandwich.append(
                {"n": r.n, "reference": ref.value, "upper": rhs, "holds": bool(ref.value <= rhs + 1e-6)}
            )
    return ConvergenceReport(records, reference, diffs, fitted, sandwich)
