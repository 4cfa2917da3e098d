"""Discrete approximations of marginals with certified W1 error bounds.

Three families:

* lattice schemes on Z^d/n (exact cell masses or point estimates of a density,
  with truncation to the box B_m = [-m, m]^d),
* the hat-function scheme on the line, which keeps the mean and the potential
  function at grid points and so preserves convex order,
* empirical measures of seeded i.i.d. draws, whose error is bounded in
  expectation by the explicit Fournier-Guillin type rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import integrate

from .errors import (
    DimensionMismatch,
    InvalidCase,
    MissingOracle,
    NegativeResidual,
    SamplerFailure,
    ZeroMass,
)
from .measures import (
    DiscreteMeasure,
    Density,
    Sampler,
    Tabulated,
    _lex_order,
    normalize_merge,
)

RNG_ALGORITHM = "numpy.random.Philox(4x64-10) seeded through SeedSequence"
ACCEPT_REJECT_CAP = 1_000_000

BOUND_KINDS = (
    "exact_cells_dn",
    "bounded_support_eps_n",
    "uniform_eps_mn",
    "cellmin_tau_mn",
    "dolinsky_soner_1_over_n",
    "empirical_chi",
)
MODES = ("exact_cells", "point_estimate", "cell_min")


@dataclass(frozen=True)
class GridParams:
    n: int
    m_or_R: float
    mode: str = "point_estimate"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if not self.m_or_R > 0:
            raise ValueError("truncation radius must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass(frozen=True)
class DiscretizationResult:
    measure: DiscreteMeasure
    w1_bound: float
    bound_kind: str
    provenance: dict = field(default_factory=dict)
    stochastic: bool = False

    def __post_init__(self):
        if not self.w1_bound >= 0:
            raise ValueError("w1_bound must be nonnegative")
        if self.bound_kind not in BOUND_KINDS:
            raise ValueError(f"unknown bound kind {self.bound_kind!r}")


# ---------------------------------------------------------------- lattice helpers


def cell_index(x: np.ndarray, n: int) -> np.ndarray:
    """Integer q with q/n <= x < (q+1)/n, componentwise, against the float grid q/n."""
    x = np.asarray(x, dtype=float)
    q = np.floor(x * n)
    q = q - (q / n > x)
    q = q + ((q + 1) / n <= x)
    return q.astype(np.int64)


def truncation_bound(theta: float, m_theta: float, R: float) -> float:
    """W1 cost of sending the mass outside B_R to the origin, from the theta moment."""
    return m_theta / R ** (theta - 1)


def truncate(spec, R: float, theta: Optional[float] = None, m_theta: Optional[float] = None) -> Tabulated:
    """Move the mass outside the box B_R = {|x_i| <= R} to the origin.

    Only tabulated marginals are handled here; densities are truncated inside
    ``density_grid_estimate``.  The recorded bound is M_theta / R^(theta-1)
    when the moment data is known, otherwise the cost of the relocation itself.
    """
    if not R > 0:
        raise ValueError("R must be positive")
    if isinstance(spec, DiscreteMeasure):
        spec = Tabulated(spec)
    if isinstance(spec, Density):
        raise TypeError("densities are truncated by density_grid_estimate")
    if not isinstance(spec, Tabulated):
        raise TypeError("truncate needs a tabulated marginal")
    mu = spec.measure
    inside = np.all(np.abs(mu.points) <= R, axis=1)
    if mu.weights[inside].sum() <= 0:
        raise ZeroMass(f"no mass inside B_{R}")
    pts = np.where(inside[:, None], mu.points, 0.0)
    out = normalize_merge(points=pts, weights=mu.weights, dim=mu.dim, tol=0.0)
    moved = float(mu.weights[~inside] @ np.abs(mu.points[~inside]).sum(axis=1))
    bound = truncation_bound(theta, m_theta, R) if theta is not None and m_theta is not None else moved
    return Tabulated(out, w1_bound=spec.w1_bound + bound, name=f"{spec.name}|B_{R:g}")


def grid_discretize(mu: Union[DiscreteMeasure, Tabulated], n: int) -> DiscretizationResult:
    """Send every atom to the lower corner of its lattice cell."""
    if isinstance(mu, Tabulated):
        mu = mu.measure
    if n < 1:
        raise ValueError("n must be at least 1")
    q = cell_index(mu.points, n)
    out = normalize_merge(points=q / n, weights=mu.weights, dim=mu.dim, grid_n=n)
    return DiscretizationResult(
        out, mu.dim / n, "exact_cells_dn", {"scheme": "grid", "n": n, "d": mu.dim}
    )


def conjugate_exponent(theta: float) -> float:
    return theta / (theta - 1)


def choose_truncation_radius(theta: float, m_theta: float, d: int, n: int) -> float:
    """Radius balancing truncation and lattice errors (Young's inequality)."""
    if not theta > 1:
        raise InvalidCase("theta must exceed 1")
    gamma = conjugate_exponent(theta)
    return (theta * m_theta * n / (gamma * d)) ** (1.0 / (theta - 1))


def truncated_grid_bound(theta: float, d: int, n: int) -> float:
    """Combined truncation plus lattice bound gamma d / n at the balanced radius."""
    return conjugate_exponent(theta) * d / n


# ---------------------------------------------------------------- density schemes


def _lattice_cells(spec: Density, n: int, m: int) -> np.ndarray:
    """Lower-corner indices q of lattice cells inside [-m, m)^d meeting the support box."""
    d = spec.dim
    lo_q = np.full(d, -m * n, dtype=np.int64)
    hi_q = np.full(d, m * n - 1, dtype=np.int64)
    if spec.support_box is not None:
        blo, bhi = spec.support_box
        with np.errstate(invalid="ignore"):
            slo = np.where(np.isfinite(blo), np.floor(blo * n), -np.inf)
            shi = np.where(np.isfinite(bhi), np.ceil(bhi * n) - 1, np.inf)
        lo_q = np.maximum(lo_q, slo).astype(np.int64)
        hi_q = np.minimum(hi_q, shi).astype(np.int64)
    if np.any(hi_q < lo_q):
        return np.zeros((0, d), dtype=np.int64)
    axes = [np.arange(a, b + 1) for a, b in zip(lo_q, hi_q)]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


def _support_within(spec: Density, m: float) -> bool:
    if spec.support_box is None:
        return False
    lo, hi = spec.support_box
    return bool(np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo >= -m) and np.all(hi <= m))


def _support_radius(spec: Density) -> Optional[float]:
    if spec.support_box is None:
        return None
    lo, hi = spec.support_box
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        return None
    return float(max(np.max(np.abs(lo)), np.max(np.abs(hi))))


def _quad_cell_masses(spec: Density, corners: np.ndarray, h: float) -> np.ndarray:
    if spec.dim != 1:
        raise MissingOracle("exact cell masses in d > 1 need a cell_mass oracle")
    f = lambda t: float(spec.evaluator(np.array([[t]]))[0])
    return np.array([integrate.quad(f, c, c + h, epsabs=1e-14, epsrel=1e-12, limit=200)[0] for c in corners[:, 0]])


def _truncation_term(spec: Density, m: float) -> float:
    if _support_within(spec, m):
        return 0.0
    if spec.theta is None or spec.m_theta is None:
        raise ValueError("support leaves B_m; theta and m_theta are needed for the truncation bound")
    return truncation_bound(spec.theta, spec.m_theta, m)


def eps_bounded_support(d: int, n: int, R: float, kappa_R1: Callable[[float], float]) -> float:
    """d/n + 2^d d (R+1)^(d+1) kappa_{R+1}(d/n) for a density supported in B_R."""
    return d / n + 2**d * d * (R + 1) ** (d + 1) * kappa_R1(d / n)


def eps_uniform(d: int, n: int, m: int, theta: float, m_theta: float, kappa: Callable[[float], float]) -> float:
    """d/n + M/m^(theta-1) + 2^d d m^(d+1) kappa(d/n) for a uniformly continuous density."""
    return d / n + m_theta / m ** (theta - 1) + 2**d * d * m ** (d + 1) * kappa(d / n)


def tau_cell_min(
    d: int, n: int, m: int, theta: float, m_theta: float, kappa_j: Callable[[float, int], float]
) -> tuple:
    """The cell-minimum bound, minimised over j in 1..m; returns (value, argmin j)."""
    best, arg = math.inf, None
    for j in range(1, m + 1):
        v = 2**d * d * j ** (d + 1) * kappa_j(d / n, j) + 4 * m_theta / j ** (theta - 1)
        if v < best:
            best, arg = v, j
    return d / n + m_theta / m ** (theta - 1) + best, arg


def density_grid_estimate(
    spec: Density,
    n: int,
    m: int,
    mode: str = "point_estimate",
    *,
    sharp: bool = False,
) -> DiscretizationResult:
    """Lattice approximation of a density on Omega_n intersected with B_m.

    Each cell V(q/n) = q/n + [0, 1/n)^d with q != 0 receives rho(x_q)/n^d,
    where x_q is the lower corner (``point_estimate``) or a minimiser of the
    density on the cell (``cell_min``); ``exact_cells`` uses the cell
    probability itself.  The origin takes whatever mass is left.

    With ``sharp=True`` the estimation error is bounded cell by cell,
    sum_{q != 0} |q/n| n^-d kappa(d/n), instead of by the closed-form
    volume factor; both are valid and the sharp one is never larger.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if n < 1 or m < 1:
        raise ValueError("n and m must be at least 1")
    d = spec.dim
    h = 1.0 / n
    q = _lattice_cells(spec, n, m)
    nonzero = np.any(q != 0, axis=1)
    corners = q / n
    prov = {"scheme": "density_grid", "density": spec.name, "n": n, "m": m, "mode": mode, "d": d}

    if mode == "cell_min":
        if spec.cell_min_oracle is None:
            raise MissingOracle("cell_min mode needs a cell_min_oracle")
        xq = np.asarray(spec.cell_min_oracle(corners[nonzero], h), dtype=float).reshape(-1, d)
        w = spec(xq) * h**d
    elif mode == "point_estimate":
        w = spec(corners[nonzero]) * h**d
    else:
        if spec.cell_mass is not None:
            w = np.asarray(spec.cell_mass(corners[nonzero], h), dtype=float).reshape(-1)
        else:
            w = _quad_cell_masses(spec, corners[nonzero], h)
    if np.any(w < 0):
        raise ValueError("density evaluator returned negative values")
    total = math.fsum(w.tolist())
    residual = 1.0 - total
    if residual < -1e-12:
        raise NegativeResidual(f"cell weights add up to {total!r} > 1; refine n or use cell_min mode")
    # rounding noise is not mass; keep the origin out of supports that avoid it
    residual = residual if residual > 1e-12 else 0.0
    pts = np.vstack([corners[nonzero], np.zeros((1, d))])
    wts = np.concatenate([w, [residual]])
    keep = wts > 0
    pts, wts = pts[keep], wts[keep]
    order = _lex_order(pts)
    measure = DiscreteMeasure(pts[order], wts[order] / math.fsum(wts.tolist()))

    # error bound
    cell_norms = np.abs(corners[nonzero]).sum(axis=1)
    if mode == "exact_cells":
        bound = d / n + _truncation_term(spec, m)
        kind = "exact_cells_dn"
    elif mode == "point_estimate":
        R = _support_radius(spec)
        if R is not None and R <= m:
            kind = "bounded_support_eps_n"
            if sharp:
                bound = d / n + float(cell_norms.sum()) * h**d * spec.kappa(d / n, R + 1)
            else:
                bound = eps_bounded_support(d, n, R, lambda t: spec.kappa(t, R + 1))
            prov["support_radius"] = R
        else:
            if spec.theta is None or spec.m_theta is None:
                raise ValueError("unbounded support needs theta and m_theta")
            kind = "uniform_eps_mn"
            if sharp:
                bound = (
                    d / n
                    + _truncation_term(spec, m)
                    + float(cell_norms.sum()) * h**d * spec.kappa(d / n)
                )
            else:
                bound = eps_uniform(d, n, m, spec.theta, spec.m_theta, spec.kappa)
    else:
        if spec.theta is None or spec.m_theta is None:
            raise ValueError("cell_min bound needs theta and m_theta")
        kind = "cellmin_tau_mn"
        bound, j = tau_cell_min(d, n, m, spec.theta, spec.m_theta, lambda t, j: spec.kappa(t, j))
        prov["j"] = j
        if sharp:
            # per-cell version of the same estimate, valid for every j as well
            alt = d / n + _truncation_term(spec, m) + float(cell_norms.sum()) * h**d * spec.kappa(d / n)
            bound = min(bound, alt)
    prov["sharp"] = bool(sharp)
    prov["origin_residual"] = residual
    return DiscretizationResult(measure, float(bound), kind, prov)


# ---------------------------------------------------------------- hat-function scheme


def _interval_moments_quad(spec: Density, a: np.ndarray, b: np.ndarray):
    f0 = lambda t: float(spec.evaluator(np.array([[t]]))[0])
    f1 = lambda t: t * f0(t)
    m0 = np.array([integrate.quad(f0, lo, hi, epsabs=1e-15, epsrel=1e-13, limit=200)[0] for lo, hi in zip(a, b)])
    m1 = np.array([integrate.quad(f1, lo, hi, epsabs=1e-15, epsrel=1e-13, limit=200)[0] for lo, hi in zip(a, b)])
    return m0, m1


def dolinsky_soner_1d(mu, n: int) -> DiscretizationResult:
    """Hat-function discretisation on the grid Z/n.

    An atom at x with k/n <= x < (k+1)/n splits into weight (k+1) - n x at k/n
    and n x - k at (k+1)/n.  For a density the same weights are integrated
    over each cell from its mass and first moment.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if isinstance(mu, Tabulated):
        mu = mu.measure
    prov = {"scheme": "dolinsky_soner", "n": n}
    if isinstance(mu, DiscreteMeasure):
        if mu.dim != 1:
            raise DimensionMismatch("the hat-function scheme is one dimensional")
        x = mu.points[:, 0]
        k = cell_index(x, n)
        t = n * x - k
        t = np.clip(t, 0.0, 1.0)
        pts = np.concatenate([k, k + 1]) / n
        w = np.concatenate([mu.weights * (1 - t), mu.weights * t])
    elif isinstance(mu, Density):
        if mu.dim != 1:
            raise DimensionMismatch("the hat-function scheme is one dimensional")
        R = _support_radius(mu)
        if R is None:
            raise ValueError("density needs a bounded support box")
        lo, hi = mu.support_box
        k = np.arange(int(np.floor(lo[0] * n)), int(np.ceil(hi[0] * n)))
        a, b = k / n, (k + 1) / n
        if mu.interval_moments is not None:
            m0, m1 = (np.asarray(v, dtype=float) for v in mu.interval_moments(a, b))
        else:
            m0, m1 = _interval_moments_quad(mu, a, b)
        pts = np.concatenate([k, k + 1]) / n
        w = np.concatenate([(k + 1) * m0 - n * m1, n * m1 - k * m0])
        w = np.maximum(w, 0.0)
        prov["density"] = mu.name
    else:
        raise TypeError("expected a discrete measure or a density")
    out = normalize_merge(points=pts, weights=w, dim=1, grid_n=n)
    return DiscretizationResult(out, 1.0 / n, "dolinsky_soner_1_over_n", prov)


# ---------------------------------------------------------------- empirical measures


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator used for every random draw in the package."""
    if not 0 <= int(seed) < 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def accept_reject(
    rng: np.random.Generator,
    density: Callable[[np.ndarray], np.ndarray],
    lo: np.ndarray,
    hi: np.ndarray,
    bound: float,
    cap: int = ACCEPT_REJECT_CAP,
) -> np.ndarray:
    """One draw from ``density`` on the box [lo, hi] under the envelope ``bound``."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    for _ in range(cap):
        x = lo + (hi - lo) * rng.random(lo.shape[0])
        if rng.random() * bound <= float(density(x[None, :])[0]):
            return x
    raise SamplerFailure(f"accept-reject gave up after {cap} proposals")


def empirical_discretize(
    spec: Sampler, n: int, seed: int, consts: Optional["RateConstants"] = None
) -> DiscretizationResult:
    """Empirical measure of n seeded draws; the bound holds in expectation."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = make_rng(seed)
    draws = np.empty((n, spec.dim))
    try:
        for i in range(n):
            draws[i] = np.asarray(spec.draw(rng), dtype=float).reshape(spec.dim)
    except SamplerFailure:
        raise
    except Exception as exc:  # a broken user sampler is a sampling failure
        raise SamplerFailure(f"sampler raised {exc!r}") from exc
    uniq, counts = np.unique(draws, axis=0, return_counts=True)
    order = _lex_order(uniq)
    measure = DiscreteMeasure(uniq[order], counts[order] / n)
    if consts is None:
        consts = RateConstants(theta=spec.theta, d=spec.dim, m_theta=spec.m_theta, n_marginals=1)
    bound = chi_rate(n, consts)
    prov = {
        "scheme": "empirical",
        "sampler": spec.name,
        "n": n,
        "seed": int(seed),
        "rng": RNG_ALGORITHM,
        "theta": consts.theta,
        "m_theta": consts.m_theta,
        "bound_is_expectation": True,
    }
    return DiscretizationResult(measure, bound, "empirical_chi", prov, stochastic=True)


# ---------------------------------------------------------------- empirical rates

_LN2 = math.log(2.0)


def rate_case(theta: float, d: int) -> str:
    """Which row of the rate table applies: 'below', 'critical' or 'above'."""
    if not theta > 1:
        raise InvalidCase("theta must exceed 1")
    if d < 1:
        raise InvalidCase("d must be positive")
    crit = 2.0 if d <= 2 else d / (d - 1)
    if math.isclose(theta, crit, rel_tol=1e-12, abs_tol=0.0):
        return "critical"
    return "below" if theta < crit else "above"


def rate_factor(n: float, theta: float, d: int) -> float:
    """The n-dependent factor of the expected empirical W1 error."""
    case = rate_case(theta, d)
    ln = math.log(n)
    if case == "below":
        return n ** (1.0 / theta - 1.0)
    if d == 1:
        return (1 + ln) * n**-0.5 if case == "critical" else n**-0.5
    if d == 2:
        return (1 + ln**2) * n**-0.5 if case == "critical" else (1 + ln) * n**-0.5
    return (1 + ln) * n ** (-1.0 / d) if case == "critical" else n ** (-1.0 / d)


def inner_coefficient(theta: float, d: int) -> float:
    case = rate_case(theta, d)
    if d == 1:
        if case == "below":
            return 2 * math.sqrt(2) / ((2 ** (1 - theta / 2) - 1) * (1 - 2 ** (1 - theta)))
        if case == "critical":
            return 4.0
        return 1.0 / (1 - 2 ** (1 - theta / 2))
    if d == 2:
        if case == "below":
            return 7.0 / (2 ** (1 - theta / 2) - 1) ** 2
        if case == "critical":
            return 6.0
        return 1.0 / (1 - 2 ** (1 - theta / 2))
    e = 1 - theta * (1 - 1.0 / d)
    if case == "below":
        return 3.0 / ((2**e - 1) * (1 - 2 ** (1 - theta)))
    if case == "critical":
        return 6.0
    return 1.0 / (1 - 2**e)


def c_theta_d(theta: float, d: int, m_theta: float) -> float:
    """Explicit constant C(theta, d) of the empirical rate bound."""
    outer = 24 * (m_theta + 1) * d ** ((1 - theta) / 2) * 2**theta
    return outer * 9 / (2 * _LN2) * inner_coefficient(theta, d)


@dataclass(frozen=True)
class RateConstants:
    theta: float
    d: int
    m_theta: float
    n_marginals: int = 1
    c_theta_d: Optional[float] = None

    def __post_init__(self):
        if not self.theta > 1:
            raise InvalidCase("theta must exceed 1")
        if self.d < 1 or self.n_marginals < 1:
            raise InvalidCase("d and n_marginals must be positive")
        if self.c_theta_d is None:
            object.__setattr__(self, "c_theta_d", c_theta_d(self.theta, self.d, self.m_theta))
        if not self.c_theta_d > 0:
            raise InvalidCase("C(theta, d) must be positive")

    @property
    def case(self) -> str:
        return rate_case(self.theta, self.d)


def chi_rate(n: float, consts: RateConstants) -> float:
    """N C(theta, d) times the rate factor at n."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return consts.n_marginals * consts.c_theta_d * rate_factor(float(n), consts.theta, consts.d)


@dataclass(frozen=True)
class ScheduleReport:
    partial_sum: float
    terms: list
    tail_ratios: list
    tail_raabe: list
    verdict: str  # summable-likely | divergent-likely | inconclusive
    note: str = (
        "diagnostic only: summability is asymptotic and cannot be certified from finitely many terms"
    )


def validate_schedule(
    eps: Sequence[float], n_hat: Sequence[int], consts: RateConstants, horizon: Optional[int] = None
) -> ScheduleReport:
    """Numerical look at sum_m chi(n_m) / eps_m.

    The tail window is the second half of the first ``horizon`` terms.  Terms
    that shrink geometrically (ratio bounded below 1) or whose Raabe statistic
    m (a_m / a_{m+1} - 1) stays above 1 are reported as summable-likely; terms
    that do not decrease are divergent-likely.
    """
    eps = [float(e) for e in eps]
    n_hat = list(n_hat)
    horizon = min(horizon or len(eps), len(eps), len(n_hat))
    if horizon < 4:
        raise ValueError("need at least four terms")
    if any(e <= 0 for e in eps[:horizon]) or any(v < 1 for v in n_hat[:horizon]):
        raise ValueError("eps must be positive and n_hat at least 1")
    a = np.array([chi_rate(n_hat[i], consts) / eps[i] for i in range(horizon)])
    ratios = a[1:] / a[:-1]
    m_idx = np.arange(1, horizon)
    raabe = m_idx * (a[:-1] / a[1:] - 1)
    start = (horizon - 1) // 2
    tr, tq = ratios[start:], raabe[start:]
    if np.all(tr >= 1.0):
        verdict = "divergent-likely"
    elif np.max(tr) < 0.99 or np.min(tq) > 1.05:
        verdict = "summable-likely"
    elif np.max(tq) < 1.0:
        verdict = "divergent-likely"
    else:
        verdict = "inconclusive"
    return ScheduleReport(float(a.sum()), a.tolist(), tr.tolist(), tq.tolist(), verdict)
