"""Built-in examples: densities, samplers, costs, heat maps and the fiber count.

Four desk-scale instances:

1. one dimensional, rho a truncated Gamma shape on [0, 1] and nu the mixture
   1/3 law(2X) + 2/3 law(X/2), cost e^(x-y);
2. three lognormal marginals with unit mean, lookback or Asian payoff;
3. uniform square against a tent-shaped frame in the plane, cost minus the
   Euclidean distance;
4. three dimensional, nu the Gaussian blur of a rational density on the cube,
   basket of forward start payoffs, sampled only.

Every density, sampler and cost is a small dataclass so instances pickle and
can be sent to worker processes.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field, replace
from typing import Any, Optional, Sequence

import numpy as np
from scipy import special

from . import __version__
from .discretization import (
    RNG_ALGORITHM,
    DiscretizationResult,
    RateConstants,
    accept_reject,
    chi_rate,
    density_grid_estimate,
    empirical_discretize,
)
from .errors import InvalidCase, IOFailure, SizeCap
from .lp.model import TransportPlan
from .measures import Density, DiscreteMeasure, Sampler, moments
from .mot import MOTInstance, ScheduleEntry

# largest n (atoms per axis, or samples for example 4) each example accepts by default
DESK_CAPS = {1: 50, 2: 20, 3: 20, 4: 15}

# ---------------------------------------------------------------- example 1

EX1_C = float(special.gammainc(2.5, 1.0) * special.gamma(2.5))
EX1_L = 7.0


def _lower_gamma(s: float, x: np.ndarray) -> np.ndarray:
    return special.gammainc(s, x) * special.gamma(s)


def _ex1_rho(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    inside = (x >= 0) & (x <= 1)
    xc = np.where(inside, x, 0.0)
    return np.where(inside, xc**1.5 * np.exp(-xc) / EX1_C, 0.0)


def _ex1_sigma(y: np.ndarray) -> np.ndarray:
    # the second piece lives on [0, 1/2); closing it changes a null set but would
    # make the lower corner at 1/2 take the value above the downward jump
    y = np.asarray(y, dtype=float)
    return _ex1_rho(y / 2) / 6 + np.where(y < 0.5, 4 * _ex1_rho(2 * y) / 3, 0.0)


def _ex1_rho_moments(a: np.ndarray, b: np.ndarray):
    """Mass and first moment of rho on [a, b)."""
    a = np.clip(a, 0.0, 1.0)
    b = np.clip(b, 0.0, 1.0)
    m0 = (_lower_gamma(2.5, b) - _lower_gamma(2.5, a)) / EX1_C
    m1 = (_lower_gamma(3.5, b) - _lower_gamma(3.5, a)) / EX1_C
    return m0, m1


def _ex1_sigma_moments(a: np.ndarray, b: np.ndarray):
    # sigma is the law of 2X with weight 1/3 plus the law of X/2 with weight 2/3
    s0, s1 = _ex1_rho_moments(a / 2, b / 2)
    t0, t1 = _ex1_rho_moments(2 * a, 2 * b)
    return s0 / 3 + 2 * t0 / 3, 2 * s1 / 3 + t1 / 3


def ex1_moment(theta: float) -> tuple:
    """E X^theta under rho and under sigma, in closed form."""
    mx = float(_lower_gamma(2.5 + theta, 1.0) / EX1_C)
    return mx, mx * (2.0**theta / 3 + 2 * 0.5**theta / 3)


# ---------------------------------------------------------------- example 2

EX2_THETA = 2.0
EX2_M = math.e ** (EX2_THETA * (EX2_THETA - 1))
EX2_L = 12.0


def _ex2_rho(x: np.ndarray, k: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    pos = x > 0
    xs = np.where(pos, x, 1.0)
    var2 = 2.0 ** (k - 2)  # twice the log variance
    val = np.exp(-((np.log(xs) + 2.0 ** (k - 4)) ** 2) / var2) / (xs * math.sqrt(var2 * math.pi))
    return np.where(pos, val, 0.0)


def ex2_m(n: int, theta: float = EX2_THETA, m_theta: float = EX2_M, L: float = EX2_L) -> int:
    """Truncation level m_n = floor((n (theta-1) M / L)^(1/(theta+1)))."""
    v = (n * (theta - 1) * m_theta / L) ** (1.0 / (theta + 1))
    m = math.floor(v + 1e-12)
    return max(m, 1)


def ex2_eps(n: int, theta: float = EX2_THETA, m_theta: float = EX2_M, L: float = EX2_L) -> float:
    m = ex2_m(n, theta, m_theta, L)
    return 3 * (1 / n + m_theta / m ** (theta - 1) + 2 * m**2 * L / n + 4 * m_theta / m ** (theta - 1))


# ---------------------------------------------------------------- example 3


def _ex3_uniform(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    return np.where(np.all((x >= -1) & (x <= 1), axis=1), 0.25, 0.0)


def _ex3_frame(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float).reshape(-1, 2)
    a, b = y[:, 0], y[:, 1]
    band_b = (b >= -1) & (b <= 1)
    band_a = (a >= -1) & (a <= 1)
    out = np.where((a >= 1) & (a <= 2) & band_b, (2 - a) / 4, 0.0)
    out += np.where((a >= -2) & (a <= -1) & band_b, (2 + a) / 4, 0.0)
    out += np.where((b >= 1) & (b <= 2) & band_a, (2 - b) / 4, 0.0)
    out += np.where((b >= -2) & (b <= -1) & band_a, (2 + b) / 4, 0.0)
    return out


def _overlap(lo, hi, a, b):
    return np.maximum(np.minimum(hi, b) - np.maximum(lo, a), 0.0)


def _ramp_integral(lo, hi, a, b, sign):
    """Integral of (2 - sign t)/4 over [lo, hi] intersected with [a, b]."""
    s = np.maximum(lo, a)
    e = np.minimum(hi, b)
    e = np.maximum(e, s)
    F = lambda t: (2 * t - sign * t * t / 2) / 4
    return F(e) - F(s)


def _ex3_uniform_cells(corners: np.ndarray, h: float) -> np.ndarray:
    lo, hi = corners, corners + h
    return 0.25 * _overlap(lo[:, 0], hi[:, 0], -1, 1) * _overlap(lo[:, 1], hi[:, 1], -1, 1)


def _ex3_frame_cells(corners: np.ndarray, h: float) -> np.ndarray:
    lo, hi = corners, corners + h
    x0, x1, y0, y1 = lo[:, 0], hi[:, 0], lo[:, 1], hi[:, 1]
    out = _ramp_integral(x0, x1, 1, 2, 1) * _overlap(y0, y1, -1, 1)
    out += _ramp_integral(x0, x1, -2, -1, -1) * _overlap(y0, y1, -1, 1)
    out += _ramp_integral(y0, y1, 1, 2, 1) * _overlap(x0, x1, -1, 1)
    out += _ramp_integral(y0, y1, -2, -1, -1) * _overlap(x0, x1, -1, 1)
    return out


# the l1 norm is at most 3 on the frame and 2 on the square
EX3_M3 = 27.0

# ---------------------------------------------------------------- example 4

EX4_LAMBDA = (0.5, 1.0 / 3.0, 1.0 / 6.0)
EX4_K = 1.0


def _ex4_shape(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    inside = np.all(np.abs(x) <= 1, axis=1)
    g = (np.abs(x[:, 0]) + np.abs(x[:, 1] * x[:, 2])) / (1 + x[:, 0] ** 2 + 2 * x[:, 1] ** 2 + 3 * x[:, 2] ** 2)
    return np.where(inside, g, 0.0)


def _ex4_normaliser(order: int = 48) -> float:
    # the integrand is even in every coordinate: 8 times the integral over [0, 1]^3
    t, w = np.polynomial.legendre.leggauss(order)
    t = (t + 1) / 2
    w = w / 2
    X = np.stack(np.meshgrid(t, t, t, indexing="ij"), -1).reshape(-1, 3)
    W = (w[:, None, None] * w[None, :, None] * w[None, None, :]).ravel()
    return float(8 * (W @ _ex4_shape(X)))


EX4_C = _ex4_normaliser()
EX4_L = 7.0 / EX4_C
EX4_M2 = 3.0 / EX4_C * (4.5 + 8.0 / math.sqrt(2 * math.pi))
# |x1| / (1 + x1^2) <= 1/2 and t / (1 + 2 sqrt(6) t) <= 1 / (1 + 2 sqrt(6)) for t = |x2 x3| <= 1
EX4_ENVELOPE = (0.5 + 1.0 / (1.0 + 2.0 * math.sqrt(6.0))) / EX4_C


# ---------------------------------------------------------------- builtin densities


@dataclass(frozen=True)
class BuiltinDensity:
    """Picklable evaluator for one of the example densities.

    tag: ex1_rho, ex1_sigma, ex2_bs (params k), ex3_uniform_square, ex3_frame, ex4_rho.
    """

    tag: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in DENSITY_TAGS:
            raise InvalidCase(f"unknown density {self.tag!r}")

    @property
    def dim(self) -> int:
        return {"ex3_uniform_square": 2, "ex3_frame": 2, "ex4_rho": 3}.get(self.tag, 1)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        if self.tag == "ex1_rho":
            return _ex1_rho(x[:, 0])
        if self.tag == "ex1_sigma":
            return _ex1_sigma(x[:, 0])
        if self.tag == "ex2_bs":
            return _ex2_rho(x[:, 0], int(self.params["k"]))
        if self.tag == "ex3_uniform_square":
            return _ex3_uniform(x)
        if self.tag == "ex3_frame":
            return _ex3_frame(x)
        return _ex4_shape(x) / EX4_C

    def spec(self) -> Density:
        """The density as a marginal spec, with the example's constants."""
        t = self.tag
        if t == "ex1_rho":
            return Density(self, 1, (0.0, 1.0), EX1_L, interval_moments=_ex1_rho_moments, name=t)
        if t == "ex1_sigma":
            return Density(self, 1, (0.0, 2.0), EX1_L, interval_moments=_ex1_sigma_moments, name=t)
        if t == "ex2_bs":
            k = int(self.params["k"])
            return Density(
                self,
                1,
                (0.0, math.inf),
                EX2_L,
                theta=EX2_THETA,
                m_theta=EX2_M,
                cell_min_oracle=_EndpointMin(self),
                name=f"ex2_bs{k}",
            )
        if t == "ex3_uniform_square":
            return Density(self, 2, 1.0, None, theta=3.0, m_theta=EX3_M3, cell_mass=_ex3_uniform_cells, name=t)
        if t == "ex3_frame":
            return Density(self, 2, 2.0, None, theta=3.0, m_theta=EX3_M3, cell_mass=_ex3_frame_cells, name=t)
        return Density(self, 3, 1.0, EX4_L, theta=2.0, m_theta=EX4_M2, name=t)


DENSITY_TAGS = ("ex1_rho", "ex1_sigma", "ex2_bs", "ex3_uniform_square", "ex3_frame", "ex4_rho")


@dataclass(frozen=True)
class _EndpointMin:
    """Cell minimiser of a unimodal one dimensional density: the lower of the two endpoints."""

    density: Any

    def __call__(self, corners: np.ndarray, h: float) -> np.ndarray:
        a = np.asarray(corners, dtype=float).reshape(-1, 1)
        b = a + h
        fa = self.density(a)
        fb = self.density(b)
        return np.where((fa <= fb)[:, None], a, b)


# ---------------------------------------------------------------- builtin samplers


def grid_max(f, lo, hi, points_per_axis: int = 1000) -> float:
    """Largest value of ``f`` on a regular grid of the box, endpoints included."""
    axes = [np.linspace(a, b, points_per_axis) for a, b in zip(lo, hi)]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(lo))
    return float(np.max(f(X)))


@dataclass(frozen=True)
class BuiltinSampler:
    """Picklable draw function: ex1_mu, ex1_nu, ex3_mu, ex3_nu, ex4_mu, ex4_nu."""

    tag: str
    bound: float = 0.0

    def __call__(self, rng: np.random.Generator) -> np.ndarray:
        t = self.tag
        if t in ("ex1_mu", "ex1_nu"):
            x = accept_reject(rng, lambda z: _ex1_rho(z[:, 0]), np.zeros(1), np.ones(1), self.bound)
            if t == "ex1_mu":
                return x
            return 2 * x if rng.random() < 1 / 3 else x / 2
        if t == "ex3_mu":
            return rng.uniform(-1, 1, size=2)
        if t == "ex3_nu":
            arm = int(rng.integers(4))
            s = 1 - math.sqrt(rng.random())  # density 2(1 - s) on [0, 1]
            u = rng.uniform(-1, 1)
            out = [(1 + s, u), (-1 - s, u), (u, 1 + s), (u, -1 - s)][arm]
            return np.array(out)
        if t in ("ex4_mu", "ex4_nu"):
            x = accept_reject(rng, _ex4_shape, -np.ones(3), np.ones(3), self.bound * EX4_C)
            return x if t == "ex4_mu" else x + rng.standard_normal(3)
        raise InvalidCase(f"unknown sampler {t!r}")


def ex1_samplers(theta: float = 3.0) -> tuple:
    bound = grid_max(lambda z: _ex1_rho(z[:, 0]), [0.0], [1.0])
    mx, my = ex1_moment(theta)
    return (
        Sampler(BuiltinSampler("ex1_mu", bound), 1, theta, mx, "ex1_mu"),
        Sampler(BuiltinSampler("ex1_nu", bound), 1, theta, my, "ex1_nu"),
    )


def ex3_samplers() -> tuple:
    return (
        Sampler(BuiltinSampler("ex3_mu"), 2, 3.0, EX3_M3, "ex3_mu"),
        Sampler(BuiltinSampler("ex3_nu"), 2, 3.0, EX3_M3, "ex3_nu"),
    )


def ex4_samplers() -> tuple:
    return (
        Sampler(BuiltinSampler("ex4_mu", EX4_ENVELOPE), 3, 2.0, EX4_M2, "ex4_mu"),
        Sampler(BuiltinSampler("ex4_nu", EX4_ENVELOPE), 3, 2.0, EX4_M2, "ex4_nu"),
    )


# ---------------------------------------------------------------- builtin costs


@dataclass(frozen=True)
class BuiltinCost:
    """Picklable payoff with its Lipschitz constant for the l1 product metric.

    tag: exp_spread, lookback, asian (params lam), neg_euclidean,
    basket_forward_start (params lambdas, K), quadratic_spread.
    ``lipschitz`` is None when the payoff is only locally Lipschitz; ``box``
    then names where the stated constant holds.
    """

    tag: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in COST_TAGS:
            raise InvalidCase(f"unknown cost {self.tag!r}")

    def __call__(self, *xs: np.ndarray) -> np.ndarray:
        t = self.tag
        if t == "exp_spread":
            x, y = xs
            return np.exp(x[:, 0] - y[:, 0])
        if t == "quadratic_spread":
            x, y = xs
            return ((y - x) ** 2).sum(axis=1)
        if t == "lookback":
            x, y, z = (a[:, 0] for a in xs)
            return np.maximum(np.maximum(x, y), z) - z
        if t == "asian":
            lam = float(self.params.get("lam", 2.0))
            x, y, z = (a[:, 0] for a in xs)
            return np.maximum((x + y + z) / 3 - lam * z, 0.0)
        if t == "neg_euclidean":
            x, y = xs
            return -np.sqrt(((x - y) ** 2).sum(axis=1))
        lam = np.asarray(self.params.get("lambdas", EX4_LAMBDA), dtype=float)
        K = float(self.params.get("K", EX4_K))
        x, y = xs
        return np.maximum(np.abs(x - y) @ lam - K, 0.0)

    @property
    def lipschitz(self) -> Optional[float]:
        t = self.tag
        if t == "exp_spread":
            # on [0, 1] x [0, 2] the gradient of e^(x-y) is at most e per coordinate
            return math.e
        if t == "lookback":
            return 1.0
        if t == "asian":
            lam = float(self.params.get("lam", 2.0))
            return max(1 / 3, abs(1 / 3 - lam))
        if t == "neg_euclidean":
            return 1.0
        if t == "basket_forward_start":
            return float(np.max(self.params.get("lambdas", EX4_LAMBDA)))
        return None

    @property
    def box(self) -> str:
        return {"exp_spread": "[0,1] x [0,2]", "quadratic_spread": "unbounded; local only"}.get(self.tag, "R^(dN)")


COST_TAGS = ("exp_spread", "lookback", "asian", "neg_euclidean", "basket_forward_start", "quadratic_spread")


# ---------------------------------------------------------------- examples


def _cap(example_id: int, n: int, params: dict):
    cap = int(params.get("cap", DESK_CAPS[example_id]))
    if n > cap:
        raise SizeCap(f"example {example_id}: n={n} exceeds the desk-scale cap {cap}")


def _entry(n: int, eps: float, results: Sequence[DiscretizationResult]) -> ScheduleEntry:
    return ScheduleEntry(n, float(eps), tuple(results))


def build_example(example_id: int, params: Optional[dict] = None, n: int = 10) -> tuple:
    """Instance and schedule entry for one of the built-in examples.

    params (all optional):
      1: scheme 'grid' (default) or 'empirical'; for 'empirical' n is m,
         n_samples overrides floor(m^r), r (4.1), seed.
      2: payoff 'lookback' (default) or 'asian', lam (2).
      3: scheme 'grid' (default) or 'empirical' (n samples, seed, eps).
      4: seed; n is the number of draws per marginal.
      any: cap, the largest accepted n.
    """
    params = dict(params or {})
    if example_id not in DESK_CAPS:
        raise InvalidCase(f"example id must be one of {sorted(DESK_CAPS)}")
    if n < 1:
        raise ValueError("n must be at least 1")
    if example_id == 1:
        return _example1(n, params)
    if example_id == 2:
        return _example2(n, params)
    if example_id == 3:
        return _example3(n, params)
    return _example4(n, params)


def _example1(n: int, params: dict) -> tuple:
    cost = BuiltinCost("exp_spread")
    scheme = params.get("scheme", "grid")
    if scheme == "grid":
        _cap(1, n, params)
        specs = (BuiltinDensity("ex1_rho").spec(), BuiltinDensity("ex1_sigma").spec())
        results = [density_grid_estimate(s, n, 2, "point_estimate", sharp=True) for s in specs]
        eps = (3 * EX1_L + 2) / n
    elif scheme == "empirical":
        r = float(params.get("r", 4.1))
        n_samples = int(params.get("n_samples", math.floor(n ** r)))
        cap = int(params.get("cap_samples", 200))
        if n_samples > cap:
            raise SizeCap(f"example 1: {n_samples} samples per marginal exceeds the cap {cap}")
        specs = ex1_samplers()
        seed = int(params.get("seed", 0))
        results = [
            empirical_discretize(s, n_samples, seed + k, RateConstants(s.theta, 1, s.m_theta))
            for k, s in enumerate(specs)
        ]
        eps = (3 * EX1_L + 2) / n
    else:
        raise InvalidCase(f"unknown scheme {scheme!r}")
    inst = MOTInstance(specs, cost, cost.lipschitz, name=f"example1-{scheme}")
    return inst, _entry(n, eps, results)


def _example2(n: int, params: dict) -> tuple:
    _cap(2, n, params)
    payoff = params.get("payoff", "lookback")
    if payoff == "lookback":
        cost = BuiltinCost("lookback")
    elif payoff == "asian":
        cost = BuiltinCost("asian", {"lam": float(params.get("lam", 2.0))})
    else:
        raise InvalidCase(f"unknown payoff {payoff!r}")
    m = ex2_m(n)
    specs = tuple(BuiltinDensity("ex2_bs", {"k": k}).spec() for k in (1, 2, 3))
    results = [density_grid_estimate(s, n, m, "cell_min") for s in specs]
    inst = MOTInstance(specs, cost, cost.lipschitz, name=f"example2-{payoff}")
    return inst, _entry(n, ex2_eps(n), results)


def _example3(n: int, params: dict) -> tuple:
    cost = BuiltinCost("neg_euclidean")
    scheme = params.get("scheme", "grid")
    if scheme == "grid":
        _cap(3, n, params)
        specs = (BuiltinDensity("ex3_uniform_square").spec(), BuiltinDensity("ex3_frame").spec())
        results = [density_grid_estimate(s, n, 2, "exact_cells") for s in specs]
        eps = 4.0 / n
    elif scheme == "empirical":
        cap = int(params.get("cap_samples", 200))
        if n > cap:
            raise SizeCap(f"example 3: {n} samples per marginal exceeds the cap {cap}")
        specs = ex3_samplers()
        seed = int(params.get("seed", 0))
        results = [
            empirical_discretize(s, n, seed + k, RateConstants(3.0, 2, EX3_M3)) for k, s in enumerate(specs)
        ]
        eps = float(params.get("eps", chi_rate(n, RateConstants(3.0, 2, EX3_M3, n_marginals=2))))
    else:
        raise InvalidCase(f"unknown scheme {scheme!r}")
    inst = MOTInstance(specs, cost, cost.lipschitz, name=f"example3-{scheme}")
    return inst, _entry(n, eps, results)


def _example4(n: int, params: dict) -> tuple:
    _cap(4, n, params)
    cost = BuiltinCost("basket_forward_start", {"lambdas": EX4_LAMBDA, "K": EX4_K})
    specs = ex4_samplers()
    seed = int(params.get("seed", 0))
    consts = RateConstants(2.0, 3, EX4_M2)
    results = [empirical_discretize(s, n, seed + k, consts) for k, s in enumerate(specs)]
    eps = chi_rate(n, replace(consts, n_marginals=2))
    inst = MOTInstance(specs, cost, cost.lipschitz, name="example4")
    return inst, _entry(n, eps, results)


# ---------------------------------------------------------------- solving the examples


def ladder(n: int, smallest: int = 5) -> list:
    """Grid sizes n, n/2, n/4, ... down to ``smallest``, coarsest first."""
    out = [n]
    while out[-1] % 2 == 0 and out[-1] // 2 >= smallest:
        out.append(out[-1] // 2)
    return out[::-1]


def solve_example(example_id: int, params: Optional[dict] = None, n: int = 10, options=None, eps=None):
    """Build and solve an example; example 3 on large grids goes through a coarse-to-fine ladder."""
    from .lp.colgen import lift_columns
    from .lp.model import product_size
    from .lp.solve import SolverOptions
    from .mot import solve_relaxed

    opts = options or SolverOptions()
    inst, entry = build_example(example_id, params, n)
    target = entry.eps if eps is None else float(eps)
    grid = (params or {}).get("scheme", "grid") == "grid"
    if example_id == 3 and grid and product_size(entry.measures) > opts.cap_vars:
        prev = None
        for k in ladder(n):
            _, e = build_example(3, params, k)
            if prev is None:
                # the coarsest level is tiny but very degenerate; HiGHS handles it quickly
                res = solve_relaxed(inst, e.measures, target, replace(opts, backend="highs"))
            else:
                init = lift_columns(prev[0], prev[1].plan.index, prev[2], e.measures)
                res = solve_relaxed(inst, e.measures, target, opts, init_columns=init)
            if res.status != "optimal":
                return inst, entry, res
            prev = (e.measures, res, k)
        return inst, entry, res
    return inst, entry, solve_relaxed(inst, entry.measures, target, opts)


# ---------------------------------------------------------------- heat maps


def _selector(sel) -> tuple:
    if isinstance(sel, (int, np.integer)):
        return int(sel), 0
    k, c = sel
    return int(k), int(c)


def heatmap_rows(plan: TransportPlan, axes: Sequence) -> list:
    """(axis values..., mass) aggregated over the coordinates not selected."""
    sels = [_selector(s) for s in axes]
    if not 2 <= len(sels) <= 3:
        raise ValueError("axes must select two or three coordinates")
    for k, c in sels:
        if not (0 <= k < plan.n_marginals and 0 <= c < plan.dim):
            raise ValueError(f"selector {(k, c)} out of range")
    cols = np.stack([plan.points(k)[:, c] for k, c in sels], axis=1)
    keys, inv = np.unique(cols, axis=0, return_inverse=True)
    mass = np.zeros(len(keys))
    np.add.at(mass, np.asarray(inv).reshape(-1), plan.mass)
    return [(*map(float, key), float(w)) for key, w in zip(keys, mass)]


def _axis_name(sel) -> str:
    k, c = sel
    return f"S{k + 1}" if c == 0 else f"S{k + 1}_{c + 1}"


def provenance(extra: Optional[dict] = None) -> dict:
    out = {"package": "motlp", "version": __version__, "rng": RNG_ALGORITHM}
    if extra:
        out.update(extra)
    return out


def heatmap_csv(plan: TransportPlan, axes: Sequence, header: Optional[dict] = None) -> str:
    sels = [_selector(s) for s in axes]
    rows = heatmap_rows(plan, sels)
    buf = io.StringIO()
    for k, v in sorted(provenance(header).items()):
        buf.write(f"# {k}: {v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([_axis_name(s) for s in sels] + ["mass"])
    for r in rows:
        w.writerow([repr(v) for v in r])
    return buf.getvalue()


def emit_heatmap(plan: TransportPlan, axes: Sequence, path, header: Optional[dict] = None) -> str:
    """Write the projected plan as CSV with a '#' provenance header; returns the path."""
    text = heatmap_csv(plan, axes, header)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise IOFailure(f"cannot write heatmap to {path}: {exc}") from exc
    return os.fspath(path)


# ---------------------------------------------------------------- fibers


@dataclass(frozen=True)
class FiberDiagnostic:
    threshold_atoms: int = 3
    weight_floor: float = 1e-6
    flagged_mass: float = 0.0
    fiber_sizes: tuple = ()
    flagged_points: tuple = ()

    def to_dict(self) -> dict:
        sizes = np.asarray(self.fiber_sizes, dtype=int)
        return {
            "threshold_atoms": self.threshold_atoms,
            "weight_floor": self.weight_floor,
            "flagged_mass": self.flagged_mass,
            "max_fiber_size": int(sizes.max()) if sizes.size else 0,
            "fiber_size_histogram": {int(k): int(v) for k, v in zip(*np.unique(sizes, return_counts=True))},
            "flagged_points": [list(map(float, p)) for p in self.flagged_points],
        }


def count_multi_point_fibers(plan: TransportPlan, diag: Optional[FiberDiagnostic] = None) -> FiberDiagnostic:
    """Mass of first-marginal atoms sent to more than ``threshold_atoms`` atoms."""
    diag = diag or FiberDiagnostic()
    if plan.n_marginals != 2:
        raise ValueError("the fiber count needs exactly two marginals")
    n_first = len(plan.supports[0])
    first_mass = np.zeros(n_first)
    np.add.at(first_mass, plan.index[:, 0], plan.mass)
    heavy = plan.mass > diag.weight_floor
    sizes = np.bincount(plan.index[heavy, 0], minlength=n_first)
    flagged = sizes > diag.threshold_atoms
    mass = float(min(max(math.fsum(first_mass[flagged].tolist()), 0.0), 1.0))
    pts = tuple(tuple(p) for p in np.asarray(plan.supports[0])[flagged].tolist())
    return replace(diag, flagged_mass=mass, fiber_sizes=tuple(sizes.tolist()), flagged_points=pts)


# ---------------------------------------------------------------- cross-checks


def ex1_w1_to_truth(result: DiscretizationResult, which: str = "rho") -> float:
    """Exact W1 between a tabulated discretisation and the example 1 law, via CDFs."""
    from scipy import integrate

    moments_fn = _ex1_rho_moments if which == "rho" else _ex1_sigma_moments
    hi = 1.0 if which == "rho" else 2.0
    m = result.measure
    x = m.points[:, 0]
    cw = np.cumsum(m.weights)
    F = lambda t: float(moments_fn(np.array([0.0]), np.array([t]))[0][0])
    G = lambda t: float(cw[np.searchsorted(x, t, side="right") - 1]) if t >= x[0] else 0.0
    knots = np.unique(np.concatenate([[min(0.0, x[0])], x, [hi]]))
    total = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        total += integrate.quad(lambda t: abs(F(t) - G(t)), a, b, epsabs=1e-13, limit=100)[0]
    return total


def ex1_moment_check(n: int) -> dict:
    """Computed discrete moments next to the closed forms, for reports."""
    _, entry = build_example(1, None, n)
    mx, my = ex1_moment(1.0)
    return {
        "mean_mu_discrete": float(moments(entry.measures[0]).mean[0]),
        "mean_nu_discrete": float(moments(entry.measures[1]).mean[0]),
        "mean_exact": mx,
        "mean_nu_exact": my,
    }
