import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from conftest import random_measure
from motlp.discretization import (
    RNG_ALGORITHM,
    RateConstants,
    accept_reject,
    c_theta_d,
    cell_index,
    chi_rate,
    choose_truncation_radius,
    density_grid_estimate,
    dolinsky_soner_1d,
    empirical_discretize,
    grid_discretize,
    make_rng,
    rate_case,
    tau_cell_min,
    truncate,
    truncated_grid_bound,
    validate_schedule,
)
from motlp.errors import InvalidCase, MissingOracle, NegativeResidual, SamplerFailure, ZeroMass
from motlp.experiments import BuiltinDensity, _ex3_frame, _ex3_uniform
from motlp.measures import Density, Sampler, Tabulated, convex_order_1d, dirac, normalize_merge, potential
from motlp.wasserstein import w1, w1_1d


def test_cell_index_against_float_grid():
    assert cell_index(np.array([0.3]), 10).tolist() == [3]
    assert cell_index(np.array([-0.05, 0.0, 0.999]), 10).tolist() == [-1, 0, 9]
    assert cell_index(np.array([0.7]), 10).tolist() == [7]


def test_grid_discretize_hand_example():
    mu = normalize_merge(points=[[0.26], [0.74], [-0.1]], weights=[1, 1, 2])
    r = grid_discretize(mu, 2)
    assert r.measure.points[:, 0].tolist() == [-0.5, 0.0, 0.5]
    assert np.allclose(r.measure.weights, [0.5, 0.25, 0.25])
    assert r.w1_bound == 0.5 and r.bound_kind == "exact_cells_dn"


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 40))
def test_grid_discretize_within_d_over_n(seed, n):
    rng = np.random.default_rng(seed)
    mu = random_measure(rng, 10)
    r = grid_discretize(mu, n)
    assert w1_1d(mu, r.measure).value <= r.w1_bound + 1e-12
    # every atom lies on the lattice
    assert np.allclose(r.measure.points * n, np.rint(r.measure.points * n))


def test_grid_discretize_2d_bound():
    rng = np.random.default_rng(2)
    mu = random_measure(rng, 8, dim=2)
    r = grid_discretize(mu, 3)
    assert w1(mu, r.measure) <= 2 / 3 + 1e-12


def test_truncate_moves_tail_to_origin():
    mu = normalize_merge(points=[[-5.0], [0.5], [3.0]], weights=[1, 2, 1])
    t = truncate(mu, 2.0)
    assert t.measure.points[:, 0].tolist() == [0.0, 0.5]
    assert np.allclose(t.measure.weights, [0.5, 0.5])
    assert t.w1_bound == pytest.approx(2.0)
    assert w1_1d(mu, t.measure).value <= t.w1_bound + 1e-12
    with pytest.raises(ZeroMass):
        truncate(dirac(9.0), 1.0)


def test_truncation_radius_balances_terms():
    for theta, M, d, n in ((3.0, 5.0, 1, 10), (2.0, 1.3, 2, 40), (4.5, 27.0, 3, 7)):
        R = choose_truncation_radius(theta, M, d, n)
        assert d / n + M / R ** (theta - 1) == pytest.approx(truncated_grid_bound(theta, d, n), rel=1e-12)


# ---------------------------------------------------------------- densities


def _uniform01(n_cells=None):
    return Density(lambda x: np.ones(len(x)), 1, (0.0, 1.0), 0.0, name="u01")


def test_point_estimate_uniform_is_exact():
    r = density_grid_estimate(_uniform01(), 10, 1)
    assert r.measure.size == 10
    assert np.allclose(r.measure.weights, 0.1)
    assert r.bound_kind == "bounded_support_eps_n"
    # true W1 between U[0,1] and the lower corners is 1/(2n)
    assert r.w1_bound >= 0.05


def test_negative_residual_raises():
    spec = Density(lambda x: np.full(len(x), 2.0), 1, (0.0, 1.0), 0.0)
    with pytest.raises(NegativeResidual):
        density_grid_estimate(spec, 10, 1)


def test_cell_min_needs_oracle():
    with pytest.raises(MissingOracle):
        density_grid_estimate(_uniform01(), 10, 1, "cell_min")


def test_ex3_cell_masses_against_quadrature():
    for tag, f, R in (("ex3_uniform_square", _ex3_uniform, 1.0), ("ex3_frame", _ex3_frame, 2.0)):
        spec = BuiltinDensity(tag, {}).spec()
        n = 4
        corners = np.array([[a, b] for a in np.arange(-R, R, 1 / n) for b in np.arange(-R, R, 1 / n)])
        exact = spec.cell_mass(corners, 1 / n)
        pick = np.random.default_rng(0).choice(len(corners), 12, replace=False)
        for i in pick:
            a, b = corners[i]
            q = integrate.dblquad(
                lambda y, x: float(f(np.array([[x, y]]))[0]), a, a + 1 / n, b, b + 1 / n, epsabs=1e-12
            )[0]
            assert exact[i] == pytest.approx(q, abs=1e-9)
        assert exact.sum() == pytest.approx(1.0, abs=1e-12)


def test_exact_cells_bound_and_total():
    spec = BuiltinDensity("ex3_frame", {}).spec()
    r = density_grid_estimate(spec, 5, 2, "exact_cells")
    assert r.measure.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert r.w1_bound == pytest.approx(2 / 5)
    # the frame carries no mass at the origin, and neither does its tabulation
    assert not np.any(np.all(r.measure.points == 0, axis=1))


def test_tau_cell_min_picks_best_j():
    kappa = lambda t, j: 12 * t * j
    v, j = tau_cell_min(1, 100, 6, 2.0, math.e**2, kappa)
    manual = [2 * 1 * jj**2 * kappa(0.01, jj) + 4 * math.e**2 / jj for jj in range(1, 7)]
    assert j == int(np.argmin(manual)) + 1
    assert v == pytest.approx(0.01 + math.e**2 / 6 + min(manual))


def test_sharp_bound_never_larger():
    spec = BuiltinDensity("ex1_rho", {}).spec()
    for n in (5, 10, 20):
        loose = density_grid_estimate(spec, n, 1)
        sharp = density_grid_estimate(spec, n, 1, sharp=True)
        assert sharp.w1_bound <= loose.w1_bound + 1e-15
        assert np.array_equal(sharp.measure.points, loose.measure.points)


# ---------------------------------------------------------------- hat functions


def test_dolinsky_soner_hand_example():
    r = dolinsky_soner_1d(dirac(0.25), 2)
    assert r.measure.points[:, 0].tolist() == [0.0, 0.5]
    assert np.allclose(r.measure.weights, [0.5, 0.5])
    assert r.w1_bound == 0.5


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.sampled_from([1, 2, 3, 5, 10, 17]))
def test_dolinsky_soner_properties(seed, n):
    rng = np.random.default_rng(seed)
    mu = random_measure(rng, 12)
    r = dolinsky_soner_1d(mu, n)
    out = r.measure
    assert abs(out.mean()[0] - mu.mean()[0]) <= 1e-12
    grid = np.arange(math.floor(mu.points.min() * n) - 1, math.ceil(mu.points.max() * n) + 2) / n
    assert np.max(np.abs(potential(out, grid) - potential(mu, grid))) <= 1e-12
    assert convex_order_1d(mu, out)
    assert w1_1d(mu, out).value <= 1 / n + 1e-12


def test_dolinsky_soner_density_matches_fine_tabulation():
    spec = BuiltinDensity("ex1_rho", {}).spec()
    r = dolinsky_soner_1d(spec, 10)
    assert r.measure.weights.sum() == pytest.approx(1.0, abs=1e-12)
    # mean of rho in closed form: gamma(3.5, 1) / gamma(2.5, 1)
    from scipy import special

    mean = special.gammainc(3.5, 1) * special.gamma(3.5) / (special.gammainc(2.5, 1) * special.gamma(2.5))
    assert r.measure.mean()[0] == pytest.approx(mean, abs=1e-12)


# ---------------------------------------------------------------- sampling


def test_rng_is_philox_and_reproducible():
    a = make_rng(42).random(5)
    b = make_rng(42).random(5)
    assert np.array_equal(a, b)
    assert isinstance(make_rng(1).bit_generator, np.random.Philox)
    with pytest.raises(ValueError):
        make_rng(-1)


def test_accept_reject_uniform_triangle():
    rng = make_rng(7)
    tri = lambda x: 2 * x[:, 0]
    draws = np.array([accept_reject(rng, tri, [0.0], [1.0], 2.0)[0] for _ in range(4000)])
    assert draws.mean() == pytest.approx(2 / 3, abs=0.02)
    with pytest.raises(SamplerFailure):
        accept_reject(rng, lambda x: np.zeros(len(x)), [0.0], [1.0], 1.0, cap=50)


def test_empirical_is_seeded():
    spec = Sampler(lambda rng: rng.normal(), 1, 3.0, 2.0, name="normal")
    a = empirical_discretize(spec, 50, 3)
    b = empirical_discretize(spec, 50, 3)
    c = empirical_discretize(spec, 50, 4)
    assert a.measure.same_as(b.measure)
    assert not a.measure.same_as(c.measure)
    assert a.stochastic and a.provenance["rng"] == RNG_ALGORITHM
    assert a.w1_bound == pytest.approx(chi_rate(50, RateConstants(3.0, 1, 2.0)))


def test_broken_sampler():
    def bad(rng):
        raise RuntimeError("boom")

    with pytest.raises(SamplerFailure):
        empirical_discretize(Sampler(bad), 3, 0)


# ---------------------------------------------------------------- rates


# (theta, d) -> expected n-factor, written out row by row from the rate table
RATE_TABLE = [
    (1.5, 1, lambda n: n ** (1 / 1.5 - 1)),
    (2.0, 1, lambda n: (1 + math.log(n)) * n**-0.5),
    (3.0, 1, lambda n: n**-0.5),
    (1.5, 2, lambda n: n ** (1 / 1.5 - 1)),
    (2.0, 2, lambda n: (1 + math.log(n) ** 2) * n**-0.5),
    (3.0, 2, lambda n: (1 + math.log(n)) * n**-0.5),
    (1.2, 3, lambda n: n ** (1 / 1.2 - 1)),
    (1.5, 3, lambda n: (1 + math.log(n)) * n ** (-1 / 3)),
    (2.0, 3, lambda n: n ** (-1 / 3)),
    (1.1, 5, lambda n: n ** (1 / 1.1 - 1)),
    (1.25, 5, lambda n: (1 + math.log(n)) * n ** (-1 / 5)),
    (4.0, 5, lambda n: n ** (-1 / 5)),
]


@pytest.mark.parametrize("theta,d,factor", RATE_TABLE)
def test_chi_rate_table(theta, d, factor):
    consts = RateConstants(theta, d, 1.0, n_marginals=2, c_theta_d=1.0)
    for n in (1, 7, 100, 12345):
        assert chi_rate(n, consts) == pytest.approx(2 * factor(n), rel=1e-12)


def test_rate_case_boundaries():
    assert rate_case(2.0, 1) == "critical"
    assert rate_case(1.5, 3) == "critical"
    assert rate_case(2.0, 2) == "critical"
    assert rate_case(1.9, 2) == "below"
    assert rate_case(2.1, 2) == "above"
    with pytest.raises(InvalidCase):
        rate_case(1.0, 1)


def test_c_theta_d_two_dim_critical():
    # 24 (M+1) d^((1-theta)/2) 2^theta * 9/(2 ln 2) * 6 at theta=2, d=2
    M = 1.7
    expected = 24 * (M + 1) * 2 ** (-0.5) * 4 * 9 / (2 * math.log(2)) * 6
    assert c_theta_d(2.0, 2, M) == pytest.approx(expected, rel=1e-12)


def test_validate_schedule_verdicts():
    consts = RateConstants(3.0, 1, 2.0, n_marginals=2)
    m = np.arange(1, 61)
    fast = validate_schedule(23 / m, np.floor(m**6.0).astype(np.int64), consts)
    slow = validate_schedule(23 / m, m, consts)
    assert fast.verdict == "summable-likely"
    assert slow.verdict == "divergent-likely"
    with pytest.raises(ValueError):
        validate_schedule([1, 1], [1, 1], consts)
