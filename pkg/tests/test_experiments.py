import csv
import io
import math

import numpy as np
import pytest
from scipy import integrate

from motlp.errors import InvalidCase, SizeCap
from motlp.experiments import (
    EX1_C,
    EX3_M3,
    EX4_C,
    EX4_ENVELOPE,
    BuiltinCost,
    BuiltinDensity,
    FiberDiagnostic,
    _ex1_rho,
    _ex1_sigma,
    _ex2_rho,
    _ex4_shape,
    build_example,
    count_multi_point_fibers,
    emit_heatmap,
    ex1_moment,
    ex1_w1_to_truth,
    ex2_eps,
    ex2_m,
    ex3_samplers,
    heatmap_csv,
    heatmap_rows,
    solve_example,
)
from motlp.discretization import make_rng
from motlp.lp import SolverOptions
from motlp.lp.model import TransportPlan


def quad(f, a, b):
    return integrate.quad(f, a, b, epsabs=1e-13, epsrel=1e-13, limit=200)[0]


# ---------------------------------------------------------------- densities


def test_ex1_normaliser_and_densities():
    assert EX1_C == pytest.approx(quad(lambda x: x**1.5 * math.exp(-x), 0, 1), rel=1e-12)
    assert quad(lambda x: float(_ex1_rho(np.array([x]))[0]), 0, 1) == pytest.approx(1.0, abs=1e-10)
    total = quad(lambda y: float(_ex1_sigma(np.array([y]))[0]), 0, 0.5) + quad(
        lambda y: float(_ex1_sigma(np.array([y]))[0]), 0.5, 2
    )
    assert total == pytest.approx(1.0, abs=1e-10)


def test_ex1_moments_closed_form():
    for theta in (1.0, 2.0, 3.0):
        mx, my = ex1_moment(theta)
        assert mx == pytest.approx(quad(lambda x: x**theta * float(_ex1_rho(np.array([x]))[0]), 0, 1), rel=1e-10)
        ref = quad(lambda y: y**theta * float(_ex1_sigma(np.array([y]))[0]), 0, 0.5) + quad(
            lambda y: y**theta * float(_ex1_sigma(np.array([y]))[0]), 0.5, 2
        )
        assert my == pytest.approx(ref, rel=1e-10)
    # the two laws share their mean, as a martingale pair must
    assert ex1_moment(1.0)[0] == pytest.approx(ex1_moment(1.0)[1], rel=1e-14)


def test_ex1_interval_moments_match_quadrature():
    spec = BuiltinDensity("ex1_sigma").spec()
    a, b = np.array([0.1, 0.45, 1.3]), np.array([0.3, 0.7, 2.0])
    m0, m1 = spec.interval_moments(a, b)
    for i in range(3):
        pts = [0.5] if a[i] < 0.5 < b[i] else None
        f = lambda y: float(_ex1_sigma(np.array([y]))[0])
        assert m0[i] == pytest.approx(integrate.quad(f, a[i], b[i], points=pts)[0], abs=1e-12)
        assert m1[i] == pytest.approx(integrate.quad(lambda y: y * f(y), a[i], b[i], points=pts)[0], abs=1e-12)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_ex2_lognormal_mass_and_mean(k):
    f = lambda x: float(_ex2_rho(np.array([x]), k)[0])
    assert integrate.quad(f, 0, np.inf, limit=200)[0] == pytest.approx(1.0, abs=1e-9)
    assert integrate.quad(lambda x: x * f(x), 0, np.inf, limit=200)[0] == pytest.approx(1.0, abs=1e-9)


def test_ex2_schedule_formulas():
    M, L = math.e**2, 12.0
    for n in (5, 10, 20):
        m = max(math.floor((n * M / L) ** (1 / 3) + 1e-12), 1)
        assert ex2_m(n) == m
        assert ex2_eps(n) == pytest.approx(3 * (1 / n + M / m + 2 * m * m * L / n + 4 * M / m))


def test_ex2_cell_min_oracle_is_the_minimum():
    spec = BuiltinDensity("ex2_bs", {"k": 2}).spec()
    corners = np.arange(0, 3, 0.1).reshape(-1, 1)
    xq = spec.cell_min_oracle(corners, 0.1)
    for c, x in zip(corners[:, 0], xq[:, 0]):
        fine = spec(np.linspace(c, c + 0.1, 201))
        assert float(spec(np.array([x]))[0]) == pytest.approx(fine.min(), rel=1e-12, abs=1e-300)


def test_ex4_normaliser_against_cubature():
    ref = integrate.nquad(
        lambda a, b, c: float(_ex4_shape(np.array([[a, b, c]]))[0]), [[0, 1]] * 3, opts={"epsabs": 1e-11}
    )[0]
    assert EX4_C == pytest.approx(8 * ref, rel=1e-8)


def test_ex4_envelope_dominates():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, size=(200_000, 3))
    assert np.max(_ex4_shape(X)) / EX4_C <= EX4_ENVELOPE
    # tight along the x1 axis: at (1, 1, 1) the shape is 2/6
    assert EX4_ENVELOPE * EX4_C < 0.75


def test_ex3_frame_sampler_law():
    _, nu = ex3_samplers()
    rng = make_rng(11)
    draws = np.array([nu.draw(rng) for _ in range(20000)])
    norm_inf = np.abs(draws).max(axis=1)
    assert np.all((norm_inf >= 1) & (norm_inf <= 2))
    # the distance past the unit square has density 2(1 - s), mean 1/3
    assert (norm_inf - 1).mean() == pytest.approx(1 / 3, abs=0.01)
    assert np.abs(draws.mean(axis=0)).max() < 0.03
    assert (np.abs(draws).sum(axis=1) ** 3).max() <= EX3_M3


# ---------------------------------------------------------------- costs


@pytest.mark.parametrize(
    "cost,dim,nm,box",
    [
        (BuiltinCost("exp_spread"), 1, 2, [(0, 1), (0, 2)]),
        (BuiltinCost("lookback"), 1, 3, None),
        (BuiltinCost("asian", {"lam": 2.0}), 1, 3, None),
        (BuiltinCost("neg_euclidean"), 2, 2, None),
        (BuiltinCost("basket_forward_start"), 3, 2, None),
    ],
)
def test_cost_lipschitz_constants(cost, dim, nm, box):
    rng = np.random.default_rng(1)
    K = 20000
    if box:
        xs = [rng.uniform(lo, hi, size=(K, dim)) for lo, hi in box]
        ys = [rng.uniform(lo, hi, size=(K, dim)) for lo, hi in box]
    else:
        xs = [rng.uniform(-3, 3, size=(K, dim)) for _ in range(nm)]
        ys = [rng.uniform(-3, 3, size=(K, dim)) for _ in range(nm)]
    diff = np.abs(cost(*xs) - cost(*ys))
    dist = sum(np.abs(a - b).sum(axis=1) for a, b in zip(xs, ys))
    assert np.all(diff <= cost.lipschitz * dist + 1e-12)


def test_unknown_tags():
    with pytest.raises(InvalidCase):
        BuiltinCost("nope")
    with pytest.raises(InvalidCase):
        build_example(9)


# ---------------------------------------------------------------- builders


def test_example1_grid_entry():
    inst, e = build_example(1, None, 10)
    assert e.eps == pytest.approx(2.3)
    mu, nu = e.measures
    assert mu.size == 10 and nu.size == 20
    assert inst.lipschitz_c == pytest.approx(math.e)
    for r, which in zip(e.results, ("rho", "sigma")):
        assert ex1_w1_to_truth(r, which) <= r.w1_bound
    with pytest.raises(SizeCap):
        build_example(1, None, 60)
    build_example(1, {"cap": 80}, 60)


def test_example1_empirical_cap():
    _, e = build_example(1, {"scheme": "empirical", "n_samples": 30, "seed": 2}, 3)
    assert all(r.stochastic for r in e.results)
    with pytest.raises(SizeCap):
        build_example(1, {"scheme": "empirical"}, 4)


def test_example2_sizes():
    _, e = build_example(2, {"payoff": "asian"}, 10)
    assert [m.size for m in e.measures] == [10, 10, 10]
    _, e = build_example(2, None, 20)
    assert [m.size for m in e.measures] == [40, 40, 40]
    for r in e.results:
        assert r.bound_kind == "cellmin_tau_mn"


def test_example3_grid_entry():
    _, e = build_example(3, None, 5)
    assert e.eps == pytest.approx(0.8)
    mu, nu = e.measures
    assert mu.size == 100 and nu.size == 200
    # lower corners shift both means by -h/2 in each coordinate, so they still agree
    assert np.allclose(mu.mean(), -0.1, atol=1e-12) and np.allclose(nu.mean(), -0.1, atol=1e-12)


def test_example4_seeds_and_eps():
    _, a = build_example(4, {"seed": 3}, 6)
    _, b = build_example(4, {"seed": 3}, 6)
    assert a.measures[0].same_as(b.measures[0]) and a.measures[1].same_as(b.measures[1])
    assert a.results[0].provenance["seed"] == 3 and a.results[1].provenance["seed"] == 4
    assert a.eps == pytest.approx(2 * a.results[0].w1_bound)


# ---------------------------------------------------------------- frozen desk values


# value of example 1 (grid, sharp bound) at n = 10, eps = 2.3; checked on both backends below
EX1_N10 = 1.294263744012075
# example 2 asian (lam 2) at n = 10
EX2_ASIAN_N10 = 0.18967


def test_example1_desk_value_two_routes():
    _, _, a = solve_example(1, None, 10, SolverOptions(backend="simplex"))
    _, _, b = solve_example(1, None, 10, SolverOptions(backend="highs"))
    assert a.value == pytest.approx(b.value, abs=1e-10)
    assert a.value == pytest.approx(EX1_N10, abs=1e-9)
    assert a.defect <= 2.3 + 1e-9


def test_example2_desk_value_two_routes():
    _, _, a = solve_example(2, {"payoff": "asian"}, 10, SolverOptions(backend="simplex"))
    _, _, b = solve_example(2, {"payoff": "asian"}, 10, SolverOptions(backend="highs"))
    assert a.value == pytest.approx(b.value, abs=1e-10)
    assert a.value == pytest.approx(EX2_ASIAN_N10, abs=1e-5)


def test_example3_small_colgen_matches_full():
    opts = SolverOptions(cap_vars=5000)
    _, _, a = solve_example(3, None, 5, opts)
    _, _, b = solve_example(3, None, 5, SolverOptions(backend="highs"))
    assert a.backend == "colgen"
    assert a.value == pytest.approx(b.value, abs=1e-8)


# ---------------------------------------------------------------- heat maps and fibers


def _toy_plan():
    supports = (np.array([[0.0], [1.0]]), np.array([[-1.0], [1.0], [2.0]]))
    index = np.array([[0, 0], [0, 1], [1, 1], [1, 2]])
    return TransportPlan(supports, index, np.array([0.25, 0.25, 0.3, 0.2]))


def test_heatmap_rows_and_csv(tmp_path):
    plan = _toy_plan()
    rows = heatmap_rows(plan, [0, 1])
    assert rows == [(0.0, -1.0, 0.25), (0.0, 1.0, 0.25), (1.0, 1.0, 0.3), (1.0, 2.0, 0.2)]
    text = heatmap_csv(plan, [0, 1], {"example": "toy"})
    body = [l for l in text.splitlines() if not l.startswith("#")]
    parsed = list(csv.reader(io.StringIO("\n".join(body))))
    assert parsed[0] == ["S1", "S2", "mass"]
    assert sum(float(r[2]) for r in parsed[1:]) == pytest.approx(1.0)
    assert "# example: toy" in text and "# package: motlp" in text
    path = emit_heatmap(plan, [1, 0], tmp_path / "h.csv")
    assert open(path).read().splitlines()[-5] == "S2,S1,mass"
    with pytest.raises(ValueError):
        heatmap_rows(plan, [0])


def test_fiber_count_by_hand():
    plan = _toy_plan()
    d = count_multi_point_fibers(plan, FiberDiagnostic(threshold_atoms=1))
    assert d.flagged_mass == pytest.approx(1.0)
    assert d.fiber_sizes == (2, 2)
    d = count_multi_point_fibers(plan, FiberDiagnostic(threshold_atoms=1, weight_floor=0.21))
    assert d.flagged_mass == pytest.approx(0.5)
    assert d.flagged_points == ((0.0,),)
    assert count_multi_point_fibers(plan).flagged_mass == 0.0
    out = d.to_dict()
    assert out["fiber_size_histogram"] == {1: 1, 2: 1}
