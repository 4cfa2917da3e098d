import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import exp_spread, quadratic, random_measure
from oracles import brute_force_lp
from motlp.errors import NotOptimal, SizeCap
from motlp.lp import (
    SolverOptions,
    build_relaxed_mot_lp,
    build_transport_lp,
    duality_gap,
    extract_plan,
    product_indices,
    solve,
)
from motlp.lp.lptext import export_lp_text, parse_lp_text
from motlp.lp.simplex import simplex
from motlp.measures import dirac, mixture
from motlp.wasserstein import l1_cost_matrix


def _random_lp(rng, m=4, n=6):
    """A bounded feasible max LP: x = 1 is feasible and the box row bounds x."""
    A = rng.uniform(-1, 1, size=(m, n))
    x0 = np.ones(n)
    senses = rng.choice(["<", ">", "="], size=m)
    b = A @ x0
    b = np.where(senses == "<", b + rng.uniform(0, 1, m), np.where(senses == ">", b - rng.uniform(0, 1, m), b))
    A = np.vstack([A, np.ones(n)])
    b = np.append(b, 3.0 * n)
    senses = np.append(senses, "<")
    c = rng.normal(size=n)
    return c, A, senses, b


def test_simplex_hand_lp():
    # max 3x + 2y s.t. x + y <= 4, x + 3y <= 7, x <= 3
    r = simplex(np.array([3.0, 2.0]), sp.csr_matrix([[1, 1], [1, 3], [1, 0]]), np.array(["<"] * 3), np.array([4.0, 7, 3]))
    assert r.status == "optimal"
    assert r.objective == pytest.approx(11.0)
    assert np.allclose(r.x, [3, 1])
    assert np.allclose(r.y, [2, 0, 1])


def test_simplex_infeasible_and_unbounded():
    r = simplex(np.array([1.0]), sp.csr_matrix([[1.0], [1.0]]), np.array(["<", ">"]), np.array([1.0, 2.0]))
    assert r.status == "infeasible"
    r = simplex(np.array([1.0, 0.0]), sp.csr_matrix([[1.0, -1.0]]), np.array(["<"]), np.array([1.0]))
    assert r.status == "unbounded"


def test_simplex_negative_rhs_and_equalities():
    # max -x - y s.t. -x - y <= -2, x - y = 0  ->  x = y = 1
    r = simplex(np.array([-1.0, -1.0]), sp.csr_matrix([[-1, -1], [1, -1]]), np.array(["<", "="]), np.array([-2.0, 0.0]))
    assert r.status == "optimal" and r.objective == pytest.approx(-2.0)


@pytest.mark.parametrize("seed", range(12))
def test_simplex_and_highs_against_vertex_enumeration(seed):
    rng = np.random.default_rng(seed)
    c, A, senses, b = _random_lp(rng)
    ref, _ = brute_force_lp(c, A, senses, b)
    r = simplex(c, sp.csr_matrix(A), senses, b)
    assert r.status == "optimal"
    assert r.objective == pytest.approx(ref, abs=1e-9)
    # second, separate route through HiGHS on the same data
    from motlp.lp.model import LPModel

    model = LPModel(c, sp.csr_matrix(A), senses, b, np.zeros((0, 1), dtype=np.int64), [], [], [], kind="generic")
    h = solve(model, backend="highs")
    assert h.objective_value == pytest.approx(ref, abs=1e-9)


def _two_point_instance():
    mu = dirac(0.0)
    nu = mixture([dirac(-1.0), dirac(1.0)], [0.5, 0.5])
    return mu, nu


def test_relaxed_model_layout():
    rng = np.random.default_rng(1)
    mu, nu = random_measure(rng, 3), random_measure(rng, 4)
    model = build_relaxed_mot_lp([mu, nu], quadratic, 0.3)
    # plan columns then one slack per first atom
    assert model.num_primal == 12 and model.num_vars == 15
    blocks = model.row_blocks
    assert set(blocks) == {"m1", "m2", "u1", "l1", "budget"}
    sizes = {k: v[1] - v[0] for k, v in blocks.items()}
    assert sizes == {"m1": 3, "m2": 4, "u1": 3, "l1": 3, "budget": 1}
    assert model.num_rows == 14
    assert np.array_equal(model.primal_index, product_indices([3, 4]))
    assert len(model.var_names) == 15 and len(set(model.row_names)) == 14


def test_three_marginal_layout():
    rng = np.random.default_rng(2)
    ms = [random_measure(rng, k) for k in (2, 3, 2)]
    model = build_relaxed_mot_lp(ms, lambda x, y, z: (z - x)[:, 0] ** 2, 0.1)
    assert model.num_primal == 12
    # slacks: 2 prefixes for step 1, 6 for step 2
    assert model.num_vars == 12 + 2 + 6
    assert {k for k in model.row_blocks} == {"m1", "m2", "m3", "u1", "l1", "u2", "l2", "budget"}
    assert model.row_blocks["budget"][1] - model.row_blocks["budget"][0] == 2


def test_forced_coupling_both_backends():
    mu, nu = _two_point_instance()
    model = build_relaxed_mot_lp([mu, nu], exp_spread, 0.0)
    for backend in ("simplex", "highs"):
        sol = solve(model, backend=backend)
        assert sol.objective_value == pytest.approx(0.5 * (np.e + 1 / np.e), abs=1e-12)
        plan = extract_plan(model, sol)
        assert plan.marginal_residual([mu, nu]) < 1e-12


def test_lp_text_round_trip():
    rng = np.random.default_rng(4)
    mu, nu = random_measure(rng, 3), random_measure(rng, 3)
    model = build_relaxed_mot_lp([mu, nu], quadratic, 0.25)
    text = export_lp_text(model, comment="round trip")
    parsed = parse_lp_text(text)
    names = model.var_names
    col = {nm: j for j, nm in enumerate(names)}
    obj = np.zeros(model.num_vars)
    for nm, v in parsed["objective"].items():
        obj[col[nm]] = v
    assert np.array_equal(obj, model.objective)
    A = model.A.toarray()
    assert len(parsed["rows"]) == model.num_rows
    for r, (name, terms, sense, rhs) in enumerate(parsed["rows"]):
        assert name == model.row_names[r]
        row = np.zeros(model.num_vars)
        for nm, v in terms.items():
            row[col[nm]] = v
        assert np.array_equal(row, A[r])
        assert sense == model.senses[r] and rhs == model.rhs[r]
    assert text.startswith("\\ round trip\nMaximize")


def test_solve_cap_and_builder_cap():
    rng = np.random.default_rng(5)
    mu, nu = random_measure(rng, 5), random_measure(rng, 5)
    model = build_relaxed_mot_lp([mu, nu], quadratic, 0.1)
    with pytest.raises(SizeCap):
        solve(model, SolverOptions(cap_vars=10))
    with pytest.raises(SizeCap):
        build_relaxed_mot_lp([mu, nu], quadratic, 0.1, build_cap=10)


def test_gap_needs_optimal():
    mu, nu = dirac(0.0), dirac(1.0)
    model = build_relaxed_mot_lp([mu, nu], quadratic, 0.5)
    sol = solve(model)
    assert sol.status == "infeasible"
    with pytest.raises(NotOptimal):
        duality_gap(sol, model)
    with pytest.raises(NotOptimal):
        extract_plan(model, sol)


def test_transport_lp_matches_vertex_enumeration():
    rng = np.random.default_rng(8)
    for _ in range(5):
        mu, nu = random_measure(rng, 3), random_measure(rng, 3)
        C = l1_cost_matrix(mu, nu)
        model = build_transport_lp(mu, nu, C)
        ref, _ = brute_force_lp(model.objective, model.A.toarray(), model.senses, model.rhs)
        assert solve(model, backend="simplex").objective_value == pytest.approx(ref, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), eps=st.floats(0.0, 1.5))
def test_both_backends_agree_on_relaxed(seed, eps):
    rng = np.random.default_rng(seed)
    mu, nu = random_measure(rng, 4), random_measure(rng, 5)
    model = build_relaxed_mot_lp([mu, nu], quadratic, eps)
    a = solve(model, backend="simplex")
    b = solve(model, backend="highs")
    assert a.status == b.status
    if a.optimal:
        assert a.objective_value == pytest.approx(b.objective_value, abs=1e-8)
