import sys

import numpy as np
import pytest

import motlp.lp.colgen  # noqa: F401
from motlp.measures import DiscreteMeasure, normalize_merge

# the package re-exports a function called solve, so go through sys.modules
solve_mod = sys.modules["motlp.lp.solve"]
colgen_mod = sys.modules["motlp.lp.colgen"]

GAP_TOL = 1e-7
RESIDUAL_TOL = 1e-9

# every certificate computed during the session, as (test id, dict)
CERTIFICATES = []

# one PASS/FAIL line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def _bad(cert):
    return (
        cert["duality_gap"] > GAP_TOL
        or cert["primal_residual"] > RESIDUAL_TOL
        or cert["dual_residual"] > RESIDUAL_TOL
    )


@pytest.fixture(autouse=True)
def record_certificates(request, monkeypatch):
    """Wrap the certificate so every optimal solve in the suite is checked."""
    original = solve_mod.certificate
    seen = []

    def recording(model, sol):
        cert = original(model, sol)
        seen.append(cert)
        CERTIFICATES.append((request.node.nodeid, cert))
        return cert

    monkeypatch.setattr(solve_mod, "certificate", recording)
    monkeypatch.setattr(colgen_mod, "certificate", recording)
    yield
    bad = [c for c in seen if _bad(c)]
    assert not bad, f"optimal solve with a weak certificate: {bad[0]}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
    if CERTIFICATES:
        certs = [c for _, c in CERTIFICATES]
        weak = sum(_bad(c) for c in certs)
        gap = max(c["duality_gap"] for c in certs)
        terminalreporter.write_line(
            f"certificates over the whole run: {len(certs)} optimal solves, {weak} weak, max gap {gap:.1e}"
        )


def random_measure(rng, k, lo=-2.0, hi=2.0, dim=1, grid=None):
    pts = rng.uniform(lo, hi, size=(k, dim))
    if grid:
        pts = np.round(pts * grid) / grid
    w = rng.uniform(0.05, 1.0, size=k)
    return normalize_merge(points=pts, weights=w, dim=dim)


def spread(mu: DiscreteMeasure, rng, rounds=3) -> DiscreteMeasure:
    """Apply mean-preserving spreads; the result dominates mu in convex order."""
    pts = [float(p) for p in mu.points[:, 0]]
    w = list(mu.weights)
    for _ in range(rounds):
        i = int(rng.integers(len(pts)))
        a, b = rng.uniform(0.1, 1.0, size=2)
        x, m = pts.pop(i), w.pop(i)
        pts += [x - a, x + b]
        w += [m * b / (a + b), m * a / (a + b)]
    return normalize_merge(points=np.array(pts), weights=np.array(w), dim=1)


def convex_pair(rng, k=4, rounds=3):
    mu = random_measure(rng, k)
    return mu, spread(mu, rng, rounds)


def quadratic(x, y):
    return ((y - x) ** 2).sum(axis=1)


def exp_spread(x, y):
    return np.exp(x[:, 0] - y[:, 0])
