"""Wasserstein-1 distances with the l1 ground metric."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatch
from .lp.model import TransportPlan, build_transport_lp
from .lp.solve import SolverOptions, extract_plan, solve
from .measures import DiscreteMeasure


@dataclass(frozen=True)
class WassersteinResult:
    value: float
    coupling: Optional[TransportPlan] = None


def w1_1d(mu: DiscreteMeasure, nu: DiscreteMeasure) -> WassersteinResult:
    """Exact W1 on the line through the monotone (quantile) coupling.

    The cumulative weights of both measures are merged into one list of
    breakpoints; between consecutive breakpoints both quantile functions are
    constant, so the integral is a finite sum.
    """
    if mu.dim != 1 or nu.dim != 1:
        raise DimensionMismatch("w1_1d needs one dimensional measures")
    ia = np.argsort(mu.points[:, 0], kind="stable")
    ib = np.argsort(nu.points[:, 0], kind="stable")
    ca = np.cumsum(mu.weights[ia])
    cb = np.cumsum(nu.weights[ib])
    ca[-1] = cb[-1] = 1.0
    t = np.union1d(ca, cb)
    t = t[t > 0]
    lengths = np.diff(np.concatenate([[0.0], t]))
    # quantile level just below each breakpoint picks the atom that is active there
    ka = np.minimum(np.searchsorted(ca, t, side="left"), len(ca) - 1)
    kb = np.minimum(np.searchsorted(cb, t, side="left"), len(cb) - 1)
    keep = lengths > 0
    lengths, ka, kb = lengths[keep], ka[keep], kb[keep]
    xa = mu.points[ia[ka], 0]
    xb = nu.points[ib[kb], 0]
    value = float(np.sum(lengths * np.abs(xa - xb)))

    pairs = np.stack([ia[ka], ib[kb]], axis=1)
    uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
    mass = np.zeros(len(uniq))
    np.add.at(mass, np.asarray(inv).reshape(-1), lengths)
    plan = TransportPlan((mu.points, nu.points), uniq, mass / mass.sum())
    return WassersteinResult(value, plan)


def l1_cost_matrix(mu: DiscreteMeasure, nu: DiscreteMeasure) -> np.ndarray:
    return np.abs(mu.points[:, None, :] - nu.points[None, :, :]).sum(axis=2)


def w1_lp(
    mu: DiscreteMeasure, nu: DiscreteMeasure, options: Optional[SolverOptions] = None
) -> WassersteinResult:
    """W1 in any dimension from the transport LP."""
    if mu.dim != nu.dim:
        raise DimensionMismatch("measures have different dimensions")
    model = build_transport_lp(mu, nu, l1_cost_matrix(mu, nu))
    sol = solve(model, options)
    plan = extract_plan(model, sol)
    return WassersteinResult(max(-sol.objective_value, 0.0), plan)


def w1(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    if mu.dim != nu.dim:
        raise DimensionMismatch("measures have different dimensions")
    if mu.dim == 1:
        return w1_1d(mu, nu).value
    return w1_lp(mu, nu).value


def w1_product(pairs: Sequence[tuple]) -> float:
    """Product metric: the sum of the per-pair W1 distances."""
    return float(sum(w1(a, b) for a, b in pairs))
