"""Finitely supported probability measures and marginal specifications.

Points live in R^d with the l1 norm |x| = sum_i |x_i|.  A ``DiscreteMeasure``
stores its atoms as an ``(k, d)`` array together with a weight vector; atoms are
kept in lexicographic order so two equal measures have equal arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, EmptyMeasure, InvalidMeasure

SupportPoint = tuple  # tuple of d floats; arrays of shape (d,) are accepted too

WEIGHT_TOL = 1e-12
ATOM_TOL = 1e-12
MEAN_TOL = 1e-9
ORDER_TOL = 1e-9


def _as_points(points, dim: Optional[int] = None) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        # a flat list is read as k scalar points unless a dimension says otherwise
        if dim is not None and dim > 1:
            pts = pts.reshape(-1, dim)
        else:
            pts = pts.reshape(-1, 1)
    if dim is not None and pts.shape[1] != dim:
        raise DimensionMismatch(f"expected points of dimension {dim}, got {pts.shape[1]}")
    return pts


def _lex_order(pts: np.ndarray) -> np.ndarray:
    return np.lexsort(pts.T[::-1])


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Probability measure with finitely many atoms.

    ``points`` has shape ``(k, d)`` and ``weights`` shape ``(k,)``.  The
    constructor validates but does not merge or renormalise; use
    ``normalize_merge`` for raw data.
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = _as_points(self.points)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if pts.shape[0] != w.shape[0]:
            raise InvalidMeasure("points and weights have different lengths")
        if w.size == 0:
            raise EmptyMeasure("measure has no atoms")
        if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(w)):
            raise InvalidMeasure("non-finite coordinate or weight")
        if np.any(w < 0):
            raise InvalidMeasure("negative weight")
        total = math.fsum(w.tolist())
        if abs(total - 1.0) > WEIGHT_TOL:
            raise InvalidMeasure(f"weights sum to {total!r}, not 1")
        if len(np.unique(pts, axis=0)) != len(pts):
            raise InvalidMeasure("duplicate atoms; use normalize_merge")
        pts = pts.copy()
        w = w.copy()
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def __len__(self):
        return self.size

    @property
    def atoms(self):
        """List of ``(point tuple, weight)`` pairs."""
        return [(tuple(p), float(w)) for p, w in zip(self.points, self.weights)]

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def same_as(self, other: "DiscreteMeasure", tol: float = ATOM_TOL) -> bool:
        """Equality as measures, atoms compared up to ``tol`` per coordinate."""
        if self.dim != other.dim or self.size != other.size:
            return False
        return bool(
            np.all(np.abs(self.points - other.points) <= tol)
            and np.all(np.abs(self.weights - other.weights) <= tol)
        )

    def __repr__(self):
        if self.size <= 6:
            body = ", ".join(f"{w:.6g}@({', '.join(f'{c:.6g}' for c in p)})" for p, w in self.atoms)
        else:
            body = f"{self.size} atoms"
        return f"DiscreteMeasure(d={self.dim}, {body})"


def dirac(x, dim: Optional[int] = None) -> DiscreteMeasure:
    return DiscreteMeasure(_as_points([x] if np.ndim(x) else [[x]], dim), [1.0])


def normalize_merge(
    raw: Union[Sequence, None] = None,
    *,
    points=None,
    weights=None,
    dim: Optional[int] = None,
    grid_n: Optional[int] = None,
    tol: float = ATOM_TOL,
) -> DiscreteMeasure:
    """Merge duplicate atoms and renormalise.

    Either pass ``raw`` as a list of ``(point, weight)`` pairs or the arrays
    ``points``/``weights``.  When ``grid_n`` is given the points are snapped to
    the lattice Z^d/grid_n and merged exactly; otherwise atoms closer than
    ``tol`` in every coordinate are merged.
    """
    if raw is not None:
        if len(raw) == 0:
            raise EmptyMeasure("empty atom list")
        pts = [np.atleast_1d(np.asarray(p, dtype=float)) for p, _ in raw]
        points = np.stack(pts)
        weights = [w for _, w in raw]
    if points is None or weights is None:
        raise EmptyMeasure("no atoms given")
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.size == 0:
        raise EmptyMeasure("empty atom list")
    pts = _as_points(points, dim)
    if pts.shape[0] != w.size:
        raise InvalidMeasure("points and weights have different lengths")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise InvalidMeasure("weights must be finite and nonnegative")
    if not np.all(np.isfinite(pts)):
        raise InvalidMeasure("non-finite coordinate")
    total = math.fsum(w.tolist())
    if total <= 0:
        raise EmptyMeasure("total weight is zero")

    keep = w > 0
    pts, w = pts[keep], w[keep]

    if grid_n is not None:
        keys = np.rint(pts * grid_n).astype(np.int64)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        merged_pts = uniq / grid_n
    else:
        uniq, inv = np.unique(pts, axis=0, return_inverse=True)
        merged_pts = uniq
        if tol > 0 and len(uniq) > 1:
            pairs = cKDTree(uniq).query_pairs(tol, p=np.inf, output_type="ndarray")
            if len(pairs):
                from scipy.sparse import coo_matrix
                from scipy.sparse.csgraph import connected_components

                g = coo_matrix(
                    (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])),
                    shape=(len(uniq), len(uniq)),
                )
                _, label = connected_components(g, directed=False)
                # representative of a group: its lexicographically first member
                first = np.full(label.max() + 1, -1)
                for i in range(len(uniq)):
                    if first[label[i]] < 0:
                        first[label[i]] = i
                merged_pts = uniq[first]
                inv = label[inv.reshape(-1)]
    inv = np.asarray(inv).reshape(-1)
    merged_w = np.zeros(len(merged_pts))
    np.add.at(merged_w, inv, w)
    merged_w = merged_w / total
    order = _lex_order(merged_pts)
    return DiscreteMeasure(merged_pts[order], merged_w[order])


def mixture(measures: Sequence[DiscreteMeasure], coefficients: Sequence[float]) -> DiscreteMeasure:
    dims = {m.dim for m in measures}
    if len(dims) != 1:
        raise DimensionMismatch("mixture of measures with different dimensions")
    pts = np.concatenate([m.points for m in measures])
    w = np.concatenate([c * m.weights for m, c in zip(measures, coefficients)])
    return normalize_merge(points=pts, weights=w, dim=dims.pop(), tol=0.0)


@dataclass(frozen=True)
class MomentReport:
    mean: np.ndarray
    abs_moment: float
    moment_theta: float
    second_moment: float


def moments(m: DiscreteMeasure, theta: float = 2.0) -> MomentReport:
    if theta < 1:
        raise ValueError("theta must be >= 1")
    norms = np.abs(m.points).sum(axis=1)
    return MomentReport(
        mean=m.mean(),
        abs_moment=float(m.weights @ norms),
        moment_theta=float(m.weights @ norms**theta),
        second_moment=float(m.weights @ norms**2),
    )


def _call_prices(m: DiscreteMeasure, strikes: np.ndarray) -> np.ndarray:
    x = m.points[:, 0]
    return np.maximum(x[None, :] - strikes[:, None], 0.0) @ m.weights


def convex_order_1d(mu: DiscreteMeasure, nu: DiscreteMeasure) -> bool:
    """True iff mu precedes nu in convex order (both one dimensional)."""
    if mu.dim != 1 or nu.dim != 1:
        raise DimensionMismatch("convex_order_1d needs one dimensional measures")
    if abs(float(mu.mean()[0]) - float(nu.mean()[0])) > MEAN_TOL:
        return False
    strikes = np.union1d(mu.points[:, 0], nu.points[:, 0])
    return bool(np.all(_call_prices(mu, strikes) <= _call_prices(nu, strikes) + ORDER_TOL))


def potential(m: DiscreteMeasure, at) -> np.ndarray:
    """Potential function K -> int |K - x| m(dx) for one dimensional m."""
    if m.dim != 1:
        raise DimensionMismatch("potential needs a one dimensional measure")
    k = np.atleast_1d(np.asarray(at, dtype=float))
    return np.abs(k[:, None] - m.points[None, :, 0]) @ m.weights


# ---------------------------------------------------------------- marginal specs


def _box(box, dim: int):
    if box is None:
        return None
    if np.isscalar(box):
        r = float(box)
        return (np.full(dim, -r), np.full(dim, r))
    lo, hi = box
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (dim,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (dim,)).copy()
    if np.any(hi < lo):
        raise ValueError("support box has hi < lo")
    return (lo, hi)


def _check_theta(theta, m_theta, required: bool):
    if theta is None or m_theta is None:
        if required:
            raise ValueError("theta and m_theta are required")
        return
    if not theta > 1:
        raise ValueError("theta must exceed 1")
    if not m_theta > 0:
        raise ValueError("m_theta must be positive")


@dataclass(frozen=True)
class Tabulated:
    """A marginal given by its atoms.  ``w1_bound`` bounds W1 to the law it stands for."""

    measure: DiscreteMeasure
    w1_bound: float = 0.0
    name: str = "tabulated"

    @property
    def dim(self) -> int:
        return self.measure.dim


@dataclass(frozen=True)
class Density:
    """A marginal with a Lebesgue density.

    evaluator: vectorised, maps an ``(k, d)`` array to ``(k,)`` densities.
    support_box: ``R`` for [-R, R]^d or a ``(lo, hi)`` pair; None if unbounded.
    modulus: modulus of continuity kappa (defaults to ``L * delta`` when only
        ``lipschitz_L`` is given).  Either may be a function of ``(delta, j)``
        to give the local modulus kappa_j on the box B_j; see ``local_modulus``.
    cell_min_oracle: ``(lower_corners (k, d), h) -> (k, d)`` minimisers of the
        density over each cell.
    cell_mass: ``(lower_corners (k, d), h) -> (k,)`` exact cell probabilities.
    interval_moments: one dimensional ``(a, b) -> (mass, first moment)`` on
        the intervals [a, b).
    """

    evaluator: Callable[[np.ndarray], np.ndarray]
    dim: int = 1
    support_box: Any = None
    lipschitz_L: Optional[float] = None
    modulus: Optional[Callable] = None
    theta: Optional[float] = None
    m_theta: Optional[float] = None
    cell_min_oracle: Optional[Callable] = None
    cell_mass: Optional[Callable] = None
    interval_moments: Optional[Callable] = None
    local_modulus: Optional[Callable] = None
    name: str = "density"

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        object.__setattr__(self, "support_box", _box(self.support_box, self.dim))
        _check_theta(self.theta, self.m_theta, required=False)
        if self.lipschitz_L is not None and self.lipschitz_L < 0:
            raise ValueError("lipschitz_L must be nonnegative")
        if self.modulus is not None and abs(float(self.modulus(0.0))) > 0:
            raise ValueError("modulus must vanish at 0")

    def kappa(self, delta: float, radius: Optional[float] = None) -> float:
        """Modulus of continuity, restricted to B_radius when a local one exists."""
        if radius is not None and self.local_modulus is not None:
            return float(self.local_modulus(delta, radius))
        if self.modulus is not None:
            return float(self.modulus(delta))
        if self.lipschitz_L is not None:
            return float(self.lipschitz_L) * delta
        raise ValueError("density has neither a modulus nor a Lipschitz constant")

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.evaluator(_as_points(x, self.dim)), dtype=float)


@dataclass(frozen=True)
class Sampler:
    """A marginal known through i.i.d. draws.  ``draw(rng)`` returns one point."""

    draw: Callable[[np.random.Generator], Any]
    dim: int = 1
    theta: float = 2.0
    m_theta: float = 1.0
    name: str = "sampler"

    def __post_init__(self):
        _check_theta(self.theta, self.m_theta, required=True)


MarginalSpec = Union[Tabulated, Density, Sampler]


# ---------------------------------------------------------------- JSON


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def measure_to_json(m: DiscreteMeasure, provenance: Optional[dict] = None) -> str:
    """Serialise with 17 significant digits, one atom per line."""
    lines = []
    for p, w in zip(m.points, m.weights):
        coords = ", ".join(_fmt(c) for c in p)
        lines.append(f'    {{"x": [{coords}], "w": {_fmt(w)}}}')
    head = f'{{\n  "dim": {m.dim},\n'
    if provenance is not None:
        head += '  "provenance": ' + json.dumps(provenance, sort_keys=True) + ",\n"
    return head + '  "atoms": [\n' + ",\n".join(lines) + "\n  ]\n}\n"


def measure_from_json(data) -> DiscreteMeasure:
    """Read a measure from JSON text or an already parsed dict.

    Weights are renormalised and duplicates merged, so hand written files with
    rounded weights are accepted.
    """
    if isinstance(data, str):
        data = json.loads(data)
    dim = int(data["dim"])
    atoms = data["atoms"]
    if not atoms:
        raise EmptyMeasure("no atoms in JSON measure")
    pts = np.array([a["x"] for a in atoms], dtype=float).reshape(len(atoms), -1)
    if pts.shape[1] != dim:
        raise DimensionMismatch(f"declared dim {dim} but atoms have {pts.shape[1]} coordinates")
    w = np.array([a["w"] for a in atoms], dtype=float)
    return normalize_merge(points=pts, weights=w, dim=dim)
