"""Relaxed martingale transport LP in slack form, and transport plans.

Variables are the plan masses p[i_1..i_N] (one column per product atom, C
order) followed, for every step k = 1..N-1, by slacks delta[k][i_1..i_k, c]
for each coordinate c.  Rows, in order:

* marginal equalities  sum_{others} p = alpha^k[i_k]            (k = 1..N)
* upper brackets       sum_{rest} p (x^{k+1} - x^k)_c - delta <= 0
* lower brackets       sum_{rest} p (x^{k+1} - x^k)_c + delta >= 0
* budgets              sum delta[k] <= eps                       (k = 1..N-1)

The objective sum p c(x) is maximised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from ..errors import DimensionMismatch, SizeCap
from ..measures import DiscreteMeasure

LE, EQ, GE = "<", "=", ">"

# The builder refuses to materialise more product columns than this; solve()
# has its own, lower, cap on what it will attempt.
BUILD_CAP = 6_000_000


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """Joint law on a product of finite supports.

    ``index[r]`` is the multi-index (i_1..i_N) of the r-th charged cell and
    ``mass[r]`` its weight.
    """

    supports: tuple
    index: np.ndarray
    mass: np.ndarray

    @property
    def n_marginals(self) -> int:
        return len(self.supports)

    @property
    def dim(self) -> int:
        return self.supports[0].shape[1]

    @property
    def mass_map(self) -> dict:
        return {tuple(int(v) for v in i): float(w) for i, w in zip(self.index, self.mass)}

    def point_map(self) -> dict:
        """Masses keyed by tuples of coordinates (scalars when d = 1)."""
        out = {}
        for i, w in zip(self.index, self.mass):
            key = []
            for k, ik in enumerate(i):
                x = self.supports[k][ik]
                key.append(float(x[0]) if len(x) == 1 else tuple(float(v) for v in x))
            out[tuple(key)] = out.get(tuple(key), 0.0) + float(w)
        return out

    def pushforward(self, k: int) -> np.ndarray:
        """Weights of the k-th coordinate law on ``supports[k]``."""
        out = np.zeros(len(self.supports[k]))
        np.add.at(out, self.index[:, k], self.mass)
        return out

    def marginal_residual(self, marginals: Sequence[DiscreteMeasure]) -> float:
        return max(
            float(np.max(np.abs(self.pushforward(k) - m.weights))) for k, m in enumerate(marginals)
        )

    def points(self, k: int) -> np.ndarray:
        """Coordinates of the k-th marginal for every charged cell, shape (P, d)."""
        return self.supports[k][self.index[:, k]]

    @staticmethod
    def from_point_map(mass: dict, dim: int = 1) -> "TransportPlan":
        """Build a plan from ``{(x_1, .., x_N): weight}``; handy in tests."""
        keys = list(mass)
        n = len(keys[0])
        supports, index = [], []
        for k in range(n):
            pts = np.array([np.atleast_1d(np.asarray(key[k], dtype=float)) for key in keys])
            pts = pts.reshape(len(keys), dim)
            uniq, inv = np.unique(pts, axis=0, return_inverse=True)
            supports.append(uniq)
            index.append(np.asarray(inv).reshape(-1))
        return TransportPlan(
            tuple(supports),
            np.stack(index, axis=1),
            np.array([mass[k] for k in keys], dtype=float),
        )


@dataclass(eq=False)
class LPModel:
    """A maximisation LP ``max c.x  s.t.  A x (sense) b,  x >= 0``.

    ``primal_index`` lists the multi-index of every plan column; columns
    ``[0, num_primal)`` are plan masses, the rest slacks.  For a model that
    only carries a subset of product columns (column generation), the
    marginal and bracket rows still cover the full supports.
    """

    objective: np.ndarray
    A: sp.csr_matrix
    senses: np.ndarray
    rhs: np.ndarray
    primal_index: np.ndarray
    slack_index: list
    slack_offsets: list
    marginals: list
    eps: Optional[float] = None
    kind: str = "relaxed_mot"
    row_blocks: dict = field(default_factory=dict)

    @property
    def num_vars(self) -> int:
        return self.A.shape[1]

    @property
    def num_rows(self) -> int:
        return self.A.shape[0]

    @property
    def num_primal(self) -> int:
        return self.primal_index.shape[0]

    @property
    def var_lower_bounds(self) -> np.ndarray:
        return np.zeros(self.num_vars)

    @property
    def n_marginals(self) -> int:
        return len(self.marginals)

    @property
    def dim(self) -> int:
        return self.marginals[0].dim

    @cached_property
    def var_names(self) -> list:
        names = ["p_" + "_".join(str(int(v)) for v in i) for i in self.primal_index]
        for k, idx in enumerate(self.slack_index):
            names += [f"d{k + 1}_" + "_".join(str(int(v)) for v in i) for i in idx]
        return names

    @cached_property
    def row_names(self) -> list:
        names = [None] * self.num_rows
        for label, (start, stop, fmt) in self.row_blocks.items():
            for r in range(start, stop):
                names[r] = fmt(r - start)
        return names

    @property
    def rows(self):
        """List of ``(coefficients as {column: value}, sense, rhs)``."""
        out = []
        A = self.A
        for r in range(self.num_rows):
            lo, hi = A.indptr[r], A.indptr[r + 1]
            coefs = dict(zip(A.indices[lo:hi].tolist(), A.data[lo:hi].tolist()))
            out.append((coefs, str(self.senses[r]), float(self.rhs[r])))
        return out


def product_size(marginals: Sequence[DiscreteMeasure]) -> int:
    return math.prod(m.size for m in marginals)


def product_indices(sizes: Sequence[int], flat: Optional[np.ndarray] = None) -> np.ndarray:
    """Multi-indices (C order) of the given flat indices, or of all of them."""
    if flat is None:
        flat = np.arange(math.prod(sizes))
    return np.stack(np.unravel_index(flat, tuple(sizes)), axis=1).astype(np.int64)


def evaluate_cost(cost: Callable, marginals: Sequence[DiscreteMeasure], index: np.ndarray) -> np.ndarray:
    """Cost at the product atoms listed in ``index`` (shape (P, N))."""
    args = [m.points[index[:, k]] for k, m in enumerate(marginals)]
    vals = np.asarray(cost(*args), dtype=float).reshape(-1)
    if vals.shape[0] != index.shape[0]:
        raise ValueError("cost must return one value per product atom")
    if not np.all(np.isfinite(vals)):
        raise ValueError("cost returned a non-finite value")
    return vals


def _check_marginals(marginals):
    if len(marginals) < 2:
        raise ValueError("need at least two marginals")
    dims = {m.dim for m in marginals}
    if len(dims) != 1:
        raise DimensionMismatch("marginals have different dimensions")


def build_relaxed_mot_lp(
    marginals: Sequence[DiscreteMeasure],
    cost: Callable,
    eps: float,
    *,
    columns: Optional[np.ndarray] = None,
    cost_values: Optional[np.ndarray] = None,
    build_cap: int = BUILD_CAP,
) -> LPModel:
    """Assemble the slack-form LP for the given discrete marginals.

    ``columns`` restricts the plan columns to the listed multi-indices (all
    product atoms by default); ``cost_values`` may supply the objective for
    those columns directly.
    """
    _check_marginals(marginals)
    if eps < 0 or not math.isfinite(eps):
        raise ValueError("eps must be a finite nonnegative number")
    marginals = list(marginals)
    N = len(marginals)
    d = marginals[0].dim
    sizes = [m.size for m in marginals]
    if columns is None:
        total = math.prod(sizes)
        if total > build_cap:
            raise SizeCap(
                f"product support has {total} atoms, above the build cap {build_cap}; "
                "reduce n or use column generation"
            )
        columns = product_indices(sizes)
    columns = np.asarray(columns, dtype=np.int64).reshape(-1, N)
    P = columns.shape[0]

    obj_primal = (
        evaluate_cost(cost, marginals, columns) if cost_values is None else np.asarray(cost_values, float)
    )

    # prefix sizes and slack layout
    prefix_sizes = [math.prod(sizes[: k + 1]) for k in range(N - 1)]
    slack_counts = [d * s for s in prefix_sizes]
    slack_offsets = list(np.cumsum([P] + slack_counts[:-1]))
    n_vars = P + sum(slack_counts)

    marg_offsets = np.cumsum([0] + sizes[:-1])
    n_marg = sum(sizes)
    up_offsets, lo_offsets = [], []
    r = n_marg
    for s in slack_counts:
        up_offsets.append(r)
        lo_offsets.append(r + s)
        r += 2 * s
    budget_row0 = r
    n_rows = r + (N - 1)

    rows, cols, vals = [], [], []
    pcol = np.arange(P)
    for k in range(N):
        rows.append(marg_offsets[k] + columns[:, k])
        cols.append(pcol)
        vals.append(np.ones(P))
    for k in range(N - 1):
        prefix = np.ravel_multi_index(tuple(columns[:, : k + 1].T), tuple(sizes[: k + 1]))
        diff = marginals[k + 1].points[columns[:, k + 1]] - marginals[k].points[columns[:, k]]
        for c in range(d):
            nz = diff[:, c] != 0
            slot = prefix[nz] * d + c
            for off in (up_offsets[k], lo_offsets[k]):
                rows.append(off + slot)
                cols.append(pcol[nz])
                vals.append(diff[nz, c])
        scol = slack_offsets[k] + np.arange(slack_counts[k])
        srow = np.arange(slack_counts[k])
        rows += [up_offsets[k] + srow, lo_offsets[k] + srow, np.full(slack_counts[k], budget_row0 + k)]
        cols += [scol, scol, scol]
        vals += [-np.ones(slack_counts[k]), np.ones(slack_counts[k]), np.ones(slack_counts[k])]

    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_rows, n_vars),
    )
    A.sum_duplicates()
    A.eliminate_zeros()

    senses = np.empty(n_rows, dtype="<U1")
    senses[:n_marg] = EQ
    rhs = np.zeros(n_rows)
    rhs[:n_marg] = np.concatenate([m.weights for m in marginals])
    for k in range(N - 1):
        senses[up_offsets[k] : lo_offsets[k]] = LE
        senses[lo_offsets[k] : lo_offsets[k] + slack_counts[k]] = GE
    senses[budget_row0:] = LE
    rhs[budget_row0:] = eps

    objective = np.zeros(n_vars)
    objective[:P] = obj_primal

    slack_index = []
    for k in range(N - 1):
        pre = product_indices(sizes[: k + 1])
        idx = np.repeat(pre, d, axis=0)
        coord = np.tile(np.arange(d), len(pre))[:, None]
        slack_index.append(np.hstack([idx, coord]))

    blocks = {}
    for k in range(N):
        blocks[f"m{k + 1}"] = (marg_offsets[k], marg_offsets[k] + sizes[k], lambda i, k=k: f"m{k + 1}_{i}")
    for k in range(N - 1):
        s = slack_counts[k]
        blocks[f"u{k + 1}"] = (up_offsets[k], up_offsets[k] + s, lambda i, k=k: f"u{k + 1}_{i}")
        blocks[f"l{k + 1}"] = (lo_offsets[k], lo_offsets[k] + s, lambda i, k=k: f"l{k + 1}_{i}")
    blocks["budget"] = (budget_row0, n_rows, lambda i: f"budget{i + 1}")

    return LPModel(
        objective=objective,
        A=A,
        senses=senses,
        rhs=rhs,
        primal_index=columns,
        slack_index=slack_index,
        slack_offsets=[int(o) for o in slack_offsets],
        marginals=marginals,
        eps=float(eps),
        kind="relaxed_mot",
        row_blocks=blocks,
    )


def build_transport_lp(mu: DiscreteMeasure, nu: DiscreteMeasure, cost_matrix: np.ndarray) -> LPModel:
    """Plain transport LP ``min sum p C`` written as a maximisation of ``-C``."""
    if mu.dim != nu.dim:
        raise DimensionMismatch("measures have different dimensions")
    m, n = mu.size, nu.size
    C = np.asarray(cost_matrix, dtype=float).reshape(m, n)
    columns = product_indices([m, n])
    P = m * n
    pcol = np.arange(P)
    rows = np.concatenate([columns[:, 0], m + columns[:, 1]])
    A = sp.csr_matrix((np.ones(2 * P), (rows, np.concatenate([pcol, pcol]))), shape=(m + n, P))
    blocks = {
        "m1": (0, m, lambda i: f"m1_{i}"),
        "m2": (m, m + n, lambda i: f"m2_{i}"),
    }
    return LPModel(
        objective=-C.reshape(-1),
        A=A,
        senses=np.full(m + n, EQ),
        rhs=np.concatenate([mu.weights, nu.weights]),
        primal_index=columns,
        slack_index=[],
        slack_offsets=[],
        marginals=[mu, nu],
        eps=None,
        kind="transport",
        row_blocks=blocks,
    )


def plan_from_primal(model: LPModel, primal: np.ndarray, feas_tol: float = 1e-9) -> TransportPlan:
    """Read plan masses off the primal vector, dropping round-off negatives."""
    x = np.asarray(primal, dtype=float)[: model.num_primal].copy()
    if np.any(x < -feas_tol):
        raise ValueError("primal vector has materially negative plan masses")
    x[x < 0] = 0.0
    keep = x > 0
    mass = x[keep]
    mass = mass / math.fsum(mass.tolist())
    supports = tuple(m.points for m in model.marginals)
    return TransportPlan(supports, model.primal_index[keep], mass)
