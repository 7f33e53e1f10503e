"""The space A_Q(R^m) of unordered Q-tuples of points.

A :class:`QPoint` stores its Q points as an ordered ``(Q, m)`` array, but
every comparison goes through the matching distance ``G``, so storage
order never matters.  The batch helpers at the bottom operate on stacked
arrays of shape ``(..., Q, m)`` and are what the grid code uses.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DimensionMismatchError

# Largest Q for which G is minimised by enumerating all Q! permutations.
EXHAUSTIVE_MAX_Q = 6


@dataclass(frozen=True, eq=False)
class QPoint:
    """An element of A_Q(R^m).

    Parameters
    ----------
    points : array_like, shape (Q, m)
        The Q atoms.  A 1-D input is read as Q points in R^1.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise DimensionMismatchError(f"QPoint needs a (Q, m) array, got shape {pts.shape}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def zero(cls, q: int, m: int) -> "QPoint":
        """Q[[0]]."""
        return cls(np.zeros((q, m)))

    @classmethod
    def parse(cls, text: str) -> "QPoint":
        """Parse ``"x1,y1;x2,y2;..."`` (one atom per ``;``-separated group)."""
        rows = [r for r in text.strip().split(";") if r.strip()]
        return cls([[float(v) for v in r.split(",")] for r in rows])

    @property
    def q(self) -> int:
        return self.points.shape[0]

    @property
    def m(self) -> int:
        return self.points.shape[1]

    def __eq__(self, other):
        if not isinstance(other, QPoint):
            return NotImplemented
        if self.points.shape != other.points.shape:
            return False
        return g_distance(self, other) == 0.0

    def __hash__(self):
        return hash((self.q, self.m, tuple(sorted(map(tuple, self.points.tolist())))))

    def __repr__(self):
        atoms = " + ".join(f"[[{', '.join(f'{v:g}' for v in p)}]]" for p in self.points)
        return f"QPoint({atoms})"


def _check_compatible(a: QPoint, b: QPoint):
    if a.q != b.q or a.m != b.m:
        raise DimensionMismatchError(
            f"cannot compare A_{a.q}(R^{a.m}) with A_{b.q}(R^{b.m})")


@lru_cache(maxsize=None)
def permutations_table(q: int) -> np.ndarray:
    """All permutations of ``range(q)`` as a read-only ``(q!, q)`` int array."""
    table = np.array(list(itertools.permutations(range(q))), dtype=np.intp)
    table.setflags(write=False)
    return table


def pair_costs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances ``|a_i - b_j|^2`` with shape ``(..., Q, Q)``."""
    out = None
    for k in range(a.shape[-1]):
        d = a[..., :, None, k] - b[..., None, :, k]
        d = d * d
        out = d if out is None else out + d
    return out


def _cost_of(cost: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Sum of ``cost[..., i, perm[..., i]]`` with the terms added in sorted order.

    Sorting first makes the total independent of the order of the atoms, so
    G is exactly symmetric and both matching routes agree bit for bit.
    """
    picked = np.take_along_axis(cost, perm[..., :, None], axis=-1)[..., 0]
    return _sorted_sum(picked)


def _sorted_sum(terms: np.ndarray) -> np.ndarray:
    terms = np.sort(terms, axis=-1)
    total = terms[..., 0]
    for i in range(1, terms.shape[-1]):
        total = total + terms[..., i]
    return total


def match_exhaustive(a: np.ndarray, b: np.ndarray):
    """Optimal matching by enumerating every permutation.

    Returns ``(squared_cost, perm)`` where ``perm[..., i]`` is the index of
    the atom of ``b`` paired with atom ``i`` of ``a``.  Ties go to the
    lexicographically first permutation.
    """
    q = a.shape[-2]
    cost = pair_costs(a, b)
    table = permutations_table(q)
    # totals[..., s] = sum_i cost[..., i, table[s, i]]
    totals = _sorted_sum(cost[..., np.arange(q), table])
    best = np.argmin(totals, axis=-1)
    return np.take_along_axis(totals, best[..., None], axis=-1)[..., 0], table[best]


def match_assignment(a: np.ndarray, b: np.ndarray):
    """Optimal matching through the Hungarian method on the squared-cost matrix."""
    cost = pair_costs(a, b)
    flat = cost.reshape((-1,) + cost.shape[-2:])
    perms = np.empty(flat.shape[:2], dtype=np.intp)
    for idx, c in enumerate(flat):
        rows, cols = linear_sum_assignment(c)
        perms[idx, rows] = cols
    perm = perms.reshape(cost.shape[:-1])
    return _cost_of(cost, perm), perm


def match_batch(a: np.ndarray, b: np.ndarray):
    """Best matching between stacked Q-points; exhaustive for Q <= 6."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[-2] <= EXHAUSTIVE_MAX_Q:
        return match_exhaustive(a, b)
    return match_assignment(a, b)


def g_squared_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return match_batch(a, b)[0]


def g_distance(a: QPoint, b: QPoint) -> float:
    """The matching distance G(a, b) = min over permutations of the l2 pairing cost."""
    _check_compatible(a, b)
    sq, _ = match_batch(a.points, b.points)
    return float(np.sqrt(sq))


def eta_mean(a: QPoint) -> np.ndarray:
    """Barycenter of the Q atoms."""
    return a.points.mean(axis=0)


def recenter(a: QPoint) -> QPoint:
    return QPoint(a.points - eta_mean(a))


def norm(a: QPoint) -> float:
    """|a| = G(a, Q[[0]])."""
    return float(np.sqrt(np.sum(a.points**2)))


def support_multiplicities(a: QPoint, tol: float = 0.0):
    """Group atoms closer than ``tol`` (single linkage).

    Returns a list of ``(representative, multiplicity)`` sorted
    lexicographically by representative; the representative is the cluster
    mean.  The output does not depend on the storage order of the atoms.
    """
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    pts = a.points
    order = np.lexsort(pts.T[::-1])
    pts = pts[order]
    q = len(pts)
    parent = list(range(q))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    d = np.sqrt(pair_costs(pts, pts))
    for i in range(q):
        for j in range(i + 1, q):
            if d[i, j] <= tol:
                parent[find(j)] = find(i)
    groups: dict[int, list[int]] = {}
    for i in range(q):
        groups.setdefault(find(i), []).append(i)
    clusters = [(pts[idx].mean(axis=0), len(idx)) for idx in groups.values()]
    clusters.sort(key=lambda c: tuple(c[0]))
    return clusters
