"""Minimisation of the discrete Dirichlet energy with fixed boundary data.

The discrete energy is ``sum over edges of G(u(a), u(b))^2 * h^(n-2)``,
taken over edges with at least one free endpoint.  For a fixed choice of
edge matchings it is an ordinary quadratic in the sheet values; the
solver alternates exact red-black Gauss-Seidel sweeps on that quadratic
with refreshes of the optimal matchings.  Both phases can only lower the
energy, and a sweep that would raise it (possible only with stale
matchings) is redone with fresh ones.

This finds a local minimiser of the discrete problem.  It is not a
certified global Dir-minimiser.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import aq_space
from .errors import NumericFailureError
from .qfield import QField, interpolate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolveOptions:
    max_iters: int = 100_000
    energy_tol: float = 1e-9
    rematch_every: int = 5
    seed: int = 0
    # coarse-to-fine start on grids with 2^k + 1 nodes per axis
    multilevel: bool = True
    # "symmetric" (m = 2 only), "sheets", or "auto"
    init: str = "auto"

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.energy_tol > 0:
            raise ValueError("energy_tol must be positive")
        if self.rematch_every < 1:
            raise ValueError("rematch_every must be >= 1")


class SolveResult(NamedTuple):
    field: QField
    energy: float
    iters: int
    history: list


def _shifted(values, ax, start, stop):
    return np.take(values, np.arange(start, stop), axis=ax)


class Stencil:
    """Flat edge lists and per-colour gather tables for a fixed free mask.

    ``ia, ib`` are the flat node indices of every edge touching a free
    node.  For each colour (red-black parity of the free nodes) the table
    ``incident[c]`` lists, per free node, its 2n incident edges and
    whether the node is the first end of each.
    """

    def __init__(self, free: np.ndarray):
        if free.ndim < 1:
            raise ValueError("empty grid")
        self.free = free
        self.n = free.ndim
        dims = free.shape
        flat_id = np.arange(free.size).reshape(dims)
        ia, ib = [], []
        for ax in range(self.n):
            a = _shifted(flat_id, ax, 0, dims[ax] - 1)
            b = _shifted(flat_id, ax, 1, dims[ax])
            keep = _shifted(free, ax, 0, dims[ax] - 1) | _shifted(free, ax, 1, dims[ax])
            ia.append(a[keep])
            ib.append(b[keep])
        self.ia = np.concatenate(ia)
        self.ib = np.concatenate(ib)
        edge_of = {}
        for e, (u, v) in enumerate(zip(self.ia.tolist(), self.ib.tolist())):
            edge_of.setdefault(u, []).append((e, True))
            edge_of.setdefault(v, []).append((e, False))
        parity = np.indices(dims).sum(axis=0) % 2
        self.nodes, self.edges, self.first = [], [], []
        for colour in (0, 1):
            nodes = flat_id[free & (parity == colour)]
            inc = [edge_of[x] for x in nodes.tolist()]
            self.nodes.append(nodes)
            self.edges.append(np.array([[e for e, _ in row] for row in inc], dtype=np.intp).reshape(len(nodes), 2 * self.n))
            self.first.append(np.array([[f for _, f in row] for row in inc], dtype=bool).reshape(len(nodes), 2 * self.n))

    def energy(self, flat_values: np.ndarray, spacing: float):
        """Energy over free edges and the optimal matching on each edge."""
        g2, perm = aq_space.match_batch(flat_values[self.ia], flat_values[self.ib])
        return float(np.sum(g2)) * spacing ** (self.n - 2), perm

    def gather_tables(self, perm: np.ndarray):
        """Flat sheet indices of the matched neighbour sheets, per colour."""
        q = perm.shape[-1]
        inv = np.argsort(perm, axis=-1)
        tables = []
        for nodes, edges, first in zip(self.nodes, self.edges, self.first):
            nb = np.where(first, self.ib[edges], self.ia[edges])
            sheets = np.where(first[..., None], perm[edges], inv[edges])
            tables.append(nb[..., None] * q + sheets)
        return tables

    def sweep(self, flat_values: np.ndarray, tables) -> np.ndarray:
        """Red then black exact updates; ``flat_values`` has shape (nodes, q, m)."""
        new = flat_values.copy()
        nodes_q, q, m = new.shape
        sheets = new.reshape(nodes_q * q, m)
        for nodes, table in zip(self.nodes, tables):
            mean = sheets[table].mean(axis=1)
            new[nodes] = mean
        return new


def discrete_energy(values: np.ndarray, free: np.ndarray, spacing: float) -> float:
    """Energy over edges touching a free node."""
    st = Stencil(free)
    flat = values.reshape((-1,) + values.shape[free.ndim:])
    return st.energy(flat, spacing)[0]


def _free_mask(f: QField) -> np.ndarray:
    free = ~f.boundary_mask
    if np.any(free & f.grid.border_mask()):
        raise ValueError("free nodes on the edge of the grid box are not supported")
    return free


def iterate_once(f: QField, perms=None):
    """One Gauss-Seidel pass; returns ``(field, energy)``.

    The optimal edge matchings of ``f`` are recomputed first unless
    ``perms`` (one permutation per free edge, in :class:`Stencil` order)
    is supplied.
    """
    free = _free_mask(f)
    st = Stencil(free)
    flat = f.values.reshape((-1, f.q, f.m))
    if perms is None:
        _, perms = st.energy(flat, f.spacing)
    new = st.sweep(flat, st.gather_tables(perms))
    energy, _ = st.energy(new, f.spacing)
    return f.replace(values=new.reshape(f.values.shape)), energy


# --------------------------------------------------------------- initialisation

def _chebyshev_neighbours(idx, dims):
    for off in np.ndindex(*(3,) * len(dims)):
        off = np.asarray(off) - 1
        if not off.any():
            continue
        nb = np.asarray(idx) + off
        if np.all(nb >= 0) and np.all(nb < dims):
            yield tuple(nb)


def _label_boundary_layer(f: QField, free: np.ndarray, rng) -> np.ndarray:
    """Relabel sheets on the fixed nodes touching the free region.

    Greedy propagation: visit the layer breadth-first from a seeded start
    node and permute every newly reached node to best match the node it
    was reached from.
    """
    n = f.n
    layer = np.zeros_like(free)
    for ax in range(n):
        for shift in (1, -1):
            layer |= np.roll(free, shift, axis=ax)
    layer &= ~free
    labelled = f.values.copy()
    todo = set(map(tuple, np.argwhere(layer)))
    ordered = sorted(todo)
    while todo:
        remaining = [p for p in ordered if p in todo]
        start = remaining[rng.integers(len(remaining))]
        todo.discard(start)
        queue = deque([start])
        while queue:
            cur = queue.popleft()
            for nb in _chebyshev_neighbours(cur, f.dims):
                if nb in todo:
                    todo.discard(nb)
                    _, perm = aq_space.match_batch(labelled[cur], labelled[nb])
                    labelled[nb] = labelled[nb][perm]
                    queue.append(nb)
    return labelled


def _harmonic_solve(f: QField, free: np.ndarray, data: np.ndarray) -> np.ndarray:
    """Discrete harmonic extension of ``data`` (shape ``dims + (k,)``) into ``free``."""
    n = f.n
    idx = -np.ones(f.dims, dtype=np.int64)
    free_nodes = np.argwhere(free)
    idx[free] = np.arange(len(free_nodes))
    rows, cols, vals = [], [], []
    rhs = np.zeros((len(free_nodes), data.shape[-1]), dtype=data.dtype)
    for k, node in enumerate(free_nodes):
        rows.append(k)
        cols.append(k)
        vals.append(2.0 * n)
        for ax in range(n):
            for step in (-1, 1):
                nb = node.copy()
                nb[ax] += step
                nb = tuple(nb)
                j = idx[nb]
                if j >= 0:
                    rows.append(k)
                    cols.append(j)
                    vals.append(-1.0)
                else:
                    rhs[k] += data[nb]
    mat = sp.csc_matrix((vals, (rows, cols)), shape=(len(free_nodes),) * 2)
    lu = splu(mat)
    if np.iscomplexobj(rhs):
        return lu.solve(rhs.real) + 1j * lu.solve(rhs.imag)
    return lu.solve(rhs)


def harmonic_extension(f: QField, seed: int = 0) -> np.ndarray:
    """Start values: every labelled boundary sheet extended harmonically."""
    free = _free_mask(f)
    labelled = _label_boundary_layer(f, free, np.random.default_rng(seed))
    flat = labelled.reshape(f.dims + (f.q * f.m,))
    out = labelled.copy()
    out[free] = _harmonic_solve(f, free, flat).reshape(-1, f.q, f.m)
    out[~free] = f.values[~free]
    return out


def symmetric_extension(f: QField) -> np.ndarray:
    """Start values for planar targets (m = 2) that respect branching.

    Reading each sheet as a complex number, the elementary symmetric
    polynomials of the Q sheets are single-valued.  They are extended
    harmonically and the Q values at a free node are the roots of the
    resulting monic polynomial.  Holomorphic data such as ``z^(p/Q)`` is
    reproduced exactly by the continuous problem.
    """
    if f.m != 2:
        raise ValueError("symmetric start needs m = 2")
    free = _free_mask(f)
    z = f.values[..., 0] + 1j * f.values[..., 1]
    q = f.q
    coeffs = np.zeros(f.dims + (q,), dtype=complex)
    # running product of (t - z_i); coeffs[..., k] multiplies t^(q-1-k)
    poly = np.zeros(f.dims + (q + 1,), dtype=complex)
    poly[..., 0] = 1.0
    for i in range(q):
        shifted = np.zeros_like(poly)
        shifted[..., 1:] = poly[..., :-1] * z[..., i, None]
        poly = poly - shifted
    coeffs = poly[..., 1:]
    ext = _harmonic_solve(f, free, coeffs)
    if q == 1:
        roots = -ext
    else:
        comp = np.zeros((len(ext), q, q), dtype=complex)
        comp[:, 0, :] = -ext
        comp[:, np.arange(1, q), np.arange(q - 1)] = 1.0
        roots = np.linalg.eigvals(comp)
    out = f.values.copy()
    out[free] = np.stack([roots.real, roots.imag], axis=-1).reshape(-1, q, 2)
    return out


def initial_values(f: QField, opts) -> np.ndarray:
    init = opts.init
    if init == "auto":
        init = "symmetric" if f.m == 2 else "sheets"
    if init == "symmetric":
        return symmetric_extension(f)
    if init == "sheets":
        return harmonic_extension(f, opts.seed)
    raise ValueError(f"unknown init {opts.init!r}")


def _coarsen(f: QField):
    dims = np.asarray(f.dims)
    if np.any((dims - 1) % 2) or np.any(dims < 9):
        return None
    sl = (slice(None, None, 2),) * f.n
    from .qfield import Grid
    grid = Grid(f.grid.origin, 2 * f.spacing, tuple((dims - 1) // 2 + 1))
    coarse = QField(grid, f.values[sl], f.boundary_mask[sl])
    if coarse.boundary_mask.all():
        return None
    return coarse


# ----------------------------------------------------------------------- solve

def minimize(boundary: QField, opts: SolveOptions = SolveOptions(), callback=None,
             _level: int = 0) -> SolveResult:
    """Minimise the discrete Dirichlet energy keeping the masked nodes fixed.

    ``callback(iteration, energy)`` is called after every sweep at the
    finest level.  Returns a :class:`SolveResult`; ``history`` holds
    ``(iteration, energy)`` pairs starting with iteration 0.
    """
    free = _free_mask(boundary)
    n = boundary.n
    if not free.any():
        energy = discrete_energy(boundary.values, free, boundary.spacing)
        return SolveResult(boundary, energy, 0, [(0, energy)])

    coarse = _coarsen(boundary) if opts.multilevel else None
    if coarse is not None:
        sub = minimize(coarse, opts, None, _level + 1)
        start = boundary.values.copy()
        start[free] = interpolate(sub.field, boundary.positions()[free])
    else:
        start = initial_values(boundary, opts)

    st = Stencil(free)
    shape = boundary.values.shape
    values = start.reshape((-1, boundary.q, boundary.m))
    energy, fresh = st.energy(values, boundary.spacing)
    history = [(0, energy)]
    tables = None
    it = 0
    for it in range(1, opts.max_iters + 1):
        scheduled = tables is None or (it - 1) % opts.rematch_every == 0
        if scheduled:
            tables = st.gather_tables(fresh)
        new = st.sweep(values, tables)
        new_energy, new_fresh = st.energy(new, boundary.spacing)
        if not scheduled and new_energy > energy * (1 + 1e-12):
            scheduled = True
            tables = st.gather_tables(fresh)
            new = st.sweep(values, tables)
            new_energy, new_fresh = st.energy(new, boundary.spacing)
        if not np.isfinite(new_energy) or not np.all(np.isfinite(new)):
            raise NumericFailureError(f"non-finite values at iteration {it}", iteration=it)
        decrease = energy - new_energy
        values, energy, fresh = new, new_energy, new_fresh
        history.append((it, energy))
        if callback is not None and _level == 0:
            callback(it, energy)
        if scheduled and decrease <= opts.energy_tol * abs(history[-2][1]):
            break
    values = values.reshape(shape)
    log.debug("level %d: %d sweeps, energy %.12g", _level, it, energy)
    return SolveResult(boundary.replace(values=values), energy, it, history)
