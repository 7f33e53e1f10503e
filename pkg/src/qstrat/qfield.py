"""Q-valued fields sampled on rectangular grids.

Discretisation choices
----------------------
* ``|Du|^2`` at a node: for each axis, the mean of ``G(u(a), u(b))^2`` over
  the (one or two) incident edges along that axis, summed over axes and
  divided by ``h^2``.
* Ball integrals weight each node by the fraction of its cell
  ``x + [-h/2, h/2]^n`` inside the ball (weight ``h^n`` when fully inside).
* Off-grid evaluation takes the enclosing cell, matches every corner to
  the corner nearest the point, and interpolates each sheet multilinearly.
* Sphere integrals (n = 2) are trapezoidal in the angle.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import aq_space
from .aq_space import QPoint
from .errors import (
    FieldFormatError,
    OutOfDomainError,
    SizeMismatchError,
    UnsupportedDimensionError,
)

MAGIC = b"QFLD"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Grid:
    """Regular grid: node ``idx`` sits at ``origin + spacing * idx``."""

    origin: tuple
    spacing: float
    dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        object.__setattr__(self, "spacing", float(self.spacing))
        if len(self.origin) != len(self.dims):
            raise ValueError("origin and dims disagree on the dimension")
        if not (np.isfinite(self.spacing) and self.spacing > 0):
            raise ValueError("spacing must be positive")
        if any(d < 2 for d in self.dims):
            raise ValueError("every grid extent must be at least 2")

    @classmethod
    def square(cls, half_width: float = 1.0, nodes: int = 65, n: int = 2,
               center=None) -> "Grid":
        """Cube ``center + [-half_width, half_width]^n`` with ``nodes`` per axis."""
        center = np.zeros(n) if center is None else np.asarray(center, float)
        h = 2.0 * half_width / (nodes - 1)
        return cls(tuple(center - half_width), h, (nodes,) * n)

    @property
    def n(self) -> int:
        return len(self.dims)

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin)

    @property
    def upper(self) -> np.ndarray:
        return self.lower + self.spacing * (np.asarray(self.dims) - 1)

    def positions(self) -> np.ndarray:
        axes = [o + self.spacing * np.arange(d) for o, d in zip(self.origin, self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def border_mask(self) -> np.ndarray:
        mask = np.zeros(self.dims, dtype=bool)
        for ax in range(self.n):
            sl = [slice(None)] * self.n
            sl[ax] = 0
            mask[tuple(sl)] = True
            sl[ax] = -1
            mask[tuple(sl)] = True
        return mask


@dataclass(frozen=True)
class BallSpec:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")


@dataclass(frozen=True, eq=False)
class QField:
    """A Q-valued function on a grid.

    ``values`` has shape ``dims + (q, m)``; ``boundary_mask`` flags the nodes
    whose values are a fixed Dirichlet datum.  Arrays are made read-only.
    """

    grid: Grid
    values: np.ndarray
    boundary_mask: np.ndarray = None

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        dims = self.grid.dims
        if vals.ndim != len(dims) + 2 or vals.shape[: len(dims)] != dims:
            raise ValueError(f"values shape {vals.shape} does not fit grid dims {dims}")
        if not np.all(np.isfinite(vals)):
            raise FieldFormatError("field values must be finite")
        mask = self.grid.border_mask() if self.boundary_mask is None else np.array(
            self.boundary_mask, dtype=bool)
        if mask.shape != dims:
            raise ValueError("boundary_mask shape does not match the grid")
        vals.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "boundary_mask", mask)

    n = property(lambda self: self.grid.n)
    q = property(lambda self: self.values.shape[-2])
    m = property(lambda self: self.values.shape[-1])
    spacing = property(lambda self: self.grid.spacing)
    dims = property(lambda self: self.grid.dims)
    origin = property(lambda self: np.asarray(self.grid.origin))

    def __eq__(self, other):
        if not isinstance(other, QField):
            return NotImplemented
        return (self.grid == other.grid
                and np.array_equal(self.values, other.values)
                and np.array_equal(self.boundary_mask, other.boundary_mask))

    def replace(self, **changes) -> "QField":
        return dataclasses.replace(self, **changes)

    def positions(self) -> np.ndarray:
        return self.grid.positions()

    def at(self, index) -> QPoint:
        return QPoint(self.values[tuple(index)])

    def node_index(self, x) -> tuple:
        """Index of the grid node nearest to ``x``."""
        idx = np.rint((np.asarray(x, float) - self.origin) / self.spacing).astype(int)
        return tuple(np.clip(idx, 0, np.asarray(self.dims) - 1))

    def norms(self) -> np.ndarray:
        return np.sqrt(np.sum(self.values**2, axis=(-2, -1)))

    def recentered(self) -> "QField":
        vals = self.values - self.values.mean(axis=-2, keepdims=True)
        return self.replace(values=vals)

    @cached_property
    def edge_g2(self) -> list:
        """Squared G-distance along every grid edge, one array per axis."""
        out = []
        for ax in range(self.n):
            a = np.take(self.values, np.arange(self.dims[ax] - 1), axis=ax)
            b = np.take(self.values, np.arange(1, self.dims[ax]), axis=ax)
            out.append(aq_space.g_squared_batch(a, b))
        return out

    @cached_property
    def energy_density(self) -> np.ndarray:
        """Per-node |Du|^2."""
        dens = np.zeros(self.dims)
        for ax, g2 in enumerate(self.edge_g2):
            pad = [(0, 0)] * self.n
            pad[ax] = (1, 1)
            padded = np.pad(g2, pad)
            lo = np.take(padded, np.arange(self.dims[ax]), axis=ax)
            hi = np.take(padded, np.arange(1, self.dims[ax] + 1), axis=ax)
            count = np.full(self.dims[ax], 2.0)
            count[0] = count[-1] = 1.0
            shape = [1] * self.n
            shape[ax] = -1
            dens += (lo + hi) / count.reshape(shape)
        dens /= self.spacing**2
        dens.setflags(write=False)
        return dens


def _check_ball(f: QField, center, radius, slack=1e-9):
    center = np.asarray(center, float)
    if center.shape != (f.n,):
        raise OutOfDomainError(f"center must have {f.n} coordinates")
    tol = slack * f.spacing
    if np.any(center - radius < f.grid.lower - tol) or np.any(center + radius > f.grid.upper + tol):
        raise OutOfDomainError(
            f"ball B_{radius:g}({center.tolist()}) leaves the grid box "
            f"[{f.grid.lower.tolist()}, {f.grid.upper.tolist()}]")
    return center


def _box_slices(f: QField, center, radius):
    lo = np.floor((center - radius - f.origin) / f.spacing).astype(int) - 1
    hi = np.ceil((center + radius - f.origin) / f.spacing).astype(int) + 2
    lo = np.clip(lo, 0, np.asarray(f.dims))
    hi = np.clip(hi, 0, np.asarray(f.dims))
    return tuple(slice(a, b) for a, b in zip(lo, hi))


_COVER_SUB = {1: 64, 2: 16, 3: 6}


def ball_weights(f: QField, center, radius, slices):
    """Fraction of each node's cell ``x + [-h/2, h/2]^n`` inside the ball.

    Cells cut by the sphere are estimated on a regular sub-lattice.
    """
    pos = f.positions()[slices]
    n, h = f.n, f.spacing
    d = np.linalg.norm(pos - center, axis=-1)
    w = (d < radius).astype(float)
    cut = np.abs(d - radius) < h * math.sqrt(n) / 2
    if np.any(cut):
        k = _COVER_SUB.get(n, 4)
        off = ((np.arange(k) + 0.5) / k - 0.5) * h
        sub = np.stack(np.meshgrid(*[off] * n, indexing="ij"), -1).reshape(-1, n)
        pts = pos[cut]
        w[cut] = (np.linalg.norm(pts[:, None, :] + sub[None] - center, axis=-1) < radius).mean(axis=1)
    return w


def dirichlet_energy(f: QField, ball: BallSpec) -> float:
    """Quadrature of |Du|^2 over the ball, weighting nodes by cell coverage."""
    center = _check_ball(f, ball.center, ball.radius)
    sl = _box_slices(f, center, ball.radius)
    w = ball_weights(f, center, ball.radius, sl)
    return float(np.sum(w * f.energy_density[sl]) * f.spacing**f.n)


def total_energy(f: QField) -> float:
    return float(np.sum(f.energy_density) * f.spacing**f.n)


def interpolate(f: QField, points) -> np.ndarray:
    """Evaluate ``f`` at arbitrary points; returns shape ``(N, q, m)``.

    Every corner of the enclosing cell is matched to the corner nearest the
    point (ties in the matching go to the lexicographically first
    permutation), then each sheet is interpolated multilinearly.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[-1] != f.n:
        raise OutOfDomainError(f"points must have {f.n} coordinates")
    rel = (pts - f.origin) / f.spacing
    dims = np.asarray(f.dims)
    tol = 1e-9
    if np.any(rel < -tol) or np.any(rel > dims - 1 + tol):
        raise OutOfDomainError("interpolation point outside the grid box")
    cell = np.clip(np.floor(rel).astype(int), 0, dims - 2)
    t = np.clip(rel - cell, 0.0, 1.0)
    ref_off = (t > 0.5).astype(int)
    ref = f.values[tuple((cell + ref_off).T)]
    out = np.zeros_like(ref)
    for corner in np.ndindex(*(2,) * f.n):
        corner = np.asarray(corner)
        w = np.prod(np.where(corner == 1, t, 1.0 - t), axis=-1)
        vals = f.values[tuple((cell + corner).T)]
        same = np.all(corner == ref_off, axis=-1)
        _, perm = aq_space.match_batch(ref, vals)
        aligned = np.take_along_axis(vals, perm[..., None], axis=-2)
        aligned[same] = vals[same]
        out += w[:, None, None] * aligned
    return out


def sphere_samples(n: int, center, radius: float, samples: int):
    """Deterministic sample points on the sphere and their quadrature weights."""
    if samples < 1:
        raise ValueError("samples must be positive")
    center = np.asarray(center, float)
    if n == 1:
        pts = center + radius * np.array([[-1.0], [1.0]])
        return pts, np.ones(2)
    if n == 2:
        theta = 2.0 * np.pi * np.arange(samples) / samples
        dirs = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        return center + radius * dirs, np.full(samples, 2.0 * np.pi * radius / samples)
    if n == 3:
        k = np.arange(samples) + 0.5
        z = 1.0 - 2.0 * k / samples
        phi = np.pi * (1.0 + 5**0.5) * k
        rho = np.sqrt(1.0 - z**2)
        dirs = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)
        return center + radius * dirs, np.full(samples, 4.0 * np.pi * radius**2 / samples)
    raise UnsupportedDimensionError(f"spheres in dimension {n} are not supported")


def sphere_trace(f: QField, ball: BallSpec, samples: int = 64):
    """Values of ``f`` at ``samples`` equispaced points of the sphere.

    Returns ``(points, values, weights)`` with ``values`` of shape
    ``(samples, q, m)``.
    """
    if samples < 1:
        raise ValueError("samples must be positive")
    center = _check_ball(f, ball.center, ball.radius)
    pts, w = sphere_samples(f.n, center, ball.radius, samples)
    return pts, interpolate(f, pts), w


def boundary_h(f: QField, ball: BallSpec, samples: int = 64) -> float:
    """H(x, s): integral of |u|^2 over the sphere."""
    _, vals, w = sphere_trace(f, ball, samples)
    return float(np.sum(w * np.sum(vals**2, axis=(-2, -1))))


def boundary_h_many(f: QField, centers, radius: float, samples: int = 64) -> np.ndarray:
    """H(x, radius) for a batch of centers."""
    centers = np.atleast_2d(np.asarray(centers, float))
    for c in (centers.min(axis=0), centers.max(axis=0)):
        _check_ball(f, c, radius)
    pts, w = sphere_samples(f.n, np.zeros(f.n), radius, samples)
    allpts = (centers[:, None, :] + pts[None]).reshape(-1, f.n)
    vals = interpolate(f, allpts).reshape(len(centers), len(pts), f.q, f.m)
    return np.einsum("ck,k->c", np.sum(vals**2, axis=(-2, -1)), w)


# ---------------------------------------------------------------- construction

def field_from_function(func, grid: Grid, boundary_mask=None) -> QField:
    """Sample ``func(points) -> (N, q, m)`` at every node of ``grid``."""
    pos = grid.positions().reshape(-1, grid.n)
    vals = np.asarray(func(pos), dtype=float)
    if vals.ndim == 2:
        vals = vals[:, :, None]
    return QField(grid, vals.reshape(grid.dims + vals.shape[1:]), boundary_mask)


def constant_field(point: QPoint, grid: Grid) -> QField:
    vals = np.broadcast_to(point.points, grid.dims + point.points.shape)
    return QField(grid, vals)


def branch_values(z: np.ndarray, q: int, p: int, coeff: complex = 1.0) -> np.ndarray:
    """The q values of ``coeff * z^(p/q)`` at complex points ``z``; shape (N, q, 2)."""
    z = np.asarray(z, dtype=complex).ravel()
    r = np.abs(z)
    theta = np.angle(z)
    ell = np.arange(q)
    roots = (r[:, None] ** (p / q)) * np.exp(1j * (p * theta[:, None] + 2 * np.pi * ell) / q)
    roots[r == 0] = 0.0
    w = coeff * roots
    return np.stack([w.real, w.imag], axis=-1)


def make_branch_field(q: int, p: int, coeff: complex = 1.0, grid: Grid = None,
                      n: int = 2, m: int = 2) -> QField:
    """Field whose value at ``z`` is the set of Q branches of ``coeff * z^(p/Q)``.

    The value at ``z = 0`` is exactly Q[[0]].
    """
    if n != 2 or m != 2:
        raise UnsupportedDimensionError("branch fields need n = m = 2")
    grid = Grid.square() if grid is None else grid
    if grid.n != 2:
        raise UnsupportedDimensionError("branch fields need a planar grid")
    return field_from_function(
        lambda pts: branch_values(pts[:, 0] + 1j * pts[:, 1], q, p, coeff), grid)


def linear_field(matrix, grid: Grid) -> QField:
    """Single-valued linear field ``u(x) = matrix @ x`` (q = 1)."""
    a = np.atleast_2d(np.asarray(matrix, float))
    return field_from_function(lambda pts: (pts @ a.T)[:, None, :], grid)


def restrict_to_ball(f: QField, center, radius: float) -> QField:
    """Free every node strictly inside the ball; fix everything else.

    This is how a Dirichlet problem on a ball is posed on the box grid:
    the nodes outside carry the datum.
    """
    d = np.linalg.norm(f.positions() - np.asarray(center, float), axis=-1)
    mask = (d >= radius - 1e-12) | f.grid.border_mask()
    return f.replace(boundary_mask=mask)


# -------------------------------------------------------------- decomposition

def decompose_local(f: QField, ball: BallSpec, tol: float):
    """Split ``f`` near ``ball.center`` into lower-multiplicity pieces.

    The value at the center is clustered with tolerance ``tol``.  If there
    are at least two clusters and their separation exceeds twice the
    oscillation ``max G(u(y), u(center))`` over the grid box around the
    ball, each atom of every node is assigned to the cluster of the center
    atom it is matched to.  Returns one field per cluster on that box, or
    ``None`` when the value at the center is inseparable.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    center = np.asarray(ball.center, float)
    center_val = interpolate(f, center[None])[0]
    clusters = aq_space.support_multiplicities(QPoint(center_val), tol)
    if len(clusters) < 2:
        return None
    reps = np.array([c for c, _ in clusters])
    sep = np.sqrt(aq_space.pair_costs(reps, reps))[np.triu_indices(len(reps), 1)].min()

    sl = _box_slices(f, center, ball.radius)
    sl = tuple(slice(s.start, max(s.stop, s.start + 2)) for s in sl)
    sub = f.values[sl]
    ref = np.broadcast_to(center_val, sub.shape)
    g2, perm = aq_space.match_batch(ref, sub)
    osc = float(np.sqrt(g2.max()))
    if not sep > 2.0 * osc:
        return None

    # label of each center atom = index of its cluster
    labels = np.argmin(aq_space.pair_costs(center_val, reps), axis=-1)
    aligned = np.take_along_axis(sub, perm[..., None], axis=-2)
    origin = f.origin + f.spacing * np.array([s.start for s in sl])
    grid = Grid(tuple(origin), f.spacing, sub.shape[: f.n])
    return [QField(grid, aligned[..., labels == j, :]) for j in range(len(clusters))]


# ------------------------------------------------------------------------ I/O

def _header_dict(f: QField) -> dict:
    return {
        "magic": MAGIC.decode(),
        "version": FORMAT_VERSION,
        "n": f.n,
        "m": f.m,
        "q": f.q,
        "dims": list(f.dims),
        "origin": [float(v) for v in f.origin],
        "spacing": f.spacing,
        "boundary_nodes": int(f.boundary_mask.sum()),
    }


def save_field(f: QField, path) -> Path:
    """Write the binary field file plus a ``<path>.json`` header sidecar.

    Layout (little endian): ``b"QFLD"``, u32 version, u32 n, u32 m, u32 q,
    u32 dims[n], f64 origin[n], f64 spacing, f64 values (row-major nodes,
    then sheets, then coordinates), boundary mask packed 8 nodes per byte
    (least significant bit first).
    """
    path = Path(path)
    parts = [MAGIC, struct.pack("<4I", FORMAT_VERSION, f.n, f.m, f.q),
             struct.pack(f"<{f.n}I", *f.dims),
             struct.pack(f"<{f.n}d", *f.origin),
             struct.pack("<d", f.spacing),
             np.ascontiguousarray(f.values, dtype="<f8").tobytes(),
             np.packbits(f.boundary_mask.ravel(), bitorder="little").tobytes()]
    path.write_bytes(b"".join(parts))
    Path(str(path) + ".json").write_text(json.dumps(_header_dict(f), indent=2) + "\n")
    return path


def load_field(path) -> QField:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != MAGIC:
        raise FieldFormatError("not a QFLD file")
    version, n, m, q = struct.unpack_from("<4I", data, 4)
    if version != FORMAT_VERSION:
        raise FieldFormatError(f"unsupported version {version}")
    if not (1 <= n <= 3 and m >= 1 and q >= 1):
        raise FieldFormatError(f"invalid header n={n} m={m} q={q}")
    off = 20
    head = off + 4 * n + 8 * n + 8
    if len(data) < head:
        raise SizeMismatchError("file truncated inside the header")
    dims = struct.unpack_from(f"<{n}I", data, off)
    off += 4 * n
    origin = struct.unpack_from(f"<{n}d", data, off)
    off += 8 * n
    (spacing,) = struct.unpack_from("<d", data, off)
    off += 8
    if not (np.isfinite(spacing) and spacing > 0):
        raise FieldFormatError(f"spacing must be positive, got {spacing}")
    if any(d < 2 for d in dims) or not all(np.isfinite(origin)):
        raise FieldFormatError("invalid dims or origin")
    nodes = int(np.prod(dims))
    nvals = nodes * q * m
    expected = off + 8 * nvals + (nodes + 7) // 8
    if len(data) != expected:
        raise SizeMismatchError(f"expected {expected} bytes, found {len(data)}")
    vals = np.frombuffer(data, dtype="<f8", count=nvals, offset=off).astype(float)
    if not np.all(np.isfinite(vals)):
        raise FieldFormatError("non-finite field values")
    bits = np.frombuffer(data, dtype=np.uint8, offset=off + 8 * nvals)
    mask = np.unpackbits(bits, bitorder="little")[:nodes].astype(bool)
    grid = Grid(origin, spacing, dims)
    return QField(grid, vals.reshape(tuple(dims) + (q, m)), mask.reshape(dims))
