"""Frequency-function analytics: D, H, I, pinching, blowups and Lambda_0."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateBlowupError,
    DegenerateFrequencyError,
    DomainTooSmallError,
    OutOfDomainError,
)
from .qfield import (
    BallSpec,
    Grid,
    QField,
    boundary_h,
    boundary_h_many,
    dirichlet_energy,
    interpolate,
    total_energy,
)

H_FLOOR = 1e-14
DEFAULT_SAMPLES = 64


@dataclass(frozen=True)
class Disk:
    """Ball-shaped domain used for Omega in Lambda_0 and Omega^s."""

    center: tuple
    radius: float

    def dist_to_boundary(self, pts) -> np.ndarray:
        return self.radius - np.linalg.norm(np.asarray(pts) - np.asarray(self.center), axis=-1)

    def energy(self, f: QField) -> float:
        return dirichlet_energy(f, BallSpec(self.center, self.radius))


@dataclass(frozen=True)
class Box:
    lower: tuple
    upper: tuple

    @classmethod
    def of(cls, f: QField) -> "Box":
        return cls(tuple(f.grid.lower), tuple(f.grid.upper))

    def dist_to_boundary(self, pts) -> np.ndarray:
        pts = np.asarray(pts)
        return np.minimum(pts - np.asarray(self.lower), np.asarray(self.upper) - pts).min(axis=-1)

    def energy(self, f: QField) -> float:
        return total_energy(f)


def inner_nodes(f: QField, domain, s: float) -> np.ndarray:
    """Grid nodes of Omega^s = {x : dist(x, boundary) >= 2 s}, shape (N, n)."""
    pos = f.positions().reshape(-1, f.n)
    keep = domain.dist_to_boundary(pos) >= 2.0 * s - 1e-12
    return pos[keep]


def min_radius(f: QField) -> float:
    """Smallest radius trusted on this grid (stands in for s -> 0+)."""
    return 4.0 * f.spacing


def tol_mono(spacing: float, radii) -> float:
    return 0.02 + 5.0 * spacing / float(np.min(radii))


def frequency(f: QField, x, s: float, samples: int = DEFAULT_SAMPLES) -> float:
    """I(x, s) = s D(x, s) / H(x, s)."""
    ball = BallSpec(x, s)
    h = boundary_h(f, ball, samples)
    if h < H_FLOOR:
        raise DegenerateFrequencyError(f"H({list(np.ravel(x))}, {s:g}) = {h:.3g} vanishes")
    return s * dirichlet_energy(f, ball) / h


@dataclass(frozen=True)
class RadialProfile:
    center: np.ndarray
    radii: np.ndarray
    d_vals: np.ndarray
    h_vals: np.ndarray
    i_vals: np.ndarray = field(default=None)

    def rows(self):
        return list(zip(self.radii.tolist(), self.d_vals.tolist(),
                        self.h_vals.tolist(), self.i_vals.tolist()))


def radial_profile(f: QField, x, radii, samples: int = DEFAULT_SAMPLES) -> RadialProfile:
    radii = np.asarray(radii, dtype=float)
    if radii.ndim != 1 or len(radii) == 0 or np.any(np.diff(radii) <= 0) or radii[0] <= 0:
        raise ValueError("radii must be positive and strictly increasing")
    d = np.array([dirichlet_energy(f, BallSpec(x, s)) for s in radii])
    h = np.array([boundary_h(f, BallSpec(x, s), samples) for s in radii])
    if np.any(h < H_FLOOR):
        raise DegenerateFrequencyError("H vanishes on one of the spheres")
    return RadialProfile(np.asarray(x, float), radii, d, h, radii * d / h)


@dataclass(frozen=True)
class MonotonicityAudit:
    ok: bool
    tol: float
    violations: list  # (index, running max before it, value)


def audit_monotone(profile: RadialProfile, tol: float) -> MonotonicityAudit:
    """Flag radii where I drops more than ``tol`` below an earlier value."""
    violations = []
    running = -np.inf
    for j, v in enumerate(profile.i_vals):
        if v < running - tol:
            violations.append((j, float(running), float(v)))
        running = max(running, v)
    return MonotonicityAudit(not violations, tol, violations)


def pinch(f: QField, x, s: float, lam: float, samples: int = DEFAULT_SAMPLES) -> float:
    """I(x, s) - I(x, lam s)."""
    if not 0 < lam <= 1:
        raise ValueError("lam must lie in (0, 1]")
    if lam == 1:
        return 0.0
    return frequency(f, x, s, samples) - frequency(f, x, lam * s, samples)


def blowup(f: QField, y, s: float, out_grid: Grid = None, zero_tol: float = 1e-9) -> QField:
    """The rescaling ``s^((n-2)/2) u(y + s x) / D(y, s)^(1/2)``.

    The prefactor uses the domain dimension n, which makes the Dirichlet
    energy of the result on B_1 equal to 1.  The default output grid is
    the square of half-width ``min(2, room / s)`` with 129 nodes per axis,
    where ``room`` is the distance from ``y`` to the edge of the grid box.
    """
    y = np.asarray(y, float)
    uy = interpolate(f, y[None])[0]
    scale = max(1.0, float(np.max(f.norms())))
    if np.sqrt(np.sum(uy**2)) > zero_tol * scale:
        raise ValueError(f"blowup needs u(y) = Q[[0]], |u(y)| = {np.sqrt(np.sum(uy**2)):.3g}")
    energy = dirichlet_energy(f, BallSpec(y, s))
    if energy <= 0:
        raise DegenerateBlowupError(f"D({y.tolist()}, {s:g}) = 0")
    if out_grid is None:
        room = float(np.min(np.minimum(y - f.grid.lower, f.grid.upper - y)))
        half = min(2.0, room / s)
        if half < 1.0:
            raise OutOfDomainError("the ball B_s(y) does not fit in the grid")
        out_grid = Grid.square(half, 129, f.n)
    pts = out_grid.positions().reshape(-1, f.n)
    vals = interpolate(f, y + s * pts) * s ** ((f.n - 2) / 2.0) / np.sqrt(energy)
    return QField(out_grid, vals.reshape(out_grid.dims + (f.q, f.m)))


def lambda0(f: QField, r0: float, domain=None, samples: int = DEFAULT_SAMPLES) -> float:
    """r0 * (energy on Omega) / min over Omega^{r0} of H(x, r0)."""
    domain = Box.of(f) if domain is None else domain
    centers = inner_nodes(f, domain, r0)
    if len(centers) == 0:
        raise DomainTooSmallError(f"Omega^{r0:g} contains no grid node")
    hmin = float(boundary_h_many(f, centers, r0, samples).min())
    if hmin < H_FLOOR:
        raise DegenerateFrequencyError("min H vanishes: u is Q[[0]] on some sphere")
    return r0 * domain.energy(f) / hmin


def fit_exponent(radii, values) -> float:
    """Least-squares slope of log(values) against log(radii)."""
    slope, _ = np.polyfit(np.log(radii), np.log(values), 1)
    return float(slope)
