"""Tubular neighbourhoods, Vitali covers and Minkowski-dimension fits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ResolutionError
from .qfield import QField


def ball_volume(n: int, r: float = 1.0) -> float:
    """|B_r| in R^n."""
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1) * r**n


def _as_points(E) -> np.ndarray:
    pts = np.asarray(E, dtype=float)
    if pts.size == 0:
        return pts.reshape(0, pts.shape[-1] if pts.ndim == 2 else 0)
    if pts.ndim == 1:
        pts = pts[None, :]
    return pts


# ---------------------------------------------------------------- Vitali

@dataclass(frozen=True)
class VitaliCover:
    centers: np.ndarray  # (K, n)
    indices: np.ndarray  # positions of the centers in E
    rho: float

    def __len__(self):
        return len(self.indices)

    def covers(self, pts) -> np.ndarray:
        """Which of ``pts`` lie in some ball B_rho(center)."""
        pts = np.atleast_2d(np.asarray(pts, float))
        if len(self.centers) == 0:
            return np.zeros(len(pts), bool)
        d, _ = cKDTree(self.centers).query(pts)
        return d < self.rho


def vitali_cover(E, rho: float) -> VitaliCover:
    """Greedy farthest-point selection of a Vitali subfamily.

    Centers are picked from ``E`` until every point is within ``2 rho / 5``
    of one, so the balls of radius ``rho / 5`` around the centers are
    disjoint and the balls of radius ``rho`` cover ``T_{rho/5}(E)``.  The
    first point of ``E`` is always the first center and ties go to the
    lowest index.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    pts = _as_points(E)
    if len(pts) == 0:
        return VitaliCover(pts.reshape(0, pts.shape[1] if pts.ndim == 2 else 0), np.zeros(0, int), rho)
    thresh = 2.0 * rho / 5.0
    chosen = [0]
    dist = np.linalg.norm(pts - pts[0], axis=1)
    while True:
        i = int(np.argmax(dist))
        if dist[i] < thresh:
            break
        chosen.append(i)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[i], axis=1))
    idx = np.array(chosen)
    return VitaliCover(pts[idx], idx, rho)


def vitali_bound(E, rho: float, volume: float = None, resolution: float = None) -> float:
    """Right-hand side ``5^n |T_{rho/5}(E)| / (omega_n rho^n)``."""
    pts = _as_points(E)
    if len(pts) == 0:
        return 0.0
    n = pts.shape[1]
    if volume is None:
        volume = tubular_volume(pts, rho / 5.0, resolution=resolution)
    return 5**n * volume / ball_volume(n, rho)


@dataclass(frozen=True)
class VitaliAudit:
    cardinality: int
    bound: float
    ok: bool
    disjoint: bool


def audit_vitali(E, rho: float, resolution: float = None) -> VitaliAudit:
    """Check the cardinality bound and the disjointness of fifth-radius balls.

    The measured tube volume is taken at its upper error bound, so a
    discretisation shortfall never causes a spurious failure.
    """
    pts = _as_points(E)
    cover = vitali_cover(pts, rho)
    if len(pts) == 0:
        return VitaliAudit(0, 0.0, True, True)
    est = tubular_volume_estimate(pts, rho / 5.0, resolution=resolution)
    bound = vitali_bound(pts, rho, est.volume + est.error)
    c = cover.centers
    d = np.linalg.norm(c[:, None] - c[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    disjoint = bool(np.all(d >= 2.0 * rho / 5.0))
    return VitaliAudit(len(cover), bound, len(cover) <= bound, disjoint)


# ------------------------------------------------------- tubular volumes

@dataclass(frozen=True)
class VolumeEstimate:
    volume: float
    error: float  # volume of the cells straddling the level set dist = r
    resolution: float
    cells: int


def _window_for(pts, r, h):
    lo = pts.min(axis=0) - r - 2 * h
    hi = pts.max(axis=0) + r + 2 * h
    return lo, hi


def _sparse_count(tree, pts, lo, counts, h, r, slack, reach):
    """Count cells only in the boxes around the points (for sparse sets)."""
    n = pts.shape[1]
    offsets = np.stack(np.meshgrid(*[np.arange(-reach, reach + 1)] * n, indexing="ij"), -1).reshape(-1, n)
    home = np.floor((pts - lo) / h).astype(np.int64)
    strides = np.cumprod(np.concatenate([[1], counts[::-1][:-1]]))[::-1].astype(np.int64)
    batch = max(1, 4_000_000 // len(offsets))
    ids = []
    for start in range(0, len(home), batch):
        cells = (home[start:start + batch, None, :] + offsets[None]).reshape(-1, n)
        keep = np.all((cells >= 0) & (cells < counts), axis=1)
        ids.append(np.unique(cells[keep] @ strides))
    flat = np.unique(np.concatenate(ids))
    inside = border = 0
    for start in range(0, len(flat), 2_000_000):
        chunk = flat[start:start + 2_000_000]
        idx = (chunk[:, None] // strides) % counts
        d, _ = tree.query(lo + h * (idx + 0.5), distance_upper_bound=r + slack)
        inside += int(np.count_nonzero(d < r))
        border += int(np.count_nonzero(np.abs(d - r) <= slack))
    return inside, border


def tubular_volume_estimate(E, r: float, window=None, resolution: float = None) -> VolumeEstimate:
    """Grid estimate of ``|T_r(E)|`` with its discretisation error.

    Cells of side ``resolution`` tile the window; a cell counts when its
    center lies within ``r`` of ``E``.  Only cells in the bounding box of
    ``T_r(E)`` are visited.  The default resolution is ``r / 16``.
    """
    if not r > 0:
        raise ValueError("r must be positive")
    pts = _as_points(E)
    h = r / 16.0 if resolution is None else float(resolution)
    if not h > 0:
        raise ValueError("resolution must be positive")
    if r < 4 * h:
        raise ResolutionError(f"r = {r:g} spans fewer than 4 cells of size {h:g}")
    if len(pts) == 0:
        return VolumeEstimate(0.0, 0.0, h, 0)
    n = pts.shape[1]
    lo, hi = _window_for(pts, r, h)
    if window is not None:
        wlo, whi = (np.asarray(w, float) for w in window)
        if np.any(pts.min(axis=0) - r < wlo - 1e-12) or np.any(pts.max(axis=0) + r > whi + 1e-12):
            raise ValueError("window does not contain T_r(E)")
        # snap to the window's cell lattice
        lo = wlo + np.floor((np.maximum(lo, wlo) - wlo) / h) * h
        hi = np.minimum(hi, whi)
    counts = np.maximum(np.ceil((hi - lo) / h).astype(int), 1)
    tree = cKDTree(pts)
    slack = h * math.sqrt(n) / 2.0
    reach = int(math.ceil((r + slack) / h)) + 1
    if len(pts) * (2 * reach + 1) ** n < np.prod(counts.astype(float)):
        inside, border = _sparse_count(tree, pts, lo, counts, h, r, slack, reach)
        vol = h**n
        return VolumeEstimate(inside * vol, border * vol, h, int(np.prod(counts)))
    inside = 0
    border = 0
    # sweep along the first axis in slabs to bound memory
    axes = [lo[i] + h * (np.arange(counts[i]) + 0.5) for i in range(1, n)]
    rest = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n - 1) if n > 1 else np.zeros((1, 0))
    xs = lo[0] + h * (np.arange(counts[0]) + 0.5)
    chunk = max(1, 2_000_000 // max(len(rest), 1))
    for start in range(0, len(xs), chunk):
        x0 = xs[start:start + chunk]
        cells = np.concatenate([np.repeat(x0, len(rest))[:, None], np.tile(rest, (len(x0), 1))], axis=1)
        d, _ = tree.query(cells, distance_upper_bound=r + slack)
        inside += int(np.count_nonzero(d < r))
        border += int(np.count_nonzero(np.abs(d - r) <= slack))
    vol = h**n
    return VolumeEstimate(inside * vol, border * vol, h, int(np.prod(counts)))


def tubular_volume(E, r: float, window=None, resolution: float = None) -> float:
    """``|T_r(E)|`` where ``T_r(E) = {z : dist(z, E) < r}``."""
    return tubular_volume_estimate(E, r, window, resolution).volume


# -------------------------------------------------------------- fitting

@dataclass(frozen=True)
class TubularEstimate:
    radii: np.ndarray  # decreasing
    volumes: np.ndarray
    errors: np.ndarray
    fitted_slope: float
    dim_estimate: float
    n: int
    method: str = "grid"
    resolution: float = 0.0

    def to_dict(self) -> dict:
        return {
            "radii": self.radii.tolist(),
            "volumes": self.volumes.tolist(),
            "errors": self.errors.tolist(),
            "fitted_slope": self.fitted_slope,
            "dim_estimate": self.dim_estimate,
            "n": self.n,
            "method": self.method,
            "resolution": self.resolution,
        }


def default_radii(window_size: float, resolution: float) -> np.ndarray:
    """Geometric radii with ratio 1/2 from ``window_size / 8`` down to 8 cells."""
    radii = []
    r = window_size / 8.0
    while r >= 8 * resolution:
        radii.append(r)
        r /= 2.0
    return np.array(radii)


def minkowski_fit(E, radii=None, window=None, resolution: float = None) -> TubularEstimate:
    """Slope of ``log |T_r(E)|`` against ``log r``; the dimension is n minus it.

    Without ``radii`` the defaults of :func:`default_radii` are used, which
    needs a ``window`` (lower, upper) and a ``resolution``.
    """
    pts = _as_points(E)
    if len(pts) == 0:
        raise ValueError("cannot fit the dimension of an empty set")
    n = pts.shape[1]
    if radii is None:
        if window is None or resolution is None:
            raise ValueError("default radii need a window and a resolution")
        size = float(np.max(np.asarray(window[1]) - np.asarray(window[0])))
        radii = default_radii(size, resolution)
    radii = np.sort(np.asarray(radii, float))[::-1]
    if len(radii) < 4 or radii[0] / radii[-1] < 10.0 - 1e-9:
        raise ValueError("need at least 4 radii spanning a decade")
    ests = [tubular_volume_estimate(pts, r, window, resolution) for r in radii]
    vols = np.array([e.volume for e in ests])
    errs = np.array([e.error for e in ests])
    slope = float(np.polyfit(np.log(radii), np.log(vols), 1)[0])
    res = resolution if resolution is not None else float("nan")
    return TubularEstimate(radii, vols, errs, slope, n - slope, n, "grid", res)


# ------------------------------------------------------------- Delta_Q

def delta_q_mask(f: QField, tol: float = None, factor: float = 2.0) -> np.ndarray:
    """Nodes where all Q sheets coincide, up to the grid's resolution.

    A node qualifies when ``|recenter u|`` there is at most ``tol``; the
    default tolerance is ``factor`` times the largest G-length of the
    recentered field over the node's incident edges, which is how far a
    coincidence point between nodes can hide.
    """
    g = f.recentered()
    nrm = g.norms()
    if tol is not None:
        return nrm <= tol
    local = np.zeros(f.dims)
    for axis, g2 in enumerate(g.edge_g2):
        e = np.sqrt(g2)
        lo = [slice(None)] * f.n
        hi = [slice(None)] * f.n
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        local[tuple(lo)] = np.maximum(local[tuple(lo)], e)
        local[tuple(hi)] = np.maximum(local[tuple(hi)], e)
    return nrm <= factor * local + 1e-12


def delta_q_points(f: QField, tol: float = None, factor: float = 2.0, local_min: bool = True) -> np.ndarray:
    """Positions of the Delta_Q nodes, shape (K, n).

    With ``local_min`` only nodes whose recentered norm is minimal over
    their 3^n neighbourhood are kept, so each coincidence point is
    represented by a single node instead of the small cluster around it.
    """
    mask = delta_q_mask(f, tol, factor)
    if local_min:
        nrm = f.recentered().norms()
        padded = np.pad(nrm, 1, constant_values=np.inf)
        best = np.full(f.dims, np.inf)
        for off in np.ndindex(*(3,) * f.n):
            sl = tuple(slice(o, o + d) for o, d in zip(off, f.dims))
            if off != (1,) * f.n:
                best = np.minimum(best, padded[sl])
        mask &= nrm <= best
    return f.positions()[mask]
