"""Homogeneous competitors, spines and the distances d_k.

A competitor is a superposition of branch blocks ``c_j z^(p_j/q_j)`` in the
plane, all with the same exponent ``alpha = p_j/q_j``.  For n = 3 the same
planar map is extended to be constant along one axis (a cylinder), which
gives a 1-invariant competitor.  Targets are R^2 (complex coefficients);
for other m the catalog holds only Q[[0]] and every d_k is the trace norm,
which is an upper bound of the true distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import aq_space
from .errors import DegenerateBlowupError, UnsupportedDimensionError
from .qfield import BallSpec, Grid, QField, dirichlet_energy, field_from_function, sphere_samples, sphere_trace

INVARIANCE_TOL = 1e-10


@dataclass(frozen=True)
class Block:
    q: int
    p: int
    coeff: complex = 1.0

    def __post_init__(self):
        if self.q < 1:
            raise ValueError("block size must be positive")
        if self.p <= 0:
            raise ValueError("alpha = p/q must be positive")
        object.__setattr__(self, "coeff", complex(self.coeff))


@dataclass(frozen=True)
class Competitor:
    """A homogeneous Q-valued competitor ``w``.

    ``rotation`` maps R^n to itself; ``w(x)`` is the planar superposition
    evaluated at the first two coordinates of ``rotation @ x``.  ``V`` holds
    an orthonormal basis of the invariance subspace as columns.
    """

    Q: int
    blocks: tuple = ()
    n: int = 2
    m: int = 2
    rotation: np.ndarray = None
    V: np.ndarray = None

    def __post_init__(self):
        if self.n not in (2, 3):
            raise UnsupportedDimensionError("competitors live on n = 2 or n = 3")
        blocks = tuple(self.blocks)
        object.__setattr__(self, "blocks", blocks)
        rot = np.eye(self.n) if self.rotation is None else np.asarray(self.rotation, float)
        if rot.shape != (self.n, self.n) or not np.allclose(rot @ rot.T, np.eye(self.n), atol=1e-10):
            raise ValueError("rotation must be an orthogonal n x n matrix")
        rot = rot.copy()
        rot.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        if blocks:
            if self.m != 2:
                raise UnsupportedDimensionError("nonzero competitors need m = 2")
            ratios = {Fraction(b.p, b.q) for b in blocks}
            if len(ratios) != 1:
                raise ValueError("all blocks must share the same exponent p/q")
            if sum(b.q for b in blocks) != self.Q:
                raise ValueError("block sizes must add up to Q")
            default_v = rot.T[:, 2:]  # axes the planar map ignores
        else:
            default_v = np.eye(self.n)
        v = default_v if self.V is None else np.asarray(self.V, float).reshape(self.n, -1)
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "V", v)

    @classmethod
    def zero(cls, q: int, n: int = 2, m: int = 2) -> "Competitor":
        return cls(q, (), n, m)

    @property
    def is_zero(self) -> bool:
        return not self.blocks or all(b.coeff == 0 for b in self.blocks)

    @property
    def alpha(self):
        return None if not self.blocks else self.blocks[0].p / self.blocks[0].q

    @property
    def invariance_dim(self) -> int:
        return self.n if self.is_zero else self.V.shape[1]

    def mean_zero(self) -> bool:
        """Whether ``eta_mean`` of w vanishes identically.

        Blocks with q >= 2 always have zero mean, so only the single-valued
        blocks matter.
        """
        return abs(sum(b.coeff for b in self.blocks if b.q == 1)) < 1e-12

    def to_dict(self) -> dict:
        return {
            "Q": self.Q,
            "n": self.n,
            "m": self.m,
            "alpha": self.alpha,
            "blocks": [{"q": b.q, "p": b.p, "coeff": [b.coeff.real, b.coeff.imag]} for b in self.blocks],
            "rotation": self.rotation.tolist(),
            "invariance_dim": self.invariance_dim,
        }


def competitor_eval(c: Competitor, pts) -> np.ndarray:
    """Values of ``w`` at points of R^n; shape ``(N, Q, m)``."""
    pts = np.atleast_2d(np.asarray(pts, float))
    out = np.zeros((len(pts), c.Q, c.m))
    if c.is_zero:
        return out
    y = pts @ c.rotation.T
    z = y[:, 0] + 1j * y[:, 1]
    r = np.abs(z)
    theta = np.angle(z)
    col = 0
    for b in c.blocks:
        ell = np.arange(b.q)
        vals = b.coeff * r[:, None] ** (b.p / b.q) * np.exp(1j * (b.p * theta[:, None] + 2 * np.pi * ell) / b.q)
        vals[r == 0] = 0.0
        out[:, col:col + b.q, 0] = vals.real
        out[:, col:col + b.q, 1] = vals.imag
        col += b.q
    return out


@dataclass(frozen=True)
class TraceSamples:
    points: np.ndarray  # (N, n) on the unit sphere
    values: np.ndarray  # (N, Q, m)
    weights: np.ndarray  # (N,), summing to the sphere measure

    @property
    def angles(self) -> np.ndarray:
        return np.arctan2(self.points[:, 1], self.points[:, 0])

    def qpoint(self, j: int) -> aq_space.QPoint:
        return aq_space.QPoint(self.values[j])


def competitor_trace(c: Competitor, samples: int = 64) -> TraceSamples:
    if samples < 1:
        raise ValueError("samples must be positive")
    pts, w = sphere_samples(c.n, np.zeros(c.n), 1.0, samples)
    return TraceSamples(pts, competitor_eval(c, pts), w)


def competitor_field(c: Competitor, grid: Grid) -> QField:
    """The competitor sampled on a grid, as a field."""
    return field_from_function(lambda pts: competitor_eval(c, pts), grid)


def translation_defect(c: Competitor, direction, step: float = 0.3, samples: int = 64) -> float:
    """``max_x G(w(x + step v), w(x))`` over sample points of the unit ball."""
    v = np.asarray(direction, float)
    v = v / np.linalg.norm(v)
    pts, _ = sphere_samples(c.n, np.zeros(c.n), 1.0, samples)
    pts = np.concatenate([pts, 0.5 * pts])
    g2, _ = aq_space.match_batch(competitor_eval(c, pts + step * v), competitor_eval(c, pts))
    return float(np.sqrt(g2.max()))


def spine_dim(c: Competitor, verify: bool = True) -> int:
    """Dimension of the invariance subspace of ``c``.

    With ``verify`` set, the stored subspace is checked by translating
    along each basis vector of V (must leave w unchanged) and along each
    vector of its orthogonal complement (must change w).
    """
    dim = c.invariance_dim
    if not verify or c.is_zero:
        return dim
    v = c.V
    full, _ = np.linalg.qr(np.concatenate([v, np.eye(c.n)], axis=1))
    complement = full[:, dim:c.n]
    if any(translation_defect(c, v[:, i]) > INVARIANCE_TOL for i in range(dim)):
        raise ValueError("stored subspace is not an invariance direction")
    if any(translation_defect(c, complement[:, i]) <= INVARIANCE_TOL for i in range(c.n - dim)):
        raise ValueError("competitor is invariant beyond its stored subspace")
    return dim


def trace_distance(a: TraceSamples, b_values: np.ndarray) -> float:
    """L2(sphere) norm of G between two traces sampled at the same points."""
    g2, _ = aq_space.match_batch(a.values, b_values)
    return float(np.sqrt(np.sum(a.weights * g2)))


def catalog_closure_check(seq, limit: Competitor) -> bool:
    """Closure of the invariant classes along a converging catalog sequence.

    True when the limit is at least as invariant as the tail of the
    sequence (the second half of it).
    """
    seq = list(seq)
    if not seq:
        return True
    tail = seq[len(seq) // 2:]
    return spine_dim(limit) >= min(spine_dim(c) for c in tail)


# ------------------------------------------------------------------ d_k

@dataclass(frozen=True)
class SearchOptions:
    max_alpha: float = 3.0
    samples: int = 64
    inits: int = 8
    rounds: int = 50
    seed: int = 0


@dataclass(frozen=True)
class DkResult:
    value: float
    competitor: Competitor
    trace_norm: float = field(default=0.0)


def normalized_trace(f: QField, x, s: float, samples: int = 64) -> TraceSamples:
    """Trace on the unit sphere of ``s^((n-2)/2) u(x + s .) / D(x, s)^(1/2)``."""
    x = np.asarray(x, float)
    pts, vals, _ = sphere_trace(f, BallSpec(x, s), samples)
    dirs, w = sphere_samples(f.n, np.zeros(f.n), 1.0, samples)
    if not np.any(vals):
        return TraceSamples(dirs, vals, w)
    energy = dirichlet_energy(f, BallSpec(x, s))
    if energy <= 0:
        raise DegenerateBlowupError(f"D({x.tolist()}, {s:g}) = 0 with a nonzero trace")
    return TraceSamples(dirs, vals * s ** ((f.n - 2) / 2.0) / np.sqrt(energy), w)


def candidate_exponents(Q: int, max_alpha: float):
    """Reduced fractions a/b with b | Q and 0 < a/b <= max_alpha."""
    out = set()
    for b in range(1, Q + 1):
        if Q % b:
            continue
        for a in range(1, math.ceil(max_alpha * b) + 1):
            if math.gcd(a, b) == 1 and Fraction(a, b) <= Fraction(max_alpha).limit_denominator(10**6):
                out.add(Fraction(a, b))
    return sorted(out)


def _fit_blocks(trace: TraceSamples, planar: np.ndarray, a: int, b: int, Q: int,
                opts: SearchOptions, rng) -> tuple:
    """Best coefficients for ``Q/b`` copies of the block ``(b, a)``.

    ``planar`` holds the planar coordinates of the sample directions as
    complex numbers.  Returns ``(squared distance, coefficients)``.
    """
    nblk = Q // b
    t = trace.values[..., 0] + 1j * trace.values[..., 1]  # (N, Q)
    w = trace.weights
    r = np.abs(planar) ** (a / b)
    theta = np.angle(planar)
    ell = np.arange(b)
    basis = r[:, None] * np.exp(1j * (a * theta[:, None] + 2 * np.pi * ell) / b)  # (N, b)
    basis = np.tile(basis, (1, nblk))  # column k*b + l belongs to block k
    owner = np.repeat(np.arange(nblk), b)
    scale = math.sqrt(np.sum(w * np.sum(np.abs(t) ** 2, axis=1)) / max(np.sum(w * np.sum(np.abs(basis) ** 2, axis=1)), 1e-300))

    def evaluate(coeffs):
        atoms = coeffs[owner][None, :] * basis
        wv = np.stack([atoms.real, atoms.imag], axis=-1)
        g2, perm = aq_space.match_batch(trace.values, wv)
        return float(np.sum(w * g2)), perm

    def solve(perm):
        # perm[j, i] = column matched to trace atom i at sample j
        num = np.zeros(nblk, complex)
        den = np.zeros(nblk)
        cols = perm
        e = np.take_along_axis(basis, cols, axis=1)
        blk = owner[cols]
        contrib = w[:, None] * t * np.conj(e)
        np.add.at(num, blk, contrib)
        np.add.at(den, blk, w[:, None] * np.abs(e) ** 2)
        coeffs = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
        if b == 1:
            coeffs = coeffs - coeffs.mean()
        return coeffs

    best = (math.inf, None)
    for it in range(opts.inits):
        if it == 0:
            phases = np.arange(nblk) * 2 * np.pi / (nblk * b)
        else:
            phases = rng.uniform(0, 2 * np.pi, nblk)
        coeffs = scale * np.exp(1j * phases)
        if b == 1:
            coeffs = coeffs - coeffs.mean()
        cost, perm = evaluate(coeffs)
        for _ in range(opts.rounds):
            new = solve(perm)
            new_cost, new_perm = evaluate(new)
            if new_cost > cost - 1e-15 * max(cost, 1.0):
                if new_cost <= cost:
                    coeffs, cost = new, new_cost
                break
            coeffs, cost, perm = new, new_cost, new_perm
        if cost < best[0]:
            best = (cost, coeffs)
    return best


def catalog_search(trace: TraceSamples, Q: int, n: int, m: int, k: int,
                   opts: SearchOptions = SearchOptions()) -> DkResult:
    """Minimise the trace distance over catalog competitors with spine dim >= k."""
    zero = Competitor.zero(Q, n, m)
    norm = math.sqrt(float(np.sum(trace.weights * np.sum(trace.values**2, axis=(-2, -1)))))
    best = DkResult(norm, zero, norm)
    if norm == 0.0 or m != 2 or k > n - 2:
        return best
    rng = np.random.default_rng(opts.seed)
    rotations = [np.eye(n)] if n == 2 else [
        np.eye(3)[[1, 2, 0]], np.eye(3)[[2, 0, 1]], np.eye(3)]  # cylinder axes x, y, z
    for rot in rotations:
        planar_xy = trace.points @ rot.T
        planar = planar_xy[:, 0] + 1j * planar_xy[:, 1]
        for frac in candidate_exponents(Q, opts.max_alpha):
            a, b = frac.numerator, frac.denominator
            cost, coeffs = _fit_blocks(trace, planar, a, b, Q, opts, rng)
            value = math.sqrt(max(cost, 0.0))
            if coeffs is not None and value < best.value:
                blocks = tuple(Block(b, a, complex(c)) for c in coeffs)
                if all(bl.coeff == 0 for bl in blocks):
                    continue
                best = DkResult(value, Competitor(Q, blocks, n, m, rot), norm)
    return best


def dk_search(f: QField, x, s: float, k: int, opts: SearchOptions = SearchOptions(),
              lambda0: float = None) -> DkResult:
    """d_k(x, s) with its minimising competitor."""
    if not 0 <= k <= f.n:
        raise ValueError(f"k must lie in 0..{f.n}")
    if lambda0 is not None:
        opts = SearchOptions(min(opts.max_alpha, lambda0), opts.samples, opts.inits, opts.rounds, opts.seed)
    trace = normalized_trace(f, x, s, opts.samples)
    return catalog_search(trace, f.q, f.n, f.m, k, opts)


def d_k(f: QField, x, s: float, k: int, samples: int = 64,
        search_opts: SearchOptions = None) -> float:
    opts = SearchOptions(samples=samples) if search_opts is None else search_opts
    return dk_search(f, x, s, k, opts).value
