"""Abstract quantitative stratification over a pluggable (Theta, d_k) instance.

An :class:`Instance` bundles a density ``theta(x, s)``, control distances
``dk(x, s, k)``, the bound ``lambda0``, a candidate point sample and the
``Theta_0 > 0`` test that defines U.  Everything below only talks to an
instance through those callables, so Q-valued fields and synthetic
instances run through the same code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from . import frequency as freq
from . import homogeneous as hom
from .errors import AxiomViolationError, ConfigurationError, DegenerateFrequencyError, InstanceError
from .minkowski import ball_volume, delta_q_points, vitali_cover
from .qfield import QField


@dataclass
class Instance:
    n: int
    m_max: int
    theta: Callable
    dk: Callable
    lambda0: float
    points: np.ndarray
    in_u: Callable  # x -> bool, the Theta_0 > 0 test
    subspace: Callable  # (x, s, k) -> (n, <=k) orthonormal basis
    dist_to_boundary: Callable = None
    mono_tol: float = 0.0
    name: str = "instance"
    meta: dict = field(default_factory=dict)

    def admissible(self, x, s: float = 0.0) -> bool:
        """x in Omega^s (when the domain is known) and Theta_0(x) > 0."""
        x = np.asarray(x, float)
        if self.dist_to_boundary is not None and self.dist_to_boundary(x[None])[0] < 2 * s - 1e-12:
            return False
        return bool(self.in_u(x))


def _key(x):
    return tuple(round(float(v), 12) for v in np.ravel(x))


def field_instance(f: QField, r0: float, domain=None, lambda0: float = None,
                   search: hom.SearchOptions = None, samples: int = 64,
                   zero_tol: float = None) -> Instance:
    """Instance built from a Q-valued field.

    The field is recentered first.  Theta is the frequency with
    ``Theta_s = I(x, max(s, r_min))`` and ``r_min = 4h``; the d_k come from
    the homogeneous catalog.  U is the set of Delta_Q representative nodes.
    """
    g = f.recentered()
    domain = freq.Box.of(g) if domain is None else domain
    rmin = freq.min_radius(g)
    if lambda0 is None:
        try:
            lambda0 = freq.lambda0(g, r0, domain, samples)
        except DegenerateFrequencyError:
            lambda0 = 0.0
    opts = hom.SearchOptions(samples=samples) if search is None else search
    if lambda0 > 0:
        opts = replace(opts, max_alpha=min(opts.max_alpha, max(lambda0, 0.5)))

    @lru_cache(maxsize=None)
    def theta_cached(key, s):
        try:
            return freq.frequency(g, np.array(key), max(s, rmin), samples)
        except DegenerateFrequencyError:
            return 0.0

    @lru_cache(maxsize=None)
    def search_cached(key, s, k):
        return hom.dk_search(g, np.array(key), max(s, rmin), k, opts)

    def theta(x, s):
        return theta_cached(_key(x), float(s))

    def dk(x, s, k):
        return search_cached(_key(x), float(s), int(k)).value

    def subspace(x, s, k):
        v = search_cached(_key(x), float(s), int(k)).competitor.V
        return v[:, :k]

    if np.max(g.norms()) == 0.0:
        reps = np.zeros((0, g.n))  # u is Q[[eta]], so Theta_0 vanishes everywhere
    else:
        reps = delta_q_points(g, zero_tol)
        reps = reps[domain.dist_to_boundary(reps) >= 2 * r0 - 1e-12] if len(reps) else reps
        reps = reps[[theta(p, 0.0) > 0 for p in reps]] if len(reps) else reps
    rep_set = {_key(p) for p in reps}
    pts = freq.inner_nodes(g, domain, r0)

    def in_u(x):
        return _key(x) in rep_set

    return Instance(
        n=g.n, m_max=g.n, theta=theta, dk=dk, lambda0=float(lambda0), points=pts,
        in_u=in_u, subspace=subspace, dist_to_boundary=domain.dist_to_boundary,
        mono_tol=freq.tol_mono(g.spacing, [rmin]), name="field",
        meta={"spacing": g.spacing, "r_min": rmin, "singular_points": reps.tolist(),
              "catalog": "complete (n = m = 2)" if (g.n == 2 and g.m == 2) else "upper bound"})


def plane_instance(n: int, k: int, count: int = 100, seed: int = 0, half_length: float = 0.5,
                   lambda0: float = 1.0) -> Instance:
    """Synthetic instance whose candidate set samples a k-plane patch.

    d_j = 0 for j <= k (the patch is k-invariant) and 1 above; theta is
    constant, so every scale is good.
    """
    rng = np.random.default_rng(seed)
    pts = np.zeros((count, n))
    pts[:, :k] = rng.uniform(-half_length, half_length, (count, k))
    basis = np.eye(n)[:, :k]

    def subspace(x, s, j):
        return basis[:, :min(j, k)]

    return Instance(
        n=n, m_max=n, theta=lambda x, s: 1.0, dk=lambda x, s, j: 0.0 if j <= k else 1.0,
        lambda0=lambda0, points=pts, in_u=lambda x: True, subspace=subspace,
        name=f"plane-{k}", meta={"k": k, "count": count, "seed": seed})


def broken_instance(n: int = 2) -> Instance:
    """An instance that violates both hypotheses: d_k = 1 and theta decreasing in s."""
    return Instance(
        n=n, m_max=n, theta=lambda x, s: -10.0 * s, dk=lambda x, s, k: 1.0, lambda0=1.0,
        points=np.zeros((1, n)), in_u=lambda x: True, subspace=lambda x, s, k: np.eye(n)[:, :k],
        name="broken")


# ------------------------------------------------------------ parameters

@dataclass(frozen=True)
class Calibration:
    """The constants of the structural hypotheses.

    Each entry is a number or a callable taking the arguments below:
    ``eta1(s0, eps1)``, ``lambda1(s0, eps1)``, ``eta2(s0, eps2, tau)``.
    ``source`` records where they came from ("user", "empirical", "default").
    """

    eta1: object
    lambda1: object
    eta2: object
    source: str = "user"
    details: dict = field(default_factory=dict)

    @staticmethod
    def _call(v, *args):
        return float(v(*args)) if callable(v) else float(v)

    def get_eta1(self, s0, eps):
        return self._call(self.eta1, s0, eps)

    def get_lambda1(self, s0, eps):
        return self._call(self.lambda1, s0, eps)

    def get_eta2(self, s0, eps, tau):
        return self._call(self.eta2, s0, eps, tau)


DEFAULT_CALIBRATION = Calibration(eta1=0.1, lambda1=0.2, eta2=lambda s0, eps, tau: eps / 2, source="default")


@dataclass(frozen=True)
class StratParams:
    n: int
    k: int
    kappa0: float
    delta: float
    r0: float
    lambda0: float
    tau: float
    gamma_chain: tuple
    lambda1: float
    eta1: float
    eta2_table: tuple  # (gamma_j, eta2(r0, gamma_j, tau)) pairs
    q: int
    M: int
    p0: int
    mode: str
    calibration_source: str
    waived: tuple = ()

    @property
    def gamma0(self) -> float:
        return self.gamma_chain[0]

    def radius(self, j: int) -> float:
        return self.tau**j * self.r0

    def to_dict(self) -> dict:
        return {
            "n": self.n, "k": self.k, "kappa0": self.kappa0, "delta": self.delta, "r0": self.r0,
            "lambda0": self.lambda0, "tau": self.tau, "gamma_chain": list(self.gamma_chain),
            "lambda1": self.lambda1, "eta1": self.eta1,
            "eta2_table": [list(p) for p in self.eta2_table],
            "q": self.q, "M": self.M, "p0": self.p0, "mode": self.mode,
            "calibration_source": self.calibration_source, "waived": list(self.waived),
        }


def proof_tau(n: int, kappa0: float) -> float:
    """Largest float tau with ``omega_n tau^(kappa0/2) <= 20^(-n)``."""
    omega = ball_volume(n)
    tau = (20.0**-n / omega) ** (2.0 / kappa0)
    while omega * tau ** (kappa0 / 2.0) > 20.0**-n:
        tau = np.nextafter(tau, 0.0)
    return float(tau)


def smallest_q(tau: float, lambda1: float) -> int:
    """Smallest positive integer q with ``tau^q <= lambda1``."""
    q = max(1, math.ceil(math.log(lambda1) / math.log(tau)) - 1)
    while tau**q > lambda1:
        q += 1
    while q > 1 and tau ** (q - 1) <= lambda1:
        q -= 1
    return q


def _exact(v) -> Fraction:
    # floats are read as the decimal they print as, so 0.1 means 1/10
    return Fraction(repr(float(v))) if isinstance(v, float) else Fraction(v)


def count_m(q: int, lambda0: float, eta1: float) -> int:
    """``floor(q lambda0 / eta1)`` in exact rational arithmetic."""
    return math.floor(Fraction(q) * _exact(lambda0) / _exact(eta1))


def derive_parameters(n: int, kappa0: float, delta: float, r0: float, lambda0: float,
                      calib: Optional[Calibration] = None, mode: str = "proof",
                      k: int = 0, tau: float = None) -> StratParams:
    """Covering constants: tau, the gamma-chain, lambda1, eta1, q, M and p0.

    ``mode="proof"`` fixes tau by the volume inequality and needs a
    calibration; ``mode="practical"`` takes a user tau (default 0.1), waives
    that inequality and falls back to :data:`DEFAULT_CALIBRATION`.
    """
    if not (0 < kappa0 < 1 and 0 < delta < 1):
        raise ValueError("kappa0 and delta must lie in (0, 1)")
    if not r0 > 0 or not lambda0 >= 0:
        raise ValueError("r0 must be positive and lambda0 nonnegative")
    if not 0 <= k:
        raise ValueError("k must be nonnegative")
    waived = []
    if mode == "proof":
        if calib is None:
            raise ConfigurationError("proof mode needs calibrated eta1, lambda1 and eta2")
        tau_v = proof_tau(n, kappa0)
        if tau is not None and tau != tau_v:
            raise ConfigurationError("proof mode fixes tau; drop the explicit value")
    elif mode == "practical":
        calib = DEFAULT_CALIBRATION if calib is None else calib
        tau_v = 0.1 if tau is None else float(tau)
        if not 0 < tau_v < 1:
            raise ValueError("tau must lie in (0, 1)")
        if ball_volume(n) * tau_v ** (kappa0 / 2) > 20.0**-n:
            waived.append("omega_n tau^(kappa0/2) <= 20^-n")
    else:
        raise ValueError("mode must be 'proof' or 'practical'")

    chain = [float(delta)]
    table = []
    for _ in range(k):
        g = calib.get_eta2(r0, chain[0], tau_v)
        if not 0 < g <= chain[0]:
            raise ConfigurationError(f"eta2 must lie in (0, gamma]; got {g!r}")
        table.append((chain[0], g))
        chain.insert(0, g)
    gamma0 = chain[0]
    lam1 = calib.get_lambda1(r0, gamma0)
    eta1 = calib.get_eta1(r0, gamma0)
    if not (0 < lam1 < 1 and eta1 > 0):
        raise ConfigurationError("lambda1 must lie in (0, 1) and eta1 must be positive")
    q = smallest_q(tau_v, lam1)
    M = count_m(q, lambda0, eta1)
    return StratParams(n, k, kappa0, delta, r0, float(lambda0), tau_v, tuple(chain), lam1, eta1,
                       tuple(table[::-1]), q, M, q + M + 1, mode, calib.source, tuple(waived))


# ------------------------------------------------------------ good scales

def theta_ladder(inst: Instance, x, params: StratParams, last: int) -> np.ndarray:
    """Theta at the radii ``4 tau^l r0`` for l = 0..last."""
    return np.array([inst.theta(x, 4 * params.radius(l)) for l in range(last + 1)])


def bad_scales(inst: Instance, x, params: StratParams, p: int = None) -> list:
    """Indices l in {q..p} where ``Theta_{4 tau^l r0} - Theta_{4 tau^(l+q) r0} > eta1``."""
    p = params.p0 if p is None else p
    q = params.q
    ladder = theta_ladder(inst, x, params, p + q)
    rises = ladder[1:] - ladder[:-1]  # Theta at the smaller radius minus the larger one
    if np.any(rises > inst.mono_tol):
        j = int(np.argmax(rises))
        raise AxiomViolationError(
            f"theta increases from radius {4 * params.radius(j):.3g} to {4 * params.radius(j + 1):.3g}")
    bad = [l for l in range(q, p + 1) if ladder[l] - ladder[l + q] > params.eta1]
    if len(bad) > params.M:
        raise InstanceError(f"{len(bad)} bad scales exceed M = {params.M}")
    return bad


# ----------------------------------------------------------------- strata

@dataclass(frozen=True)
class Membership:
    member: bool
    scales: tuple = ()
    values: tuple = ()
    reason: str = ""

    def __bool__(self):
        return self.member


def geometric_scales(r: float, r0: float, ratio: float = 2.0) -> np.ndarray:
    if not 0 < r <= r0:
        raise ValueError("need 0 < r <= r0")
    if r == r0:
        return np.array([r0])
    steps = max(1, math.ceil(math.log(r0 / r) / math.log(ratio) - 1e-12))
    return np.geomspace(r, r0, steps + 1)


def strata_membership(inst: Instance, x, k: int, r: float, r0: float, delta: float,
                      scale_grid=None) -> Membership:
    """Whether x lies in S^k_{r, r0, delta}, with the scales sampled."""
    x = np.asarray(x, float)
    if not inst.admissible(x, r0):
        return Membership(False, reason="x is not in U (Theta_0 = 0) or not in Omega^r0")
    scales = geometric_scales(r, r0) if scale_grid is None else np.sort(np.asarray(scale_grid, float))
    if scales[0] > r * (1 + 1e-12) or scales[-1] < r0 * (1 - 1e-12) or np.any(scales[1:] / scales[:-1] > 2 + 1e-12):
        raise ValueError("scale grid must cover [r, r0] with ratio at most 2")
    vals = []
    for s in scales:
        v = inst.dk(x, s, k + 1)
        vals.append(v)
        if v < delta:
            return Membership(False, tuple(scales.tolist()), tuple(vals), f"d_{k + 1}({s:.3g}) < delta")
    return Membership(True, tuple(scales.tolist()), tuple(vals), "")


def strata_points(inst: Instance, k: int, r: float, r0: float, delta: float, points=None) -> np.ndarray:
    pts = inst.points if points is None else np.atleast_2d(points)
    keep = [p for p in pts if strata_membership(inst, p, k, r, r0, delta)]
    return np.array(keep).reshape(-1, inst.n)


# ---------------------------------------------------------------- capture

def dist_to_affine(pts, x, V) -> np.ndarray:
    d = np.atleast_2d(pts) - np.asarray(x, float)
    if V.shape[1]:
        d = d - (d @ V) @ V.T
    return np.linalg.norm(d, axis=1)


@dataclass(frozen=True)
class CaptureResult:
    applicable: bool
    V: np.ndarray = None
    index: int = None  # dimension i chosen along the gamma-chain
    captured: np.ndarray = None
    violations: np.ndarray = None
    reason: str = ""

    @property
    def audit_ok(self) -> bool:
        return self.applicable and len(self.violations) == 0


def capture(inst: Instance, x, s: float, k: int, eps: float, tau: float, gamma0: float,
            probe_set=None, gamma_chain=None) -> CaptureResult:
    """Trap the near-homogeneous points of B_s(x) in a slab around x + V.

    ``gamma_chain`` is ``gamma_0 <= ... <= gamma_{k+1} = eps``; without it the
    chain is gamma0 repeated up to index k followed by eps.
    """
    if not 0 <= k < inst.m_max:
        raise ValueError(f"k must lie in 0..{inst.m_max - 1}")
    x = np.asarray(x, float)
    if not inst.admissible(x):
        return CaptureResult(False, reason="x is not in U")
    if inst.dk(x, 4 * s, 0) > gamma0:
        return CaptureResult(False, reason="d_0(x, 4s) > gamma0")
    if inst.dk(x, 4 * s, k + 1) < eps:
        return CaptureResult(False, reason="d_{k+1}(x, 4s) < eps")
    chain = list(gamma_chain) if gamma_chain is not None else [gamma0] * (k + 1) + [eps]
    i = next(i for i in range(k + 1) if inst.dk(x, 4 * s, i + 1) >= chain[i + 1])
    V = np.asarray(inst.subspace(x, 4 * s, i), float).reshape(inst.n, -1)
    probes = inst.points if probe_set is None else np.atleast_2d(np.asarray(probe_set, float))
    probes = probes.reshape(-1, inst.n)
    near = probes[np.linalg.norm(probes - x, axis=1) < s]
    captured = np.array([y for y in near if inst.dk(y, 4 * s, 0) <= gamma0]).reshape(-1, inst.n)
    bad = captured[dist_to_affine(captured, x, V) >= tau * s] if len(captured) else captured
    return CaptureResult(True, V, i, captured, bad)


# --------------------------------------------------------------- covering

@dataclass
class CoverLevel:
    j: int
    radius: float
    case: str  # "start", "a" or "b"
    centers: np.ndarray
    cardinality: int
    factor: float  # audited growth factor against the previous level
    audit_ok: bool
    trap_ok: bool = True
    tubular_bound: float = 0.0  # H0(I_j) |B_{tau^j r0}|

    def to_dict(self) -> dict:
        return {"j": self.j, "radius": self.radius, "case": self.case,
                "centers": self.centers.tolist(), "cardinality": self.cardinality,
                "factor": self.factor, "audit_ok": self.audit_ok, "trap_ok": self.trap_ok,
                "tubular_bound": self.tubular_bound}


@dataclass
class CoverReport:
    levels: list
    audits: list
    final_bound: float
    r: float
    p: int
    k: int
    params: dict

    @property
    def ok(self) -> bool:
        return all(a["ok"] for a in self.audits)

    def to_dict(self) -> dict:
        return {"params": self.params, "k": self.k, "p": self.p, "r": self.r,
                "cover_levels": [lv.to_dict() for lv in self.levels],
                "audits": self.audits, "final_bound": self.final_bound, "ok": self.ok}


def _subset_cover(pts, rho):
    return vitali_cover(pts, rho).centers if len(pts) else pts


def _merge(centers_list, n):
    if not centers_list:
        return np.zeros((0, n))
    allc = np.concatenate(centers_list)
    _, idx = np.unique(np.round(allc, 12), axis=0, return_index=True)
    return allc[np.sort(idx)]


def iterative_cover(inst: Instance, points, params: StratParams, A=(), k: int = None,
                    p: int = None, diam: float = None) -> CoverReport:
    """The level-by-level cover of T_r(S_A) with r = tau^p r0 / 5.

    Level q is a Vitali cover with radius tau^q r0.  Each later level j
    refines every ball of level j-1: in case (a) (j-1 in A) by a Vitali
    cover with radius tau^j r0 / 2, in case (b) by a Vitali cover with
    radius tau^j r0 after the capture lemma has trapped the points of the
    ball in a slab of width tau^j r0 around x_i + V.  Growth factors are
    audited against 20^n tau^-n and 10^n omega_n tau^-k; failures are
    collected, not raised.
    """
    n = inst.n
    k = params.k if k is None else k
    p = params.p0 if p is None else p
    q, tau, r0 = params.q, params.tau, params.r0
    if not 0 <= k < inst.m_max:
        raise ValueError(f"k must lie in 0..{inst.m_max - 1}")
    A = sorted(set(A))
    if any(a < q or a > p for a in A):
        raise ValueError(f"A must be a subset of {{{q}..{p}}}")
    pts = np.asarray(points, float).reshape(-1, n)
    report = CoverReport([], [], 0.0, tau**p * r0 / 5.0, p, k, params.to_dict())
    if len(pts) == 0:
        return report
    omega = ball_volume(n)
    if diam is None:
        diam = float(np.max(np.linalg.norm(pts[:, None] - pts[None], axis=-1)))
    centers = _subset_cover(pts, params.radius(q))
    start_bound = 5**n * tau ** (-n * q) * r0 ** (-n) * (diam + 1) ** n
    ok = len(centers) <= start_bound
    report.levels.append(CoverLevel(q, params.radius(q), "start", centers, len(centers), start_bound, ok,
                                    True, len(centers) * ball_volume(n, params.radius(q))))
    report.audits.append({"level": q, "check": "start cardinality", "value": len(centers),
                          "bound": start_bound, "ok": ok})
    for j in range(q + 1, p + 1):
        prev_r, rad = params.radius(j - 1), params.radius(j)
        case = "a" if (j - 1) in A else "b"
        pieces, trap_ok = [], True
        for x in centers:
            local = pts[np.linalg.norm(pts - x, axis=1) < prev_r]
            if case == "a":
                sub = vitali_cover(local, rad / 2.0).centers if len(local) else local
                # balls of radius rad around these cover T_{rad/5} of the local piece
                pieces.append(sub)
            else:
                cap = capture(inst, x, prev_r, k, params.delta, tau, params.gamma0, local,
                              gamma_chain=params.gamma_chain + (params.delta,) if len(params.gamma_chain) == k + 1 else None)
                if cap.applicable:
                    slab = dist_to_affine(local, x, cap.V) < rad
                    if not np.all(slab):
                        trap_ok = False
                        report.audits.append({"level": j, "check": "trapping", "center": x.tolist(),
                                              "outside": int(np.count_nonzero(~slab)), "ok": False})
                else:
                    trap_ok = False
                    report.audits.append({"level": j, "check": "capture", "center": x.tolist(),
                                          "reason": cap.reason, "ok": False})
                pieces.append(_subset_cover(local, rad))
        new = _merge(pieces, n)
        factor = 20.0**n * tau**-n if case == "a" else 10.0**n * omega * tau**-k
        ratio = len(new) / max(len(centers), 1)
        ok = ratio <= factor
        report.audits.append({"level": j, "check": f"case {case} cardinality", "value": len(new),
                              "previous": len(centers), "bound": factor * len(centers), "ok": ok})
        centers = new
        report.levels.append(CoverLevel(j, rad, case, centers, len(centers), factor, ok, trap_ok,
                                        len(centers) * ball_volume(n, rad)))
    report.final_bound = len(centers) * ball_volume(n, params.radius(p))
    return report


# ------------------------------------------------------------ hypotheses

@dataclass
class HypothesisReport:
    counterexamples: list
    checked: int
    calibration: dict

    @property
    def consistent(self) -> bool:
        return not self.counterexamples


def _probes(inst, x, s, probe_set, max_probes):
    pts = inst.points if probe_set is None else np.atleast_2d(np.asarray(probe_set, float))
    pts = pts.reshape(-1, inst.n)
    near = pts[np.linalg.norm(pts - x, axis=1) < s]
    if len(near) > max_probes:
        near = near[np.linspace(0, len(near) - 1, max_probes).round().astype(int)]
    return near


def verify_hypotheses(inst: Instance, sample_pairs, eps1: float, eps2: float, tau: float,
                      calib: Calibration, s0: float = None, probe_set=None,
                      max_probes: int = 32) -> HypothesisReport:
    """Look for counterexamples to both structural hypotheses on a sample.

    (i): pinching ``Theta_s - Theta_{lambda1 s} <= eta1`` must force
    ``d_0(x, s) <= eps1``.  (ii): whenever ``d_k(x, 4s) <= eta2`` and
    ``d_{k+1}(x, 4s) >= eps2``, every probe of ``B_s(x)`` outside the slab
    ``T_{tau s}(x + V)`` must have ``d_0(y, 4s) > eta2``.
    """
    out = []
    pairs = list(sample_pairs)
    for x, s in pairs:
        x = np.asarray(x, float)
        s0_ = 4 * s if s0 is None else s0
        lam1 = calib.get_lambda1(s0_, eps1)
        eta1 = calib.get_eta1(s0_, eps1)
        pinch = inst.theta(x, s) - inst.theta(x, lam1 * s)
        if pinch <= eta1:
            d0 = inst.dk(x, s, 0)
            if d0 > eps1:
                out.append({"hypothesis": "i", "x": x.tolist(), "s": s, "pinch": pinch, "d0": d0})
        eta2 = calib.get_eta2(s0_, eps2, tau)
        probes = None
        for k in range(inst.m_max):
            if inst.dk(x, 4 * s, k) <= eta2 and inst.dk(x, 4 * s, k + 1) >= eps2:
                V = np.asarray(inst.subspace(x, 4 * s, k), float).reshape(inst.n, -1)
                if probes is None:
                    probes = _probes(inst, x, s, probe_set, max_probes)
                outside = probes[dist_to_affine(probes, x, V) >= tau * s] if len(probes) else probes
                for y in outside:
                    d0y = inst.dk(y, 4 * s, 0)
                    if d0y <= eta2:
                        out.append({"hypothesis": "ii", "x": x.tolist(), "s": s, "k": k,
                                    "y": y.tolist(), "d0_y": d0y, "eta2": eta2})
    return HypothesisReport(out, len(pairs), {"source": calib.source, **calib.details})


def calibrate_empirical(inst: Instance, sample_pairs, eps1: float, eps2: float, tau: float,
                        lambda1: float = 0.2, probe_set=None, max_probes: int = 32,
                        safety: float = 2.0) -> Calibration:
    """Largest eta1 and eta2 for which the hypotheses hold on the sweep, shrunk by ``safety``.

    eta1 is capped at 1/4 and eta2 at eps2, as the hypotheses require.
    """
    eta1_star, eta2_star = 0.25, eps2
    for x, s in sample_pairs:
        x = np.asarray(x, float)
        pinch = inst.theta(x, s) - inst.theta(x, lambda1 * s)
        if inst.dk(x, s, 0) > eps1:
            eta1_star = min(eta1_star, pinch)
        probes = None
        for k in range(inst.m_max):
            if inst.dk(x, 4 * s, k + 1) < eps2:
                continue
            V = np.asarray(inst.subspace(x, 4 * s, k), float).reshape(inst.n, -1)
            if probes is None:
                probes = _probes(inst, x, s, probe_set, max_probes)
            outside = probes[dist_to_affine(probes, x, V) >= tau * s] if len(probes) else probes
            for y in outside:
                eta2_star = min(eta2_star, inst.dk(y, 4 * s, 0))
            # below d_k(x, 4s) the antecedent of (ii) fails, which is also consistent
    eta1 = eta1_star / safety
    eta2 = eta2_star / safety
    if eta1 <= 0 or eta2 <= 0:
        raise InstanceError("no positive constants make the hypotheses hold on this sweep")
    return Calibration(eta1=eta1, lambda1=lambda1, eta2=eta2, source="empirical",
                       details={"eta1_fit": eta1_star, "eta2_fit": eta2_star, "safety": safety})


# --------------------------------------------------------------- stability

def stability_delta0(lambda0: float) -> float:
    """delta_0 = (lambda0 + 1)^(-1/2)."""
    if lambda0 < 0:
        raise ValueError("lambda0 must be nonnegative")
    return (lambda0 + 1.0) ** -0.5


def stability_check(inst: Instance, deltas, r0: float, r: float = None, points=None) -> bool:
    """Whether the sampled sets S^{n-2}_{r, delta} agree for every delta given."""
    deltas = list(deltas)
    if not deltas:
        return True
    d0 = stability_delta0(inst.lambda0)
    if any(not 0 < d < d0 for d in deltas):
        raise ValueError(f"deltas must lie in (0, delta_0 = {d0:.6g})")
    r = inst.meta.get("r_min", r0 / 8) if r is None else r
    sets = [frozenset(map(_key, strata_points(inst, inst.n - 2, r, r0, d, points))) for d in deltas]
    return all(s == sets[0] for s in sets)


def good_scale_index(inst: Instance, x, params: StratParams, last: int) -> int:
    """Smallest i such that every l >= i (up to ``last``) is a good scale."""
    q = params.q
    ladder = theta_ladder(inst, x, params, last + q)
    i = last + 1
    for l in range(last, -1, -1):
        if ladder[l] - ladder[l + q] > params.eta1:
            break
        i = l
    return i


def countability_audit(s0_points, params: StratParams, inst: Instance = None, last: int = None) -> bool:
    """Each class of equal good-scale index must be a discrete set."""
    pts = np.atleast_2d(np.asarray(s0_points, float))
    if pts.size == 0 or len(pts) == 1:
        return True
    last = params.p0 if last is None else last
    labels = [good_scale_index(inst, x, params, last) if inst is not None else 0 for x in pts]
    for lab in set(labels):
        cls = pts[[i for i, l in enumerate(labels) if l == lab]]
        if len(cls) < 2:
            continue
        d = np.linalg.norm(cls[:, None] - cls[None], axis=-1)
        if d[np.triu_indices(len(cls), 1)].min() <= 0:
            return False
    return True
