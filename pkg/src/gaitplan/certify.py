"""Quadratic Lyapunov certificates and dwell-time bounds for gait switching.

Per primitive: a quadratic Lyapunov function from the linearization, a
verified sublevel-set basin estimate, then library-level trapping sets and
the dwell-time bound obtained by scanning a level kappa.
"""
from dataclasses import dataclass
import json
import math

import numpy as np
from scipy.optimize import minimize_scalar

from . import _kernels
from .errors import NoContractiveLevel, NoFeasibleKappa, NotSchurStable
from .primitives import ENVELOPE, evaluate_batch, linearize, spectral_radius

LAMBDA_CANDIDATES = (0.9, 0.5, 0.25, 0.12)
KAPPA_CEILING = 1.0
KAPPA_GRID_MIN = 1e-5
KAPPA_GRID_POINTS = 40
INCLUSION_MARGIN = 1.01
CERT_FORMAT = "gaitplan-certificate"


@dataclass(frozen=True, eq=False)
class QuadLyapunov:
    S: np.ndarray
    lam: float
    kappa_bar: float
    center: np.ndarray

    def __post_init__(self):
        S = np.array(self.S, dtype=float)
        if np.max(np.abs(S - S.T)) > 1e-12 * max(1.0, np.max(np.abs(S))):
            raise ValueError("S must be symmetric")
        S = 0.5 * (S + S.T)
        if np.min(np.linalg.eigvalsh(S)) <= 0:
            raise ValueError("S must be positive definite")
        S.setflags(write=False)
        c = np.array(self.center, dtype=float)
        c.setflags(write=False)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "center", c)

    def V(self, Z):
        Z = np.ascontiguousarray(np.atleast_2d(Z), dtype=float)
        return _kernels.quad_form(Z, self.center, self.S)

    @property
    def eig_min(self):
        return float(np.linalg.eigvalsh(self.S)[0])

    @property
    def eig_max(self):
        return float(np.linalg.eigvalsh(self.S)[-1])

    def boundary(self, level, n_angles):
        """Points on {V = level}, evenly spaced in the whitened angle."""
        return ellipse_boundary(self.center, self.S, level, np.linspace(0, 2 * np.pi, n_angles, endpoint=False))

    def to_dict(self):
        return {"S": self.S.ravel().tolist(), "lambda": self.lam, "kappa_bar": self.kappa_bar,
                "center": self.center.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.reshape(d["S"], (2, 2)), d["lambda"], d["kappa_bar"], d["center"])


def _whitener(S):
    # x = c + sqrt(level) * W u with |u| = 1 gives V(x) = level
    L = np.linalg.cholesky(S)
    return np.linalg.inv(L).T


def ellipse_boundary(c, S, level, angles):
    W = _whitener(S)
    U = np.column_stack([np.cos(angles), np.sin(angles)])
    return np.asarray(c) + math.sqrt(level) * U @ W.T


def ellipse_bbox(c, S, level):
    half = np.sqrt(level * np.diag(np.linalg.inv(S)))
    return np.asarray(c) - half, np.asarray(c) + half


# ---------------------------------------------------------------- Lyapunov

def solve_discrete_lyapunov(A, Q=None):
    """S with A^T S A - S + Q = 0 via the vectorized 4x4 system."""
    A = np.asarray(A, dtype=float)
    Q = np.eye(2) if Q is None else np.asarray(Q, dtype=float)
    rho = spectral_radius(A)
    if rho >= 1.0 - 1e-9:
        raise NotSchurStable(f"spectral radius {rho:.6g} is not below 1")
    K = np.kron(A.T, A.T) - np.eye(4)
    q = Q.reshape(-1, order="F")
    s = np.linalg.solve(K, -q)
    for _ in range(2):
        # iterative refinement for near-unit spectral radius
        r = K @ s + q
        s = s - np.linalg.solve(K, r)
    S = s.reshape(2, 2, order="F")
    return 0.5 * (S + S.T)


def lyapunov_residual(A, S, Q=None):
    Q = np.eye(2) if Q is None else Q
    R = A.T @ S @ A - S + Q
    return float(np.max(np.sum(np.abs(R), axis=1)))


def _contraction_holds(prim, lyap, level, n_angles, n_shells, envelope):
    angles = np.linspace(0, 2 * np.pi, n_angles, endpoint=False)
    U = np.column_stack([np.cos(angles), np.sin(angles)])
    radii = np.arange(1, n_shells + 1) / n_shells
    W = _whitener(lyap.S)
    Xbar = (radii[:, None, None] * U[None, :, :]).reshape(-1, 2) @ W.T * math.sqrt(level)
    Z = Xbar + lyap.center
    if np.any(np.abs(Z) > envelope):
        return False
    Zn = evaluate_batch(prim.stride_map, Z)
    if not np.all(np.isfinite(Zn)) or np.any(np.abs(Zn) > envelope):
        return False
    v_now = lyap.V(Z)
    v_next = lyap.V(Zn)
    return bool(np.all(v_next <= lyap.lam * v_now))


def estimate_boa(prim, lyap, ceiling=KAPPA_CEILING, n_angles=64, n_shells=16, rel_tol=1e-3,
                 floor_ratio=1e-8, envelope=ENVELOPE):
    """Largest verified level kappa_bar with V(rho(x)) <= lam V(x) on M(kappa_bar).

    Bisection (in log space) over levels up to ``ceiling``; each level is
    checked on ``n_angles`` x ``n_shells`` samples of the sublevel set using
    the true stride map.
    """
    def ok(level):
        return _contraction_holds(prim, lyap, level, n_angles, n_shells, envelope)

    if ok(ceiling):
        return float(ceiling)
    lo = ceiling * floor_ratio
    if not ok(lo):
        raise NoContractiveLevel(f"lambda={lyap.lam} fails even at level {lo:.3g}")
    hi = ceiling
    while hi / lo > 1.0 + rel_tol:
        mid = math.sqrt(lo * hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return float(lo)


def fit_lyapunov(prim, lam, ceiling=KAPPA_CEILING, Q=None, **boa_kw):
    A, _ = linearize(prim)
    S = solve_discrete_lyapunov(A, Q)
    seed = QuadLyapunov(S, lam, float("nan"), prim.fixed_point)
    kbar = estimate_boa(prim, seed, ceiling=ceiling, **boa_kw)
    return QuadLyapunov(S, lam, kbar, prim.fixed_point)


# ---------------------------------------------------------------- set bounds

def check_feasibility(lib, lyaps):
    """Every fixed point lies in every primitive's verified basin."""
    fps = np.array([l.center for l in lyaps]) if lib is None else lib.fixed_points()
    for lp in lyaps:
        d = fps - lp.center
        if np.any(np.einsum("ni,ij,nj->n", d, lp.S, d) > lp.kappa_bar):
            return False
    return True


def _pair_data(lyaps):
    C = np.array([l.center for l in lyaps])
    D = np.linalg.norm(C[:, None, :] - C[None, :, :], axis=2)
    emin = np.array([l.eig_min for l in lyaps])
    emax = np.array([l.eig_max for l in lyaps])
    return D, emin, emax


def omega_bound(kappa, lyaps):
    D, emin, emax = _pair_data(lyaps)
    # [p, q]: lmax(S_p) (sqrt(kappa / lmin(S_q)) + D_pq)^2
    vals = emax[:, None] * (np.sqrt(kappa / emin[None, :]) + D) ** 2
    return float(np.max(vals))


def mu_bound(kappa, lyaps):
    D, emin, emax = _pair_data(lyaps)
    # [p, q]: lmax(S_q) / lmin(S_p) (1 + sqrt(lmax(S_p) / kappa) D_pq)^2
    vals = (emax[None, :] / emin[:, None]) * (1.0 + np.sqrt(emax[:, None] / kappa) * D) ** 2
    # V_p / V_p is exactly 1; the closed form would give cond(S_p) there
    np.fill_diagonal(vals, 1.0)
    return float(np.max(vals))


def omega_exact(kappa, lyaps, n_angles=256):
    """Sampled max of V_p over the union of the kappa-sublevel sets."""
    best = 0.0
    for lq in lyaps:
        B = lq.boundary(kappa, n_angles)
        for lp in lyaps:
            best = max(best, float(np.max(lp.V(B))))
    return best


def sample_basin_intersection(lyaps, n, rng):
    """Uniform samples from the intersection of the open basin ellipses."""
    lo = np.full(2, -np.inf)
    hi = np.full(2, np.inf)
    for l in lyaps:
        a, b = ellipse_bbox(l.center, l.S, l.kappa_bar)
        lo, hi = np.maximum(lo, a), np.minimum(hi, b)
    out = []
    have = 0
    for _ in range(100):
        X = rng.uniform(lo, hi, size=(max(n, 256), 2))
        keep = np.ones(len(X), dtype=bool)
        for l in lyaps:
            keep &= l.V(X) < l.kappa_bar
        out.append(X[keep])
        have += int(keep.sum())
        if have >= n:
            break
    return np.concatenate(out)[:n] if out else np.empty((0, 2))


def mu_exact(kappa, lyaps, n_region=10_000, n_angles=256, seed=0):
    """Sampled sup of V_r / V_p over the basin intersection outside M_p(kappa)."""
    rng = np.random.default_rng(seed)
    region = sample_basin_intersection(lyaps, n_region, rng)
    best = 1.0
    for lp in lyaps:
        X = np.concatenate([region, lp.boundary(kappa, n_angles)])
        inside_all = np.ones(len(X), dtype=bool)
        for l in lyaps:
            inside_all &= l.V(X) < l.kappa_bar
        vp = lp.V(X)
        X = X[inside_all & (vp >= kappa)]
        if len(X) == 0:
            continue
        vp = lp.V(X)
        for lr in lyaps:
            best = max(best, float(np.max(lr.V(X) / vp)))
    return best


def dwell_time_bound(mu, lam):
    """ln(mu) / ln(1/lam)."""
    if mu < 1:
        raise ValueError("mu must be >= 1")
    if not 0 < lam < 1:
        raise ValueError("lambda must lie in (0, 1)")
    return math.log(mu) / -math.log(lam)


avg_dwell_bound = dwell_time_bound


def integer_dwell(bound):
    """Smallest admissible integer dwell time for a real-valued bound."""
    return int(math.ceil(max(bound, 1.0) - 1e-12))


def ellipse_max_quadratic(c_p, S_p, level_p, c_q, S_q, n_angles=1024):
    """Max of (x - c_q)^T S_q (x - c_q) over the boundary of {V_p <= level_p}."""
    W = _whitener(S_p)
    r = math.sqrt(level_p)
    c_p = np.asarray(c_p, dtype=float)

    def f(theta):
        x = c_p + r * W @ np.array([math.cos(theta), math.sin(theta)])
        d = x - c_q
        return float(d @ S_q @ d)

    angles = np.linspace(0, 2 * np.pi, n_angles, endpoint=False)
    B = ellipse_boundary(c_p, S_p, level_p, angles)
    vals = _kernels.quad_form(np.ascontiguousarray(B), np.asarray(c_q, dtype=float), np.asarray(S_q, dtype=float))
    i = int(np.argmax(vals))
    step = 2 * np.pi / n_angles
    res = minimize_scalar(lambda t: -f(t), bounds=(angles[i] - step, angles[i] + step), method="bounded",
                          options={"xatol": 1e-10})
    return max(float(vals[i]), -float(res.fun))


def check_inclusion(levels, lyaps, kappa_bars=None, margin=INCLUSION_MARGIN, n_angles=1024):
    """Every ellipse {V_p <= levels[p]} lies inside every basin {V_q <= kappa_bar_q}."""
    kb = [l.kappa_bar for l in lyaps] if kappa_bars is None else list(kappa_bars)
    for lp, level in zip(lyaps, levels):
        for lq, k in zip(lyaps, kb):
            if margin * ellipse_max_quadratic(lp.center, lp.S, level, lq.center, lq.S, n_angles) > k:
                return False
    return True


# ---------------------------------------------------------------- certificate

@dataclass(frozen=True, eq=False)
class StabilityCertificate:
    mode: str
    kappa: float
    omega: float
    mu: float
    lambda_max: float
    dwell_bound: float
    lyaps: tuple
    n0: int = None
    feasible: bool = True

    @property
    def omega0_level(self):
        return self.omega

    @property
    def omega_set_level(self):
        if self.mode == "average":
            return self.mu ** self.n0 * self.omega
        return self.omega

    @property
    def dwell(self):
        """Integer dwell time; 0 means unconstrained (nothing to switch to)."""
        if len(self.lyaps) == 1:
            return 0
        return integer_dwell(self.dwell_bound)

    def omega0_ellipses(self):
        return [(l.center, l.S, self.omega0_level) for l in self.lyaps]

    def omega_set_ellipses(self):
        return [(l.center, l.S, self.omega_set_level) for l in self.lyaps]

    def lyap(self, pid):
        return self.lyaps[pid - 1]

    def to_dict(self, config=None):
        d = {
            "format": CERT_FORMAT, "version": 1,
            "mode": self.mode, "kappa": self.kappa, "omega": self.omega, "mu": self.mu,
            "lambda": self.lambda_max,
            "dwell": {"bound": self.dwell_bound, "integer": self.dwell, "n0": self.n0},
            "primitives": [l.to_dict() for l in self.lyaps],
            "levels": {"omega0": self.omega0_level, "omega_set": self.omega_set_level},
            "feasible": self.feasible,
        }
        if config is not None:
            d["config"] = config
        return d

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != CERT_FORMAT:
            raise ValueError(f"not a certificate document (format={d.get('format')!r})")
        lyaps = tuple(QuadLyapunov.from_dict(p) for p in d["primitives"])
        return cls(d["mode"], d["kappa"], d["omega"], d["mu"], d["lambda"], d["dwell"]["bound"], lyaps,
                   d["dwell"].get("n0"), d.get("feasible", True))

    def save(self, path, config=None):
        with open(path, "w") as fh:
            json.dump(self.to_dict(config), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def default_kappa_grid(lyaps, n=KAPPA_GRID_POINTS, lo=KAPPA_GRID_MIN):
    hi = max(l.kappa_bar for l in lyaps)
    return np.logspace(math.log10(lo), math.log10(max(hi, lo * 10)), n)


def scan_kappa(lyaps, mode="fixed", kappa_grid=None, n0=2):
    """All passing (kappa, omega, mu, dwell_bound, set_level) for a fixed lyapunov set."""
    lam = max(l.lam for l in lyaps)
    grid = default_kappa_grid(lyaps) if kappa_grid is None else kappa_grid
    out = []
    for kappa in grid:
        om = omega_bound(kappa, lyaps)
        mu = mu_bound(kappa, lyaps)
        level = mu ** n0 * om if mode == "average" else om
        if check_inclusion([level] * len(lyaps), lyaps):
            out.append((float(kappa), om, mu, dwell_time_bound(mu, lam), level))
    return out


def certify_library(lib, mode="fixed", kappa_grid=None, n0=2, lambdas=LAMBDA_CANDIDATES,
                    ceiling=KAPPA_CEILING, Q=None):
    """Certificate with the smallest integer dwell; ties go to the tightest trapping set
    (the largest one for a single primitive)."""
    if mode not in ("fixed", "average"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "average" and n0 < 1:
        raise ValueError("chatter bound n0 must be >= 1")
    candidates = []
    notes = []
    for lam in lambdas:
        try:
            lyaps = tuple(fit_lyapunov(p, lam, ceiling, Q) for p in lib)
        except NoContractiveLevel as exc:
            notes.append(f"lambda={lam}: {exc}")
            continue
        if not check_feasibility(lib, lyaps):
            notes.append(f"lambda={lam}: fixed points outside each other's basins")
            continue
        passing = scan_kappa(lyaps, mode, kappa_grid, n0)
        for kappa, om, mu, nd, level in passing:
            # nothing to switch to with one primitive, so the whole certified basin is the useful set
            rank = -level if len(lib) == 1 else level
            candidates.append(((integer_dwell(nd), rank, nd), lam, lyaps, kappa, om, mu, nd))
        if not passing:
            notes.append(f"lambda={lam}: no kappa on the grid passes the inclusion test")
    if not candidates:
        raise NoFeasibleKappa("; ".join(notes) or "no candidate lambda")
    _, lam, lyaps, kappa, om, mu, nd = min(candidates, key=lambda c: c[0])
    return StabilityCertificate(mode, kappa, om, mu, max(l.lam for l in lyaps), nd, lyaps,
                                n0 if mode == "average" else None)
