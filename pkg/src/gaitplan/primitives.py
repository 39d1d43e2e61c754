"""Gait primitives as discrete stride maps with polar displacement maps.

A primitive carries a stride map on the 2-D reduced state ``z`` and three
scalar displacement maps (stride length, heading change, bearing) that move
the planar pose once per stride. Synthetic primitives stand in for gaits
produced by a full controller design pipeline.
"""
from dataclasses import dataclass
import json
import math

import numpy as np

from . import _kernels
from ._kernels import monomial_exponents, wrap_angle
from .errors import EnvelopeExceeded, InvalidSpec, NoConvergence, RankDeficient

ENVELOPE = 10.0
FIXED_POINT_TOL = 1e-9
FIXED_POINT_MAX_ITER = 200
FD_STEP = 1e-6

# Synthetic fixed points cluster around this reduced state.
SYNTH_BASE_STATE = (0.35, 1.2)
SYNTH_SPREAD = 0.015

DEFAULT_DEGREES = {"P": 3, "l": 3, "dpsi": 6, "bearing": 5}
LIBRARY_FORMAT = "gaitplan-library"
LIBRARY_VERSION = 1


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    psi: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "psi", wrap_angle(self.psi))

    @property
    def position(self):
        return np.array([self.x, self.y])

    def as_array(self):
        return np.array([self.x, self.y, self.psi])

    def transformed(self, r, alpha):
        """Apply the rigid motion 'rotate by alpha, then translate by r'."""
        c, s = math.cos(alpha), math.sin(alpha)
        return Pose(c * self.x - s * self.y + r[0], s * self.x + c * self.y + r[1], self.psi + alpha)


def check_envelope(z, envelope=ENVELOPE):
    z = np.asarray(z, dtype=float)
    return bool(np.all(np.isfinite(z)) and np.all(np.abs(z) <= envelope))


def n_terms(degree):
    return (degree + 1) * (degree + 2) // 2


class PolyMap2:
    """Polynomial map of (z1, z2) with dense monomial coefficients.

    Monomials are taken in u = (z - center) / scale up to total degree
    ``degree``; ``coefficients`` has shape (output_dim, n_terms(degree)) and
    columns follow :func:`gaitplan._kernels.monomial_exponents`.
    """

    def __init__(self, coefficients, degree, center=(0.0, 0.0), scale=1.0):
        coef = np.array(coefficients, dtype=float)
        if coef.ndim == 1:
            coef = coef[None, :]
        if coef.shape[0] not in (1, 2):
            raise InvalidSpec("output_dim must be 1 or 2")
        if degree < 0 or coef.shape[1] != n_terms(degree):
            raise InvalidSpec(
                f"expected {n_terms(degree)} coefficients per output for degree {degree}, got {coef.shape[1]}")
        if scale <= 0:
            raise InvalidSpec("scale must be positive")
        coef.setflags(write=False)
        self.coefficients = coef
        self.degree = int(degree)
        self.center = np.array(center, dtype=float)
        self.center.setflags(write=False)
        self.scale = float(scale)
        self.exponents = monomial_exponents(self.degree)

    @property
    def output_dim(self):
        return self.coefficients.shape[0]

    def batch(self, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        U = (Z - self.center) / self.scale
        return _kernels.poly_eval(np.ascontiguousarray(U), self.exponents, self.coefficients)

    def __call__(self, z):
        out = self.batch(np.asarray(z, dtype=float).reshape(1, 2))[0]
        return out if self.output_dim == 2 else float(out[0])

    def design_matrix(self, Z):
        U = (np.atleast_2d(Z) - self.center) / self.scale
        return vandermonde(U, self.degree)

    @classmethod
    def fit(cls, Z, Y, degree, center, scale=1.0):
        """Ordinary least squares fit; returns (map, max_abs_residual)."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        V = vandermonde((Z - np.asarray(center)) / scale, degree)
        if V.shape[0] < V.shape[1]:
            raise RankDeficient(f"{V.shape[0]} nodes cannot determine {V.shape[1]} coefficients")
        coef, _, rank, _ = np.linalg.lstsq(V, Y, rcond=None)
        if rank < V.shape[1]:
            raise RankDeficient(f"Vandermonde rank {rank} < {V.shape[1]}")
        residual = float(np.max(np.abs(V @ coef - Y)))
        return cls(coef.T, degree, center, scale), residual

    def to_dict(self):
        return {
            "degree": self.degree,
            "center": self.center.tolist(),
            "scale": self.scale,
            "coefficients": self.coefficients.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["coefficients"], d["degree"], d.get("center", (0.0, 0.0)), d.get("scale", 1.0))

    def __repr__(self):
        return f"PolyMap2(output_dim={self.output_dim}, degree={self.degree})"


def vandermonde(U, degree):
    exps = monomial_exponents(degree)
    U = np.atleast_2d(U)
    return U[:, None, 0] ** exps[None, :, 0] * U[:, None, 1] ** exps[None, :, 1]


def evaluate_batch(f, Z):
    """Evaluate a map on many states; black-box callables are looped."""
    if hasattr(f, "batch"):
        out = f.batch(Z)
        return out if out.shape[1] == 2 else out[:, 0]
    return np.array([f(z) for z in np.atleast_2d(Z)])


@dataclass(frozen=True, eq=False)
class GaitPrimitive:
    id: int
    stride_map: object
    disp_length: object
    disp_heading_change: object
    disp_bearing: object
    fixed_point: np.ndarray
    nominal_turn: float = 0.0
    synth: dict = None
    fit_report: dict = None

    def __post_init__(self):
        fp = np.array(self.fixed_point, dtype=float)
        fp.setflags(write=False)
        object.__setattr__(self, "fixed_point", fp)

    @property
    def is_polynomial(self):
        return all(isinstance(f, PolyMap2) for f in self.maps())

    def maps(self):
        return (self.stride_map, self.disp_length, self.disp_heading_change, self.disp_bearing)

    def displacement(self, z):
        return float(self.disp_length(z)), float(self.disp_heading_change(z)), float(self.disp_bearing(z))


def apply_stride(prim, pose, z, envelope=ENVELOPE):
    """One stride of ``prim`` from (pose, z); the pose never feeds back into z."""
    z = np.asarray(z, dtype=float)
    if not check_envelope(z, envelope):
        raise EnvelopeExceeded(f"state {z} outside envelope {envelope}", state=z)
    length, dpsi, bearing = prim.displacement(z)
    ang = pose.psi + bearing
    new_pose = Pose(pose.x + length * math.cos(ang), pose.y + length * math.sin(ang), pose.psi + dpsi)
    z_next = np.asarray(prim.stride_map(z), dtype=float)
    if not check_envelope(z_next, envelope):
        raise EnvelopeExceeded(f"state {z_next} outside envelope {envelope}", state=z_next)
    return new_pose, z_next


def _as_map(prim_or_map):
    return prim_or_map.stride_map if isinstance(prim_or_map, GaitPrimitive) else prim_or_map


def jacobian(f, z, h=FD_STEP):
    z = np.asarray(z, dtype=float)
    J = np.empty((2, 2))
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        J[:, j] = (np.asarray(f(z + e)) - np.asarray(f(z - e))) / (2 * h)
    return J


def spectral_radius(A):
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def find_fixed_point(prim_or_map, z0, tol=FIXED_POINT_TOL, max_iter=FIXED_POINT_MAX_ITER, envelope=ENVELOPE):
    """Attracting fixed point of a stride map near ``z0``.

    Plain iteration pulls the state into the basin; Newton steps with a
    finite-difference Jacobian polish the result. Expansive maps diverge out
    of the envelope or exhaust the iteration cap.
    """
    f = _as_map(prim_or_map)
    z = np.array(z0, dtype=float)
    for _ in range(max_iter):
        fz = np.asarray(f(z), dtype=float)
        r = fz - z
        res = float(np.linalg.norm(r))
        if res <= tol:
            break
        if not check_envelope(fz, envelope):
            raise NoConvergence("iteration left the state envelope")
        if res < 1e-3:
            J = jacobian(f, z) - np.eye(2)
            try:
                step = np.linalg.solve(J, -r)
            except np.linalg.LinAlgError:
                step = r
            cand = z + step
            if np.linalg.norm(np.asarray(f(cand)) - cand) < res:
                z = cand
                continue
        z = fz
    else:
        raise NoConvergence(f"no fixed point within {max_iter} iterations")
    if spectral_radius(jacobian(f, z)) >= 1.0:
        raise NoConvergence("fixed point is not attracting")
    return z


def linearize(prim, at=None):
    """Central-difference Jacobian of the stride map and its spectral radius."""
    z = prim.fixed_point if at is None else np.asarray(at, dtype=float)
    A = jacobian(_as_map(prim), z)
    return A, spectral_radius(A)


# ---------------------------------------------------------------- synthesis

def synth_fixed_point(nominal_turn):
    """Fixed point assigned to a synthetic gait with the given nominal turn."""
    return np.array([
        SYNTH_BASE_STATE[0] + SYNTH_SPREAD * math.sin(nominal_turn),
        SYNTH_BASE_STATE[1] + 0.25 * SYNTH_SPREAD * (1.0 - math.cos(nominal_turn)),
    ])


def _quadratic_map(const, lin, quad, center, scale=1.0):
    # const: (m,), lin: (m, 2), quad: (m, 3) for monomials u1^2, u1 u2, u2^2
    const = np.atleast_1d(const)
    m = const.shape[0]
    coef = np.zeros((m, n_terms(2)))
    coef[:, 0] = const
    coef[:, 1:3] = np.reshape(lin, (m, 2))
    coef[:, 3:6] = np.reshape(quad, (m, 3))
    return PolyMap2(coef, 2, center, scale)


def synth_primitive(nominal_turn, stride_length=0.5, contraction=0.12, seed=0, pid=1):
    """Ground-truth synthetic primitive.

    Stride map z* + A (z - z*) + q(z - z*) with spectral radius of A equal to
    ``contraction`` and seeded quadratic coefficients bounded by
    0.1 * contraction. Displacements are quadratics pinned at the fixed point
    to (stride_length, nominal_turn, nominal_turn / 2).
    """
    if not (0.0 < contraction < 1.0):
        raise InvalidSpec(f"contraction must lie in (0, 1), got {contraction}")
    if not stride_length > 0:
        raise InvalidSpec(f"stride_length must be positive, got {stride_length}")
    if not abs(nominal_turn) <= math.pi / 2:
        raise InvalidSpec(f"|nominal_turn| must be at most pi/2, got {nominal_turn}")
    rng = np.random.default_rng(seed)
    zs = synth_fixed_point(nominal_turn)

    ratio = rng.uniform(0.3, 0.8)
    shear = rng.uniform(-0.5, 0.5) * contraction
    phi = rng.uniform(-math.pi, math.pi)
    T = np.array([[contraction, shear], [0.0, ratio * contraction]])
    R = np.array([[math.cos(phi), -math.sin(phi)], [math.sin(phi), math.cos(phi)]])
    A = R @ T @ R.T
    quad = rng.uniform(-0.1, 0.1, size=(2, 3)) * contraction
    stride = _quadratic_map(zs, A, quad, zs)

    length = _quadratic_map(
        stride_length, rng.uniform(-0.5, 0.5, 2) * stride_length, rng.uniform(-0.5, 0.5, 3) * stride_length, zs)
    dpsi = _quadratic_map(nominal_turn, rng.uniform(-0.5, 0.5, 2), rng.uniform(-0.5, 0.5, 3), zs)
    bearing = _quadratic_map(0.5 * nominal_turn, rng.uniform(-0.5, 0.5, 2), rng.uniform(-0.5, 0.5, 3), zs)
    synth = {"nominal_turn": float(nominal_turn), "stride_length": float(stride_length),
             "contraction": float(contraction), "seed": int(seed)}
    prim = GaitPrimitive(pid, stride, length, dpsi, bearing, zs, float(nominal_turn), synth=synth)
    return prim


# ---------------------------------------------------------------- library

@dataclass(frozen=True, eq=False)
class GaitLibrary:
    primitives: tuple

    def __post_init__(self):
        prims = tuple(self.primitives)
        if not prims:
            raise InvalidSpec("a gait library needs at least one primitive")
        ids = [p.id for p in prims]
        if sorted(ids) != list(range(1, len(prims) + 1)):
            raise InvalidSpec(f"primitive ids must be 1..{len(prims)}, got {ids}")
        object.__setattr__(self, "primitives", tuple(sorted(prims, key=lambda p: p.id)))

    def __len__(self):
        return len(self.primitives)

    def __iter__(self):
        return iter(self.primitives)

    def __getitem__(self, pid):
        return self.primitives[pid - 1]

    @property
    def ids(self):
        return [p.id for p in self.primitives]

    @property
    def straight_id(self):
        return min(self.primitives, key=lambda p: (abs(p.nominal_turn), p.id)).id

    def fixed_points(self):
        return np.array([p.fixed_point for p in self.primitives])

    def centroid(self):
        return self.fixed_points().mean(axis=0)


def _sub_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def synth_library(turns, stride_length=0.5, contraction=0.12, seed=0, degrees=False):
    """Synthetic library, one primitive per nominal turn (radians unless
    ``degrees``)."""
    turns = [math.radians(t) if degrees else float(t) for t in turns]
    if not turns:
        raise InvalidSpec("empty turn set")
    rounded = [round(t, 12) for t in turns]
    if len(set(rounded)) != len(rounded):
        raise InvalidSpec(f"duplicate turns in {turns}")
    prims = [synth_primitive(t, stride_length, contraction, _sub_seed(seed, i), pid=i + 1)
             for i, t in enumerate(turns)]
    return GaitLibrary(tuple(prims))


def standard_turns(n_primitives):
    """Turn sets (degrees) for 3, 5 and 9 primitive libraries."""
    sets = {
        1: [0],
        3: [0, -45, 45],
        5: [0, -45, 45, -30, 30],
        9: [0, -45, 45, -30, 30, -20, 20, -10, 10],
    }
    if n_primitives not in sets:
        raise InvalidSpec(f"no standard turn set with {n_primitives} primitives")
    return sets[n_primitives]


# ---------------------------------------------------------------- fitting

@dataclass(frozen=True)
class MeshSpec:
    center: tuple
    half_width: float
    nodes_per_axis: int = 20

    def __post_init__(self):
        if self.half_width <= 0:
            raise InvalidSpec("half_width must be positive")
        if self.nodes_per_axis < 2:
            raise InvalidSpec("need at least 2 nodes per axis")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @classmethod
    def for_library(cls, lib, half_width=0.05, nodes_per_axis=20):
        return cls(tuple(lib.centroid()), half_width, nodes_per_axis)

    def nodes(self):
        g = np.linspace(-self.half_width, self.half_width, self.nodes_per_axis)
        G1, G2 = np.meshgrid(g + self.center[0], g + self.center[1], indexing="ij")
        return np.column_stack([G1.ravel(), G2.ravel()])

    def covers(self, cert):
        """True when every trapping-set ellipse of ``cert`` lies in the mesh box."""
        for c, S, level in cert.omega_set_ellipses():
            half = np.sqrt(level * np.diag(np.linalg.inv(S)))
            if np.any(np.abs(c - np.array(self.center)) + half > self.half_width + 1e-12):
                return False
        return True


def fit_poly_actions(truth, mesh, degrees=None, cert=None):
    """Least-squares polynomial surrogate of ``truth`` on the mesh nodes."""
    deg = dict(DEFAULT_DEGREES)
    if degrees:
        deg.update(degrees)
    if cert is not None and not mesh.covers(cert):
        raise InvalidSpec("mesh does not cover the certified trapping set")
    Z = mesh.nodes()
    center, scale = mesh.center, mesh.half_width
    stride, r_p = PolyMap2.fit(Z, evaluate_batch(truth.stride_map, Z), deg["P"], center, scale)
    length, r_l = PolyMap2.fit(Z, evaluate_batch(truth.disp_length, Z), deg["l"], center, scale)
    dpsi, r_d = PolyMap2.fit(Z, evaluate_batch(truth.disp_heading_change, Z), deg["dpsi"], center, scale)
    bearing, r_b = PolyMap2.fit(Z, evaluate_batch(truth.disp_bearing, Z), deg["bearing"], center, scale)
    zs = find_fixed_point(stride, truth.fixed_point)
    report = {"max_residual": {"P": r_p, "l": r_l, "dpsi": r_d, "bearing": r_b},
              "degrees": deg, "mesh": {"center": list(center), "half_width": scale,
                                       "nodes_per_axis": mesh.nodes_per_axis}}
    return GaitPrimitive(truth.id, stride, length, dpsi, bearing, zs, truth.nominal_turn, fit_report=report)


def fit_library(lib, mesh, degrees=None, cert=None):
    return GaitLibrary(tuple(fit_poly_actions(p, mesh, degrees, cert) for p in lib))


# ---------------------------------------------------------------- serialization

def primitive_to_dict(prim):
    if not prim.is_polynomial:
        raise TypeError(f"primitive {prim.id} has black-box evaluators and cannot be serialized")
    d = {
        "id": prim.id,
        "nominal_turn": prim.nominal_turn,
        "fixed_point": prim.fixed_point.tolist(),
        "degrees": {"P": prim.stride_map.degree, "l": prim.disp_length.degree,
                    "dpsi": prim.disp_heading_change.degree, "bearing": prim.disp_bearing.degree},
        "maps": {"P": prim.stride_map.to_dict(), "l": prim.disp_length.to_dict(),
                 "dpsi": prim.disp_heading_change.to_dict(), "bearing": prim.disp_bearing.to_dict()},
    }
    if prim.synth is not None:
        d["synth"] = dict(prim.synth)
    if prim.fit_report is not None:
        d["fit_report"] = prim.fit_report
    return d


def primitive_from_dict(d):
    m = d["maps"]
    return GaitPrimitive(
        int(d["id"]), PolyMap2.from_dict(m["P"]), PolyMap2.from_dict(m["l"]),
        PolyMap2.from_dict(m["dpsi"]), PolyMap2.from_dict(m["bearing"]),
        np.array(d["fixed_point"]), float(d.get("nominal_turn", 0.0)),
        synth=d.get("synth"), fit_report=d.get("fit_report"))


def library_to_dict(lib, config=None):
    d = {"format": LIBRARY_FORMAT, "version": LIBRARY_VERSION,
         "primitives": [primitive_to_dict(p) for p in lib]}
    if config is not None:
        d["config"] = config
    return d


def library_from_dict(d):
    if d.get("format") != LIBRARY_FORMAT:
        raise InvalidSpec(f"not a gait library document (format={d.get('format')!r})")
    if d.get("version") != LIBRARY_VERSION:
        raise InvalidSpec(f"unsupported library version {d.get('version')}")
    return GaitLibrary(tuple(primitive_from_dict(p) for p in d["primitives"]))


def replay_synthetic(d):
    """Rebuild a synthetic primitive from its recorded synthesis parameters."""
    s = d["synth"]
    return synth_primitive(s["nominal_turn"], s["stride_length"], s["contraction"], s["seed"], pid=int(d["id"]))


def save_library(lib, path, config=None):
    with open(path, "w") as fh:
        json.dump(library_to_dict(lib, config), fh, indent=1)


def load_library(path):
    with open(path) as fh:
        return library_from_dict(json.load(fh))
