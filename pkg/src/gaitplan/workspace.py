"""Planar workspace: convex obstacles, safe walking corridors, moving obstacles."""
from dataclasses import dataclass, field
import heapq
import json
import math

import numpy as np
from scipy.ndimage import distance_transform_edt, label
from scipy.optimize import linprog

from . import _kernels
from .errors import InvalidSpec, NoPath, PlacementFailure
from .primitives import Pose

TOL = 1e-9
WORKSPACE_FORMAT = "gaitplan-workspace"


class ConvexPolygon:
    """Bounded convex polygon {x : a_i . x <= b_i} with unit normals a_i."""

    def __init__(self, A, b):
        A = np.array(A, dtype=float).reshape(-1, 2)
        b = np.array(b, dtype=float).reshape(-1)
        norms = np.linalg.norm(A, axis=1)
        if np.any(norms <= 0):
            raise InvalidSpec("zero halfspace normal")
        self.A = A / norms[:, None]
        self.b = b / norms
        self.vertices = _vertices_from_halfspaces(self.A, self.b)
        for arr in (self.A, self.b, self.vertices):
            arr.setflags(write=False)

    @classmethod
    def from_vertices(cls, V):
        V = _convex_hull(np.asarray(V, dtype=float))
        if len(V) < 3:
            raise InvalidSpec("polygon needs 3 non-collinear vertices")
        E = np.roll(V, -1, axis=0) - V
        A = np.column_stack([E[:, 1], -E[:, 0]])
        A /= np.linalg.norm(A, axis=1)[:, None]
        b = np.einsum("ij,ij->i", A, V)
        return cls(A, b)

    @classmethod
    def box(cls, xmin, xmax, ymin, ymax):
        return cls([[1, 0], [-1, 0], [0, 1], [0, -1]], [xmax, -xmin, ymax, -ymin])

    @property
    def bbox(self):
        v = self.vertices
        return float(v[:, 0].min()), float(v[:, 0].max()), float(v[:, 1].min()), float(v[:, 1].max())

    @property
    def area(self):
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    def contains(self, p, tol=TOL):
        P = np.atleast_2d(np.asarray(p, dtype=float))
        out = np.all(P @ self.A.T <= self.b + tol, axis=1)
        return bool(out[0]) if np.ndim(p) == 1 else out

    def contains_interior(self, p, tol=TOL):
        P = np.atleast_2d(np.asarray(p, dtype=float))
        out = np.all(P @ self.A.T < self.b - tol, axis=1)
        return bool(out[0]) if np.ndim(p) == 1 else out

    def intersect(self, other):
        return ConvexPolygon(np.vstack([self.A, other.A]), np.concatenate([self.b, other.b]))

    def to_dict(self):
        return {"halfspaces": [[float(a[0]), float(a[1]), float(bb)] for a, bb in zip(self.A, self.b)]}

    @classmethod
    def from_dict(cls, d):
        if "halfspaces" in d:
            H = np.asarray(d["halfspaces"], dtype=float)
            return cls(H[:, :2], H[:, 2])
        return cls.from_vertices(d["vertices"])

    def __repr__(self):
        return f"ConvexPolygon({len(self.vertices)} vertices, bbox={tuple(round(v, 3) for v in self.bbox)})"


def contains(poly, p):
    return poly.contains(p)


def _convex_hull(P):
    """Andrew's monotone chain; counterclockwise, no repeated endpoint."""
    P = np.unique(np.round(P, 12), axis=0)
    if len(P) < 3:
        return P
    pts = sorted(map(tuple, P))

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 1e-15:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 1e-15:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _vertices_from_halfspaces(A, b):
    ang = np.sort(np.arctan2(A[:, 1], A[:, 0]))
    gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))
    if len(A) < 3 or np.max(gaps) >= np.pi - 1e-12:
        raise InvalidSpec("halfspaces do not bound a polygon")
    pts = []
    m = len(A)
    for i in range(m):
        for j in range(i + 1, m):
            M = np.array([A[i], A[j]])
            if abs(np.linalg.det(M)) < 1e-12:
                continue
            x = np.linalg.solve(M, [b[i], b[j]])
            if np.all(A @ x <= b + 1e-9 * max(1.0, np.max(np.abs(b)))):
                pts.append(x)
    if len(pts) < 3:
        raise InvalidSpec("empty or degenerate polygon")
    V = _convex_hull(np.array(pts)) + 0.0
    if len(V) < 3:
        raise InvalidSpec("polygon has empty interior")
    return V


def chebyshev_center(A, b):
    """Center and radius of the largest disc inside {A x <= b} (linear program)."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    norms = np.linalg.norm(A, axis=1)
    c = np.array([0.0, 0.0, -1.0])
    res = linprog(c, A_ub=np.column_stack([A, norms]), b_ub=b, bounds=[(None, None), (None, None), (0, None)],
                  method="highs")
    if res.status != 0:
        return None, -np.inf
    return res.x[:2], float(res.x[2])


def polygons_interiors_disjoint(P, Q, tol=TOL):
    """Separating-axis test over both polygons' edge normals."""
    for A in (P.A, Q.A):
        pp = P.vertices @ A.T
        qq = Q.vertices @ A.T
        if np.any((pp.max(axis=0) <= qq.min(axis=0) + tol) | (qq.max(axis=0) <= pp.min(axis=0) + tol)):
            return True
    return False


# ---------------------------------------------------------------- containers

@dataclass(frozen=True, eq=False)
class Workspace:
    bounds: tuple
    static_obstacles: tuple
    start: Pose
    goal: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple(float(v) for v in self.bounds))
        object.__setattr__(self, "static_obstacles", tuple(self.static_obstacles))
        object.__setattr__(self, "goal", np.array(self.goal, dtype=float))
        for name, p in (("start", self.start.position), ("goal", self.goal)):
            if not self.in_bounds(p):
                raise InvalidSpec(f"{name} {p} outside bounds")
            for ob in self.static_obstacles:
                if ob.contains_interior(p):
                    raise InvalidSpec(f"{name} {p} inside an obstacle")

    def in_bounds(self, p):
        x0, x1, y0, y1 = self.bounds
        return x0 - TOL <= p[0] <= x1 + TOL and y0 - TOL <= p[1] <= y1 + TOL

    @property
    def bounds_polygon(self):
        return ConvexPolygon.box(*self.bounds)

    @property
    def area(self):
        x0, x1, y0, y1 = self.bounds
        return (x1 - x0) * (y1 - y0)

    def packed_obstacles(self):
        """Stacked halfspaces for the occupancy kernels."""
        if not self.static_obstacles:
            return np.zeros((0, 2)), np.zeros(0), np.zeros(1, dtype=np.int64), np.zeros((0, 4))
        A = np.vstack([o.A for o in self.static_obstacles])
        b = np.concatenate([o.b for o in self.static_obstacles])
        starts = np.concatenate([[0], np.cumsum([len(o.b) for o in self.static_obstacles])]).astype(np.int64)
        bboxes = np.array([o.bbox for o in self.static_obstacles])
        return A, b, starts, bboxes

    def occupancy(self, n_samples=100_000, seed=0):
        """Fraction of the bounds covered by obstacles (Monte Carlo)."""
        if not self.static_obstacles:
            return 0.0
        rng = np.random.default_rng(seed)
        x0, x1, y0, y1 = self.bounds
        P = np.column_stack([rng.uniform(x0, x1, n_samples), rng.uniform(y0, y1, n_samples)])
        return float(np.mean(_kernels.points_in_any(P, *self.packed_obstacles())))


@dataclass(frozen=True, eq=False)
class Corridor:
    polytopes: tuple
    waypoints: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "polytopes", tuple(self.polytopes))
        W = np.array(self.waypoints, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "waypoints", W)

    def __len__(self):
        return len(self.polytopes)

    def to_dict(self):
        return {"polytopes": [p.to_dict() for p in self.polytopes], "waypoints": self.waypoints.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(ConvexPolygon.from_dict(p) for p in d["polytopes"]), d.get("waypoints", []))

    def route_length(self, start, goal):
        pts = np.vstack([np.asarray(start)[None, :2], self.waypoints, np.asarray(goal)[None, :]])
        return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


class MovingObstacle:
    """Ellipse {(p - c_k)^T E (p - c_k) <= 1} whose center is known per stride."""

    def __init__(self, center_at, E, spec=None):
        E = np.array(E, dtype=float)
        if np.max(np.abs(E - E.T)) > 1e-12 or np.min(np.linalg.eigvalsh(0.5 * (E + E.T))) <= 0:
            raise InvalidSpec("obstacle shape must be symmetric positive definite")
        self.E = 0.5 * (E + E.T)
        self.center_at = center_at
        self.spec = spec

    @classmethod
    def linear(cls, p0, velocity, E, stride_period=0.8):
        """Constant-velocity obstacle; ``velocity`` in m/s, one sample per stride."""
        p0 = np.array(p0, dtype=float)
        v = np.array(velocity, dtype=float)
        spec = {"kind": "linear", "p0": p0.tolist(), "velocity": v.tolist(), "stride_period": stride_period}
        return cls(lambda k: p0 + v * (k * stride_period), E, spec)

    @classmethod
    def from_waypoints(cls, centers, E):
        C = np.array(centers, dtype=float).reshape(-1, 2)
        spec = {"kind": "waypoints", "centers": C.tolist()}
        return cls(lambda k: C[min(max(int(k), 0), len(C) - 1)], E, spec)

    def center(self, k):
        return np.asarray(self.center_at(k), dtype=float)

    def F(self, p, k):
        d = np.asarray(p, dtype=float) - self.center(k)
        return float(d @ self.E @ d)

    def to_dict(self):
        if self.spec is None:
            raise TypeError("obstacle built from a bare callable cannot be serialized")
        return dict(self.spec, E=self.E.ravel().tolist())

    @classmethod
    def from_dict(cls, d):
        E = np.reshape(d["E"], (2, 2))
        if d.get("kind", "linear") == "linear":
            return cls.linear(d["p0"], d["velocity"], E, d.get("stride_period", 0.8))
        return cls.from_waypoints(d["centers"], E)


def moving_obstacle_clear(p, obs, stride_k):
    F = obs.F(p, stride_k)
    return F > 1.0, F


# ---------------------------------------------------------------- validation

@dataclass
class ValidationReport:
    violations: list

    @property
    def valid(self):
        return not self.violations

    def __bool__(self):
        return self.valid


def validate_corridor(corridor, workspace, min_overlap=1e-6):
    v = []
    H = corridor.polytopes
    M = len(H)
    if M == 0:
        return ValidationReport(["corridor has no polytopes"])
    if not H[0].contains(workspace.start.position):
        v.append("start not in first polytope")
    if not H[-1].contains(workspace.goal):
        v.append("goal not in last polytope")
    if len(corridor.waypoints) != M - 1:
        v.append(f"expected {M - 1} waypoints, got {len(corridor.waypoints)}")
    for i in range(M - 1):
        _, r = chebyshev_center(np.vstack([H[i].A, H[i + 1].A]), np.concatenate([H[i].b, H[i + 1].b]))
        if r <= min_overlap:
            v.append(f"consecutive intersection empty between polytopes {i} and {i + 1}")
        if i < len(corridor.waypoints):
            w = corridor.waypoints[i]
            if not (H[i].contains(w) and H[i + 1].contains(w)):
                v.append(f"waypoint {i} not in the intersection of polytopes {i} and {i + 1}")
    for i, P in enumerate(H):
        for j, ob in enumerate(workspace.static_obstacles):
            if not polygons_interiors_disjoint(P, ob):
                v.append(f"polytope {i} overlaps obstacle {j}")
    return ValidationReport(v)


# ---------------------------------------------------------------- grid search

class _ObstacleSet:
    def __init__(self, obstacles):
        self.obstacles = list(obstacles)
        self.bboxes = np.array([o.bbox for o in self.obstacles]).reshape(-1, 4)

    def box_blocked(self, xmin, xmax, ymin, ymax):
        """Whether an axis-aligned box overlaps any obstacle interior."""
        bb = self.bboxes
        if len(bb) == 0:
            return False
        cand = np.nonzero((bb[:, 0] < xmax - TOL) & (bb[:, 1] > xmin + TOL) &
                          (bb[:, 2] < ymax - TOL) & (bb[:, 3] > ymin + TOL))[0]
        if len(cand) == 0:
            return False
        corners = np.array([[xmin, ymin], [xmax, ymin], [xmax, ymax], [xmin, ymax]])
        for k in cand:
            ob = self.obstacles[k]
            qq = corners @ ob.A.T
            pp = ob.vertices @ ob.A.T
            if np.any(qq.min(axis=0) >= pp.max(axis=0) - TOL):
                continue
            return True
        return False

    def grid(self, bounds, cell, clearance, walls=True):
        x0, x1, y0, y1 = bounds
        nx = int(math.ceil((x1 - x0) / cell - 1e-9))
        ny = int(math.ceil((y1 - y0) / cell - 1e-9))
        blocked = np.zeros((nx, ny), dtype=bool)
        cx = x0 + (np.arange(nx) + 0.5) * cell
        cy = y0 + (np.arange(ny) + 0.5) * cell
        h = 0.5 * cell + clearance
        for ob in self.obstacles:
            bx0, bx1, by0, by1 = ob.bbox
            i0 = max(0, int(math.floor((bx0 - h - x0) / cell)))
            i1 = min(nx, int(math.ceil((bx1 + h - x0) / cell)) + 1)
            j0 = max(0, int(math.floor((by0 - h - y0) / cell)))
            j1 = min(ny, int(math.ceil((by1 + h - y0) / cell)) + 1)
            if i0 >= i1 or j0 >= j1:
                continue
            CX, CY = np.meshgrid(cx[i0:i1], cy[j0:j1], indexing="ij")
            C = np.column_stack([CX.ravel(), CY.ravel()])
            sep = np.zeros(len(C), dtype=bool)
            # axes: obstacle normals plus the box axes
            axes = np.vstack([ob.A, [[1.0, 0.0], [0.0, 1.0]]])
            for a in axes:
                rad = h * (abs(a[0]) + abs(a[1]))
                proj = C @ a
                pv = ob.vertices @ a
                sep |= (proj + rad <= pv.min() + TOL) | (proj - rad >= pv.max() - TOL)
            blocked[i0:i1, j0:j1] |= ~sep.reshape(CX.shape)
        if walls and clearance > 0:
            # the workspace walls get the same clearance as obstacles
            blocked[(cx - 0.5 * cell < x0 + clearance) | (cx + 0.5 * cell > x1 - clearance), :] = True
            blocked[:, (cy - 0.5 * cell < y0 + clearance) | (cy + 0.5 * cell > y1 - clearance)] = True
        return blocked


def _cell_of(p, bounds, cell, shape):
    i = int((p[0] - bounds[0]) // cell)
    j = int((p[1] - bounds[2]) // cell)
    return min(max(i, 0), shape[0] - 1), min(max(j, 0), shape[1] - 1)


def grid_astar(blocked, start, goal, penalty=None):
    """8-connected A* without corner cutting; returns a list of cells or None.

    ``penalty`` (same shape, >= 0) scales the cost of entering a cell by
    1 + penalty, which keeps the octile heuristic admissible.
    """
    nx, ny = blocked.shape
    if blocked[start] or blocked[goal]:
        return None
    SQ2 = math.sqrt(2.0)

    def h(c):
        dx, dy = abs(c[0] - goal[0]), abs(c[1] - goal[1])
        return (dx + dy) + (SQ2 - 2) * min(dx, dy)

    g = {start: 0.0}
    parent = {start: None}
    heap = [(h(start), 0, start)]
    counter = 0
    closed = set()
    moves = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)]
    while heap:
        _, _, c = heapq.heappop(heap)
        if c in closed:
            continue
        if c == goal:
            path = []
            while c is not None:
                path.append(c)
                c = parent[c]
            return path[::-1]
        closed.add(c)
        for dx, dy in moves:
            n = (c[0] + dx, c[1] + dy)
            if not (0 <= n[0] < nx and 0 <= n[1] < ny) or blocked[n] or n in closed:
                continue
            if dx and dy and (blocked[c[0] + dx, c[1]] or blocked[c[0], c[1] + dy]):
                continue
            ng = g[c] + (SQ2 if dx and dy else 1.0) * (1.0 if penalty is None else 1.0 + penalty[n])
            if ng < g.get(n, np.inf):
                g[n] = ng
                parent[n] = c
                counter += 1
                heapq.heappush(heap, (ng + h(n), counter, n))
    return None


def grid_path(workspace, cell=0.25, clearance=0.5, prefer=2.0, weight=2.0):
    """A* on the occupancy grid.

    Cells closer than ``prefer`` meters to an obstacle cost up to
    1 + ``weight`` times more, so the path keeps to open space. When no
    path keeps the hard clearance it is relaxed: walls first, then halved,
    then dropped.
    """
    obs = _ObstacleSet(workspace.static_obstacles)
    base = obs.grid(workspace.bounds, cell, 0.0)
    penalty = None
    if prefer > 0 and weight > 0:
        # distance to the nearest blocked cell or wall
        d = distance_transform_edt(np.pad(~base, 1, constant_values=False))[1:-1, 1:-1] * cell
        penalty = weight * np.clip(1.0 - d / prefer, 0.0, 1.0)
    levels = [(clearance, True), (clearance, False), (clearance / 2, True), (clearance / 2, False)]
    levels = [lv for lv in levels if clearance > 0] + [(0.0, False)]
    for clr, walls in levels:
        blocked = base if clr == 0 else obs.grid(workspace.bounds, cell, clr, walls)
        s = _cell_of(workspace.start.position, workspace.bounds, cell, blocked.shape)
        g = _cell_of(workspace.goal, workspace.bounds, cell, blocked.shape)
        path = grid_astar(blocked, s, g, penalty)
        if path is not None:
            return path, clr
    return None, None


def _inflate(rect, obs, bounds, steps):
    rect = list(rect)
    x0, x1, y0, y1 = bounds
    for step in steps:
        open_ = [True, True, True, True]  # -x, +x, -y, +y
        while any(open_):
            for side in range(4):
                if not open_[side]:
                    continue
                r = list(rect)
                if side == 0:
                    r[0] = max(x0, rect[0] - step)
                    strip = (r[0], rect[0], r[2], r[3])
                elif side == 1:
                    r[1] = min(x1, rect[1] + step)
                    strip = (rect[1], r[1], r[2], r[3])
                elif side == 2:
                    r[2] = max(y0, rect[2] - step)
                    strip = (r[0], r[1], r[2], rect[2])
                else:
                    r[3] = min(y1, rect[3] + step)
                    strip = (r[0], r[1], rect[3], r[3])
                if strip[1] - strip[0] <= TOL or strip[3] - strip[2] <= TOL or obs.box_blocked(*strip):
                    open_[side] = False
                else:
                    rect = r
    return tuple(rect)


def _box_inside(inner, outer):
    return (inner[0] >= outer[0] - TOL and inner[1] <= outer[1] + TOL and
            inner[2] >= outer[2] - TOL and inner[3] <= outer[3] + TOL)


def _box_overlap(a, b):
    return max(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), min(a[3], b[3])


def extract_corridor(workspace, seed=0, cell=0.25, clearance=1.0, min_overlap=0.25):
    """Grid A* seed path, then greedily inflated axis-aligned rectangles.

    ``seed`` is recorded only; the extractor is deterministic.
    """
    path, _ = grid_path(workspace, cell, clearance)
    if path is None:
        raise NoPath("no grid path from start to goal")
    obs = _ObstacleSet(workspace.static_obstacles)
    bx0, _, by0, _ = workspace.bounds

    def cbox(c):
        return (bx0 + c[0] * cell, bx0 + (c[0] + 1) * cell, by0 + c[1] * cell, by0 + (c[1] + 1) * cell)

    steps = (cell, cell / 4, cell / 16)
    rects = [_inflate(cbox(path[0]), obs, workspace.bounds, steps)]
    j = 0
    n = len(path) - 1
    while True:
        while j < n and _box_inside(cbox(path[j + 1]), rects[-1]):
            j += 1
        if j == n:
            break
        a, b = cbox(path[j]), cbox(path[j + 1])
        seed_box = (min(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), max(a[3], b[3]))
        rects.append(_inflate(seed_box, obs, workspace.bounds, steps))
        j += 1
    # drop rectangles bypassed by a wide enough overlap further along the chain
    keep = [0]
    i = 0
    while i < len(rects) - 1:
        nxt = i + 1
        for k in range(len(rects) - 1, i + 1, -1):
            o = _box_overlap(rects[i], rects[k])
            if min(o[1] - o[0], o[3] - o[2]) >= 2 * min_overlap:
                nxt = k
                break
        keep.append(nxt)
        i = nxt
    rects = [rects[k] for k in keep]
    if not ConvexPolygon.box(*rects[-1]).contains(workspace.goal):
        raise NoPath("corridor does not reach the goal")
    polys = tuple(ConvexPolygon.box(*r) for r in rects)
    wps = []
    for r1, r2 in zip(rects[:-1], rects[1:]):
        o = _box_overlap(r1, r2)
        wps.append([(o[0] + o[1]) / 2, (o[2] + o[3]) / 2])
    return Corridor(polys, np.array(wps).reshape(-1, 2))


# ---------------------------------------------------------------- generator

def _random_shape(rng):
    """Unit-area convex shape centered near the origin."""
    if rng.random() < 0.5:
        w = 1.0
        h = rng.uniform(0.25, 1.0)
        V = np.array([[-w, -h], [w, -h], [w, h], [-w, h]]) / 2
    else:
        k = int(rng.integers(3, 8))
        ang = np.sort(rng.uniform(0, 2 * np.pi, k))
        while np.max(np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))) > 0.8 * np.pi:
            ang = np.sort(rng.uniform(0, 2 * np.pi, k))
        ax = rng.uniform(0.5, 1.0)
        V = np.column_stack([np.cos(ang), ax * np.sin(ang)])
    th = rng.uniform(0, np.pi)
    R = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    V = V @ R.T
    V = _convex_hull(V)
    x, y = V[:, 0], V[:, 1]
    area = 0.5 * abs(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
    V = V / math.sqrt(area)
    return V - V.mean(axis=0)


def _point_polygon_distance(p, V):
    inside = True
    best = np.inf
    n = len(V)
    for i in range(n):
        a, b = V[i], V[(i + 1) % n]
        e = b - a
        if e[0] * (p[1] - a[1]) - e[1] * (p[0] - a[0]) < 0:
            inside = False
        t = np.clip(np.dot(p - a, e) / np.dot(e, e), 0.0, 1.0)
        best = min(best, float(np.linalg.norm(p - (a + t * e))))
    return 0.0 if inside else best


def default_start_goal(bounds):
    x0, x1, y0, y1 = bounds
    start = np.array([x0 + 0.05 * (x1 - x0), y0 + 0.05 * (y1 - y0)])
    goal = np.array([x0 + 0.95 * (x1 - x0), y0 + 0.95 * (y1 - y0)])
    psi = math.atan2(goal[1] - start[1], goal[0] - start[0])
    return Pose(start[0], start[1], psi), goal


def _place(shapes, sizes, centers, scale, start, goal, clearance):
    placed = []
    for V0, a, C in zip(shapes, sizes, centers):
        V0 = V0 * (scale * math.sqrt(a))
        for c in C:
            V = V0 + c
            if (_point_polygon_distance(start, V) > clearance and _point_polygon_distance(goal, V) > clearance):
                placed.append(V)
                break
        else:
            return None
    return placed


def _pack_ccw(polys):
    """Halfspace packing of counterclockwise vertex arrays (kernel layout)."""
    A, b, bb = [], [], []
    for V in polys:
        E = np.roll(V, -1, axis=0) - V
        N = np.column_stack([E[:, 1], -E[:, 0]])
        N /= np.linalg.norm(N, axis=1)[:, None]
        A.append(N)
        b.append(np.einsum("ij,ij->i", N, V))
        bb.append((V[:, 0].min(), V[:, 0].max(), V[:, 1].min(), V[:, 1].max()))
    starts = np.concatenate([[0], np.cumsum([len(x) for x in b])]).astype(np.int64)
    return np.vstack(A), np.concatenate(b), starts, np.array(bb)


def grid_connected(workspace, cell=0.25, clearance=1.0, wall_clearance=0.5):
    """Whether start and goal cells share a free component at this clearance.

    Without corner cutting, 8-connected moves reach exactly the 4-connected
    component, so labeling is equivalent to a search.
    """
    blocked = _ObstacleSet(workspace.static_obstacles).grid(workspace.bounds, cell, clearance, walls=False)
    x0, x1, y0, y1 = workspace.bounds
    # never wall off the start or goal cell themselves
    margin = min(min(q[0] - x0, x1 - q[0], q[1] - y0, y1 - q[1]) for q in (workspace.start.position, workspace.goal))
    wall_clearance = min(wall_clearance, margin - cell)
    if wall_clearance > 0:
        cx = x0 + (np.arange(blocked.shape[0]) + 0.5) * cell
        cy = y0 + (np.arange(blocked.shape[1]) + 0.5) * cell
        h = 0.5 * cell + wall_clearance
        blocked[(cx - h < x0) | (cx + h > x1), :] = True
        blocked[:, (cy - h < y0) | (cy + h > y1)] = True
    s = _cell_of(workspace.start.position, workspace.bounds, cell, blocked.shape)
    g = _cell_of(workspace.goal, workspace.bounds, cell, blocked.shape)
    if blocked[s] or blocked[g]:
        return False
    lab, _ = label(~blocked)
    return bool(lab[s] == lab[g])


def random_environment(seed, n_obstacles=30, occupancy_target=0.40, bounds=(0.0, 50.0, 0.0, 50.0),
                       clearance=1.0, n_samples=100_000, require_path=True, max_retries=100, path_cell=0.25,
                       path_clearance=1.0):
    """Rotated rectangles and random convex polygons scaled to an occupancy target.

    Start and goal are fixed by the bounds; environments without a grid
    route keeping ``path_clearance`` from every obstacle are resampled.
    The scale is bisected on a coarse Monte Carlo estimate and the reported
    occupancy uses ``n_samples`` points.
    """
    if not 0.0 < occupancy_target < 0.6:
        raise InvalidSpec("occupancy_target must lie in (0, 0.6)")
    start, goal = default_start_goal(bounds)
    if n_obstacles == 0:
        return Workspace(bounds, (), start, goal, meta={"seed": int(seed), "attempt": 0, "occupancy": 0.0})
    x0, x1, y0, y1 = bounds
    area = (x1 - x0) * (y1 - y0)
    for attempt in range(max_retries):
        rng = np.random.default_rng([int(seed), attempt])
        shapes = [_random_shape(rng) for _ in range(n_obstacles)]
        sizes = rng.uniform(0.3, 1.7, n_obstacles)
        centers = [np.column_stack([rng.uniform(x0, x1, 64), rng.uniform(y0, y1, 64)]) for _ in range(n_obstacles)]
        mc = np.random.default_rng([int(seed), attempt, 1])
        P = np.column_stack([mc.uniform(x0, x1, n_samples), mc.uniform(y0, y1, n_samples)])
        coarse = P[:10_000]

        def occupancy_at(scale, pts):
            placed = _place(shapes, sizes, centers, scale, start.position, goal, clearance)
            if placed is None:
                return None, None
            return placed, float(np.mean(_kernels.points_in_any(pts, *_pack_ccw(placed))))

        # bracket: twice the scale whose nominal total area equals the target
        s_lo, s_hi = 0.0, 2.0 * math.sqrt(occupancy_target * area / np.sum(sizes))
        placed, occ = occupancy_at(s_hi, coarse)
        if placed is None or occ < occupancy_target:
            continue
        best = None
        for _ in range(30):
            mid = 0.5 * (s_lo + s_hi)
            placed, occ = occupancy_at(mid, coarse)
            if placed is None:
                s_hi = mid
                continue
            if best is None or abs(occ - occupancy_target) < abs(best[1] - occupancy_target):
                best = (mid, occ)
            if abs(occ - occupancy_target) <= 0.005:
                break
            if occ < occupancy_target:
                s_lo = mid
            else:
                s_hi = mid
        if best is None:
            continue
        placed, occ = occupancy_at(best[0], P)
        if abs(occ - occupancy_target) > 0.05:
            continue
        ws = Workspace(bounds, tuple(ConvexPolygon.from_vertices(V) for V in placed), start, goal,
                       meta={"seed": int(seed), "attempt": attempt, "occupancy": occ,
                             "n_obstacles": n_obstacles, "occupancy_target": occupancy_target})
        if require_path and not grid_connected(ws, path_cell, path_clearance, path_clearance / 2):
            continue
        return ws
    raise PlacementFailure(f"seed {seed}: no admissible environment in {max_retries} attempts")


# ---------------------------------------------------------------- JSON

def workspace_to_dict(ws, corridors=(), moving=()):
    d = {
        "format": WORKSPACE_FORMAT, "version": 1,
        "bounds": list(ws.bounds),
        "obstacles": [{"vertices": o.vertices.tolist()} for o in ws.static_obstacles],
        "start": {"x": ws.start.x, "y": ws.start.y, "psi": ws.start.psi},
        "goal": {"x": float(ws.goal[0]), "y": float(ws.goal[1])},
        "corridors": [c.to_dict() for c in corridors],
        "moving": [m.to_dict() for m in moving],
    }
    if ws.meta:
        d["meta"] = ws.meta
    return d


def workspace_from_dict(d):
    """Returns (workspace, corridors, moving obstacles)."""
    s = d["start"]
    ws = Workspace(tuple(d["bounds"]), tuple(ConvexPolygon.from_dict(o) for o in d.get("obstacles", [])),
                   Pose(s["x"], s["y"], s.get("psi", 0.0)), [d["goal"]["x"], d["goal"]["y"]],
                   meta=d.get("meta", {}))
    corridors = [Corridor.from_dict(c) for c in d.get("corridors", [])]
    moving = [MovingObstacle.from_dict(m) for m in d.get("moving", [])]
    return ws, corridors, moving


def save_workspace(path, ws, corridors=(), moving=()):
    with open(path, "w") as fh:
        json.dump(workspace_to_dict(ws, corridors, moving), fh, indent=1)


def load_workspace(path):
    with open(path) as fh:
        return workspace_from_dict(json.load(fh))
