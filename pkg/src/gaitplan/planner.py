"""Primitive-tree sequential MPC through a safe walking corridor."""
from dataclasses import dataclass, field
import itertools
import json
import math
import time

import numpy as np

from . import _kernels
from .errors import EnvelopeExceeded, Infeasible, InvalidSpec
from .primitives import ENVELOPE, apply_stride, check_envelope
from .switching import StrideTrajectory, SwitchingSignal

DWELL_MODES = ("none", "fixed", "average")


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 4
    sensing_radius: float = 5.0
    goal_tolerance: float = 1.0
    dwell_mode: str = "none"
    dwell: int = 1           # N_d for fixed mode
    n0: int = 2              # chatter bound for average mode
    na: float = 1.0          # N_a for average mode
    expansion_cap: int = None
    early_exit: bool = False
    obstacle_inflation: float = 1.0
    stride_cap: int = None

    def __post_init__(self):
        if int(self.horizon) < 1:
            raise InvalidSpec("horizon must be at least 1")
        if not (self.sensing_radius > 0 and self.goal_tolerance > 0):
            raise InvalidSpec("sensing_radius and goal_tolerance must be positive")
        if self.dwell_mode not in DWELL_MODES:
            raise InvalidSpec(f"dwell_mode must be one of {DWELL_MODES}")
        if self.dwell_mode == "fixed" and int(self.dwell) < 1:
            raise InvalidSpec("fixed dwell must be at least 1")
        if self.dwell_mode == "average" and (int(self.n0) < 1 or self.na <= 0):
            raise InvalidSpec("average dwell needs n0 >= 1 and na > 0")
        if self.obstacle_inflation < 1.0:
            raise InvalidSpec("obstacle_inflation must be >= 1")

    def cap_for(self, n_primitives):
        return self.expansion_cap if self.expansion_cap is not None else 10 * n_primitives * self.horizon

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_certificate(cls, cert, **kw):
        """Dwell constraint taken from a stability certificate."""
        if cert.mode == "fixed":
            return cls(dwell_mode="fixed", dwell=max(1, cert.dwell), **kw)
        return cls(dwell_mode="average", n0=cert.n0, na=max(cert.dwell_bound, 1e-9), **kw)


class ActionTable:
    """Library packed for the child-expansion kernel.

    Every map of a primitive must share one center and scale; coefficient
    blocks are zero-padded to the largest degree in the library.
    """

    def __init__(self, lib):
        if not all(p.is_polynomial for p in lib):
            raise TypeError("the planning library must use polynomial maps")
        deg = max(f.degree for p in lib for f in p.maps())
        self.exps = _kernels.monomial_exponents(deg)
        T = len(self.exps)
        P = len(lib)
        self.ids = np.array(lib.ids, dtype=np.int64)
        self.centers = np.empty((P, 2))
        self.scales = np.empty(P)
        self.coefs = np.zeros((P, 5, T))
        for k, prim in enumerate(lib):
            c, s = prim.stride_map.center, prim.stride_map.scale
            for f in prim.maps():
                if np.any(f.center != c) or f.scale != s:
                    raise ValueError(f"primitive {prim.id}: maps use different centers or scales")
            self.centers[k] = c
            self.scales[k] = s
            rows = [prim.stride_map.coefficients[0], prim.stride_map.coefficients[1],
                    prim.disp_length.coefficients[0], prim.disp_heading_change.coefficients[0],
                    prim.disp_bearing.coefficients[0]]
            for r, coef in enumerate(rows):
                self.coefs[k, r, :len(coef)] = coef

    def children(self, state):
        return _kernels.expand_children(state, self.centers, self.scales, self.coefs, self.exps)

    def step(self, state, pid):
        k = pid - 1
        return _kernels.expand_children(state, self.centers[k:k + 1], self.scales[k:k + 1],
                                        self.coefs[k:k + 1], self.exps)[0]


_TABLES = {}


def action_table(lib):
    t = _TABLES.get(id(lib))
    if t is None or t[0] is not lib:
        t = (lib, ActionTable(lib))
        _TABLES[id(lib)] = t
    return t[1]


# ---------------------------------------------------------------- dwell bookkeeping

@dataclass(frozen=True)
class DwellState:
    """Signal summary needed to test the next index: current run and switch times."""
    last: int
    run: int
    t: int                       # index the next primitive would occupy
    switches: tuple = ()

    @classmethod
    def from_history(cls, history):
        h = list(history)
        if not h:
            raise ValueError("empty history")
        run = 1
        while run < len(h) and h[-1 - run] == h[-1]:
            run += 1
        sw = tuple(k for k in range(1, len(h)) if h[k] != h[k - 1])
        return cls(h[-1], run, len(h), sw)

    def push(self, pid):
        if pid == self.last:
            return DwellState(pid, self.run + 1, self.t + 1, self.switches)
        return DwellState(pid, 1, self.t + 1, self.switches + (self.t,))


def dwell_allows(ds, pid, config):
    if pid == ds.last or config.dwell_mode == "none":
        return True
    if config.dwell_mode == "fixed":
        return ds.run >= config.dwell
    # a switch at ds.t only adds windows ending at ds.t + 1; the binding ones start at switch times
    sw = np.array(ds.switches + (ds.t,), dtype=float)
    counts = np.arange(len(sw), 0, -1)
    return bool(np.all(counts <= config.n0 + (ds.t + 1 - sw) / config.na + 1e-12))


# ---------------------------------------------------------------- single solve

@dataclass
class StepResult:
    pid: int
    expansions: int
    backtracks: int
    branch: list            # primitive ids p_0 .. p_{n-1}
    positions: np.ndarray   # predicted positions of the branch nodes, depth 1..n
    cost: float             # sum of squared distances to the target over the branch
    root: np.ndarray        # one-stride prediction (x, y, psi, z1, z2)


def stage_sets(corridor, stage, goal):
    """(membership polytopes, target point) of MPC stage ``stage`` (0-based)."""
    H = corridor.polytopes
    M = len(H)
    if M == 1:
        return (H[0],), np.asarray(goal, dtype=float)
    if stage >= M - 1:
        return (H[M - 2], H[M - 1]), np.asarray(goal, dtype=float)
    return (H[stage], H[stage + 1]), corridor.waypoints[stage]


class _Pruner:
    def __init__(self, polys, moving, k, config, target):
        self.A = np.vstack([p.A for p in polys])
        self.b = np.concatenate([p.b for p in polys])
        self.splits = np.cumsum([len(p.b) for p in polys])[:-1]
        self.moving = list(moving)
        self.k = k
        self.r2 = config.sensing_radius ** 2
        self.thr = config.obstacle_inflation ** 2
        self.target = target
        self.intersection = polys

    def feasible(self, X, depth):
        """Mask over candidate positions X at tree depth ``depth``."""
        G = X @ self.A.T - self.b <= 1e-9
        ok = np.zeros(len(X), dtype=bool)
        for g in np.split(G, self.splits, axis=1):
            ok |= np.all(g, axis=1)
        if self.moving:
            ts = self.k + 1 + depth
            for ob in self.moving:
                D = X - ob.center(ts)
                near = np.einsum("ni,ni->n", D, D) <= self.r2
                F = np.einsum("ni,ij,nj->n", D, ob.E, D)
                ok &= ~near | (F > self.thr)
        return ok

    def in_intersection(self, p):
        return all(np.all(P.A @ p <= P.b + 1e-9) for P in self.intersection)


def _root(table, pose, z, sigma_k):
    state = np.array([pose.x, pose.y, pose.psi, z[0], z[1]], dtype=float)
    return table.step(state, sigma_k)


def mpc_step(stage, pose_k, z_k, sigma_k, corridor, moving, lib_approx, config, k=0, history=None, goal=None):
    """One receding-horizon solve; returns a StepResult whose ``pid`` is sigma(k+1).

    ``history`` is the executed signal up to and including ``sigma_k``; it
    only matters under a dwell constraint. ``goal`` is the final-stage
    target and defaults to the centroid of the last polytope.
    """
    table = action_table(lib_approx)
    ids = [int(i) for i in table.ids]
    N = int(config.horizon)
    cap = config.cap_for(len(ids))
    polys, target = stage_sets(corridor, stage, goal if goal is not None else _fallback_goal(corridor))
    pr = _Pruner(polys, moving, k, config, target)
    root = _root(table, pose_k, z_k, sigma_k)
    ds0 = DwellState.from_history(history if history is not None else [sigma_k])
    if ds0.last != sigma_k:
        raise ValueError("history must end with the engaged primitive")

    # node: (state, depth, pid, parent, cost, dwell)
    root_node = (root, 0, sigma_k, None, 0.0, ds0)
    alternatives = {}
    node = root_node
    expansions = 0
    backtracks = 0
    while True:
        depth = node[1]
        if depth == N or (config.early_exit and depth > 0 and pr.in_intersection(node[0][:2])):
            break
        if expansions >= cap:
            raise Infeasible(f"expansion cap {cap} reached", expansions, backtracks)
        C = table.children(node[0])
        expansions += 1
        ds = node[5]
        allowed = np.array([dwell_allows(ds, p, config) for p in ids])
        env_ok = np.max(np.abs(C[:, 3:5]), axis=1) <= ENVELOPE
        ok = allowed & env_ok & pr.feasible(C[:, :2], depth + 1)
        kids = []
        for j in np.nonzero(ok)[0]:
            d = C[j, :2] - target
            kids.append((float(d @ d), ids[j], C[j]))
        kids.sort(key=lambda c: (c[0], c[1]))
        if kids:
            nodes = [(st, depth + 1, pid, node, node[4] + c, ds.push(pid)) for c, pid, st in kids]
            alternatives[depth + 1] = nodes[1:]
            node = nodes[0]
            continue
        # fully pruned: drop this node, resume at the deepest level with siblings left
        backtracks += 1
        lvl = depth
        while lvl >= 1 and not alternatives.get(lvl):
            lvl -= 1
        if lvl < 1:
            raise Infeasible("every branch is pruned", expansions, backtracks)
        for d in [d for d in alternatives if d > lvl]:
            del alternatives[d]
        node = alternatives[lvl].pop(0)
    branch, pos = [], []
    n = node
    while n[3] is not None:
        branch.append(n[2])
        pos.append(n[0][:2])
        n = n[3]
    branch.reverse()
    pos.reverse()
    return StepResult(branch[0], expansions, backtracks, branch, np.array(pos), node[4], root)


def _fallback_goal(corridor):
    return np.array(corridor.polytopes[-1].vertices.mean(axis=0))


def branch_cost(stage, pose_k, z_k, sigma_k, corridor, lib_approx, branch, goal):
    """Sum of squared target distances along a primitive sequence."""
    table = action_table(lib_approx)
    _, target = stage_sets(corridor, stage, goal)
    s = _root(table, pose_k, z_k, sigma_k)
    total = 0.0
    for pid in branch:
        s = table.step(s, pid)
        d = s[:2] - target
        total += float(d @ d)
    return total


@dataclass
class OracleResult:
    sequence: tuple
    cost: float
    feasible: dict          # sequence -> cost
    n_leaves: int


def exhaustive_mpc_oracle(stage, pose_k, z_k, sigma_k, corridor, moving, lib_approx, config, k=0, history=None,
                          goal=None):
    """Enumerate every depth-N sequence and keep the feasible cost minimizer."""
    table = action_table(lib_approx)
    ids = [int(i) for i in table.ids]
    N = int(config.horizon)
    if len(ids) ** N > 10 ** 6:
        raise InvalidSpec(f"{len(ids)}^{N} sequences exceed the oracle limit")
    polys, target = stage_sets(corridor, stage, goal if goal is not None else _fallback_goal(corridor))
    pr = _Pruner(polys, moving, k, config, target)
    root = _root(table, pose_k, z_k, sigma_k)
    ds0 = DwellState.from_history(history if history is not None else [sigma_k])
    feasible = {}
    n_leaves = 0
    for seq in itertools.product(ids, repeat=N):
        n_leaves += 1
        s, ds, cost, good = root, ds0, 0.0, True
        for depth, pid in enumerate(seq, start=1):
            if not dwell_allows(ds, pid, config):
                good = False
                break
            s = table.step(s, pid)
            if not check_envelope(s[3:5]) or not pr.feasible(s[None, :2], depth)[0]:
                good = False
                break
            ds = ds.push(pid)
            d = s[:2] - target
            cost += float(d @ d)
        if good:
            feasible[seq] = cost
    if not feasible:
        raise Infeasible("no feasible sequence")
    best = min(feasible, key=lambda q: (feasible[q], q))
    return OracleResult(best, feasible[best], feasible, n_leaves)


# ---------------------------------------------------------------- closed loop

@dataclass
class PlanResult:
    outcome: str
    sigma: SwitchingSignal
    trajectory: StrideTrajectory
    per_stride: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    moving_violations: list = field(default_factory=list)
    membership_violations: list = field(default_factory=list)
    prediction_errors: np.ndarray = None
    prediction_bound: float = None
    reason: str = ""
    config: dict = field(default_factory=dict)

    @property
    def strides(self):
        return len(self.sigma)

    @property
    def expansions(self):
        return np.array([s["expansions"] for s in self.per_stride], dtype=int)

    @property
    def micros(self):
        return np.array([s["micros"] for s in self.per_stride], dtype=float)

    def to_dict(self, trajectory_file=None):
        return {"outcome": self.outcome, "strides": self.strides, "sigma": list(self.sigma.indices),
                "reason": self.reason, "trajectory_file": trajectory_file, "per_stride": self.per_stride,
                "stages": self.stages, "moving_violations": self.moving_violations,
                "membership_violations": self.membership_violations,
                "max_prediction_error": None if self.prediction_errors is None or not len(self.prediction_errors)
                else float(np.max(self.prediction_errors)),
                "prediction_bound": self.prediction_bound, "config": self.config}

    def save(self, path, trajectory_file=None):
        with open(path, "w") as fh:
            json.dump(self.to_dict(trajectory_file), fh, indent=1)


def nominal_stride(lib):
    return float(np.mean([p.disp_length(p.fixed_point) for p in lib]))


def default_stride_cap(workspace, corridor, lib):
    return int(math.ceil(10 * corridor.route_length(workspace.start.position, workspace.goal) / nominal_stride(lib)))


def prediction_error_bound(lib_approx, horizon):
    """Propagated fit residual: length residual plus lever arm times angle residual, times horizon."""
    worst = 0.0
    for p in lib_approx:
        rep = p.fit_report or {}
        r = rep.get("max_residual")
        if not r:
            continue
        L = abs(p.disp_length(p.fixed_point)) + r["l"]
        worst = max(worst, r["l"] + L * r["bearing"] + L * r["dpsi"])
    return horizon * worst + 1e-9


def run_sequential_mpc(workspace, corridor, lib_truth, lib_approx, cert=None, config=None, moving=(),
                       stride_cap=None, z0=None, sigma0=None):
    """Plan with ``lib_approx`` each stride and execute on ``lib_truth``."""
    config = config or MpcConfig()
    moving = list(moving)
    if len(lib_truth) != len(lib_approx):
        raise InvalidSpec("truth and approximate libraries differ in size")
    cap = stride_cap or config.stride_cap or default_stride_cap(workspace, corridor, lib_truth)
    sigma = lib_truth.straight_id if sigma0 is None else int(sigma0)
    z = np.array(lib_truth[sigma].fixed_point if z0 is None else z0, dtype=float)
    pose = workspace.start
    goal = workspace.goal
    table = action_table(lib_approx)
    poses, states, executed = [pose], [z], []
    per_stride, stages = [], []
    moving_viol, member_viol, pred_err = [], [], []
    stage = 0
    last_solved = 0
    prev_polys = None
    M = len(corridor)
    outcome, reason = "stride_cap", ""
    for k in range(cap + 1):
        while stage < M - 1 and corridor.polytopes[stage + 1].contains(pose.position):
            stage += 1
        if np.linalg.norm(pose.position - goal) <= config.goal_tolerance:
            outcome = "reached"
            break
        if k == cap:
            break
        t0 = time.perf_counter_ns()
        hist = executed + [sigma]
        fallback = False
        try:
            res = mpc_step(stage, pose, z, sigma, corridor, moving, lib_approx, config, k=k, history=hist, goal=goal)
        except Infeasible as exc:
            # a fresh handoff can strand the committed stride outside the new
            # stage's sets; the previous stage still admits the robot
            if stage == 0 or stage == last_solved:
                per_stride.append({"expansions": exc.expansions, "backtracks": exc.backtracks,
                                   "micros": (time.perf_counter_ns() - t0) / 1e3, "stage_fallback": False})
                outcome, reason = "infeasible", str(exc)
                break
            spent = (exc.expansions, exc.backtracks)
            try:
                res = mpc_step(stage - 1, pose, z, sigma, corridor, moving, lib_approx, config, k=k, history=hist,
                               goal=goal)
            except Infeasible as exc2:
                per_stride.append({"expansions": spent[0] + exc2.expansions, "backtracks": spent[1] + exc2.backtracks,
                                   "micros": (time.perf_counter_ns() - t0) / 1e3, "stage_fallback": True})
                outcome, reason = "infeasible", str(exc2)
                break
            res.expansions += spent[0]
            res.backtracks += spent[1]
            stage -= 1
            fallback = True
        per_stride.append({"expansions": res.expansions, "backtracks": res.backtracks,
                           "micros": (time.perf_counter_ns() - t0) / 1e3, "stage_fallback": fallback})
        last_solved = stage
        stages.append(stage)
        try:
            pose_next, z_next = apply_stride(lib_truth[sigma], pose, z)
        except EnvelopeExceeded as exc:
            outcome, reason = "infeasible", f"stride {k}: {exc}"
            break
        pred_err.append(float(np.linalg.norm(res.root[:2] - pose_next.position)))
        executed.append(sigma)
        p = pose_next.position
        for j, ob in enumerate(moving):
            F = ob.F(p, k + 1)
            if not F > 1.0:
                moving_viol.append({"stride": k + 1, "obstacle": j, "F": F})
        # sigma(k) was chosen by the previous solve, under that solve's stage sets
        if prev_polys is not None and not any(P.contains(p) for P in prev_polys):
            member_viol.append({"stride": k + 1, "stage": stages[-2]})
        prev_polys = stage_sets(corridor, stage, goal)[0]
        pose, z = pose_next, z_next
        poses.append(pose)
        states.append(z)
        sigma = res.pid
    sig = SwitchingSignal(tuple(executed))
    traj = StrideTrajectory(poses, np.array(states), sig.indices, None)
    if cert is not None and len(sig):
        active = list(sig.indices) + [sig.indices[-1]]
        traj.lyapunov_trace = np.array([float(cert.lyap(a).V(x)[0]) for a, x in zip(active, traj.states)])
    return PlanResult(outcome, sig, traj, per_stride, stages, moving_viol, member_viol, np.array(pred_err),
                      prediction_error_bound(lib_approx, config.horizon), reason,
                      {"mpc": config.to_dict(), "stride_cap": cap})
