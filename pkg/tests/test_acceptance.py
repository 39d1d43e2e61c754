"""Acceptance criteria 1-10. Each test records one PASS/FAIL line that is
printed in the terminal summary, then asserts."""
import gc
import math

import numpy as np
import pytest

from gaitplan.certify import dwell_time_bound, integer_dwell, mu_bound, mu_exact, omega_bound, omega_exact, \
    solve_discrete_lyapunov
from gaitplan.cli import _batch_library
from gaitplan.errors import Infeasible
from gaitplan.planner import MpcConfig, exhaustive_mpc_oracle, mpc_step, run_sequential_mpc
from gaitplan.primitives import GaitLibrary, GaitPrimitive, MeshSpec, Pose, evaluate_batch, fit_library
from gaitplan.scenarios import load_bundled
from gaitplan.switching import in_omega, verify_practical_stability
from gaitplan.workspace import ConvexPolygon, Corridor, MovingObstacle, Workspace

from helpers import record, seeded_lyaps


# ---------------------------------------------------------------- 1

def test_c01_dwell_arithmetic():
    b = dwell_time_bound(8.08, 0.12)
    nd = integer_dwell(b)
    ok = abs(b - 0.985) <= 1e-3 and nd == 1
    record(1, "dwell arithmetic", ok, f"bound {b:.4f}, integer dwell {nd}")
    assert ok


# ---------------------------------------------------------------- 2

def test_c02_bound_dominance():
    libs, seed = [], 0
    while len(libs) < 100:
        got = seeded_lyaps(seed)
        if got is not None:
            libs.append(got[1])
        seed += 1
    bad, checks = 0, 0
    for ls in libs:
        kb = min(l.kappa_bar for l in ls)
        for kappa in np.logspace(-6, math.log10(kb), 10):
            bad += omega_bound(kappa, ls) < omega_exact(kappa, ls)
            bad += mu_bound(kappa, ls) < mu_exact(kappa, ls)
            checks += 2
    record(2, "bound dominance", bad == 0, f"{bad} violations in {checks} comparisons over 100 libraries "
                                           f"(seeds 0..{seed - 1})")
    assert bad == 0


# ---------------------------------------------------------------- 3

def test_c03_trapping(lib3, cert3, cert3_avg):
    reps = [verify_practical_stability(lib3, c, trials=1000, horizon=200, seed=0) for c in (cert3, cert3_avg)]
    exits = [r.n_violations for r in reps]
    div = [len(r.divergences) for r in reps]
    ok = exits == [0, 0] and div == [0, 0]
    record(3, "trapping", ok, f"exits from the trapping set: fixed dwell {cert3.dwell} -> {exits[0]}, "
                              f"average (N0=2, Na={cert3_avg.dwell_bound:.3f}) -> {exits[1]}; 1000 x 200 each")
    assert ok


# ---------------------------------------------------------------- 4

def test_c04_lyapunov_residual():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        A = rng.normal(size=(2, 2))
        A *= rng.uniform(0.0, 0.99) / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-12)
        S = solve_discrete_lyapunov(A)
        worst = max(worst, float(np.max(np.abs(A.T @ S @ A - S + np.eye(2)))))
    ok = worst <= 1e-10
    record(4, "lyapunov residual", ok, f"max residual {worst:.2e} over 1000 matrices")
    assert ok


# ---------------------------------------------------------------- 5

def _rippled(p, amp=0.1, freq=20.0):
    """Non-polynomial truth: a sinusoidal ripple on every map, zero at the fixed point."""
    zs = p.fixed_point.copy()
    w = np.array([0.8, -0.6])

    def ripple(z):
        return np.sin(freq * (np.asarray(z, dtype=float) - zs) @ w)

    return GaitPrimitive(
        p.id,
        lambda z: p.stride_map(z) + 0.002 * np.sin(freq * (np.asarray(z, dtype=float) - zs)),
        lambda z: p.disp_length(z) * (1.0 + amp * ripple(z)),
        lambda z: p.disp_heading_change(z) + 0.05 * ripple(z),
        lambda z: p.disp_bearing(z) + 0.05 * ripple(z),
        zs, p.nominal_turn)


def _sample_omega(cert, n, seed=0):
    rng = np.random.default_rng(seed)
    lo, hi = np.full(2, np.inf), np.full(2, -np.inf)
    for c, S, level in cert.omega_set_ellipses():
        half = np.sqrt(level * np.diag(np.linalg.inv(S)))
        lo, hi = np.minimum(lo, c - half), np.maximum(hi, c + half)
    X = rng.uniform(lo, hi, (20 * n, 2))
    return X[in_omega(X, cert)][:n]


def _fit_errors(truth, approx, Z):
    """Max relative error of the planar displacement and of the stride map."""
    disp, step = 0.0, 0.0
    for t, a in zip(truth, approx):
        def planar(p):
            l, th = evaluate_batch(p.disp_length, Z), evaluate_batch(p.disp_bearing, Z)
            return np.column_stack([l * np.cos(th), l * np.sin(th)])
        d_t, d_a = planar(t), planar(a)
        disp = max(disp, float(np.max(np.linalg.norm(d_a - d_t, axis=1) / np.linalg.norm(d_t, axis=1))))
        P_t, P_a = evaluate_batch(t.stride_map, Z), evaluate_batch(a.stride_map, Z)
        step = max(step, float(np.max(np.linalg.norm(P_a - P_t, axis=1) / np.linalg.norm(P_t, axis=1))))
    return disp, step


def test_c05_polynomial_fit(lib3, cert3, approx3):
    Z = _sample_omega(cert3, 4000)
    mesh = MeshSpec.for_library(lib3, 0.05, 20)
    assert mesh.nodes_per_axis ** 2 == 400 and len(Z) == 4000
    exact = _fit_errors(lib3, approx3, Z)
    rippled = GaitLibrary(tuple(_rippled(p) for p in lib3))
    r_fit = fit_library(rippled, mesh, cert=cert3)
    hard = _fit_errors(rippled, r_fit, Z)
    ok = max(exact + hard) < 0.02
    record(5, "polynomial fit", ok, f"max relative error over the trapping set: synthetic truth "
                                    f"disp {exact[0]:.1e} map {exact[1]:.1e}; rippled truth disp {hard[0]:.1e} "
                                    f"map {hard[1]:.1e}")
    assert ok


# ---------------------------------------------------------------- 6

def _stride_times(ws, cor, truth, approx, cert, N, repeats=3):
    """Per-stride solve time, min over repeated identical runs to shed scheduler and GC jitter."""
    runs = [run_sequential_mpc(ws, cor, truth, approx, cert, MpcConfig.from_certificate(cert, horizon=N))
            for _ in range(repeats)]
    assert len({r.strides for r in runs}) == 1
    return np.min([r.micros for r in runs], axis=0), runs[0].micros


@pytest.mark.slow
def test_c06_timing(envs100):
    envs = [(ws, cor) for _, ws, cor in envs100 if cor is not None][:10]
    horizons = (2, 3, 4, 5, 6)
    table, worst_ratio, worst_mean, worst_raw, worst_p99 = {}, 0.0, 0.0, 0.0, 0.0
    for n in (3, 5, 9):
        truth, approx, cert = _batch_library(n, 0, 0.5, 0.12)
        run_sequential_mpc(*envs[0], truth, approx, cert, MpcConfig.from_certificate(cert, horizon=2))  # warm-up
        means = []
        for N in horizons:
            gc.collect()
            best, raw = zip(*[_stride_times(ws, cor, truth, approx, cert, N) for ws, cor in envs])
            best, raw = np.concatenate(best), np.concatenate(raw)
            means.append(best.mean())
            worst_raw = max(worst_raw, float(raw.mean()))
            worst_p99 = max(worst_p99, float(np.quantile(raw, 0.99)))
        table[n] = means
        worst_mean = max(worst_mean, max(means))
        worst_ratio = max(worst_ratio, float(np.max(np.array(means[1:]) / np.array(means[:-1]))))
    ok = worst_mean <= 5000 and worst_raw <= 5000 and worst_ratio <= 1.5
    shown = "; ".join(f"|P|={n}: " + ",".join(f"{m:.0f}" for m in v) for n, v in table.items())
    record(6, "per-stride timing", ok, f"mean us for N=2..6 [{shown}], max mean {worst_mean:.0f} us "
                                       f"(single-pass {worst_raw:.0f} us, p99 {worst_p99:.0f} us), "
                                       f"max growth per unit horizon {worst_ratio:.2f}x")
    assert ok


# ---------------------------------------------------------------- 7

@pytest.mark.slow
def test_c07_success_trend(envs100):
    truth, approx, cert = _batch_library(3, 0, 0.5, 0.12)
    rates = {}
    for N in (2, 3, 4):
        cfg = MpcConfig.from_certificate(cert, horizon=N)
        hits = sum(cor is not None and run_sequential_mpc(ws, cor, truth, approx, cert, cfg).outcome == "reached"
                   for _, ws, cor in envs100)
        rates[N] = hits / len(envs100)
    ok = rates[3] > 0.8 and rates[4] > 0.8 and rates[2] <= rates[3] <= rates[4]
    record(7, "success-rate trend", ok, ", ".join(f"N={N}: {r:.0%}" for N, r in rates.items())
           + " over 100 environments")
    assert ok


# ---------------------------------------------------------------- 8

def test_c08_expansion_signature(lib3, approx3, cert3):
    ws = Workspace((0, 50, 0, 10), (), Pose(5, 5, 0), (45.0, 5))
    cor = Corridor((ConvexPolygon.box(0, 50, 0, 10),), [])
    cfg = MpcConfig.from_certificate(cert3, horizon=4)
    straight = run_sequential_mpc(ws, cor, lib3, approx3, cert3, cfg)
    flat = straight.outcome == "reached" and bool(np.all(straight.expansions == 4))
    ws, cor, moving = load_bundled()
    res = run_sequential_mpc(ws, cor, lib3, approx3, cert3, cfg, moving)
    near = [k for k, pose in enumerate(res.trajectory.poses[:-1])
            if np.linalg.norm(pose.position - moving[0].center(k)) <= cfg.sensing_radius]
    raised = [k for k in near if res.expansions[k] > 4]
    ok = flat and len(raised) > 0
    record(8, "node-expansion signature", ok,
           f"unobstructed: {straight.strides} strides, expansions {sorted(set(straight.expansions.tolist()))}; "
           f"moving scenario: strides {raised} exceed 4 while the obstacle is within sensing range")
    assert ok


# ---------------------------------------------------------------- 9

def test_c09_moving_obstacle_safety(lib3, approx3, cert3):
    ws, cor, moving = load_bundled()
    res = run_sequential_mpc(ws, cor, lib3, approx3, cert3, MpcConfig.from_certificate(cert3, horizon=4), moving)
    F = [ob.F(pose.position, k) for k, pose in enumerate(res.trajectory.poses) for ob in moving]
    dist = float(np.linalg.norm(res.trajectory.poses[-1].position - ws.goal))
    ok = res.outcome == "reached" and min(F) > 1 and dist <= 1.0
    record(9, "moving-obstacle safety", ok, f"outcome {res.outcome} in {res.strides} strides, min F {min(F):.4f}, "
                                            f"final goal distance {dist:.3f} m")
    assert ok


# ---------------------------------------------------------------- 10

def small_fixture(rng, approx):
    """Random box corridor, start state, goal, dwell rule and maybe a parked obstacle."""
    w, h = rng.uniform(1.0, 5.0, 2)
    box = ConvexPolygon.box(0, w, 0, h)
    start = rng.uniform([0.05 * w, 0.05 * h], [0.95 * w, 0.95 * h])
    goal = rng.uniform([0, 0], [w, h])
    pose = Pose(start[0], start[1], rng.uniform(-math.pi, math.pi))
    sigma = int(rng.integers(1, 4))
    z = approx[sigma].fixed_point + rng.uniform(-0.01, 0.01, 2)
    history = [sigma] * int(rng.integers(1, 4))
    mode = rng.choice(["none", "fixed", "average"])
    cfg = MpcConfig(horizon=4, dwell_mode=str(mode), dwell=int(rng.integers(1, 4)), n0=1, na=2.0)
    moving = []
    if rng.random() < 0.5:
        c = start + rng.uniform(-1.5, 1.5, 2)
        moving = [MovingObstacle.from_waypoints([c] * 8, np.eye(2) / rng.uniform(0.2, 0.8) ** 2)]
    ws = Workspace((-1, w + 1, -1, h + 1), (), pose, tuple(goal))
    return ws, Corridor((box,), []), z, sigma, history, moving, cfg


def test_c10_best_first_vs_oracle(approx3):
    rng = np.random.default_rng(10)
    agree, member, n_infeasible = 0, 0, 0
    for _ in range(50):
        ws, cor, z, sigma, hist, moving, cfg = small_fixture(rng, approx3)
        args = (0, ws.start, z, sigma, cor, moving, approx3, cfg)
        kw = dict(history=hist, goal=np.asarray(ws.goal))
        try:
            bf = mpc_step(*args, **kw)
        except Infeasible:
            bf = None
        try:
            orc = exhaustive_mpc_oracle(*args, **kw)
        except Infeasible:
            orc = None
        agree += (bf is None) == (orc is None)
        n_infeasible += orc is None
        member += bf is not None and orc is not None and tuple(bf.branch) in orc.feasible
    n_feasible = 50 - n_infeasible
    ok = agree == 50 and member == n_feasible
    record(10, "best-first vs oracle", ok, f"verdicts agree {agree}/50 ({n_infeasible} infeasible), "
                                           f"best-first sequence in the oracle's feasible set {member}/{n_feasible}")
    assert ok
