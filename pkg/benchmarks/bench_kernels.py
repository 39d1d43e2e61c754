"""Time the numba and numpy kernel paths side by side.

    python3 benchmarks/bench_kernels.py [--repeat 200]

Also times a full planning stride under each path by re-running this script
in a subprocess with GAITPLAN_DISABLE_NUMBA set.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from gaitplan import _kernels
from gaitplan.planner import MpcConfig, action_table, run_sequential_mpc
from gaitplan.primitives import MeshSpec, fit_library, standard_turns, synth_library
from gaitplan.workspace import extract_corridor, random_environment


def kernel_cases(rng):
    truth = synth_library(standard_turns(9), degrees=True)
    lib = fit_library(truth, MeshSpec.for_library(truth))
    tab = action_table(lib)
    state = np.array([1.0, 2.0, 0.3, *lib[1].fixed_point])
    U = rng.uniform(-1, 1, (1000, 2))
    exps = _kernels.monomial_exponents(6)
    coef = rng.normal(size=(2, len(exps)))
    X = rng.normal(size=(10_000, 2))
    S = np.array([[2.0, 0.3], [0.3, 1.0]])
    ws = random_environment(0)
    packed = ws.packed_obstacles()
    P = rng.uniform(0, 50, (100_000, 2))
    return {
        "expand_children (9 prims)": lambda k: k.expand_children(state, tab.centers, tab.scales, tab.coefs, tab.exps),
        "poly_eval (1000 x deg 6)": lambda k: k.poly_eval(U, exps, coef),
        "quad_form (10k)": lambda k: k.quad_form(X, np.zeros(2), S),
        "points_in_any (100k, 30 obs)": lambda k: k.points_in_any(P, *packed),
    }


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    print(f"{'kernel':32s} {'numpy us':>12s} {'numba us':>12s} {'speedup':>8s}")
    for name, fn in cases.items():
        fn(_kernels.numba_impl)  # compile
        n = max(1, repeat if "100k" not in name else repeat // 20)
        t_np = min(timeit.repeat(lambda: fn(_kernels.numpy_impl), number=n, repeat=3)) / n * 1e6
        t_nb = min(timeit.repeat(lambda: fn(_kernels.numba_impl), number=n, repeat=3)) / n * 1e6
        print(f"{name:32s} {t_np:12.1f} {t_nb:12.1f} {t_np / t_nb:8.1f}x")


def plan_timing():
    truth = synth_library(standard_turns(3), degrees=True)
    approx = fit_library(truth, MeshSpec.for_library(truth))
    ws = random_environment(0)
    cor = extract_corridor(ws)
    run_sequential_mpc(ws, cor, truth, approx, None, MpcConfig(horizon=4), stride_cap=5)
    res = run_sequential_mpc(ws, cor, truth, approx, None, MpcConfig(horizon=4))
    return {"path": _kernels.active.name, "strides": res.strides, "mean_micros": float(res.micros.mean())}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--plan-only", action="store_true")
    a = ap.parse_args()
    if a.plan_only:
        print(json.dumps(plan_timing()))
        return
    bench_kernels(a.repeat)
    print()
    for flag in ("0", "1"):
        env = dict(os.environ, GAITPLAN_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, __file__, "--plan-only"], env=env, capture_output=True, text=True,
                             check=True).stdout
        r = json.loads(out.strip().splitlines()[-1])
        print(f"planning stride, {r['path']:5s} path: {r['mean_micros']:8.1f} us mean over {r['strides']} strides")


if __name__ == "__main__":
    main()
