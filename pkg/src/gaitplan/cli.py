"""Command-line entry point: synth | certify | fit | plan | simulate | batch.

Exit codes: 0 success, 2 infeasible (or planning/simulation failure),
3 certification failure, 4 bad input.
"""
import argparse
import csv
import functools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .certify import StabilityCertificate, certify_library, dwell_time_bound, integer_dwell
from .errors import (EnvelopeExceeded, GaitPlanError, Infeasible, InvalidSpec, NoContractiveLevel, NoFeasibleKappa,
                     NoPath, NotSchurStable, PlacementFailure)
from .planner import MpcConfig, run_sequential_mpc
from .primitives import MeshSpec, Pose, fit_library, load_library, save_library, standard_turns, \
    synth_library
from .switching import SwitchingSignal, simulate
from .workspace import extract_corridor, load_workspace, random_environment

EXIT_OK, EXIT_INFEASIBLE, EXIT_CERT, EXIT_INPUT = 0, 2, 3, 4
BATCH_HEADER = ["seed", "n_obstacles", "horizon", "n_primitives", "outcome", "strides", "mean_expansions",
                "mean_micros"]
ENV_STREAM = 1


# ---------------------------------------------------------------- parsing helpers

def parse_turns(text):
    """Comma list of degrees; a leading "±" (or "+-") expands to both signs."""
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        for pm in ("±", "+-"):
            if tok.startswith(pm):
                v = float(tok[len(pm):])
                out.extend([v, -v])
                break
        else:
            out.append(float(tok))
    if not out:
        raise InvalidSpec("no turns given")
    return out


def parse_floats(text):
    return [float(t) for t in text.split(",") if t.strip()]


def parse_ints(text):
    return [int(t) for t in text.split(",") if t.strip()]


def parse_seed_range(text):
    """"a:b" (half open), "n" (0..n-1) or a comma list."""
    if ":" in text:
        a, b = text.split(":")
        return list(range(int(a), int(b)))
    if "," in text:
        return parse_ints(text)
    return list(range(int(text)))


def parse_signal(text):
    """"1x10,2x5" -> ten strides of primitive 1 then five of primitive 2."""
    segs = []
    for tok in text.split(","):
        pid, _, n = tok.strip().partition("x")
        segs.append((int(pid), int(n) if n else 1))
    return SwitchingSignal.from_segments(segs)


def parse_degrees(text):
    out = {}
    for tok in text.split(","):
        if tok.strip():
            k, v = tok.split("=")
            out[k.strip()] = int(v)
    return out


def named_seed(root, *names):
    return int(np.random.SeedSequence([int(root)] + [int(n) for n in names]).generate_state(1)[0])


def resolved_config(args):
    d = {k: v for k, v in vars(args).items() if k not in ("func",)}
    return {"command": args.command, "args": d, "version": __version__}


def config_to_argv(config):
    """Command line that reproduces an output from its embedded config."""
    args = dict(config["args"])
    cmd = args.pop("command")
    sub = next(a for a in build_parser()._actions if isinstance(a, argparse._SubParsersAction)).choices[cmd]
    flags = {a.dest: a for a in sub._actions if a.option_strings}
    argv = [cmd]
    for k, v in args.items():
        act = flags.get(k)
        if act is None or v is None or v is False:
            continue
        flag = next(o for o in act.option_strings if o.startswith("--"))
        argv.append(flag if v is True else f"{flag}={v}")
    return argv


def _write_json(path, doc):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def _write_meta(csv_path, config):
    _write_json(csv_path + ".meta.json", {"config": config, "file": os.path.basename(csv_path)})


def _library_from_args(args):
    if getattr(args, "library", None):
        return load_library(args.library)
    return synth_library(parse_turns(args.turns), args.stride_length, args.contraction, args.seed, degrees=True)


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    turns = parse_turns(args.turns)
    lib = synth_library(turns, args.stride_length, args.contraction, args.seed, degrees=True)
    save_library(lib, args.out, config=resolved_config(args))
    print(f"wrote {len(lib)} primitives to {args.out}")
    return EXIT_OK


def dwell_summary(mu, lam, n_primitives=None):
    """The printed dwell arithmetic."""
    bound = dwell_time_bound(mu, lam)
    nd = integer_dwell(bound)
    if n_primitives == 1:
        nd_text = "0 (unconstrained)"
    else:
        nd_text = str(nd)
    return f"mu={mu:.6g}, lambda={lam:.6g}, Nd_bound=ln(mu)/ln(1/lambda)={bound:.3f}, Nd={nd_text}"


def cmd_certify(args):
    if args.mu is not None or args.lam is not None:
        if args.mu is None or args.lam is None:
            raise InvalidSpec("--mu and --lambda go together")
        print(dwell_summary(args.mu, args.lam))
        return EXIT_OK
    if not args.library:
        raise InvalidSpec("certify needs --library (or --mu/--lambda)")
    lib = load_library(args.library)
    grid = parse_floats(args.kappa_grid) if args.kappa_grid else None
    kw = {"lambdas": tuple(parse_floats(args.lambdas))} if args.lambdas else {}
    cert = certify_library(lib, mode=args.mode, kappa_grid=grid, n0=args.n0, **kw)
    if args.out:
        cert.save(args.out, config=resolved_config(args))
    print(f"mode={cert.mode}, kappa={cert.kappa:.6g}, omega={cert.omega:.6g}, "
          f"Omega0 level={cert.omega0_level:.6g}, Omega level={cert.omega_set_level:.6g}")
    print(dwell_summary(cert.mu, cert.lambda_max, len(lib)))
    if cert.mode == "average":
        print(f"average dwell: N0={cert.n0}, Na_bound={cert.dwell_bound:.3f}")
    return EXIT_OK


def cmd_fit(args):
    truth = load_library(args.library)
    cert = StabilityCertificate.load(args.certificate) if args.certificate else None
    mesh = MeshSpec.for_library(truth, args.half_width, args.nodes)
    degrees = parse_degrees(args.degrees) if args.degrees else None
    approx = fit_library(truth, mesh, degrees, cert)
    save_library(approx, args.out, config=resolved_config(args))
    worst = max(max(p.fit_report["max_residual"].values()) for p in approx)
    print(f"fitted {len(approx)} primitives on {mesh.nodes_per_axis ** 2} nodes, max residual {worst:.3g}")
    return EXIT_OK


def _prepare_planning(truth, args):
    if getattr(args, "certificate", None):
        cert = StabilityCertificate.load(args.certificate)
    else:
        cert = certify_library(truth)
    if getattr(args, "approx", None):
        approx = load_library(args.approx)
    else:
        approx = fit_library(truth, MeshSpec.for_library(truth), cert=cert)
    return cert, approx


def _mpc_config(args, cert):
    kw = dict(horizon=args.horizon, sensing_radius=args.sensing_radius, goal_tolerance=args.goal_tolerance,
              early_exit=args.early_exit)
    if args.dwell_mode == "certificate":
        return MpcConfig.from_certificate(cert, **kw)
    if args.dwell_mode == "fixed":
        return MpcConfig(dwell_mode="fixed", dwell=args.dwell, **kw)
    if args.dwell_mode == "average":
        return MpcConfig(dwell_mode="average", n0=args.n0, na=args.na, **kw)
    return MpcConfig(**kw)


def cmd_plan(args):
    ws, corridors, moving = load_workspace(args.scenario)
    corridor = corridors[0] if corridors else extract_corridor(ws, args.seed)
    truth = _library_from_args(args)
    cert, approx = _prepare_planning(truth, args)
    config = _mpc_config(args, cert)
    res = run_sequential_mpc(ws, corridor, truth, approx, cert, config, moving, stride_cap=args.stride_cap)
    os.makedirs(args.out, exist_ok=True)
    traj_path = os.path.join(args.out, "trajectory.csv")
    res.trajectory.to_csv(traj_path)
    cfg = resolved_config(args)
    _write_meta(traj_path, cfg)
    doc = res.to_dict(trajectory_file="trajectory.csv")
    doc["config"] = dict(cfg, mpc=config.to_dict())
    doc["omega_ellipses"] = [{"center": c.tolist(), "S": S.tolist(), "level": lv}
                             for c, S, lv in cert.omega_set_ellipses()]
    _write_json(os.path.join(args.out, "plan.json"), doc)
    exp = res.expansions
    print(f"outcome={res.outcome} strides={res.strides} mean_expansions={exp.mean() if len(exp) else 0:.2f} "
          f"moving_violations={len(res.moving_violations)}")
    return EXIT_OK if res.outcome == "reached" else EXIT_INFEASIBLE


def cmd_simulate(args):
    lib = _library_from_args(args)
    if args.signal:
        sig = parse_signal(args.signal)
    else:
        sig = SwitchingSignal.constant(args.primitive, args.horizon)
    for pid in set(sig.indices):
        if not 1 <= pid <= len(lib):
            raise InvalidSpec(f"primitive {pid} not in library")
    z0 = parse_floats(args.z0) if args.z0 else lib[sig.indices[0] if len(sig) else 1].fixed_point
    pose = Pose(*parse_floats(args.pose)) if args.pose else Pose(0.0, 0.0, 0.0)
    cert = StabilityCertificate.load(args.certificate) if args.certificate else None
    traj = simulate(lib, sig, pose, z0, cert)
    traj.to_csv(args.out)
    _write_meta(args.out, resolved_config(args))
    print(f"wrote {len(sig) + 1} rows to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- batch

@functools.lru_cache(maxsize=None)
def _batch_library(n_primitives, seed, stride_length, contraction):
    truth = synth_library(standard_turns(n_primitives), stride_length, contraction, seed, degrees=True)
    cert = certify_library(truth)
    approx = fit_library(truth, MeshSpec.for_library(truth), cert=cert)
    return truth, approx, cert


def _batch_job(job):
    """All (horizon, primitive count) rows of one environment."""
    s, n_obs, p = job
    rows = []

    def fail(outcome):
        return [[s, n_obs, N, n, outcome, 0, "", ""] for N in p["horizons"] for n in p["primitives"]]

    try:
        ws = random_environment(named_seed(p["seed"], ENV_STREAM, n_obs, s), n_obs, p["occupancy"],
                                (0.0, p["size"], 0.0, p["size"]))
        corridor = extract_corridor(ws, s)
    except PlacementFailure:
        return fail("placement_failure")
    except NoPath:
        return fail("no_path")
    for n in p["primitives"]:
        truth, approx, cert = _batch_library(n, p["seed"], p["stride_length"], p["contraction"])
        for N in p["horizons"]:
            cfg = MpcConfig.from_certificate(cert, horizon=N)
            try:
                res = run_sequential_mpc(ws, corridor, truth, approx, cert, cfg)
            except GaitPlanError as exc:  # recorded, never aborts the batch
                rows.append([s, n_obs, N, n, type(exc).__name__, 0, "", ""])
                continue
            exp = res.expansions
            mic = res.micros
            rows.append([s, n_obs, N, n, res.outcome, res.strides,
                         repr(float(exp.mean())) if len(exp) else "", repr(float(mic.mean())) if len(mic) else ""])
    return rows


def run_batch(seeds, obstacle_counts, horizons, primitives, seed=0, occupancy=0.4, size=50.0, stride_length=0.5,
              contraction=0.12, jobs=1):
    p = {"seed": seed, "occupancy": occupancy, "size": size, "horizons": list(horizons),
         "primitives": list(primitives), "stride_length": stride_length, "contraction": contraction}
    work = [(s, n, p) for n in obstacle_counts for s in seeds]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            chunks = list(ex.map(_batch_job, work))
    else:
        chunks = [_batch_job(w) for w in work]
    return [r for c in chunks for r in c]


def batch_summary(rows):
    groups = {}
    for r in rows:
        groups.setdefault((r[2], r[3]), []).append(r)
    out = {"rows": len(rows), "groups": []}
    for (N, n), rs in sorted(groups.items()):
        mic = [float(r[7]) for r in rs if r[7] != ""]
        out["groups"].append({
            "horizon": N, "n_primitives": n, "environments": len(rs),
            "success_rate": sum(r[4] == "reached" for r in rs) / len(rs),
            "mean_micros_quantiles": {str(q): float(np.quantile(mic, q)) for q in (0.5, 0.9, 0.99)} if mic else {},
        })
    return out


def cmd_batch(args):
    seeds = parse_seed_range(args.seeds)
    rows = run_batch(seeds, parse_ints(args.obstacles), parse_ints(args.horizons), parse_ints(args.primitives),
                     args.seed, args.occupancy, args.size, args.stride_length, args.contraction, args.jobs)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "batch.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BATCH_HEADER)
        w.writerows(rows)
    cfg = resolved_config(args)
    _write_meta(path, cfg)
    summ = batch_summary(rows)
    summ["config"] = cfg
    _write_json(os.path.join(args.out, "summary.json"), summ)
    for g in summ["groups"]:
        print(f"N={g['horizon']} |P|={g['n_primitives']}: success {g['success_rate']:.1%} "
              f"over {g['environments']} environments")
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _common_args():
    # fresh parents per subcommand: argparse shares parent actions, so one
    # subcommand's set_defaults(out=...) would leak into the others
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root seed for every random stream")
    common.add_argument("--out", default=None, help="output file (directory for plan and batch)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (batch only)")
    return common


def _lib_args():
    lib_args = argparse.ArgumentParser(add_help=False)
    lib_args.add_argument("--library", default=None, help="library JSON (otherwise synthesized)")
    lib_args.add_argument("--turns", default="0,45,-45", help="nominal turns in degrees, e.g. 0,±45")
    lib_args.add_argument("--stride-length", type=float, default=0.5)
    lib_args.add_argument("--contraction", type=float, default=0.12)
    return lib_args


def _mpc_args():
    mpc_args = argparse.ArgumentParser(add_help=False)
    mpc_args.add_argument("--horizon", type=int, default=4)
    mpc_args.add_argument("--sensing-radius", type=float, default=5.0)
    mpc_args.add_argument("--goal-tolerance", type=float, default=1.0)
    mpc_args.add_argument("--dwell-mode", choices=["certificate", "none", "fixed", "average"], default="certificate")
    mpc_args.add_argument("--dwell", type=int, default=1)
    mpc_args.add_argument("--n0", type=int, default=2)
    mpc_args.add_argument("--na", type=float, default=1.0)
    mpc_args.add_argument("--early-exit", action="store_true")
    mpc_args.add_argument("--stride-cap", type=int, default=None)
    return mpc_args


def build_parser():
    ap = argparse.ArgumentParser(prog="gaitplan", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[_common_args()], help="synthesize a gait library")
    p.add_argument("--turns", default="0,45,-45")
    p.add_argument("--stride-length", type=float, default=0.5)
    p.add_argument("--contraction", type=float, default=0.12)
    p.set_defaults(func=cmd_synth, out="library.json")

    p = sub.add_parser("certify", parents=[_common_args()], help="certify practical stability of a library")
    p.add_argument("--library", default=None)
    p.add_argument("--mode", choices=["fixed", "average"], default="fixed")
    p.add_argument("--n0", type=int, default=2)
    p.add_argument("--kappa-grid", default=None, help="comma-separated kappa values")
    p.add_argument("--lambdas", default=None, help="comma-separated contraction candidates")
    p.add_argument("--mu", type=float, default=None, help="print the dwell arithmetic for this mu")
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("fit", parents=[_common_args()], help="fit polynomial surrogate actions")
    p.add_argument("--library", required=True)
    p.add_argument("--certificate", default=None)
    p.add_argument("--half-width", type=float, default=0.05)
    p.add_argument("--nodes", type=int, default=20, help="nodes per mesh axis")
    p.add_argument("--degrees", default=None, help="e.g. P=3,l=3,dpsi=6,bearing=5")
    p.set_defaults(func=cmd_fit, out="approx.json")

    p = sub.add_parser("plan", parents=[_common_args(), _lib_args(), _mpc_args()],
                       help="run sequential MPC on a scenario")
    p.add_argument("--scenario", required=True, help="workspace JSON")
    p.add_argument("--approx", default=None)
    p.add_argument("--certificate", default=None)
    p.set_defaults(func=cmd_plan, out="plan_out")

    p = sub.add_parser("simulate", parents=[_common_args(), _lib_args()], help="simulate a switching signal")
    p.add_argument("--signal", default=None, help='e.g. "1x10,2x5"')
    p.add_argument("--primitive", type=int, default=1)
    p.add_argument("--horizon", type=int, default=50)
    p.add_argument("--z0", default=None)
    p.add_argument("--pose", default=None, help="x,y,psi")
    p.add_argument("--certificate", default=None)
    p.set_defaults(func=cmd_simulate, out="trajectory.csv")

    p = sub.add_parser("batch", parents=[_common_args()], help="batch experiments over random environments")
    p.add_argument("--seeds", default="10", help='"a:b", "n" or a comma list')
    p.add_argument("--obstacles", default="30")
    p.add_argument("--horizons", default="4")
    p.add_argument("--primitives", default="3")
    p.add_argument("--occupancy", type=float, default=0.4)
    p.add_argument("--size", type=float, default=50.0)
    p.add_argument("--stride-length", type=float, default=0.5)
    p.add_argument("--contraction", type=float, default=0.12)
    p.set_defaults(func=cmd_batch, out="batch_out")
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (NoFeasibleKappa, NotSchurStable, NoContractiveLevel) as exc:
        print(f"certification failed: {exc}", file=sys.stderr)
        return EXIT_CERT
    except (Infeasible, NoPath, EnvelopeExceeded) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (InvalidSpec, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"bad input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
