"""Switching signals on a gait library: dwell statistics, simulation, and
Monte Carlo checks of the certified trapping sets."""
from dataclasses import dataclass, field
import csv
import math

import numpy as np

from .errors import EnvelopeExceeded
from .primitives import ENVELOPE, Pose, apply_stride, check_envelope, evaluate_batch


@dataclass(frozen=True)
class SwitchingSignal:
    indices: tuple

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))

    @classmethod
    def constant(cls, pid, length):
        return cls((pid,) * length)

    @classmethod
    def from_segments(cls, segments):
        out = []
        for pid, n in segments:
            out.extend([pid] * n)
        return cls(tuple(out))

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, k):
        return self.indices[k]

    @property
    def switching_times(self):
        s = self.indices
        return [k for k in range(1, len(s)) if s[k] != s[k - 1]]


def dwell_time_of(sig):
    """Shortest completed segment, counting the initial one; len(sig) when
    the signal never switches."""
    if len(sig) == 0:
        raise ValueError("empty signal")
    times = sig.switching_times
    if not times:
        return len(sig)
    gaps = [times[0]] + [b - a for a, b in zip(times[:-1], times[1:])]
    return min(gaps)


def satisfies_avg_dwell(sig, n0, na):
    """Exhaustive check of N(kh, kl) <= n0 + (kh - kl) / na over all windows."""
    if n0 < 1 or na <= 0:
        raise ValueError("need n0 >= 1 and na > 0")
    s = np.asarray(sig.indices)
    K = len(s)
    sw = np.zeros(K, dtype=int)
    sw[1:] = s[1:] != s[:-1]
    cs = np.concatenate([[0], np.cumsum(sw)])  # cs[t] = switches at times < t
    lo = np.arange(K + 1)[:, None]
    hi = np.arange(K + 1)[None, :]
    count = cs[hi] - cs[lo]
    ok = count <= n0 + (hi - lo) / na + 1e-12
    return bool(np.all(ok[hi > lo] if K else True))


@dataclass
class StrideTrajectory:
    poses: list
    states: np.ndarray
    sigma: tuple
    lyapunov_trace: np.ndarray = None

    def __post_init__(self):
        if len(self.poses) != len(self.states) or len(self.states) != len(self.sigma) + 1:
            raise ValueError("inconsistent trajectory lengths")

    def rows(self):
        K = len(self.sigma)
        for k in range(K + 1):
            p = self.poses[k]
            z = self.states[k]
            v = "" if self.lyapunov_trace is None else float(self.lyapunov_trace[k])
            yield [k, p.x, p.y, p.psi, z[0], z[1], self.sigma[k] if k < K else "", v]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stride", "x", "y", "psi", "z1", "z2", "sigma", "V"])
            for r in self.rows():
                w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def simulate(lib, sig, pose0, z0, cert=None, envelope=ENVELOPE):
    """Iterate the augmented stride map along ``sig``."""
    pose = pose0
    z = np.asarray(z0, dtype=float)
    poses = [pose]
    states = [z]
    for k, pid in enumerate(sig.indices):
        try:
            pose, z = apply_stride(lib[pid], pose, z, envelope)
        except EnvelopeExceeded as exc:
            raise EnvelopeExceeded(f"stride {k}: {exc}", stride=k, state=exc.state) from None
        poses.append(pose)
        states.append(z)
    states = np.array(states)
    trace = None
    if cert is not None and len(sig):
        active = list(sig.indices) + [sig.indices[-1]]
        trace = np.array([float(cert.lyap(p).V(x)[0]) for p, x in zip(active, states)])
    return StrideTrajectory(poses, states, tuple(sig.indices), trace)


def _levels_member(Z, ellipses, combine):
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    hits = []
    for c, S, level in ellipses:
        D = Z - c
        hits.append(np.einsum("ni,ij,nj->n", D, S, D) <= level)
    return combine(np.array(hits), axis=0)


def in_omega0(z, cert):
    out = _levels_member(z, cert.omega0_ellipses(), np.all)
    return bool(out[0]) if np.ndim(z) == 1 else out


def in_omega(z, cert):
    out = _levels_member(z, cert.omega_set_ellipses(), np.any)
    return bool(out[0]) if np.ndim(z) == 1 else out


# ---------------------------------------------------------------- sampling

def random_fixed_dwell_signal(rng, ids, length, dwell):
    ids = list(ids)
    out = []
    cur = ids[rng.integers(len(ids))]
    while len(out) < length:
        n = dwell + int(rng.geometric(0.5)) - 1
        out.extend([cur] * n)
        if len(ids) > 1:
            others = [i for i in ids if i != cur]
            cur = others[rng.integers(len(others))]
    return SwitchingSignal(tuple(out[:length]))


def random_avg_dwell_signal(rng, ids, length, n0, na, max_tries=1000):
    """Rejection sampler over bursty signals; falls back to a fixed-dwell
    signal with dwell ceil(na), which always satisfies the constraint."""
    ids = list(ids)
    for _ in range(max_tries):
        p_switch = rng.uniform(0.1, 1.0)
        cur = ids[rng.integers(len(ids))]
        out = [cur]
        for _ in range(length - 1):
            if len(ids) > 1 and rng.random() < p_switch:
                others = [i for i in ids if i != cur]
                cur = others[rng.integers(len(others))]
            out.append(cur)
        sig = SwitchingSignal(tuple(out))
        if satisfies_avg_dwell(sig, n0, na):
            return sig
    return random_fixed_dwell_signal(rng, ids, length, max(1, math.ceil(na)))


def sample_omega0(rng, cert, n, max_rounds=1000):
    """Uniform samples from the intersection set, by rejection on its bounding box."""
    lo = np.full(2, -np.inf)
    hi = np.full(2, np.inf)
    for c, S, level in cert.omega0_ellipses():
        half = np.sqrt(level * np.diag(np.linalg.inv(S)))
        lo, hi = np.maximum(lo, c - half), np.minimum(hi, c + half)
    got = []
    total = 0
    for _ in range(max_rounds):
        X = rng.uniform(lo, hi, size=(max(4 * n, 16), 2))
        X = X[in_omega0(X, cert)]
        got.append(X)
        total += len(X)
        if total >= n:
            return np.concatenate(got)[:n]
    raise RuntimeError("could not sample the initial set")


@dataclass
class VerificationReport:
    trials: int
    horizon: int
    mode: str
    dwell: float
    seed: int
    violations: list = field(default_factory=list)
    divergences: list = field(default_factory=list)
    lyapunov_quantiles: dict = field(default_factory=dict)
    decrease_violations: int = 0

    @property
    def n_violations(self):
        return len(self.violations)

    def to_dict(self):
        return {"trials": self.trials, "horizon": self.horizon, "mode": self.mode, "dwell": self.dwell,
                "seed": self.seed, "violations": self.violations, "divergences": self.divergences,
                "lyapunov": self.lyapunov_quantiles, "decrease_violations": self.decrease_violations}


def _trial_rng(seed, trial):
    return np.random.default_rng([int(seed), int(trial)])


def verify_practical_stability(lib, cert, trials=1000, horizon=200, seed=0, dwell=None, n0=None, na=None,
                               envelope=ENVELOPE):
    """Monte Carlo: start in the intersection set, switch admissibly, count
    exits from the trapping set.

    ``dwell`` (fixed mode) or ``n0``/``na`` (average mode) override the
    certificate's constraint, e.g. to probe a deliberately short dwell.
    """
    ids = lib.ids
    if cert.mode == "fixed":
        d = max(1, cert.dwell) if dwell is None else int(dwell)
        sigs = [random_fixed_dwell_signal(_trial_rng(seed, t), ids, horizon, d) for t in range(trials)]
        dwell_used = d
    else:
        n0_ = cert.n0 if n0 is None else n0
        na_ = max(cert.dwell_bound, 1e-9) if na is None else na
        sigs = [random_avg_dwell_signal(_trial_rng(seed, t), ids, horizon, n0_, na_) for t in range(trials)]
        dwell_used = na_
    # initial states use a stream disjoint from the signal streams
    Z = np.array([sample_omega0(_trial_rng(seed, trials + t), cert, 1)[0] for t in range(trials)])
    sig_arr = np.array([s.indices for s in sigs])
    report = VerificationReport(trials, horizon, cert.mode, dwell_used, seed)
    alive = np.ones(trials, dtype=bool)
    flagged = np.zeros(trials, dtype=bool)
    V_all = []
    lam = cert.lambda_max
    for k in range(horizon + 1):
        inside = in_omega(Z, cert)
        bad = alive & ~inside & ~flagged
        for t in np.nonzero(bad)[0]:
            act = int(sig_arr[t, min(k, horizon - 1)])
            report.violations.append({"trial": int(t), "stride": k, "z": Z[t].tolist(), "active": act,
                                      "seed": [int(seed), int(t)]})
        flagged |= bad
        if k == horizon:
            break
        Zn = Z.copy()
        Vk = np.empty(trials)
        Vn = np.empty(trials)
        for pid in ids:
            m = alive & (sig_arr[:, k] == pid)
            if not np.any(m):
                continue
            Zn[m] = evaluate_batch(lib[pid].stride_map, Z[m])
            ly = cert.lyap(pid)
            Vk[m] = ly.V(Z[m])
            Vn[m] = ly.V(Zn[m])
        V_all.append(Vk[alive])
        in_basin = np.array([Vk[t] <= cert.lyap(int(sig_arr[t, k])).kappa_bar for t in range(trials)])
        report.decrease_violations += int(np.sum(alive & in_basin & (Vn > lam * Vk + 1e-15)))
        ok = np.array([check_envelope(z, envelope) for z in Zn])
        for t in np.nonzero(alive & ~ok)[0]:
            report.divergences.append({"trial": int(t), "stride": k, "seed": [int(seed), int(t)]})
        alive &= ok
        Z = np.where(alive[:, None], Zn, Z)
    if V_all:
        V_all = np.concatenate(V_all)
        report.lyapunov_quantiles = {str(q): float(np.quantile(V_all, q)) for q in (0.0, 0.5, 0.9, 0.99, 1.0)}
    return report
