import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from gaitplan.certify import (
    QuadLyapunov, StabilityCertificate, avg_dwell_bound, certify_library, check_feasibility, check_inclusion,
    dwell_time_bound, ellipse_boundary, estimate_boa, integer_dwell, lyapunov_residual, mu_bound, mu_exact,
    omega_bound, omega_exact, solve_discrete_lyapunov,
)
from gaitplan.errors import NoContractiveLevel, NoFeasibleKappa, NotSchurStable
from gaitplan.primitives import GaitLibrary, GaitPrimitive, PolyMap2
from gaitplan.switching import in_omega, in_omega0, sample_omega0

from helpers import const_prim, linear_poly, seeded_lyaps

I2 = np.eye(2)


def lyap(center=(0.0, 0.0), S=I2, kappa_bar=1.0, lam=0.5):
    return QuadLyapunov(np.asarray(S, dtype=float), lam, kappa_bar, np.asarray(center, dtype=float))


def schur_matrices(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        A = rng.normal(size=(2, 2))
        rho = np.max(np.abs(np.linalg.eigvals(A)))
        out.append(A * rng.uniform(0.01, 0.99) / rho)
    return out


# ---------------------------------------------------------------- Lyapunov equation

def test_lyapunov_zero_matrix():
    assert np.allclose(solve_discrete_lyapunov(np.zeros((2, 2)), I2), I2, atol=1e-14)


def test_lyapunov_geometric_series():
    # S = sum_k (0.25)^k I = 4/3 I
    assert np.allclose(solve_discrete_lyapunov(0.5 * I2, I2), 4 / 3 * I2, atol=1e-14)


@pytest.mark.parametrize("A", [I2, np.array([[0.0, 1.0], [-1.0, 0.0]]), np.diag([0.5, -1.0])])
def test_lyapunov_rejects_unit_radius(A):
    with pytest.raises(NotSchurStable):
        solve_discrete_lyapunov(A)


def test_lyapunov_matches_scipy():
    for A in schur_matrices(50, 1):
        S = solve_discrete_lyapunov(A)
        # scipy solves a X a^H - X + q = 0, so pass a = A^T
        assert np.allclose(S, scipy.linalg.solve_discrete_lyapunov(A.T, I2), rtol=1e-9, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(a=st.lists(st.floats(-3, 3), min_size=4, max_size=4), r=st.floats(0.0, 0.995))
def test_lyapunov_residual_property(a, r):
    A = np.reshape(a, (2, 2))
    rho = np.max(np.abs(np.linalg.eigvals(A)))
    if rho < 1e-6:
        return
    A = A * r / rho
    S = solve_discrete_lyapunov(A)
    assert lyapunov_residual(A, S) <= 1e-10 * max(1.0, np.max(np.abs(S)))
    assert np.min(np.linalg.eigvalsh(S)) > 0


# ---------------------------------------------------------------- basin estimate

def test_boa_global_contraction_hits_ceiling():
    prim = const_prim(lambda z: 0.3 * np.asarray(z))
    assert estimate_boa(prim, lyap(lam=0.12)) == 1.0


def _grid_oracle_level(rho, lam, levels, n_ang=720, n_rad=200):
    """Largest level on a fine scan below which every polar sample contracts."""
    t = np.linspace(0, 2 * np.pi, n_ang, endpoint=False)
    best = 0.0
    for level in levels:
        r = np.sqrt(level) * np.linspace(0, 1, n_rad + 1)[1:]
        X = (r[:, None, None] * np.stack([np.cos(t), np.sin(t)], -1)[None]).reshape(-1, 2)
        Y = np.array([rho(x) for x in X])
        if np.all(np.sum(Y ** 2, 1) <= lam * np.sum(X ** 2, 1) + 1e-15):
            best = level
        else:
            break
    return best


def test_boa_matches_grid_oracle():
    def rho(x):
        x = np.asarray(x, dtype=float)
        return 0.3 * x + np.array([x[0] ** 2, 0.0])

    kbar = estimate_boa(const_prim(rho), lyap(lam=0.5))
    oracle = _grid_oracle_level(rho, 0.5, np.linspace(0.10, 0.25, 301), n_ang=360, n_rad=60)
    analytic = (math.sqrt(0.5) - 0.3) ** 2
    assert oracle == pytest.approx(analytic, rel=0.01)
    assert kbar == pytest.approx(oracle, rel=0.05)


def test_boa_no_contractive_level():
    with pytest.raises(NoContractiveLevel):
        estimate_boa(const_prim(lambda z: 0.99 * np.asarray(z)), lyap(lam=0.12))


def test_boa_verified_on_samples(lib3, cert3):
    rng = np.random.default_rng(0)
    for p, ly in zip(lib3, cert3.lyaps):
        u = rng.normal(size=(2000, 2))
        u /= np.linalg.norm(u, axis=1)[:, None]
        u *= np.sqrt(rng.uniform(0, 1, (2000, 1)))
        L = np.linalg.cholesky(ly.S)
        X = ly.center + np.sqrt(ly.kappa_bar) * np.linalg.solve(L.T, u.T).T
        Y = p.stride_map.batch(X)
        assert np.all(ly.V(Y) <= ly.lam * ly.V(X) + 1e-15)


# ---------------------------------------------------------------- feasibility and set bounds

def _two_prim_lib(d):
    prims = (const_prim(lambda z: np.asarray(z), fixed_point=(0.0, 0.0), pid=1),
             const_prim(lambda z: np.asarray(z), fixed_point=(d, 0.0), pid=2))
    return GaitLibrary(prims)


def test_feasibility_single_primitive():
    lib = GaitLibrary((const_prim(lambda z: z),))
    assert check_feasibility(lib, (lyap(kappa_bar=0.15),))


@pytest.mark.parametrize("d, expected", [(0.3, True), (0.5, False)])
def test_feasibility_by_hand(d, expected):
    lib = _two_prim_lib(d)
    lyaps = (lyap((0, 0), kappa_bar=0.15), lyap((d, 0), kappa_bar=0.15))
    assert check_feasibility(lib, lyaps) is expected


def test_bounds_single_primitive():
    ls = (lyap(),)
    for kappa in (1e-4, 0.01, 0.3):
        assert omega_bound(kappa, ls) == pytest.approx(kappa, rel=1e-14)
        assert mu_bound(kappa, ls) == 1.0


def test_bounds_by_hand():
    ls = (lyap((0, 0)), lyap((0.1, 0)))
    assert omega_bound(0.01, ls) == pytest.approx((0.1 + 0.1) ** 2, rel=1e-12)
    assert mu_bound(0.01, ls) == pytest.approx((1 + 10 * 0.1) ** 2, rel=1e-12)


def test_exact_single_primitive():
    ls = (lyap(S=[[2.0, 0.3], [0.3, 1.0]], kappa_bar=0.5),)
    assert omega_exact(0.01, ls) == pytest.approx(0.01, abs=1e-6)
    assert mu_exact(0.01, ls) == pytest.approx(1.0, abs=1e-6)


def test_exact_identical_primitives():
    S = [[2.0, 0.3], [0.3, 1.0]]
    ls = (lyap(S=S, kappa_bar=0.5), lyap(S=S, kappa_bar=0.5))
    assert mu_exact(0.01, ls) == pytest.approx(1.0, abs=1e-12)


def test_exact_by_hand_circle():
    # two unit-S circles 0.1 apart: the farthest point of one kappa-circle from
    # the other center sits at distance 0.1 + sqrt(kappa)
    ls = (lyap((0, 0)), lyap((0.1, 0)))
    assert omega_exact(0.01, ls, n_angles=4096) == pytest.approx(0.04, rel=1e-5)


@pytest.mark.parametrize("seed", range(8))
def test_bound_dominance_sample(seed):
    lib, ls = seeded_lyaps(seed)
    kb = min(l.kappa_bar for l in ls)
    for kappa in np.logspace(-6, math.log10(kb), 4):
        assert omega_bound(kappa, ls) >= omega_exact(kappa, ls)
        assert mu_bound(kappa, ls) >= mu_exact(kappa, ls, n_region=2000)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k1=st.floats(1e-6, 0.5), k2=st.floats(1e-6, 0.5))
def test_bound_shape(seed, k1, k2):
    _, ls = seeded_lyaps(seed)
    lo, hi = sorted((k1, k2))
    assert mu_bound(lo, ls) >= 1.0 and mu_bound(hi, ls) >= 1.0
    assert omega_bound(lo, ls) >= lo
    assert omega_bound(hi, ls) >= omega_bound(lo, ls)
    assert mu_bound(hi, ls) <= mu_bound(lo, ls)


# ---------------------------------------------------------------- dwell arithmetic

def test_dwell_paper_constants():
    b = dwell_time_bound(8.08, 0.12)
    assert b == pytest.approx(0.985, abs=1e-3)
    assert integer_dwell(b) == 1
    assert avg_dwell_bound(8.08, 0.12) == pytest.approx(0.985, abs=1e-3)


def test_dwell_trivial_cases():
    assert dwell_time_bound(1.0, 0.3) == 0.0
    assert avg_dwell_bound(1.0, 0.7) == 0.0
    assert dwell_time_bound(math.e ** 2, math.exp(-1)) == pytest.approx(2.0, abs=1e-14)
    assert avg_dwell_bound(4.0, 0.5) == pytest.approx(2.0, abs=1e-14)
    assert integer_dwell(2.0) == 2
    assert integer_dwell(2.0001) == 3
    with pytest.raises(ValueError):
        dwell_time_bound(0.5, 0.1)


# ---------------------------------------------------------------- inclusion

def test_inclusion_concentric():
    ls = (lyap(kappa_bar=0.2), lyap(kappa_bar=0.2))
    assert check_inclusion([0.1, 0.1], ls)


def test_inclusion_offset_circles():
    ls = (lyap((0, 0), kappa_bar=0.04), lyap((0.1, 0), kappa_bar=0.04))
    # sqrt(level) + 0.1 against sqrt(kappa_bar) = 0.2
    assert not check_inclusion([0.11 ** 2, 0.11 ** 2], ls)
    assert check_inclusion([0.09 ** 2, 0.09 ** 2], ls)


# ---------------------------------------------------------------- certify_library

def test_certify_single_primitive(lib1, cert1):
    assert cert1.mu == 1.0
    assert cert1.dwell_bound == 0.0
    assert cert1.dwell == 0
    (c0, S0, l0), = cert1.omega0_ellipses()
    (c1, S1, l1), = cert1.omega_set_ellipses()
    assert l0 == l1 == cert1.omega
    assert np.array_equal(S0, S1) and np.array_equal(c0, lib1[1].fixed_point)
    assert cert1.omega == pytest.approx(omega_bound(cert1.kappa, cert1.lyaps))


def test_certify_three_primitives(lib3, cert3):
    assert cert3.dwell == 1
    assert cert3.feasible and cert3.mode == "fixed"
    assert cert3.mu >= 1 and cert3.omega >= cert3.kappa and cert3.dwell_bound >= 0
    assert cert3.lambda_max == max(l.lam for l in cert3.lyaps)
    assert cert3.dwell_bound == pytest.approx(dwell_time_bound(cert3.mu, cert3.lambda_max))
    assert cert3.mu == pytest.approx(mu_bound(cert3.kappa, cert3.lyaps))


def _certificate_sound(cert):
    levels = [cert.omega_set_level] * len(cert.lyaps)
    assert check_inclusion(levels, cert.lyaps, margin=1.0)
    assert cert.omega0_level <= cert.omega_set_level
    X = sample_omega0(np.random.default_rng(0), cert, 2000)
    assert np.all(in_omega0(X, cert)) and np.all(in_omega(X, cert))


def test_certificate_soundness(cert3, cert3_avg, cert1):
    for c in (cert3, cert3_avg, cert1):
        _certificate_sound(c)
    assert cert3_avg.mode == "average" and cert3_avg.n0 == 2
    assert cert3_avg.omega_set_level == pytest.approx(cert3_avg.mu ** 2 * cert3_avg.omega)


def test_certify_infeasible_library():
    prims = tuple(GaitPrimitive(i + 1, linear_poly(0.3 * I2, 0.7 * np.array(c)), PolyMap2([[0.5]], 0),
                                PolyMap2([[0.0]], 0), PolyMap2([[0.0]], 0), np.array(c))
                  for i, c in enumerate([(0.0, 0.0), (3.0, 0.0)]))
    with pytest.raises(NoFeasibleKappa):
        certify_library(GaitLibrary(prims))


def test_certificate_roundtrip(tmp_path, cert3_avg):
    path = tmp_path / "cert.json"
    cert3_avg.save(path, config={"seed": 0})
    back = StabilityCertificate.load(path)
    for k in ("mode", "kappa", "omega", "mu", "lambda_max", "dwell_bound", "n0", "dwell"):
        assert getattr(back, k) == getattr(cert3_avg, k)
    for a, b in zip(back.lyaps, cert3_avg.lyaps):
        assert np.array_equal(a.S, b.S) and a.kappa_bar == b.kappa_bar


def test_ellipse_boundary_level():
    S = np.array([[3.0, 0.5], [0.5, 1.0]])
    B = ellipse_boundary((0.2, 0.1), S, 0.04, np.linspace(0, 6, 50))
    D = B - [0.2, 0.1]
    assert np.allclose(np.einsum("ni,ij,nj->n", D, S, D), 0.04, rtol=1e-12)
