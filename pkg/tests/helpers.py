"""Small fixture builders shared by the test modules."""
import numpy as np

from gaitplan.primitives import GaitPrimitive, PolyMap2


def const_prim(stride_map, length=0.5, dpsi=0.0, bearing=0.0, fixed_point=(0.0, 0.0), pid=1):
    """Primitive with black-box maps and constant displacements."""
    return GaitPrimitive(pid, stride_map, lambda z: length, lambda z: dpsi, lambda z: bearing,
                         np.asarray(fixed_point, dtype=float))


def linear_poly(A, b=(0.0, 0.0)):
    """Affine stride map z -> A z + b as a degree-1 PolyMap2."""
    A = np.asarray(A, dtype=float)
    coef = np.column_stack([np.asarray(b, dtype=float), A[:, 0], A[:, 1]])
    return PolyMap2(coef, 1)


def seeded_lyaps(seed, lam=0.12):
    """Per-primitive Lyapunov data for a seeded synthetic library, or None when
    the fixed points fall outside each other's basins."""
    from gaitplan.certify import check_feasibility, fit_lyapunov
    from gaitplan.primitives import synth_library

    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    turns = rng.choice(np.arange(-60, 61, 5), size=n, replace=False)
    lib = synth_library(turns, contraction=float(rng.uniform(0.08, 0.3)), seed=seed, degrees=True)
    lyaps = tuple(fit_lyapunov(p, lam) for p in lib)
    return (lib, lyaps) if check_feasibility(lib, lyaps) else None


# acceptance criterion -> (passed, detail), filled by test_acceptance and
# printed in the terminal summary
ACCEPTANCE = {}


def record(n, title, passed, detail):
    ACCEPTANCE[n] = (title, bool(passed), detail)
    print(f"criterion {n:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
