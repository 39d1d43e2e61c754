"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``GAITPLAN_DISABLE_NUMBA`` is
unset (or "0"). Both implementations are always reachable through
``numpy_impl`` and ``numba_impl`` so tests and the benchmark can compare them.
"""
import math
import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

ENV_FLAG = "GAITPLAN_DISABLE_NUMBA"
USE_NUMBA = HAVE_NUMBA and os.environ.get(ENV_FLAG, "0").lower() in ("", "0", "false", "no")

TWO_PI = 2.0 * math.pi


def monomial_exponents(degree):
    """Exponent pairs (i, j) of z1^i z2^j ordered by total degree, then by
    descending power of z1."""
    out = []
    for t in range(degree + 1):
        for i in range(t, -1, -1):
            out.append((i, t - i))
    return np.array(out, dtype=np.int64).reshape(-1, 2)


# ---------------------------------------------------------------- numpy path

def _np_wrap(a):
    w = math.pi - np.mod(math.pi - a, TWO_PI)
    return np.where(w <= -math.pi, w + TWO_PI, w)


def _np_poly_eval(U, exps, coef):
    # U: (n, 2) shifted+scaled inputs, coef: (m, T) -> (n, m)
    V = U[:, None, 0] ** exps[None, :, 0] * U[:, None, 1] ** exps[None, :, 1]
    return V @ coef.T


def _np_expand_children(state, centers, scales, coefs, exps):
    # state: (x, y, psi, z1, z2); coefs: (P, 5, T) rows z1', z2', l, dpsi, bearing
    z = state[3:5]
    U = (z[None, :] - centers) / scales[:, None]
    V = U[:, None, 0] ** exps[None, :, 0] * U[:, None, 1] ** exps[None, :, 1]
    vals = np.einsum("pt,pkt->pk", V, coefs)
    out = np.empty((centers.shape[0], 5))
    ang = state[2] + vals[:, 4]
    out[:, 0] = state[0] + vals[:, 2] * np.cos(ang)
    out[:, 1] = state[1] + vals[:, 2] * np.sin(ang)
    out[:, 2] = _np_wrap(state[2] + vals[:, 3])
    out[:, 3] = vals[:, 0]
    out[:, 4] = vals[:, 1]
    return out


def _np_quad_form(X, c, S):
    D = X - c
    return np.einsum("ni,ij,nj->n", D, S, D)


def _np_points_in_any(P, A, b, starts, bboxes):
    hit = np.zeros(P.shape[0], dtype=np.bool_)
    for k in range(bboxes.shape[0]):
        xmin, xmax, ymin, ymax = bboxes[k]
        cand = ~hit & (P[:, 0] >= xmin) & (P[:, 0] <= xmax) & (P[:, 1] >= ymin) & (P[:, 1] <= ymax)
        idx = np.nonzero(cand)[0]
        if idx.size == 0:
            continue
        Ak = A[starts[k]:starts[k + 1]]
        bk = b[starts[k]:starts[k + 1]]
        inside = np.all(P[idx] @ Ak.T <= bk[None, :], axis=1)
        hit[idx[inside]] = True
    return hit


# ---------------------------------------------------------------- loop path
# Written for numba; also valid (slow) Python.

def _lp_wrap(a):
    w = math.pi - ((math.pi - a) - TWO_PI * math.floor((math.pi - a) / TWO_PI))
    if w <= -math.pi:
        w += TWO_PI
    return w


def _lp_poly_eval(U, exps, coef):
    n = U.shape[0]
    m, T = coef.shape
    out = np.zeros((n, m))
    for r in range(n):
        for t in range(T):
            v = U[r, 0] ** exps[t, 0] * U[r, 1] ** exps[t, 1]
            for k in range(m):
                out[r, k] += coef[k, t] * v
    return out


def _lp_expand_children(state, centers, scales, coefs, exps):
    P = centers.shape[0]
    T = exps.shape[0]
    out = np.empty((P, 5))
    for p in range(P):
        u1 = (state[3] - centers[p, 0]) / scales[p]
        u2 = (state[4] - centers[p, 1]) / scales[p]
        v0 = 0.0
        v1 = 0.0
        v2 = 0.0
        v3 = 0.0
        v4 = 0.0
        for t in range(T):
            m = u1 ** exps[t, 0] * u2 ** exps[t, 1]
            v0 += coefs[p, 0, t] * m
            v1 += coefs[p, 1, t] * m
            v2 += coefs[p, 2, t] * m
            v3 += coefs[p, 3, t] * m
            v4 += coefs[p, 4, t] * m
        ang = state[2] + v4
        out[p, 0] = state[0] + v2 * math.cos(ang)
        out[p, 1] = state[1] + v2 * math.sin(ang)
        a = state[2] + v3
        w = math.pi - ((math.pi - a) - TWO_PI * math.floor((math.pi - a) / TWO_PI))
        if w <= -math.pi:
            w += TWO_PI
        out[p, 2] = w
        out[p, 3] = v0
        out[p, 4] = v1
    return out


def _lp_quad_form(X, c, S):
    n = X.shape[0]
    out = np.empty(n)
    for r in range(n):
        d0 = X[r, 0] - c[0]
        d1 = X[r, 1] - c[1]
        out[r] = S[0, 0] * d0 * d0 + (S[0, 1] + S[1, 0]) * d0 * d1 + S[1, 1] * d1 * d1
    return out


def _lp_points_in_any(P, A, b, starts, bboxes):
    n = P.shape[0]
    m = bboxes.shape[0]
    hit = np.zeros(n, dtype=np.bool_)
    for r in range(n):
        px = P[r, 0]
        py = P[r, 1]
        for k in range(m):
            if px < bboxes[k, 0] or px > bboxes[k, 1] or py < bboxes[k, 2] or py > bboxes[k, 3]:
                continue
            inside = True
            for h in range(starts[k], starts[k + 1]):
                if A[h, 0] * px + A[h, 1] * py > b[h]:
                    inside = False
                    break
            if inside:
                hit[r] = True
                break
    return hit


numpy_impl = SimpleNamespace(
    name="numpy",
    wrap=_np_wrap,
    poly_eval=_np_poly_eval,
    expand_children=_np_expand_children,
    quad_form=_np_quad_form,
    points_in_any=_np_points_in_any,
)

if HAVE_NUMBA:
    _jit = numba.njit(cache=True, fastmath=False)
    numba_impl = SimpleNamespace(
        name="numba",
        wrap=_jit(_lp_wrap),
        poly_eval=_jit(_lp_poly_eval),
        expand_children=_jit(_lp_expand_children),
        quad_form=_jit(_lp_quad_form),
        points_in_any=_jit(_lp_points_in_any),
    )
else:  # pragma: no cover
    numba_impl = None

active = numba_impl if USE_NUMBA else numpy_impl

poly_eval = active.poly_eval
expand_children = active.expand_children
quad_form = active.quad_form
points_in_any = active.points_in_any


def wrap_angle(a):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    if np.ndim(a) == 0:
        return _lp_wrap(float(a))
    return _np_wrap(np.asarray(a, dtype=float))
