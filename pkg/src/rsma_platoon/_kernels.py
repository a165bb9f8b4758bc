"""Hot numeric kernels with two interchangeable back ends.

Every kernel exists twice: a loop version compiled with numba ``@njit`` and a
vectorised pure-numpy version.  The loop version is selected when numba imports
and ``RSMA_PLATOON_DISABLE_NUMBA`` is unset (or ``0``); otherwise the numpy
version is used.  Both are importable under their explicit names so tests and
``benchmarks/bench_kernels.py`` can compare them directly.

Heading rules (``printed`` flag):
    False -> phi' = phi + v * sin(beta) / l_r * dt   (kinematic bicycle)
    True  -> phi' = phi + v * beta * tan(delta) / (l_f + l_r) * dt
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

_DISABLED = os.environ.get("RSMA_PLATOON_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")
USE_NUMBA = _numba is not None and not _DISABLED


def _jit(fn):
    if _numba is None:
        return fn
    return _numba.njit(cache=True)(fn)


# ---------------------------------------------------------------------------
# kinematic bicycle: rollout
# ---------------------------------------------------------------------------

def _rollout_loop(z0, U, lf, lr, dt, printed):
    V, N = U.shape[0], U.shape[1]
    Z = np.empty((V, N + 1, 4))
    wb = lf + lr
    for i in range(V):
        x, y, phi, v = z0[i, 0], z0[i, 1], z0[i, 2], z0[i, 3]
        Z[i, 0, 0] = x
        Z[i, 0, 1] = y
        Z[i, 0, 2] = phi
        Z[i, 0, 3] = v
        for j in range(N):
            a = U[i, j, 0]
            d = U[i, j, 1]
            td = np.tan(d)
            beta = np.arctan(td * lr / wb)
            nx = x + v * np.cos(phi + beta) * dt
            ny = y + v * np.sin(phi + beta) * dt
            if printed:
                nphi = phi + v * beta * td / wb * dt
            else:
                nphi = phi + v * np.sin(beta) / lr * dt
            nv = v + a * dt
            x, y, phi, v = nx, ny, nphi, nv
            Z[i, j + 1, 0] = x
            Z[i, j + 1, 1] = y
            Z[i, j + 1, 2] = phi
            Z[i, j + 1, 3] = v
    return Z


def rollout_numpy(z0, U, lf, lr, dt, printed):
    z0 = np.asarray(z0, dtype=float)
    U = np.asarray(U, dtype=float)
    V, N = U.shape[0], U.shape[1]
    wb = lf + lr
    Z = np.empty((V, N + 1, 4))
    Z[:, 0] = z0
    z = z0.copy()
    for j in range(N):
        a, d = U[:, j, 0], U[:, j, 1]
        td = np.tan(d)
        beta = np.arctan(td * lr / wb)
        x, y, phi, v = z[:, 0], z[:, 1], z[:, 2], z[:, 3]
        if printed:
            dphi = v * beta * td / wb
        else:
            dphi = v * np.sin(beta) / lr
        z = np.stack(
            [x + v * np.cos(phi + beta) * dt,
             y + v * np.sin(phi + beta) * dt,
             phi + dphi * dt,
             v + a * dt],
            axis=1,
        )
        Z[:, j + 1] = z
    return Z


rollout_numba = _jit(_rollout_loop)


# ---------------------------------------------------------------------------
# kinematic bicycle: one-step Jacobians along a trajectory
# ---------------------------------------------------------------------------

def _jacobians_loop(Z, U, lf, lr, dt, printed):
    # Z: (V, N, 4) states at which each step is taken, U: (V, N, 2)
    V, N = U.shape[0], U.shape[1]
    A = np.zeros((V, N, 4, 4))
    B = np.zeros((V, N, 4, 2))
    wb = lf + lr
    k = lr / wb
    for i in range(V):
        for j in range(N):
            phi = Z[i, j, 2]
            v = Z[i, j, 3]
            d = U[i, j, 1]
            td = np.tan(d)
            sec2 = 1.0 + td * td
            beta = np.arctan(td * k)
            dbeta = k * sec2 / (1.0 + k * k * td * td)
            s = np.sin(phi + beta)
            c = np.cos(phi + beta)
            A[i, j, 0, 0] = 1.0
            A[i, j, 1, 1] = 1.0
            A[i, j, 2, 2] = 1.0
            A[i, j, 3, 3] = 1.0
            A[i, j, 0, 2] = -v * s * dt
            A[i, j, 0, 3] = c * dt
            A[i, j, 1, 2] = v * c * dt
            A[i, j, 1, 3] = s * dt
            B[i, j, 0, 1] = -v * s * dbeta * dt
            B[i, j, 1, 1] = v * c * dbeta * dt
            if printed:
                A[i, j, 2, 3] = beta * td / wb * dt
                B[i, j, 2, 1] = v * (dbeta * td + beta * sec2) / wb * dt
            else:
                A[i, j, 2, 3] = np.sin(beta) / lr * dt
                B[i, j, 2, 1] = v * np.cos(beta) * dbeta / lr * dt
            B[i, j, 3, 0] = dt
    return A, B


def jacobians_numpy(Z, U, lf, lr, dt, printed):
    Z = np.asarray(Z, dtype=float)
    U = np.asarray(U, dtype=float)
    V, N = U.shape[0], U.shape[1]
    wb = lf + lr
    k = lr / wb
    phi, v, d = Z[:, :N, 2], Z[:, :N, 3], U[:, :, 1]
    td = np.tan(d)
    sec2 = 1.0 + td * td
    beta = np.arctan(td * k)
    dbeta = k * sec2 / (1.0 + k * k * td * td)
    s, c = np.sin(phi + beta), np.cos(phi + beta)
    A = np.zeros((V, N, 4, 4))
    A[..., [0, 1, 2, 3], [0, 1, 2, 3]] = 1.0
    A[..., 0, 2] = -v * s * dt
    A[..., 0, 3] = c * dt
    A[..., 1, 2] = v * c * dt
    A[..., 1, 3] = s * dt
    B = np.zeros((V, N, 4, 2))
    B[..., 0, 1] = -v * s * dbeta * dt
    B[..., 1, 1] = v * c * dbeta * dt
    if printed:
        A[..., 2, 3] = beta * td / wb * dt
        B[..., 2, 1] = v * (dbeta * td + beta * sec2) / wb * dt
    else:
        A[..., 2, 3] = np.sin(beta) / lr * dt
        B[..., 2, 1] = v * np.cos(beta) * dbeta / lr * dt
    B[..., 3, 0] = dt
    return A, B


jacobians_numba = _jit(_jacobians_loop)


# ---------------------------------------------------------------------------
# condensing: dz_{j+1} = sum_{i<=j} Phi(j, i) B_i du_i
# ---------------------------------------------------------------------------

def _condense_loop(A, B):
    V, N = A.shape[0], A.shape[1]
    S = np.zeros((V, N, 4, 2 * N))
    for i in range(V):
        for j in range(N):
            # S[j] = A_j S[j-1] + [0 .. B_j .. 0]
            if j > 0:
                for r in range(4):
                    for col in range(2 * j):
                        acc = 0.0
                        for q in range(4):
                            acc += A[i, j, r, q] * S[i, j - 1, q, col]
                        S[i, j, r, col] = acc
            for r in range(4):
                S[i, j, r, 2 * j] = B[i, j, r, 0]
                S[i, j, r, 2 * j + 1] = B[i, j, r, 1]
    return S


def condense_numpy(A, B):
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    V, N = A.shape[0], A.shape[1]
    S = np.zeros((V, N, 4, 2 * N))
    for j in range(N):
        if j > 0:
            S[:, j, :, : 2 * j] = np.einsum("vrq,vqc->vrc", A[:, j], S[:, j - 1, :, : 2 * j])
        S[:, j, :, 2 * j: 2 * j + 2] = B[:, j]
    return S


condense_numba = _jit(_condense_loop)


# ---------------------------------------------------------------------------
# received stream powers |h_k^H p_s|^2 over slots
# ---------------------------------------------------------------------------

def _stream_gains_loop(H, P):
    # H: (T, K, M) complex, P: (T, M, S) complex -> (T, K, S)
    T, K, M = H.shape
    S = P.shape[2]
    out = np.empty((T, K, S))
    for t in range(T):
        for k in range(K):
            for s in range(S):
                re = 0.0
                im = 0.0
                for m in range(M):
                    hr = H[t, k, m].real
                    hi = -H[t, k, m].imag
                    pr = P[t, m, s].real
                    pi = P[t, m, s].imag
                    re += hr * pr - hi * pi
                    im += hr * pi + hi * pr
                out[t, k, s] = re * re + im * im
    return out


def stream_gains_numpy(H, P):
    inner = np.einsum("tkm,tms->tks", np.conj(np.asarray(H)), np.asarray(P))
    return inner.real ** 2 + inner.imag ** 2


stream_gains_numba = _jit(_stream_gains_loop)


# ---------------------------------------------------------------------------
# separating-axis test for all pairs of oriented rectangles
# ---------------------------------------------------------------------------

def _rect_overlap_loop(cx, cy, ang, hl, hw, tol):
    n = cx.shape[0]
    out = np.zeros((n, n), dtype=np.bool_)
    ca = np.cos(ang)
    sa = np.sin(ang)
    for i in range(n):
        out[i, i] = True
        for j in range(i + 1, n):
            dx = cx[j] - cx[i]
            dy = cy[j] - cy[i]
            sep = False
            for a in range(4):
                if a == 0:
                    ax, ay = ca[i], sa[i]
                elif a == 1:
                    ax, ay = -sa[i], ca[i]
                elif a == 2:
                    ax, ay = ca[j], sa[j]
                else:
                    ax, ay = -sa[j], ca[j]
                ri = hl[i] * abs(ax * ca[i] + ay * sa[i]) + hw[i] * abs(-ax * sa[i] + ay * ca[i])
                rj = hl[j] * abs(ax * ca[j] + ay * sa[j]) + hw[j] * abs(-ax * sa[j] + ay * ca[j])
                if abs(ax * dx + ay * dy) > ri + rj + tol:
                    sep = True
                    break
            out[i, j] = not sep
            out[j, i] = not sep
    return out


def rect_overlap_numpy(cx, cy, ang, hl, hw, tol):
    cx, cy, ang = (np.asarray(a, dtype=float) for a in (cx, cy, ang))
    hl, hw = np.asarray(hl, dtype=float), np.asarray(hw, dtype=float)
    ca, sa = np.cos(ang), np.sin(ang)
    # axes: (n, 2 per rect, 2)
    axes = np.stack([np.stack([ca, sa], -1), np.stack([-sa, ca], -1)], axis=1)
    d = np.stack([cx[None, :] - cx[:, None], cy[None, :] - cy[:, None]], -1)  # (n, n, 2)
    sep = np.zeros(d.shape[:2], dtype=bool)
    for owner in (0, 1):
        for k in range(2):
            if owner == 0:
                axv = np.broadcast_to(axes[:, None, k], d.shape)
            else:
                axv = np.broadcast_to(axes[None, :, k], d.shape)
            proj_d = np.abs(np.sum(axv * d, -1))
            ri = hl[:, None] * np.abs(axv[..., 0] * ca[:, None] + axv[..., 1] * sa[:, None]) + \
                hw[:, None] * np.abs(-axv[..., 0] * sa[:, None] + axv[..., 1] * ca[:, None])
            rj = hl[None, :] * np.abs(axv[..., 0] * ca[None, :] + axv[..., 1] * sa[None, :]) + \
                hw[None, :] * np.abs(-axv[..., 0] * sa[None, :] + axv[..., 1] * ca[None, :])
            sep |= proj_d > ri + rj + tol
    out = ~sep
    np.fill_diagonal(out, True)
    return out


rect_overlap_numba = _jit(_rect_overlap_loop)


if USE_NUMBA:
    rollout = rollout_numba
    jacobians = jacobians_numba
    condense = condense_numba
    stream_gains = stream_gains_numba
    rect_overlap = rect_overlap_numba
else:
    rollout = rollout_numpy
    jacobians = jacobians_numpy
    condense = condense_numpy
    stream_gains = stream_gains_numpy
    rect_overlap = rect_overlap_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
