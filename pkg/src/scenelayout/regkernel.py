"""Compiled inner loop of the registration loss: Rodrigues rotation and its
derivatives, posing, projection, 2D matching and the chained 7-DoF gradient."""

from __future__ import annotations

import numba
import numpy as np

from .gridnn import MAX_CELLS_PER_AXIS, build, grid_layout, query2

GRID_PER_CELL_2D = 1.0
# residuals below this are rounding noise from re-posing; their subgradient is 0
DIST_EPS = 1e-12


@numba.njit(cache=True, nogil=True)
def _skew(k, out):
    out[0, 0] = 0.0
    out[0, 1] = -k[2]
    out[0, 2] = k[1]
    out[1, 0] = k[2]
    out[1, 1] = 0.0
    out[1, 2] = -k[0]
    out[2, 0] = -k[1]
    out[2, 1] = k[0]
    out[2, 2] = 0.0


@numba.njit(cache=True, nogil=True)
def rodrigues(r):
    theta = np.sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2])
    R = np.eye(3)
    K = np.empty((3, 3))
    if theta < 1e-12:
        _skew(r, K)
        return R + K
    _skew(r / theta, K)
    return R + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


@numba.njit(cache=True, nogil=True)
def rodrigues_jacobian(r):
    """``out[i] = dR/dr_i``."""
    out = np.empty((3, 3, 3))
    theta2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2]
    e = np.zeros(3)
    if theta2 < 1e-16:
        for i in range(3):
            e[:] = 0.0
            e[i] = 1.0
            _skew(e, out[i])
        return out
    R = rodrigues(r)
    rx = np.empty((3, 3))
    _skew(r, rx)
    cx = np.empty((3, 3))
    col = np.empty(3)
    c = np.empty(3)
    for i in range(3):
        for a in range(3):
            col[a] = (1.0 if a == i else 0.0) - R[a, i]
        c[0] = r[1] * col[2] - r[2] * col[1]
        c[1] = r[2] * col[0] - r[0] * col[2]
        c[2] = r[0] * col[1] - r[1] * col[0]
        _skew(c, cx)
        out[i] = ((r[i] * rx + cx) @ R) / theta2
    return out


@numba.njit(cache=True, nogil=True)
def _accumulate(g0, g1, g2, p, y, G, gt, gv):
    gt[0] += g0
    gt[1] += g1
    gt[2] += g2
    gv[0] += g0 * y[0] + g1 * y[1] + g2 * y[2]
    for b in range(3):
        G[0, b] += g0 * p[b]
        G[1, b] += g1 * p[b]
        G[2, b] += g2 * p[b]


@numba.njit(cache=True, nogil=True)
def loss_and_grad(params, P, P2, D, M, d2p, p2d, q2m, m2q, match2d,
                  m_order, m_starts, m_lo, m_h, m_dims,
                  fx, fy, cx, cy, S, w3, w2, symmetric, want_grad):
    """Returns ``(status, l3d, l2d, grad)``; status 1 means a projected point
    is at or behind the camera. ``q2m``/``m2q`` are filled when ``match2d``."""
    r = params[0:3]
    t = params[3:6]
    v = params[6]
    R = rodrigues(r)
    grad = np.zeros(7)
    n2 = P2.shape[0]
    nd = D.shape[0]
    nm = M.shape[0]

    Y2 = np.empty((n2, 3))
    X2 = np.empty((n2, 3))
    Q = np.empty((n2, 2))
    for j in range(n2):
        for a in range(3):
            Y2[j, a] = R[a, 0] * P2[j, 0] + R[a, 1] * P2[j, 1] + R[a, 2] * P2[j, 2]
            X2[j, a] = v * Y2[j, a] + t[a]
        z = X2[j, 2]
        if z <= 0.0:
            return 1, np.inf, np.inf, grad
        Q[j, 0] = (fx * X2[j, 0] / z + cx) / S
        Q[j, 1] = (fy * X2[j, 1] / z + cy) / S

    if match2d:
        query2(M, m_order, m_starts, m_lo, m_h, m_dims, Q, q2m)
        lo, h, dims = grid_layout(Q, GRID_PER_CELL_2D, False, MAX_CELLS_PER_AXIS)
        order, starts = build(Q, lo, h, dims)
        query2(Q, order, starts, lo, h, dims, M, m2q)

    G = np.zeros((3, 3))
    gt = np.zeros(3)
    gv = np.zeros(1)
    y = np.empty(3)

    # depth point -> posed proposal
    cf = 0.5 if symmetric else 1.0
    cw = cf * w3 / nd
    sum_f = 0.0
    for a in range(nd):
        p = P[d2p[a]]
        for k in range(3):
            y[k] = R[k, 0] * p[0] + R[k, 1] * p[1] + R[k, 2] * p[2]
        d0 = v * y[0] + t[0] - D[a, 0]
        d1 = v * y[1] + t[1] - D[a, 1]
        d2 = v * y[2] + t[2] - D[a, 2]
        dist = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
        sum_f += dist
        if want_grad and w3 != 0.0 and dist > DIST_EPS:
            s = cw / dist
            _accumulate(d0 * s, d1 * s, d2 * s, p, y, G, gt, gv)
    l3d = sum_f / nd

    if symmetric:
        n = P.shape[0]
        cb = 0.5 * w3 / n
        sum_b = 0.0
        for j in range(n):
            p = P[j]
            for k in range(3):
                y[k] = R[k, 0] * p[0] + R[k, 1] * p[1] + R[k, 2] * p[2]
            b = p2d[j]
            d0 = v * y[0] + t[0] - D[b, 0]
            d1 = v * y[1] + t[1] - D[b, 1]
            d2 = v * y[2] + t[2] - D[b, 2]
            dist = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            sum_b += dist
            if want_grad and w3 != 0.0 and dist > DIST_EPS:
                s = cb / dist
                _accumulate(d0 * s, d1 * s, d2 * s, p, y, G, gt, gv)
        l3d = 0.5 * (l3d + sum_b / n)

    # projected proposal <-> mask samples
    gQ = np.zeros((n2, 2))
    c_qf = 0.5 * w2 / n2
    c_qb = 0.5 * w2 / nm
    sum_qf = 0.0
    for j in range(n2):
        m = q2m[j]
        e0 = Q[j, 0] - M[m, 0]
        e1 = Q[j, 1] - M[m, 1]
        dist = np.sqrt(e0 * e0 + e1 * e1)
        sum_qf += dist
        if dist > DIST_EPS:
            gQ[j, 0] += c_qf * e0 / dist
            gQ[j, 1] += c_qf * e1 / dist
    sum_qb = 0.0
    for k in range(nm):
        j = m2q[k]
        e0 = Q[j, 0] - M[k, 0]
        e1 = Q[j, 1] - M[k, 1]
        dist = np.sqrt(e0 * e0 + e1 * e1)
        sum_qb += dist
        if dist > DIST_EPS:
            gQ[j, 0] += c_qb * e0 / dist
            gQ[j, 1] += c_qb * e1 / dist
    l2d = 0.5 * (sum_qf / n2 + sum_qb / nm)

    if not want_grad:
        return 0, l3d, l2d, grad

    if w2 != 0.0:
        for j in range(n2):
            z = X2[j, 2]
            g0 = gQ[j, 0] * fx / (S * z)
            g1 = gQ[j, 1] * fy / (S * z)
            g2 = -(g0 * X2[j, 0] + g1 * X2[j, 1]) / z
            _accumulate(g0, g1, g2, P2[j], Y2[j], G, gt, gv)

    dR = rodrigues_jacobian(r)
    for i in range(3):
        acc = 0.0
        for a in range(3):
            for b in range(3):
                acc += dR[i, a, b] * G[a, b]
        grad[i] = v * acc
    grad[3] = gt[0]
    grad[4] = gt[1]
    grad[5] = gt[2]
    grad[6] = gv[0]
    return 0, l3d, l2d, grad
