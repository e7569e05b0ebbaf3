"""Loop-level numba versions of the element kernels.

Signatures and results match :mod:`cda_eit._kernels._numpy`; the numpy
module is the readable reference, these are the fast path.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def geometry(coords):
    nt = coords.shape[0]
    areas = np.empty(nt)
    grads = np.empty((nt, 3, 2))
    for t in range(nt):
        x0, y0 = coords[t, 0, 0], coords[t, 0, 1]
        x1, y1 = coords[t, 1, 0], coords[t, 1, 1]
        x2, y2 = coords[t, 2, 0], coords[t, 2, 1]
        a = 0.5 * ((x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0))
        areas[t] = a
        inv = 1.0 / (2.0 * a)
        grads[t, 0, 0] = (y1 - y2) * inv
        grads[t, 0, 1] = (x2 - x1) * inv
        grads[t, 1, 0] = (y2 - y0) * inv
        grads[t, 1, 1] = (x0 - x2) * inv
        grads[t, 2, 0] = (y0 - y1) * inv
        grads[t, 2, 1] = (x1 - x0) * inv
    return areas, grads


@njit(cache=True)
def p1_local_matrix(areas, grads, kvals, mass_weight):
    nt = areas.shape[0]
    out = np.empty((nt, 3, 3))
    for t in range(nt):
        ka = kvals[t] * areas[t]
        mw = mass_weight * areas[t] / 12.0
        for i in range(3):
            for j in range(3):
                s = grads[t, i, 0] * grads[t, j, 0] + grads[t, i, 1] * grads[t, j, 1]
                out[t, i, j] = ka * s + mw * (2.0 if i == j else 1.0)
    return out


@njit(cache=True)
def _rt0_phi(coords, t, area, signs, phi):
    # phi[q, i, :] = basis i at midpoint of edge q
    for q in range(3):
        a = (q + 1) % 3
        b = (q + 2) % 3
        mx = 0.5 * (coords[t, a, 0] + coords[t, b, 0])
        my = 0.5 * (coords[t, a, 1] + coords[t, b, 1])
        for i in range(3):
            f = signs[t, i] / (2.0 * area)
            phi[q, i, 0] = f * (mx - coords[t, i, 0])
            phi[q, i, 1] = f * (my - coords[t, i, 1])


@njit(cache=True)
def rt0_local_matrix(coords, areas, signs, kinv):
    nt = areas.shape[0]
    out = np.empty((nt, 3, 3))
    phi = np.empty((3, 3, 2))
    for t in range(nt):
        area = areas[t]
        _rt0_phi(coords, t, area, signs, phi)
        w = kinv[t] * area / 3.0
        for i in range(3):
            for j in range(3):
                s = 0.0
                for q in range(3):
                    s += phi[q, i, 0] * phi[q, j, 0] + phi[q, i, 1] * phi[q, j, 1]
                out[t, i, j] = w * s + signs[t, i] * signs[t, j] / area
    return out


@njit(cache=True)
def _local_m(grads, th_loc, t, m):
    d00 = 0.0
    d01 = 0.0
    d10 = 0.0
    d11 = 0.0
    for i in range(3):
        d00 += th_loc[t, i, 0] * grads[t, i, 0]
        d01 += th_loc[t, i, 0] * grads[t, i, 1]
        d10 += th_loc[t, i, 1] * grads[t, i, 0]
        d11 += th_loc[t, i, 1] * grads[t, i, 1]
    div = d00 + d11
    m[0, 0] = 2.0 * d00 - div
    m[0, 1] = d01 + d10
    m[1, 0] = d01 + d10
    m[1, 1] = 2.0 * d11 - div
    return div


@njit(cache=True)
def shape_gradient_local(areas, grads, kvals, u_loc):
    nt = areas.shape[0]
    out = np.empty((nt, 3, 2))
    for t in range(nt):
        gx = 0.0
        gy = 0.0
        ssq = 0.0
        ssum = 0.0
        for i in range(3):
            gx += u_loc[t, i] * grads[t, i, 0]
            gy += u_loc[t, i] * grads[t, i, 1]
            ssq += u_loc[t, i] * u_loc[t, i]
            ssum += u_loc[t, i]
        gu2 = gx * gx + gy * gy
        usq = (ssq + ssum * ssum) * areas[t] / 12.0
        ka = kvals[t] * areas[t]
        for i in range(3):
            gd = grads[t, i, 0] * gx + grads[t, i, 1] * gy
            out[t, i, 0] = 0.5 * (ka * (2.0 * gx * gd - grads[t, i, 0] * gu2) - grads[t, i, 0] * usq)
            out[t, i, 1] = 0.5 * (ka * (2.0 * gy * gd - grads[t, i, 1] * gu2) - grads[t, i, 1] * usq)
    return out


@njit(cache=True)
def dgdu_local(areas, grads, kvals, u_loc, th_loc):
    nt = areas.shape[0]
    out = np.empty((nt, 3))
    m = np.empty((2, 2))
    for t in range(nt):
        div = _local_m(grads, th_loc, t, m)
        gx = 0.0
        gy = 0.0
        ssum = 0.0
        for i in range(3):
            gx += u_loc[t, i] * grads[t, i, 0]
            gy += u_loc[t, i] * grads[t, i, 1]
            ssum += u_loc[t, i]
        mx = m[0, 0] * gx + m[0, 1] * gy
        my = m[1, 0] * gx + m[1, 1] * gy
        ka = kvals[t] * areas[t]
        for j in range(3):
            st = ka * (grads[t, j, 0] * mx + grads[t, j, 1] * my)
            out[t, j] = st - div * (u_loc[t, j] + ssum) * areas[t] / 12.0
    return out


@njit(cache=True)
def adjoint_flux_rhs_local(coords, areas, grads, signs, u_loc, th_loc):
    nt = areas.shape[0]
    out = np.empty((nt, 3))
    m = np.empty((2, 2))
    for t in range(nt):
        div = _local_m(grads, th_loc, t, m)
        gx = 0.0
        gy = 0.0
        ubar = 0.0
        cx = 0.0
        cy = 0.0
        for i in range(3):
            gx += u_loc[t, i] * grads[t, i, 0]
            gy += u_loc[t, i] * grads[t, i, 1]
            ubar += u_loc[t, i] / 3.0
            cx += coords[t, i, 0] / 3.0
            cy += coords[t, i, 1] / 3.0
        mx = m[0, 0] * gx + m[0, 1] * gy
        my = m[1, 0] * gx + m[1, 1] * gy
        for j in range(3):
            lx = cx - coords[t, j, 0]
            ly = cy - coords[t, j, 1]
            out[t, j] = signs[t, j] * (div * ubar - 0.5 * (lx * mx + ly * my))
    return out


@njit(cache=True)
def flux_bound_local(coords, areas, grads, signs, kvals, flux_loc, w_loc, shift_vec, shift_loc):
    nt = areas.shape[0]
    out = np.empty(nt)
    phi = np.empty((3, 3, 2))
    for t in range(nt):
        area = areas[t]
        k = kvals[t]
        _rt0_phi(coords, t, area, signs, phi)
        gx = 0.0
        gy = 0.0
        divq = 0.0
        for i in range(3):
            gx += w_loc[t, i] * grads[t, i, 0]
            gy += w_loc[t, i] * grads[t, i, 1]
            divq += signs[t, i] * flux_loc[t, i]
        divq /= area
        bx = k * gx - shift_vec[t, 0]
        by = k * gy - shift_vec[t, 1]
        acc = 0.0
        for q in range(3):
            qx = 0.0
            qy = 0.0
            for i in range(3):
                qx += phi[q, i, 0] * flux_loc[t, i]
                qy += phi[q, i, 1] * flux_loc[t, i]
            vx = qx - bx
            vy = qy - by
            a = (q + 1) % 3
            b = (q + 2) % 3
            s_mid = 0.5 * (w_loc[t, a] + shift_loc[t, a] + w_loc[t, b] + shift_loc[t, b])
            sc = divq - s_mid
            acc += (vx * vx + vy * vy) / k + sc * sc
        out[t] = acc * area / 3.0
    return out
