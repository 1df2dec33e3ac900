"""Compiled ray-marching kernels.

Forward and adjoint passes over a batch of rays against a flat (V, 28)
payload array.  Both passes walk the samples in the same order with the
same arithmetic, so early termination stops at the same sample in each.
Gradient accumulation is serial and in ray order, which keeps training
bit-reproducible.
"""
import math

import numpy as np
from numba import njit, prange

from .field import SH_C0, SH_C1, SH_C2


@njit(cache=True)
def ray_box(ox, oy, oz, dx, dy, dz, bmin, bmax):
    """Slab-method intersection; returns (t_near, t_far) with t_near >= 0.

    A miss returns t_near == t_far.
    """
    t0 = 0.0
    t1 = np.inf
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < bmin[a] or o[a] > bmax[a]:
                return 0.0, 0.0
            continue
        inv = 1.0 / d[a]
        ta = (bmin[a] - o[a]) * inv
        tb = (bmax[a] - o[a]) * inv
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    if t1 <= t0:
        return t0, t0
    return t0, t1


@njit(cache=True)
def sh_basis9(dx, dy, dz, out):
    out[0] = SH_C0
    out[1] = -SH_C1 * dy
    out[2] = SH_C1 * dz
    out[3] = -SH_C1 * dx
    out[4] = SH_C2[0] * dx * dy
    out[5] = SH_C2[1] * dy * dz
    out[6] = SH_C2[2] * (2.0 * dz * dz - dx * dx - dy * dy)
    out[7] = SH_C2[3] * dx * dz
    out[8] = SH_C2[4] * (dx * dx - dy * dy)


@njit(cache=True, inline="always")
def _axis(p, lo, e, n):
    """Clamped cell index and fractional offset along one axis."""
    u = (p - lo) / e
    if u < 0.0:
        u = 0.0
    elif u > n:
        u = float(n)
    i = int(math.floor(u))
    if i > n - 1:
        i = n - 1
    return i, u - i


@njit(cache=True)
def _locate(px, py, pz, bmin, edge, res, sx, sxy, idx, wts):
    """Fill 8 corner indices / weights (corner k offset = bits of k)."""
    ix, fx = _axis(px, bmin[0], edge[0], res[0])
    iy, fy = _axis(py, bmin[1], edge[1], res[1])
    iz, fz = _axis(pz, bmin[2], edge[2], res[2])
    base = ix + sx * iy + sxy * iz
    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz
    idx[0] = base
    idx[1] = base + 1
    idx[2] = base + sx
    idx[3] = base + sx + 1
    idx[4] = base + sxy
    idx[5] = base + sxy + 1
    idx[6] = base + sxy + sx
    idx[7] = base + sxy + sx + 1
    wts[0] = gx * gy * gz
    wts[1] = fx * gy * gz
    wts[2] = gx * fy * gz
    wts[3] = fx * fy * gz
    wts[4] = gx * gy * fz
    wts[5] = fx * gy * fz
    wts[6] = gx * fy * fz
    wts[7] = fx * fy * fz
    return True


@njit(cache=True)
def _eval_sample(data, occ, idx, wts, basis, offset, rgb_arg):
    """Interpolated raw sigma; fills pre-clamp color arguments only when sigma > 0.

    Returns (sigma_raw, any_occupied).
    """
    sigma = 0.0
    hit = False
    for k in range(8):
        v = idx[k]
        if occ[v] == 0:
            continue
        hit = True
        sigma += wts[k] * data[v, 27]
    if not hit or sigma <= 0.0:
        return sigma, hit
    a0 = offset
    a1 = offset
    a2 = offset
    for k in range(8):
        v = idx[k]
        w = wts[k]
        if occ[v] == 0 or w == 0.0:
            continue
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        for j in range(9):
            b = basis[j]
            s0 += data[v, j] * b
            s1 += data[v, 9 + j] * b
            s2 += data[v, 18 + j] * b
        a0 += w * s0
        a1 += w * s1
        a2 += w * s2
    rgb_arg[0] = a0
    rgb_arg[1] = a1
    rgb_arg[2] = a2
    return sigma, hit


@njit(cache=True)
def _march_one(data, occ, res, bmin, bmax, edge, offset, o, d, step, stop_thresh, out):
    sx = res[0] + 1
    sxy = sx * (res[1] + 1)
    idx = np.empty(8, np.int64)
    wts = np.empty(8)
    basis = np.empty(9)
    arg = np.empty(3)
    sh_basis9(d[0], d[1], d[2], basis)
    t0, t1 = ray_box(o[0], o[1], o[2], d[0], d[1], d[2], bmin, bmax)
    n = int(math.floor((t1 - t0) / step)) if t1 > t0 else 0
    T = 1.0
    out[0] = 0.0
    out[1] = 0.0
    out[2] = 0.0
    for i in range(n):
        t = t0 + (i + 0.5) * step
        _locate(o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2],
                bmin, edge, res, sx, sxy, idx, wts)
        sig, hit = _eval_sample(data, occ, idx, wts, basis, offset, arg)
        if not hit or sig <= 0.0:
            continue
        tau = sig * step
        w = T * (-math.expm1(-tau))
        for ch in range(3):
            if arg[ch] > 0.0:
                out[ch] += w * arg[ch]
        T *= math.exp(-tau)
        if T < stop_thresh:
            break


@njit(cache=True)
def march_forward(data, occ, res, bmin, bmax, offset, origins, dirs, step, stop_thresh):
    edge = (bmax - bmin) / res
    nr = origins.shape[0]
    out = np.zeros((nr, 3))
    for r in range(nr):
        _march_one(data, occ, res, bmin, bmax, edge, offset, origins[r], dirs[r],
                   step, stop_thresh, out[r])
    return out


@njit(cache=True, parallel=True)
def march_forward_parallel(data, occ, res, bmin, bmax, offset, origins, dirs, step, stop_thresh):
    edge = (bmax - bmin) / res
    nr = origins.shape[0]
    out = np.zeros((nr, 3))
    for r in prange(nr):
        _march_one(data, occ, res, bmin, bmax, edge, offset, origins[r], dirs[r],
                   step, stop_thresh, out[r])
    return out


@njit(cache=True)
def march_backward(data, occ, res, bmin, bmax, offset, origins, dirs, step, stop_thresh,
                   rgb, grad_rgb, grad_data, sigma_sign):
    """Accumulate d loss / d payload into ``grad_data`` given d loss / d rgb.

    ``sigma_sign`` is 1.0 in normal use; the gradient checker flips it to
    confirm that a broken sigma adjoint is caught.
    """
    edge = (bmax - bmin) / res
    sx = res[0] + 1
    sxy = sx * (res[1] + 1)
    idx = np.empty(8, np.int64)
    wts = np.empty(8)
    basis = np.empty(9)
    arg = np.empty(3)
    acc = np.empty(3)
    for r in range(origins.shape[0]):
        g0 = grad_rgb[r, 0]
        g1 = grad_rgb[r, 1]
        g2 = grad_rgb[r, 2]
        if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
            continue
        o = origins[r]
        d = dirs[r]
        sh_basis9(d[0], d[1], d[2], basis)
        t0, t1 = ray_box(o[0], o[1], o[2], d[0], d[1], d[2], bmin, bmax)
        n = int(math.floor((t1 - t0) / step)) if t1 > t0 else 0
        T = 1.0
        acc[0] = 0.0
        acc[1] = 0.0
        acc[2] = 0.0
        for i in range(n):
            t = t0 + (i + 0.5) * step
            _locate(o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2],
                    bmin, edge, res, sx, sxy, idx, wts)
            sig, hit = _eval_sample(data, occ, idx, wts, basis, offset, arg)
            if not hit or sig <= 0.0:
                continue
            tau = sig * step
            decay = math.exp(-tau)
            w = T * (-math.expm1(-tau))
            gs = 0.0
            gc0 = 0.0
            gc1 = 0.0
            gc2 = 0.0
            for ch in range(3):
                c = arg[ch] if arg[ch] > 0.0 else 0.0
                acc[ch] += w * c
            # d C / d sigma_i = delta [T_i e^{-tau_i} c_i - sum_{j>i} w_j c_j]
            c0 = arg[0] if arg[0] > 0.0 else 0.0
            c1 = arg[1] if arg[1] > 0.0 else 0.0
            c2 = arg[2] if arg[2] > 0.0 else 0.0
            gs += g0 * (T * decay * c0 - (rgb[r, 0] - acc[0]))
            gs += g1 * (T * decay * c1 - (rgb[r, 1] - acc[1]))
            gs += g2 * (T * decay * c2 - (rgb[r, 2] - acc[2]))
            gs *= step * sigma_sign
            if arg[0] > 0.0:
                gc0 = w * g0
            if arg[1] > 0.0:
                gc1 = w * g1
            if arg[2] > 0.0:
                gc2 = w * g2
            for k in range(8):
                v = idx[k]
                if occ[v] == 0:
                    continue
                wk = wts[k]
                if wk == 0.0:
                    continue
                grad_data[v, 27] += wk * gs
                for j in range(9):
                    bj = wk * basis[j]
                    grad_data[v, j] += gc0 * bj
                    grad_data[v, 9 + j] += gc1 * bj
                    grad_data[v, 18 + j] += gc2 * bj
            T *= decay
            if T < stop_thresh:
                break


@njit(cache=True)
def march_forward_record(data, occ, res, bmin, bmax, offset, origins, dirs, step, stop_thresh,
                         s_index, s_val):
    """Forward pass that also records every contributing sample for the adjoint.

    Per ray ``r`` the first ``count[r]`` entries of row ``r`` of the caller's
    buffers receive the sample number along the ray, its raw sigma, the
    transmittance in front of it and the three pre-clamp color arguments.
    The buffers' second dimension bounds samples per ray (see max_samples).
    """
    edge = (bmax - bmin) / res
    sx = res[0] + 1
    sxy = sx * (res[1] + 1)
    nr = origins.shape[0]
    out = np.zeros((nr, 3))
    count = np.zeros(nr, np.int64)
    cap = s_index.shape[1]
    idx = np.empty(8, np.int64)
    wts = np.empty(8)
    basis = np.empty(9)
    arg = np.empty(3)
    for r in range(nr):
        o = origins[r]
        d = dirs[r]
        sh_basis9(d[0], d[1], d[2], basis)
        t0, t1 = ray_box(o[0], o[1], o[2], d[0], d[1], d[2], bmin, bmax)
        n = int(math.floor((t1 - t0) / step)) if t1 > t0 else 0
        if n > cap:
            n = cap
        T = 1.0
        m = 0
        for i in range(n):
            t = t0 + (i + 0.5) * step
            _locate(o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2],
                    bmin, edge, res, sx, sxy, idx, wts)
            sig, hit = _eval_sample(data, occ, idx, wts, basis, offset, arg)
            if not hit or sig <= 0.0:
                continue
            tau = sig * step
            w = T * (-math.expm1(-tau))
            for ch in range(3):
                if arg[ch] > 0.0:
                    out[r, ch] += w * arg[ch]
            s_index[r, m] = i
            s_val[r, m, 0] = sig
            s_val[r, m, 1] = T
            s_val[r, m, 2] = arg[0]
            s_val[r, m, 3] = arg[1]
            s_val[r, m, 4] = arg[2]
            m += 1
            T *= math.exp(-tau)
            if T < stop_thresh:
                break
        count[r] = m
    return out, count


@njit(cache=True)
def march_backward_recorded(occ, res, bmin, bmax, origins, dirs, step, rgb, grad_rgb,
                            count, s_index, s_val, grad_data, sigma_sign):
    """Adjoint of ``march_forward_record`` from its recorded samples.

    Same arithmetic as ``march_backward`` without re-evaluating the field.
    """
    edge = (bmax - bmin) / res
    sx = res[0] + 1
    sxy = sx * (res[1] + 1)
    idx = np.empty(8, np.int64)
    wts = np.empty(8)
    basis = np.empty(9)
    acc = np.empty(3)
    for r in range(origins.shape[0]):
        g0 = grad_rgb[r, 0]
        g1 = grad_rgb[r, 1]
        g2 = grad_rgb[r, 2]
        if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
            continue
        o = origins[r]
        d = dirs[r]
        sh_basis9(d[0], d[1], d[2], basis)
        t0, t1 = ray_box(o[0], o[1], o[2], d[0], d[1], d[2], bmin, bmax)
        acc[0] = 0.0
        acc[1] = 0.0
        acc[2] = 0.0
        for m in range(count[r]):
            t = t0 + (s_index[r, m] + 0.5) * step
            _locate(o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2],
                    bmin, edge, res, sx, sxy, idx, wts)
            sig = s_val[r, m, 0]
            T = s_val[r, m, 1]
            a0 = s_val[r, m, 2]
            a1 = s_val[r, m, 3]
            a2 = s_val[r, m, 4]
            tau = sig * step
            decay = math.exp(-tau)
            w = T * (-math.expm1(-tau))
            c0 = a0 if a0 > 0.0 else 0.0
            c1 = a1 if a1 > 0.0 else 0.0
            c2 = a2 if a2 > 0.0 else 0.0
            acc[0] += w * c0
            acc[1] += w * c1
            acc[2] += w * c2
            gs = 0.0
            gs += g0 * (T * decay * c0 - (rgb[r, 0] - acc[0]))
            gs += g1 * (T * decay * c1 - (rgb[r, 1] - acc[1]))
            gs += g2 * (T * decay * c2 - (rgb[r, 2] - acc[2]))
            gs *= step * sigma_sign
            gc0 = w * g0 if a0 > 0.0 else 0.0
            gc1 = w * g1 if a1 > 0.0 else 0.0
            gc2 = w * g2 if a2 > 0.0 else 0.0
            for k in range(8):
                v = idx[k]
                if occ[v] == 0:
                    continue
                wk = wts[k]
                if wk == 0.0:
                    continue
                grad_data[v, 27] += wk * gs
                for j in range(9):
                    bj = wk * basis[j]
                    grad_data[v, j] += gc0 * bj
                    grad_data[v, 9 + j] += gc1 * bj
                    grad_data[v, 18 + j] += gc2 * bj


def max_samples(bmin, bmax, step) -> int:
    """Upper bound on samples along any ray through the box."""
    return int(math.floor(float(np.linalg.norm(np.asarray(bmax) - np.asarray(bmin))) / step)) + 1


@njit(cache=True)
def rmsprop_update(params, grads, accum, lr, beta, eps, col_lr_index, col_scale, rows):
    """In-place RMSProp over a (V, C) array.

    Column ``c`` uses learning rate ``lr[col_lr_index[c]]`` and has its
    gradient multiplied by ``col_scale[c]`` first.  Only rows with
    ``rows[v] != 0`` are visited (pruned vertices never come back, so their
    state is dead).  Returns False on a non-finite gradient (nothing is
    written past that point).
    """
    nv, nc = params.shape
    for v in range(nv):
        if rows[v] == 0:
            continue
        for c in range(nc):
            g = grads[v, c] * col_scale[c]
            if not math.isfinite(g):
                return False
            a = beta * accum[v, c] + (1.0 - beta) * g * g
            accum[v, c] = a
            if g != 0.0:
                params[v, c] -= lr[col_lr_index[c]] * g / (math.sqrt(a) + eps)
    return True
