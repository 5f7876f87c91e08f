"""Compiled loops for the selective scan.

The fused kernels discretize, recur and read out in one pass per
(batch, channel, state) lane, so the [B, C, N, L] coefficient tensors are
never materialized.  Only the states are kept for the backward pass.
"""
import numba
import numpy as np


@numba.njit(cache=True)
def recurrence_loop(a, b, h):
    """h[i, t] = a[i, t] * h[i, t-1] + b[i, t] on 2-D (lanes, time) arrays."""
    lanes, length = b.shape
    for i in range(lanes):
        s = b.dtype.type(0)
        for t in range(length):
            s = a[i, t] * s + b[i, t]
            h[i, t] = s


@numba.njit(cache=True)
def fused_scan_fwd(x, delta, a_mat, bm, cm, d_skip, y, h):
    nb, nc, length = x.shape
    ns = a_mat.shape[1]
    for bi in range(nb):
        for c in range(nc):
            for t in range(length):
                y[bi, c, t] = d_skip[c] * x[bi, c, t]
            for n in range(ns):
                an = a_mat[c, n]
                s = x.dtype.type(0)
                for t in range(length):
                    dt = delta[bi, c, t]
                    s = np.exp(dt * an) * s + dt * bm[bi, n, t] * x[bi, c, t]
                    h[bi, c, n, t] = s
                    y[bi, c, t] += cm[bi, n, t] * s


@numba.njit(cache=True)
def fused_scan_bwd(x, delta, a_mat, bm, cm, d_skip, h, dy,
                   dx, ddelta, da_mat, dbm, dcm, dd):
    nb, nc, length = x.shape
    ns = a_mat.shape[1]
    zero = x.dtype.type(0)
    for bi in range(nb):
        for c in range(nc):
            for t in range(length):
                dx[bi, c, t] += d_skip[c] * dy[bi, c, t]
                dd[c] += dy[bi, c, t] * x[bi, c, t]
            for n in range(ns):
                an = a_mat[c, n]
                acc_a = 0.0
                g = zero
                a_next = zero
                for t in range(length - 1, -1, -1):
                    g = cm[bi, n, t] * dy[bi, c, t] + a_next * g
                    dt = delta[bi, c, t]
                    a_t = np.exp(dt * an)
                    h_prev = h[bi, c, n, t - 1] if t > 0 else zero
                    dlog = g * h_prev * a_t  # d/d(delta * A)
                    xt = x[bi, c, t]
                    bt = bm[bi, n, t]
                    ddelta[bi, c, t] += dlog * an + g * bt * xt
                    acc_a += dlog * dt
                    dbm[bi, n, t] += g * dt * xt
                    dx[bi, c, t] += g * dt * bt
                    dcm[bi, n, t] += dy[bi, c, t] * h[bi, c, n, t]
                    a_next = a_t
                da_mat[c, n] += acc_a
