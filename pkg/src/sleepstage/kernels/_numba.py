"""Numba-jitted twins of the kernels in ``_numpy.py``.

Same math, same operation order; only the looping strategy differs.
Compiled lazily with on-disk caching so repeated CLI invocations do not
pay the JIT cost again.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def iir_cascade(sos, x, zi):
    y = x.astype(np.float64).copy()
    zf = zi.astype(np.float64).copy()
    n = y.shape[0]
    for s in range(sos.shape[0]):
        b0 = sos[s, 0]
        b1 = sos[s, 1]
        b2 = sos[s, 2]
        a1 = sos[s, 4]
        a2 = sos[s, 5]
        z1 = zf[s, 0]
        z2 = zf[s, 1]
        for i in range(n):
            xi = y[i]
            yi = b0 * xi + z1
            z1 = b1 * xi - a1 * yi + z2
            z2 = b2 * xi - a2 * yi
            y[i] = yi
        zf[s, 0] = z1
        zf[s, 1] = z2
    return y, zf


@njit(cache=True)
def find_extrema(x):
    n = x.shape[0]
    maxs = np.empty(n // 2 + 1, dtype=np.int64)
    mins = np.empty(n // 2 + 1, dtype=np.int64)
    nmax = 0
    nmin = 0
    prev_dir = 0
    prev_end = 0
    for i in range(1, n):
        c = x[i] - x[i - 1]
        if c > 0.0:
            dd = 1
        elif c < 0.0:
            dd = -1
        else:
            continue
        if prev_dir == 1 and dd == -1:
            maxs[nmax] = (prev_end + i - 1) // 2
            nmax += 1
        elif prev_dir == -1 and dd == 1:
            mins[nmin] = (prev_end + i - 1) // 2
            nmin += 1
        prev_dir = dd
        prev_end = i
    return maxs[:nmax].copy(), mins[:nmin].copy()


@njit(cache=True)
def _mirrored_knots(x, idx, n):
    ne = idx.shape[0]
    k = 2 if ne > 2 else ne
    total = k + ne + k
    pos = np.empty(total, dtype=np.float64)
    val = np.empty(total, dtype=np.float64)
    for ii in range(k):
        pos[ii] = -float(idx[k - 1 - ii])
        val[ii] = x[idx[k - 1 - ii]]
    for ii in range(ne):
        pos[k + ii] = float(idx[ii])
        val[k + ii] = x[idx[ii]]
    for ii in range(k):
        pos[k + ne + ii] = float(2 * (n - 1) - idx[ne - 1 - ii])
        val[k + ne + ii] = x[idx[ne - 1 - ii]]
    out_p = np.empty(total, dtype=np.float64)
    out_v = np.empty(total, dtype=np.float64)
    m = 0
    for ii in range(total):
        if m == 0 or pos[ii] > out_p[m - 1]:
            out_p[m] = pos[ii]
            out_v[m] = val[ii]
            m += 1
    return out_p[:m].copy(), out_v[:m].copy()


@njit(cache=True)
def _natural_cubic_m(xs, ys):
    nk = xs.shape[0]
    m = np.zeros(nk, dtype=np.float64)
    if nk < 3:
        return m
    h = np.empty(nk - 1, dtype=np.float64)
    for i in range(nk - 1):
        h[i] = xs[i + 1] - xs[i]
    ni = nk - 2
    diag = np.empty(ni, dtype=np.float64)
    rhs = np.empty(ni, dtype=np.float64)
    for i in range(ni):
        diag[i] = 2.0 * (h[i] + h[i + 1])
        rhs[i] = 6.0 * ((ys[i + 2] - ys[i + 1]) / h[i + 1] - (ys[i + 1] - ys[i]) / h[i])
    for i in range(1, ni):
        w = h[i] / diag[i - 1]
        diag[i] -= w * h[i]
        rhs[i] -= w * rhs[i - 1]
    m[ni] = rhs[ni - 1] / diag[ni - 1]
    for i in range(ni - 2, -1, -1):
        m[i + 1] = (rhs[i] - h[i + 1] * m[i + 2]) / diag[i]
    return m


@njit(cache=True)
def _spline_eval_grid(xs, ys, m, n):
    nk = xs.shape[0]
    out = np.empty(n, dtype=np.float64)
    seg = 0
    for i in range(n):
        t = float(i)
        while seg < nk - 2 and t >= xs[seg + 1]:
            seg += 1
        h = xs[seg + 1] - xs[seg]
        a = (xs[seg + 1] - t) / h
        b = (t - xs[seg]) / h
        out[i] = (
            a * ys[seg]
            + b * ys[seg + 1]
            + ((a ** 3 - a) * m[seg] + (b ** 3 - b) * m[seg + 1]) * (h * h) / 6.0
        )
    return out


@njit(cache=True)
def envelope_mean(x):
    n = x.shape[0]
    mx, mn = find_extrema(x)
    if mx.shape[0] < 1 or mn.shape[0] < 1:
        return np.zeros(n, dtype=np.float64), mx.shape[0], mn.shape[0]
    up, uv = _mirrored_knots(x, mx, n)
    lp, lv = _mirrored_knots(x, mn, n)
    upper = _spline_eval_grid(up, uv, _natural_cubic_m(up, uv), n)
    lower = _spline_eval_grid(lp, lv, _natural_cubic_m(lp, lv), n)
    return 0.5 * (upper + lower), mx.shape[0], mn.shape[0]


@njit(cache=True)
def tfi_accumulate(amps, freqs, t_bins, f_bins, half_fs):
    grid = np.zeros((t_bins, f_bins), dtype=np.float64)
    if amps.size == 0:
        return grid
    n = amps.shape[1]
    for k in range(amps.shape[0]):
        for i in range(n):
            tb = (i * t_bins) // n
            fb = int(np.floor(freqs[k, i] / half_fs * f_bins + 1e-9))
            if fb < 0:
                fb = 0
            elif fb > f_bins - 1:
                fb = f_bins - 1
            grid[tb, fb] += amps[k, i]
    return grid


@njit(cache=True)
def col2im_accumulate(dcols, flat_idx, out_size):
    ck, b, l = dcols.shape
    out = np.zeros((b, out_size), dtype=np.float64)
    for c in range(ck):
        for bb in range(b):
            for i in range(l):
                out[bb, flat_idx[c, i]] += dcols[c, bb, i]
    return out


@njit(cache=True)
def sinc_resample(x, n_out, step, fc_norm, half_len, table):
    n = x.shape[0]
    m = table.shape[0]
    hw = int(np.ceil(half_len))
    y = np.empty(n_out, dtype=np.float64)
    for i in range(n_out):
        t = i * step
        j0 = int(np.floor(t))
        num = 0.0
        den = 0.0
        for off in range(-hw, hw + 1):
            j = j0 + off
            if j < 0 or j >= n:
                continue
            tau = t - j
            au = abs(tau) / half_len
            if au > 1.0:
                continue
            u = 2.0 * fc_norm * tau
            if u == 0.0:
                core = 1.0
            else:
                pu = np.pi * u
                core = np.sin(pu) / pu
            pos = au * (m - 1)
            i0 = int(pos)
            if i0 > m - 2:
                i0 = m - 2
            fr = pos - i0
            w = core * (table[i0] * (1.0 - fr) + table[i0 + 1] * fr)
            num += w * x[j]
            den += w
        y[i] = num / den
    return y
