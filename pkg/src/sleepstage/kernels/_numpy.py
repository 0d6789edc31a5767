"""Pure-numpy implementations of the hot kernels.

This is the fallback backend (``SLEEPSTAGE_BACKEND=numpy``) and the
reference the numba twins in ``_numba.py`` are checked against.  Both
modules implement the same math with the same operation order so results
agree to floating-point rounding.
"""

import numpy as np


def iir_cascade(sos, x, zi):
    """Run a cascade of biquads (transposed direct form II) over x.

    sos: (nsec, 6) array of [b0, b1, b2, 1, a1, a2] rows.
    zi:  (nsec, 2) initial state, mutated copy returned as final state.
    Returns (y, zf).
    """
    y = np.asarray(x, dtype=np.float64).copy()
    zf = np.asarray(zi, dtype=np.float64).copy()
    n = y.shape[0]
    for s in range(sos.shape[0]):
        b0, b1, b2 = sos[s, 0], sos[s, 1], sos[s, 2]
        a1, a2 = sos[s, 4], sos[s, 5]
        z1, z2 = zf[s, 0], zf[s, 1]
        for i in range(n):
            xi = y[i]
            yi = b0 * xi + z1
            z1 = b1 * xi - a1 * yi + z2
            z2 = b2 * xi - a2 * yi
            y[i] = yi
        zf[s, 0], zf[s, 1] = z1, z2
    return y, zf


def find_extrema(x):
    """Indices of interior local maxima and minima of a 1-D signal.

    Plateau extrema are reported at the plateau midpoint (floor).
    Endpoints are never reported.
    """
    d = np.diff(x)
    nzi = np.flatnonzero(d)
    if nzi.size < 2:
        e = np.empty(0, dtype=np.int64)
        return e, e.copy()
    dirs = np.sign(d[nzi])
    change = dirs[:-1] != dirs[1:]
    starts = nzi[:-1][change] + 1
    ends = nzi[1:][change]
    pos = (starts + ends) // 2
    kinds = dirs[:-1][change]
    return pos[kinds > 0].astype(np.int64), pos[kinds < 0].astype(np.int64)


def _mirrored_knots(x, idx, n):
    # Reflect up to 2 extrema about each signal endpoint so the spline
    # covers [0, n-1]; duplicated positions are dropped.
    k = min(2, idx.size)
    left_p = (-idx[:k])[::-1]
    left_v = x[idx[:k]][::-1]
    right_p = (2 * (n - 1) - idx[-k:])[::-1]
    right_v = x[idx[-k:]][::-1]
    pos = np.concatenate([left_p, idx, right_p]).astype(np.float64)
    val = np.concatenate([left_v, x[idx], right_v])
    keep = np.empty(pos.size, dtype=bool)
    keep[0] = True
    keep[1:] = pos[1:] > pos[:-1]
    return pos[keep], val[keep]


def _natural_cubic_m(xs, ys):
    # Second derivatives of the natural cubic spline (Thomas algorithm).
    nk = xs.size
    m = np.zeros(nk, dtype=np.float64)
    if nk < 3:
        return m
    h = np.diff(xs)
    ni = nk - 2
    diag = np.empty(ni)
    rhs = np.empty(ni)
    for i in range(ni):
        diag[i] = 2.0 * (h[i] + h[i + 1])
        rhs[i] = 6.0 * ((ys[i + 2] - ys[i + 1]) / h[i + 1] - (ys[i + 1] - ys[i]) / h[i])
    # forward sweep: sub-diagonal h[i], super-diagonal h[i+1]
    for i in range(1, ni):
        w = h[i] / diag[i - 1]
        diag[i] -= w * h[i]
        rhs[i] -= w * rhs[i - 1]
    m[ni] = rhs[ni - 1] / diag[ni - 1]
    for i in range(ni - 2, -1, -1):
        m[i + 1] = (rhs[i] - h[i + 1] * m[i + 2]) / diag[i]
    return m


def _spline_eval_grid(xs, ys, m, n):
    # Evaluate the spline at t = 0..n-1.
    t = np.arange(n, dtype=np.float64)
    seg = np.clip(np.searchsorted(xs, t, side="right") - 1, 0, xs.size - 2)
    h = xs[seg + 1] - xs[seg]
    a = (xs[seg + 1] - t) / h
    b = (t - xs[seg]) / h
    return (
        a * ys[seg]
        + b * ys[seg + 1]
        + ((a ** 3 - a) * m[seg] + (b ** 3 - b) * m[seg + 1]) * (h * h) / 6.0
    )


def envelope_mean(x):
    """Mean of the upper/lower natural-cubic extrema envelopes.

    Returns (mean_envelope, n_maxima, n_minima); a zero envelope when the
    signal lacks an interior maximum or minimum.
    """
    n = x.shape[0]
    mx, mn = find_extrema(x)
    if mx.size < 1 or mn.size < 1:
        return np.zeros(n, dtype=np.float64), mx.size, mn.size
    up, uv = _mirrored_knots(x, mx, n)
    lp, lv = _mirrored_knots(x, mn, n)
    upper = _spline_eval_grid(up, uv, _natural_cubic_m(up, uv), n)
    lower = _spline_eval_grid(lp, lv, _natural_cubic_m(lp, lv), n)
    return 0.5 * (upper + lower), mx.size, mn.size


def tfi_accumulate(amps, freqs, t_bins, f_bins, half_fs):
    """Scatter-add instantaneous amplitudes into a (t_bins, f_bins) raster.

    amps/freqs: (n_imfs, n_samples).  Time bin = floor(i*T/N); frequency
    bin = floor(f/half_fs*F) clamped to [0, F-1].  A one-nanobin guard on
    the floor keeps tones that sit exactly on a bin edge from being split
    by rounding jitter in the instantaneous frequency.
    """
    grid = np.zeros((t_bins, f_bins), dtype=np.float64)
    if amps.size == 0:
        return grid
    n = amps.shape[1]
    tb = (np.arange(n, dtype=np.int64) * t_bins) // n
    fb = np.floor(freqs / half_fs * f_bins + 1e-9).astype(np.int64)
    np.clip(fb, 0, f_bins - 1, out=fb)
    for k in range(amps.shape[0]):
        np.add.at(grid, (tb, fb[k]), amps[k])
    return grid


def col2im_accumulate(dcols, flat_idx, out_size):
    """Scatter-add column gradients back into flat padded images.

    dcols: (CK, B, L) gradients, flat_idx: (CK, L) positions inside one
    padded image of out_size elements.  Returns (B, out_size).
    """
    ck, b, l = dcols.shape
    combined = (
        np.arange(b, dtype=np.int64)[None, :, None] * out_size
        + flat_idx[:, None, :]
    )
    out = np.bincount(
        combined.ravel(), weights=dcols.ravel(), minlength=b * out_size
    )
    return out.reshape(b, out_size)


def _win_lookup(u, table):
    # Linear interpolation in a window table sampled uniformly on [0, 1].
    m = table.size
    pos = u * (m - 1)
    i0 = np.minimum(pos.astype(np.int64), m - 2)
    fr = pos - i0
    return table[i0] * (1.0 - fr) + table[i0 + 1] * fr


def sinc_resample(x, n_out, step, fc_norm, half_len, table):
    """Windowed-sinc resampling of x onto n_out samples spaced `step` apart.

    step is in input-sample units (fs_in/fs_out), fc_norm the cutoff in
    cycles per input sample, half_len the one-sided kernel support in input
    samples, table a window sampled on [0, 1].  Kernel weights are
    normalized per output sample, so DC gain is exactly 1.
    """
    n = x.shape[0]
    hw = int(np.ceil(half_len))
    offs = np.arange(-hw, hw + 1, dtype=np.int64)
    y = np.empty(n_out, dtype=np.float64)
    chunk = max(1, int(2_000_000 // (2 * hw + 1)))
    for c0 in range(0, n_out, chunk):
        c1 = min(c0 + chunk, n_out)
        t = np.arange(c0, c1, dtype=np.float64) * step
        j = np.floor(t).astype(np.int64)[:, None] + offs[None, :]
        tau = t[:, None] - j
        u = 2.0 * fc_norm * tau
        pu = np.pi * u
        core = np.where(u == 0.0, 1.0, np.sin(pu) / np.where(pu == 0.0, 1.0, pu))
        au = np.abs(tau) / half_len
        valid = (j >= 0) & (j < n) & (au <= 1.0)
        w = core * _win_lookup(np.minimum(au, 1.0), table)
        w[~valid] = 0.0
        js = np.clip(j, 0, n - 1)
        num = np.einsum("ij,ij->i", w, x[js])
        den = w.sum(axis=1)
        y[c0:c1] = num / den
    return y
