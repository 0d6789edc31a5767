"""The numba kernels must agree with their pure-numpy twins."""

import numpy as np
import pytest

from sleepstage.kernels import _numpy as knp
from sleepstage.kernels import kaiser_table

knb = pytest.importorskip("sleepstage.kernels._numba")


@pytest.fixture(scope="module")
def walk():
    return np.cumsum(np.random.default_rng(0).standard_normal(800))


def test_find_extrema_parity(walk):
    for x in (walk, np.array([0.0, 1.0, 1.0, 0.0, -1.0, -1.0, 0.0]), np.ones(10)):
        a1, b1 = knp.find_extrema(x)
        a2, b2 = knb.find_extrema(x)
        assert np.array_equal(a1, a2)
        assert np.array_equal(b1, b2)


def test_envelope_mean_parity(walk):
    e1, mx1, mn1 = knp.envelope_mean(walk)
    e2, mx2, mn2 = knb.envelope_mean(walk)
    assert (mx1, mn1) == (mx2, mn2)
    assert np.abs(e1 - e2).max() <= 1e-10


def test_iir_cascade_parity(walk):
    sos = np.array(
        [[0.2, 0.1, 0.05, 1.0, -0.6, 0.2], [0.3, 0.0, -0.3, 1.0, 0.4, 0.5]]
    )
    zi = np.zeros((2, 2))
    y1, z1 = knp.iir_cascade(sos, walk, zi)
    y2, z2 = knb.iir_cascade(sos, walk, zi)
    assert np.array_equal(y1, y2)
    assert np.array_equal(z1, z2)


def test_tfi_accumulate_parity():
    rng = np.random.default_rng(1)
    amps = rng.random((3, 500))
    freqs = rng.random((3, 500)) * 40.0
    g1 = knp.tfi_accumulate(amps, freqs, 64, 32, 32.0)
    g2 = knb.tfi_accumulate(amps, freqs, 64, 32, 32.0)
    assert np.array_equal(g1, g2)


def test_sinc_resample_parity(walk):
    table = kaiser_table()
    y1 = knp.sinc_resample(walk, 400, 2.0, 0.225, 71.1, table)
    y2 = knb.sinc_resample(walk, 400, 2.0, 0.225, 71.1, table)
    assert np.abs(y1 - y2).max() <= 1e-10


def test_col2im_parity():
    rng = np.random.default_rng(2)
    dcols = rng.standard_normal((18, 4, 25))
    flat_idx = rng.integers(0, 49, size=(18, 25))
    out1 = knp.col2im_accumulate(dcols, flat_idx, 49)
    out2 = knb.col2im_accumulate(dcols, flat_idx, 49)
    assert np.abs(out1 - out2).max() <= 1e-12
