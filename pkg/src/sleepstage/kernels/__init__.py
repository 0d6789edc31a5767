"""Backend selection for the hot numeric kernels.

The environment variable ``SLEEPSTAGE_BACKEND`` picks the implementation:

* ``auto``  (default) - numba-jitted kernels when numba imports, else numpy
* ``numba`` - require the jitted kernels, fail if numba is unavailable
* ``numpy`` - force the pure-numpy fallback

``benchmarks/bench_kernels.py`` times both backends side by side.
"""

import os

import numpy as np

_choice = os.environ.get("SLEEPSTAGE_BACKEND", "auto").strip().lower()
if _choice not in ("auto", "numba", "numpy"):
    raise RuntimeError(
        f"SLEEPSTAGE_BACKEND must be one of auto/numba/numpy, got {_choice!r}"
    )

if _choice == "numpy":
    from . import _numpy as _impl

    BACKEND = "numpy"
else:
    try:
        from . import _numba as _impl

        BACKEND = "numba"
    except ImportError:
        if _choice == "numba":
            raise
        from . import _numpy as _impl

        BACKEND = "numpy"

iir_cascade = _impl.iir_cascade
find_extrema = _impl.find_extrema
envelope_mean = _impl.envelope_mean
tfi_accumulate = _impl.tfi_accumulate
sinc_resample = _impl.sinc_resample
col2im_accumulate = _impl.col2im_accumulate


def kaiser_table(beta: float = 8.6, size: int = 4097) -> np.ndarray:
    """Kaiser window sampled on [0, 1] (half window, peak at index 0).

    Shared by both backends so their resampler outputs agree exactly.
    """
    u = np.linspace(0.0, 1.0, size)
    return np.i0(beta * np.sqrt(1.0 - u * u)) / np.i0(beta)


__all__ = [
    "BACKEND",
    "iir_cascade",
    "find_extrema",
    "envelope_mean",
    "tfi_accumulate",
    "sinc_resample",
    "col2im_accumulate",
    "kaiser_table",
]
