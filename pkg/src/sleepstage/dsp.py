"""Pre-processing for EEG: resampling, notch, Butterworth bandpass,
epoch segmentation and class-imbalance oversampling.

Filters are realized as cascades of second-order sections and applied
causally (forward only).  The bandpass is designed from an analog
Butterworth prototype through the lowpass-to-bandpass transform and a
bilinear transform with frequency pre-warping, so the -3 dB points land
exactly on the requested band edges.  `order` is the total order of the
bandpass (order 8 = 4th-order prototype = 4 biquad sections).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .edf import Hypnogram, SleepStage, STAGES
from .errors import (
    EmptyClass,
    EmptyInput,
    FrequencyOutOfRange,
    InvalidSpec,
    MissingLabels,
    SampleRateMismatch,
    TooShort,
)


@dataclass
class TimeSeries:
    samples: np.ndarray
    fs: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.fs <= 0:
            raise InvalidSpec(f"sample rate must be positive, got {self.fs}")

    @property
    def duration_s(self) -> float:
        return self.samples.shape[0] / self.fs


@dataclass
class IirFilter:
    """Cascade of biquads [b0 b1 b2 1 a1 a2] with per-section state."""

    sos: np.ndarray
    fs: float
    state: np.ndarray = field(default=None)

    def __post_init__(self):
        self.sos = np.asarray(self.sos, dtype=np.float64).reshape(-1, 6)
        if self.state is None:
            self.state = np.zeros((self.sos.shape[0], 2))

    def reset(self):
        self.state[:] = 0.0

    def clone(self) -> "IirFilter":
        return IirFilter(self.sos.copy(), self.fs)

    def is_stable(self) -> bool:
        a1, a2 = self.sos[:, 4], self.sos[:, 5]
        return bool(np.all(np.abs(a2) < 1.0) and np.all(np.abs(a1) < 1.0 + a2))


def freq_response(filt: IirFilter, freqs_hz) -> np.ndarray:
    """Complex response of the cascade at the given frequencies."""
    w = 2.0 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / filt.fs
    z1 = np.exp(-1j * w)
    z2 = z1 * z1
    h = np.ones_like(z1, dtype=np.complex128)
    for b0, b1, b2, _, a1, a2 in filt.sos:
        h *= (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2)
    return h


def design_notch(fs: float, f0: float = 50.0, q: float = 30.0) -> IirFilter:
    """Single-biquad notch with unity DC/Nyquist gain and a zero at f0."""
    if not 0.0 < f0 < fs / 2.0:
        raise FrequencyOutOfRange(
            f"notch frequency {f0} Hz outside (0, {fs / 2}) at fs={fs}"
        )
    if q <= 0:
        raise InvalidSpec("quality factor must be positive")
    w0 = 2.0 * np.pi * f0 / fs
    beta = np.tan(w0 / (2.0 * q))
    gain = 1.0 / (1.0 + beta)
    c = np.cos(w0)
    sos = np.array(
        [[gain, -2.0 * gain * c, gain, 1.0, -2.0 * gain * c, 2.0 * gain - 1.0]]
    )
    return IirFilter(sos, fs)


def design_butterworth_bandpass(
    fs: float, lo: float = 0.5, hi: float = 30.0, order: int = 8
) -> IirFilter:
    if not 0.0 < lo < hi < fs / 2.0:
        raise FrequencyOutOfRange(
            f"band [{lo}, {hi}] Hz invalid at fs={fs} (need 0 < lo < hi < fs/2)"
        )
    if order < 2 or order % 2:
        raise InvalidSpec(f"bandpass order must be even and >= 2, got {order}")
    n = order // 2

    k = np.arange(n)
    proto = np.exp(1j * np.pi * (2 * k + n + 1) / (2 * n))

    fs2 = 2.0 * fs
    w1 = fs2 * np.tan(np.pi * lo / fs)
    w2 = fs2 * np.tan(np.pi * hi / fs)
    bw = w2 - w1
    w0sq = w1 * w2

    half = proto * bw / 2.0
    root = np.sqrt(half * half - w0sq)
    p_analog = np.concatenate([half + root, half - root])

    p_digital = (fs2 + p_analog) / (fs2 - p_analog)
    gain = (bw ** n) * np.real(fs2 ** n / np.prod(fs2 - p_analog))

    # conjugate pairs: keep one representative per pair, sorted for determinism
    upper = np.sort_complex(p_digital[p_digital.imag > 1e-14])
    reals = np.sort(p_digital[np.abs(p_digital.imag) <= 1e-14].real)
    sections = []
    for p in upper:
        sections.append((-2.0 * p.real, abs(p) ** 2))
    for i in range(0, reals.size - 1, 2):
        r1, r2 = reals[i], reals[i + 1]
        sections.append((-(r1 + r2), r1 * r2))
    if len(sections) != n:
        raise InvalidSpec("failed to pair bandpass poles into biquads")

    g = abs(gain) ** (1.0 / n)
    sos = np.empty((n, 6))
    for i, (a1, a2) in enumerate(sections):
        gi = g if i else g * np.sign(gain)
        sos[i] = (gi, 0.0, -gi, 1.0, a1, a2)
    return IirFilter(sos, fs)


def filter_apply(filt: IirFilter, ts: TimeSeries, reset: bool = True) -> TimeSeries:
    """Causal cascade filtering; output length equals input length.

    Starts from zero state by default.  With reset=False the run continues
    from the filter's stored state (clone the filter per channel, a single
    instance must not be shared across concurrent callers).
    """
    if abs(filt.fs - ts.fs) > 1e-9 * max(filt.fs, ts.fs):
        raise SampleRateMismatch(
            f"filter designed for {filt.fs} Hz, signal is {ts.fs} Hz"
        )
    if reset:
        filt.reset()
    y, zf = kernels.iir_cascade(filt.sos, ts.samples, filt.state)
    filt.state = zf
    return TimeSeries(y, ts.fs)


_KAISER_BETA = 8.6
_SINC_CROSSINGS = 32
_window_table = None


def resample(ts: TimeSeries, target_fs: float = 64.0) -> TimeSeries:
    """Windowed-sinc resampling with per-sample kernel normalization.

    The anti-alias cutoff sits at 0.45x the lower of the two sample rates
    (90% of the narrower Nyquist), so everything below ~0.9*Nyquist of the
    output survives and out-of-band content is strongly rejected.
    """
    global _window_table
    if ts.samples.shape[0] == 0:
        raise EmptyInput("cannot resample an empty signal")
    if target_fs <= 0:
        raise InvalidSpec(f"target_fs must be positive, got {target_fs}")
    if target_fs == ts.fs:
        return TimeSeries(ts.samples.copy(), ts.fs)
    if _window_table is None:
        _window_table = kernels.kaiser_table(_KAISER_BETA)

    n_in = ts.samples.shape[0]
    n_out = max(1, int(round(n_in * target_fs / ts.fs)))
    fc_norm = 0.45 * min(ts.fs, target_fs) / ts.fs
    half_len = _SINC_CROSSINGS / (2.0 * fc_norm)
    step = ts.fs / target_fs
    y = kernels.sinc_resample(
        ts.samples, n_out, step, fc_norm, half_len, _window_table
    )
    return TimeSeries(y, target_fs)


@dataclass
class EpochSet:
    epochs: np.ndarray  # (n_epochs, epoch_len_samples)
    labels: list[SleepStage] | None = None

    @property
    def epoch_len_samples(self) -> int:
        return self.epochs.shape[1]

    def __len__(self) -> int:
        return self.epochs.shape[0]


def segment_epochs(
    ts: TimeSeries, hyp: Hypnogram | None = None, epoch_s: float = 30.0
) -> EpochSet:
    """Cut the signal into fixed windows; the trailing partial one is dropped.

    With a hypnogram, labels align 1:1 with epochs; a longer hypnogram is
    truncated, a shorter one truncates the epochs to the labelled span.
    """
    n_sam = int(round(epoch_s * ts.fs))
    n_ep = ts.samples.shape[0] // n_sam
    if n_ep < 1:
        raise TooShort(
            f"signal of {ts.duration_s:.3f} s shorter than one {epoch_s} s epoch"
        )
    labels = None
    if hyp is not None:
        n_ep = min(n_ep, len(hyp.stages))
        labels = list(hyp.stages[:n_ep])
    epochs = ts.samples[: n_ep * n_sam].reshape(n_ep, n_sam).copy()
    return EpochSet(epochs=epochs, labels=labels)


def oversample_classes(es: EpochSet, seed: int = 0) -> EpochSet:
    """Duplicate epochs of minority classes until all present classes match
    the majority count.  Originals are kept in order, duplicates appended.
    """
    if es.labels is None:
        raise MissingLabels("oversampling requires labelled epochs")
    if len(es) == 0:
        raise EmptyClass("cannot oversample an empty epoch set")
    rng = np.random.default_rng(seed)
    by_class: dict[SleepStage, np.ndarray] = {}
    for stage in STAGES:
        idx = np.flatnonzero(np.array([lab == stage for lab in es.labels]))
        if idx.size:
            by_class[stage] = idx
    target = max(idx.size for idx in by_class.values())
    extra_epochs = []
    extra_labels = []
    for stage in STAGES:
        idx = by_class.get(stage)
        if idx is None or idx.size == target:
            continue
        picks = rng.integers(0, idx.size, size=target - idx.size)
        extra_epochs.append(es.epochs[idx[picks]])
        extra_labels.extend([stage] * picks.size)
    if not extra_epochs:
        return EpochSet(epochs=es.epochs.copy(), labels=list(es.labels))
    epochs = np.concatenate([es.epochs] + extra_epochs, axis=0)
    return EpochSet(epochs=epochs, labels=list(es.labels) + extra_labels)
