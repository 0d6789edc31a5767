"""Hilbert-Huang time-frequency imaging of EEG epochs.

An epoch is sifted into intrinsic mode functions (EMD with natural cubic
spline envelopes over mirrored extrema and a Cauchy stopping rule), each
IMF gets an analytic signal via the frequency-domain Hilbert transform,
and the instantaneous amplitudes are accumulated into a time-frequency
raster.  A single-hidden-layer autoencoder optionally reduces the raster
to a smaller grid before classification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import (
    DimensionMismatch,
    EmptyInput,
    InvalidLatentDim,
    InvalidSpec,
    NonFinite,
)
from .nn import Activation, DenseLayer
from .optim import AdamState, adam_step

DEFAULT_MAX_IMFS = 6
DEFAULT_SIFT_TOL = 0.05
MAX_SIFTS = 50

TFI_TIME_BINS = 64
TFI_FREQ_BINS = 32


def emd(
    epoch,
    max_imfs: int = DEFAULT_MAX_IMFS,
    sift_tol: float = DEFAULT_SIFT_TOL,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Empirical mode decomposition: (imfs, residue) with sum(imfs)+residue
    reconstructing the input exactly.

    A monotone input (fewer than 2 interior extrema) yields zero IMFs and
    the input itself as residue.
    """
    x = np.asarray(epoch, dtype=np.float64)
    if x.ndim != 1 or x.size < 8:
        raise InvalidSpec("emd needs a 1-D signal of at least 8 samples")
    if not np.all(np.isfinite(x)):
        raise NonFinite("emd input contains NaN or inf")

    residue = x.copy()
    imfs: list[np.ndarray] = []
    while len(imfs) < max_imfs:
        mx, mn = kernels.find_extrema(residue)
        if mx.size + mn.size < 2:
            break
        h = residue.copy()
        for _ in range(MAX_SIFTS):
            mean_env, nmax, nmin = kernels.envelope_mean(h)
            if nmax + nmin < 2:
                break
            energy = float(h @ h)
            h = h - mean_env
            if energy > 0.0 and float(mean_env @ mean_env) / energy < sift_tol:
                break
        imfs.append(h)
        residue = residue - h
    return imfs, residue


def hilbert_analytic(x) -> np.ndarray:
    """Analytic signal by the FFT method: zero the negative frequencies,
    double the positive ones, keep DC and Nyquist.

    The real part of the result equals the input (to rounding).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise InvalidSpec("hilbert_analytic needs a 1-D signal of length >= 2")
    if not np.all(np.isfinite(x)):
        raise NonFinite("hilbert_analytic input contains NaN or inf")
    n = x.size
    spec = np.fft.fft(x)
    gain = np.zeros(n)
    gain[0] = 1.0
    if n % 2 == 0:
        gain[n // 2] = 1.0
        gain[1 : n // 2] = 2.0
    else:
        gain[1 : (n + 1) // 2] = 2.0
    return np.fft.ifft(spec * gain)


def instantaneous_attrs(analytic: np.ndarray, fs: float):
    """Instantaneous amplitude and frequency of an analytic signal.

    Frequency is the finite-differenced unwrapped phase scaled to Hz,
    clamped to [0, fs/2]; samples of zero amplitude report frequency 0.
    """
    z = np.asarray(analytic, dtype=np.complex128)
    amp = np.abs(z)
    phase = np.unwrap(np.angle(z))
    freq = np.gradient(phase) * fs / (2.0 * np.pi)
    np.clip(freq, 0.0, fs / 2.0, out=freq)
    freq[amp == 0.0] = 0.0
    return amp, freq


def build_tfi(
    imfs: list[np.ndarray],
    fs: float,
    t_bins: int = TFI_TIME_BINS,
    f_bins: int = TFI_FREQ_BINS,
) -> np.ndarray:
    """Accumulate per-IMF instantaneous amplitude into a (t_bins, f_bins)
    raster over [0, fs/2] Hz, normalized to peak 1 when non-zero.

    An empty IMF list yields the all-zero image.
    """
    if not imfs:
        return np.zeros((t_bins, f_bins))
    n = imfs[0].shape[0]
    if any(imf.shape[0] != n for imf in imfs):
        raise DimensionMismatch("all IMFs must share the epoch length")
    if t_bins > n:
        raise DimensionMismatch(f"t_bins {t_bins} exceeds the {n}-sample epoch")
    amps = np.empty((len(imfs), n))
    freqs = np.empty((len(imfs), n))
    for k, imf in enumerate(imfs):
        amps[k], freqs[k] = instantaneous_attrs(hilbert_analytic(imf), fs)
    grid = kernels.tfi_accumulate(amps, freqs, t_bins, f_bins, fs / 2.0)
    peak = grid.max()
    if peak > 0.0:
        grid /= peak
    return grid


def epoch_to_tfi(
    epoch,
    fs: float,
    t_bins: int = TFI_TIME_BINS,
    f_bins: int = TFI_FREQ_BINS,
    max_imfs: int = DEFAULT_MAX_IMFS,
    sift_tol: float = DEFAULT_SIFT_TOL,
) -> np.ndarray:
    imfs, _ = emd(epoch, max_imfs=max_imfs, sift_tol=sift_tol)
    return build_tfi(imfs, fs, t_bins, f_bins)


# --- autoencoder dimensionality reduction ---------------------------------------


@dataclass
class Autoencoder:
    enc: DenseLayer
    dec: DenseLayer
    image_shape: tuple[int, int]
    reduced_shape: tuple[int, int]

    @property
    def latent_dim(self) -> int:
        return self.enc.w.shape[0]


def _reduced_shape(t_bins: int, f_bins: int, latent_dim: int) -> tuple[int, int]:
    if t_bins % 4 == 0 and f_bins % 2 == 0 and (t_bins // 4) * (f_bins // 2) == latent_dim:
        return (t_bins // 4, f_bins // 2)
    return (latent_dim, 1)


DEFAULT_AE_EPOCHS = 60
DEFAULT_AE_LR = 1e-3


def train_autoencoder(
    images,
    latent_dim: int | None = None,
    epochs: int = DEFAULT_AE_EPOCHS,
    seed: int = 0,
    lr: float = DEFAULT_AE_LR,
    batch_size: int = 64,
    alpha: float = 0.1,
) -> Autoencoder:
    """Train the dense encoder/decoder pair on mean-squared reconstruction.

    Deterministic given the seed; the encoder output dimension must be
    strictly smaller than the flattened image.
    """
    stack = np.asarray(images, dtype=np.float64)
    if stack.ndim != 3 or stack.shape[0] < 1:
        raise EmptyInput("train_autoencoder needs at least one 2-D image")
    n, t_bins, f_bins = stack.shape
    d = t_bins * f_bins
    if latent_dim is None:
        latent_dim = max(d // 8, 1)
    if not 1 <= latent_dim < d:
        raise InvalidLatentDim(
            f"latent_dim must be in [1, {d - 1}] for {t_bins}x{f_bins} images"
        )
    rng = np.random.default_rng(seed)
    act = Activation("leaky_relu", alpha)
    enc = DenseLayer.init(latent_dim, d, act, rng)
    dec = DenseLayer.init(d, latent_dim, None, rng)
    params = [enc.w, enc.b, dec.w, dec.b]
    state = AdamState.init(params, lr=lr)

    flat = stack.reshape(n, d)
    for _ in range(epochs):
        order = rng.permutation(n)
        for b0 in range(0, n, batch_size):
            xb = flat[order[b0 : b0 + batch_size]]
            recon = dec.forward(enc.forward(xb))
            diff = recon - xb
            dout = 2.0 * diff / diff.size
            enc.backward(dec.backward(dout))
            adam_step(params, [enc.dw, enc.db, dec.dw, dec.db], state)
    return Autoencoder(
        enc=enc,
        dec=dec,
        image_shape=(t_bins, f_bins),
        reduced_shape=_reduced_shape(t_bins, f_bins, latent_dim),
    )


def encode(ae: Autoencoder, img: np.ndarray) -> np.ndarray:
    """Latent vector for one image; pure, no state touched."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != ae.image_shape:
        raise DimensionMismatch(
            f"autoencoder built for {ae.image_shape} images, got {img.shape}"
        )
    z = ae.enc.w @ img.reshape(-1) + ae.enc.b
    return ae.enc.act.f(z) if ae.enc.act else z


def encode_to_image(ae: Autoencoder, img: np.ndarray) -> np.ndarray:
    """Latent vector reshaped to the reduced 2-D grid the classifier eats."""
    return encode(ae, img).reshape(ae.reduced_shape)


def reconstruct(ae: Autoencoder, img: np.ndarray) -> np.ndarray:
    latent = encode(ae, img)
    flat = ae.dec.w @ latent + ae.dec.b
    return flat.reshape(ae.image_shape)


def reconstruction_mse(ae: Autoencoder, images) -> float:
    stack = np.asarray(images, dtype=np.float64)
    err = 0.0
    for img in stack:
        diff = reconstruct(ae, img) - img
        err += float(np.mean(diff * diff))
    return err / stack.shape[0]
