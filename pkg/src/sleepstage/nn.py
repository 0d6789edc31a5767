"""Minimal tensor/layer core: activations, conv and dense layers with full
backpropagation, orthogonal initialization and regularization, channel
squeeze-and-excitation, softmax and cross-entropy.

Everything is float64 numpy; convolution goes through im2col so the inner
products run on BLAS.  Layers cache their forward inputs, so one instance
must not run forward/backward concurrently (clone per worker instead).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (
    IndexOutOfRange,
    InvalidSpec,
    NoForwardCache,
    NonFinite,
    ShapeMismatch,
)


# --- activations -------------------------------------------------------------


def sigmoid(x):
    """Logistic 1/(1+e^-x), overflow-safe on both tails."""
    arr = np.asarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    e = np.exp(arr[~pos])
    out[~pos] = e / (1.0 + e)
    return out if isinstance(x, np.ndarray) else float(out)


def relu(x):
    out = np.maximum(np.asarray(x, dtype=np.float64), 0.0)
    return out if isinstance(x, np.ndarray) else float(out)


def leaky_relu(x, alpha: float):
    """x for x > 0, alpha*x otherwise; alpha must lie in (0, 1)."""
    if not 0.0 < alpha < 1.0:
        raise InvalidSpec(f"leaky ReLU slope must be in (0, 1), got {alpha}")
    arr = np.asarray(x, dtype=np.float64)
    out = np.where(arr > 0.0, arr, alpha * arr)
    return out if isinstance(x, np.ndarray) else float(out)


@dataclass(frozen=True)
class Activation:
    """Element-wise nonlinearity with its derivative.

    At exactly 0, relu/leaky_relu use the negative-branch slope (0 and
    alpha) as the subgradient.
    """

    kind: str  # sigmoid | relu | leaky_relu | linear
    alpha: float = 0.1

    def __post_init__(self):
        if self.kind not in ("sigmoid", "relu", "leaky_relu", "linear"):
            raise InvalidSpec(f"unknown activation kind {self.kind!r}")
        if self.kind == "leaky_relu" and not 0.0 < self.alpha < 1.0:
            raise InvalidSpec(f"leaky ReLU slope must be in (0, 1), got {self.alpha}")

    def f(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "sigmoid":
            return sigmoid(z)
        if self.kind == "relu":
            return np.maximum(z, 0.0)
        if self.kind == "leaky_relu":
            return np.where(z > 0.0, z, self.alpha * z)
        return z

    def df(self, z: np.ndarray, out: np.ndarray) -> np.ndarray:
        if self.kind == "sigmoid":
            return out * (1.0 - out)
        if self.kind == "relu":
            return (z > 0.0).astype(np.float64)
        if self.kind == "leaky_relu":
            return np.where(z > 0.0, 1.0, self.alpha)
        return np.ones_like(z)


# --- initialization and regularization ----------------------------------------


def orthogonal_init(rows: int, cols: int, seed) -> np.ndarray:
    """(Semi-)orthogonal matrix: M M^T = I for rows <= cols, else M^T M = I.

    Gaussian fill, QR, sign correction with the diagonal made non-negative
    so the factor is unique; deterministic given the seed (an int or a
    numpy Generator).
    """
    if rows < 1 or cols < 1:
        raise InvalidSpec("orthogonal_init needs rows, cols >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    big, small = max(rows, cols), min(rows, cols)
    g = rng.standard_normal((big, small))
    q, r = np.linalg.qr(g)
    q = q * np.where(np.diag(r) < 0.0, -1.0, 1.0)
    m = q.T if rows <= cols else q
    flips = np.where(np.diag(m) < 0.0, -1.0, 1.0)
    if rows <= cols:
        m = flips[:, None] * m
    else:
        m = m * flips[None, :]
    return np.ascontiguousarray(m)


def orthogonal_regularization(w: np.ndarray, lam: float):
    """Penalty lam*||G - I||_F^2 on the smaller-side Gram matrix G of w,
    with the matching gradient (4*lam*(W W^T - I) W for rows <= cols).

    Returns (penalty, grad); both zero when lam == 0.
    """
    if lam < 0:
        raise InvalidSpec("regularization strength must be >= 0")
    w = np.asarray(w, dtype=np.float64)
    if lam == 0.0:
        return 0.0, np.zeros_like(w)
    rows, cols = w.shape
    if rows <= cols:
        g = w @ w.T - np.eye(rows)
        grad = 4.0 * lam * (g @ w)
    else:
        g = w.T @ w - np.eye(cols)
        grad = 4.0 * lam * (w @ g)
    return lam * float(np.sum(g * g)), grad


# --- layers -----------------------------------------------------------------


class DenseLayer:
    def __init__(self, w: np.ndarray, b: np.ndarray, act: Activation | None = None):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.act = act
        self.dw = None
        self.db = None
        self._cache = None

    @classmethod
    def init(cls, n_out: int, n_in: int, act: Activation | None, rng) -> "DenseLayer":
        return cls(orthogonal_init(n_out, n_in, rng), np.zeros(n_out), act)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.w.shape[1]:
            raise ShapeMismatch(
                f"dense layer expects {self.w.shape[1]} inputs, got {x.shape[-1]}"
            )
        z = x @ self.w.T + self.b
        out = self.act.f(z) if self.act else z
        self._cache = (x, z, out)
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise NoForwardCache("dense backward before forward")
        x, z, out = self._cache
        dz = dout * self.act.df(z, out) if self.act else dout
        self.dw = dz.T @ x
        self.db = dz.sum(axis=0)
        return dz @ self.w


_COL_INDEX_CACHE: dict = {}


def _col_scatter_indices(c, h, w, kh, kw, stride, pad):
    """Flat positions into one padded (c, h+2p, w+2p) image for every
    (column, patch) pair of the im2col layout; cached per geometry."""
    key = (c, h, w, kh, kw, stride, pad)
    hit = _COL_INDEX_CACHE.get(key)
    if hit is not None:
        return hit
    hp, wp = h + 2 * pad, w + 2 * pad
    out_h = (hp - kh) // stride + 1
    out_w = (wp - kw) // stride + 1
    kc = np.repeat(np.arange(c), kh * kw)
    ki = np.tile(np.repeat(np.arange(kh), kw), c)
    kj = np.tile(np.arange(kw), kh * c)
    pi = stride * np.repeat(np.arange(out_h), out_w)
    pj = stride * np.tile(np.arange(out_w), out_h)
    i = ki[:, None] + pi[None, :]
    j = kj[:, None] + pj[None, :]
    flat = (kc[:, None] * hp + i) * wp + j
    hit = np.ascontiguousarray(flat, dtype=np.int64)
    _COL_INDEX_CACHE[key] = hit
    return hit


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> contiguous (C*kh*kw, B*L) patch matrix."""
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    b, c, out_h, out_w = windows.shape[:4]
    cols = windows.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, b * out_h * out_w)
    return np.ascontiguousarray(cols)


class ConvLayer:
    """2-D cross-correlation plus bias, then the layer activation."""

    def __init__(self, w, b, stride: int = 1, pad: int = 0, act: Activation | None = None):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        if self.w.ndim != 4:
            raise ShapeMismatch("conv weights must be [out, in, kh, kw]")
        self.stride = int(stride)
        self.pad = int(pad)
        self.act = act
        self.dw = None
        self.db = None
        self._cache = None

    @classmethod
    def init(cls, c_out, c_in, k, stride, pad, act, rng) -> "ConvLayer":
        w = orthogonal_init(c_out, c_in * k * k, rng).reshape(c_out, c_in, k, k)
        return cls(w, np.zeros(c_out), stride, pad, act)

    @property
    def w_matrix(self) -> np.ndarray:
        """Weights viewed as [out_channels, fan_in] for orthogonality checks."""
        return self.w.reshape(self.w.shape[0], -1)

    def forward(self, x: np.ndarray) -> np.ndarray:
        f, c, kh, kw = self.w.shape
        if x.shape[1] != c:
            raise ShapeMismatch(f"conv expects {c} input channels, got {x.shape[1]}")
        b_sz, _, h, w = x.shape
        if h + 2 * self.pad < kh or w + 2 * self.pad < kw:
            raise ShapeMismatch(
                f"spatial dims {h}x{w} (pad {self.pad}) smaller than kernel {kh}x{kw}"
            )
        xp = (
            np.pad(x, ((0, 0), (0, 0), (self.pad, self.pad), (self.pad, self.pad)))
            if self.pad
            else x
        )
        out_h = (h + 2 * self.pad - kh) // self.stride + 1
        out_w = (w + 2 * self.pad - kw) // self.stride + 1
        cols = _im2col(xp, kh, kw, self.stride)  # (C*kh*kw, B*L)
        w_mat = self.w.reshape(f, -1)
        z = w_mat @ cols + self.b[:, None]  # (F, B*L)
        z = z.reshape(f, b_sz, out_h * out_w).transpose(1, 0, 2)
        z = np.ascontiguousarray(z).reshape(b_sz, f, out_h, out_w)
        out = self.act.f(z) if self.act else z
        self._cache = (x.shape, cols, z, out)
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise NoForwardCache("conv backward before forward")
        x_shape, cols, z, out = self._cache
        b_sz, c, h, w = x_shape
        f, _, kh, kw = self.w.shape
        dz = dout * self.act.df(z, out) if self.act else dout
        # (B, F, L) -> (F, B*L) to mirror the forward layout
        dz_flat = np.ascontiguousarray(
            dz.reshape(b_sz, f, -1).transpose(1, 0, 2)
        ).reshape(f, -1)
        self.dw = (dz_flat @ cols.T).reshape(self.w.shape)
        self.db = dz_flat.sum(axis=1)
        w_mat = self.w.reshape(f, -1)
        dcols = w_mat.T @ dz_flat  # (C*kh*kw, B*L)
        flat_idx = _col_scatter_indices(c, h, w, kh, kw, self.stride, self.pad)
        hp, wp = h + 2 * self.pad, w + 2 * self.pad
        dxp = kernels.col2im_accumulate(
            dcols.reshape(flat_idx.shape[0], b_sz, -1), flat_idx, c * hp * wp
        ).reshape(b_sz, c, hp, wp)
        if self.pad:
            return dxp[:, :, self.pad : self.pad + h, self.pad : self.pad + w]
        return dxp


class SeBlock:
    """Channel recalibration: global average pool, two dense layers, gate.

    The gate is either a sigmoid or a LeakyReLU clamped to [0, 1]; the
    block output is the input scaled per channel by the gate.
    """

    def __init__(self, fc1: DenseLayer, fc2: DenseLayer, gate: str, alpha: float = 0.1):
        if gate not in ("sigmoid", "leaky_clamp"):
            raise InvalidSpec(f"unknown SE gate {gate!r}")
        self.fc1 = fc1
        self.fc2 = fc2
        self.gate = gate
        self.alpha = alpha
        self._cache = None

    @classmethod
    def init(cls, channels: int, ratio: int, act: Activation, gate: str, rng) -> "SeBlock":
        hidden = max(channels // ratio, 1)
        fc1 = DenseLayer.init(hidden, channels, act, rng)
        fc2 = DenseLayer.init(channels, hidden, None, rng)
        if gate == "leaky_clamp":
            # start the gates half-open so no channel is born dead
            fc2.b[:] = 0.5
        return cls(fc1, fc2, gate, act.alpha if act.kind == "leaky_relu" else 0.1)

    def _gate(self, u: np.ndarray) -> np.ndarray:
        if self.gate == "sigmoid":
            return sigmoid(u)
        lv = np.where(u > 0.0, u, self.alpha * u)
        return np.clip(lv, 0.0, 1.0)

    def _gate_deriv(self, u: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.gate == "sigmoid":
            return g * (1.0 - g)
        lv = np.where(u > 0.0, u, self.alpha * u)
        inside = (lv > 0.0) & (lv < 1.0)
        return np.where(inside, np.where(u > 0.0, 1.0, self.alpha), 0.0)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.fc2.w.shape[0]:
            raise ShapeMismatch(
                f"SE block built for {self.fc2.w.shape[0]} channels, got {x.shape[1]}"
            )
        s = x.mean(axis=(2, 3))
        u = self.fc2.forward(self.fc1.forward(s))
        g = self._gate(u)
        self._cache = (x, u, g)
        return x * g[:, :, None, None]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise NoForwardCache("SE backward before forward")
        x, u, g = self._cache
        hw = x.shape[2] * x.shape[3]
        dg = (dout * x).sum(axis=(2, 3))
        dx = dout * g[:, :, None, None]
        du = dg * self._gate_deriv(u, g)
        ds = self.fc1.backward(self.fc2.backward(du))
        dx += ds[:, :, None, None] / hw
        return dx


def conv_forward(layer: ConvLayer, x: np.ndarray) -> np.ndarray:
    """Forward a single image (C,H,W) or batch (B,C,H,W) through a conv layer."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return layer.forward(x[None])[0]
    return layer.forward(x)


def se_forward(block: SeBlock, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return block.forward(x[None])[0]
    return block.forward(x)


# --- softmax and loss -------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-shifted softmax along the last axis; rows sum to 1."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NonFinite("softmax input must be finite")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


CROSS_ENTROPY_EPS = 1e-12


def cross_entropy(p: np.ndarray, label: int) -> float:
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise IndexOutOfRange(f"label {label} out of range for {p.shape[-1]} classes")
    return float(-np.log(p[label] + CROSS_ENTROPY_EPS))


# --- the network ----------------------------------------------------------------


@dataclass
class NetworkConfig:
    channel_plan: tuple = (8, 16, 16, 32, 32, 64, 64)
    kernel: int = 3
    strides: tuple = (1, 1, 1, 1, 1, 2, 2)
    activation: str = "leaky_relu"
    alpha: float = 0.1
    se_enabled: bool = True
    se_ratio: int = 4
    gate: str = "leaky_clamp"
    n_classes: int = 5

    def act(self) -> Activation:
        return Activation(self.activation, self.alpha)


class Network:
    """Conv stack (optionally SE-gated per layer), one dense head, softmax."""

    def __init__(self, conv_layers, se_blocks, dense: DenseLayer, cfg: NetworkConfig,
                 input_shape):
        self.conv_layers = conv_layers
        self.se_blocks = se_blocks  # aligned with conv_layers, entries may be None
        self.dense = dense
        self.cfg = cfg
        self.input_shape = tuple(input_shape)
        self._cache = None

    @classmethod
    def build(cls, input_shape, cfg: NetworkConfig = None, seed=0) -> "Network":
        cfg = cfg or NetworkConfig()
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        act = cfg.act()
        c, h, w = input_shape
        convs = []
        ses = []
        for c_out, stride in zip(cfg.channel_plan, cfg.strides):
            pad = cfg.kernel // 2
            convs.append(ConvLayer.init(c_out, c, cfg.kernel, stride, pad, act, rng))
            ses.append(
                SeBlock.init(c_out, cfg.se_ratio, act, cfg.gate, rng)
                if cfg.se_enabled
                else None
            )
            h = (h + 2 * pad - cfg.kernel) // stride + 1
            w = (w + 2 * pad - cfg.kernel) // stride + 1
            c = c_out
        dense = DenseLayer.init(cfg.n_classes, c * h * w, None, rng)
        return cls(convs, ses, dense, cfg, input_shape)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ShapeMismatch(
                f"network built for input {self.input_shape}, got {tuple(x.shape[1:])}"
            )
        out = x
        for conv, se in zip(self.conv_layers, self.se_blocks):
            out = conv.forward(out)
            if se is not None:
                out = se.forward(out)
        flat = out.reshape(out.shape[0], -1)
        logits = self.dense.forward(flat)
        probs = softmax(logits)
        self._cache = (out.shape, probs)
        return probs[0] if single else probs

    def backward(self, dprobs: np.ndarray, ortho_lambda: float = 0.0) -> np.ndarray:
        """Backpropagate a gradient w.r.t. the softmax output; fills every
        layer's dw/db (plus orthogonal-regularization contributions)."""
        if self._cache is None:
            raise NoForwardCache("network backward before forward")
        conv_out_shape, probs = self._cache
        dprobs = np.asarray(dprobs, dtype=np.float64)
        single = dprobs.ndim == 1
        if single:
            dprobs = dprobs[None]
        # softmax jacobian: dL/dz_i = p_i * (dL/dp_i - sum_j dL/dp_j p_j)
        dlogits = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dflat = self.dense.backward(dlogits)
        dout = dflat.reshape(conv_out_shape)
        for conv, se in zip(reversed(self.conv_layers), reversed(self.se_blocks)):
            if se is not None:
                dout = se.backward(dout)
            dout = conv.backward(dout)
        if ortho_lambda > 0.0:
            for w_mat, layer, attr in self._reg_targets():
                _, grad = orthogonal_regularization(w_mat, ortho_lambda)
                target = getattr(layer, attr)
                target += grad.reshape(target.shape)
        return dout[0] if single else dout

    def _reg_targets(self):
        """(matrix_view, layer, grad_attr) for every regularized weight."""
        out = []
        for conv, se in zip(self.conv_layers, self.se_blocks):
            out.append((conv.w_matrix, conv, "dw"))
            if se is not None:
                out.append((se.fc1.w, se.fc1, "dw"))
                out.append((se.fc2.w, se.fc2, "dw"))
        out.append((self.dense.w, self.dense, "dw"))
        return out

    def ortho_penalty(self, lam: float) -> float:
        if lam <= 0.0:
            return 0.0
        return sum(orthogonal_regularization(w, lam)[0] for w, _, _ in self._reg_targets())

    def loss_and_grad(self, x: np.ndarray, labels, ortho_lambda: float = 0.0):
        """Mean cross-entropy (+ orthogonal penalty) and full backward pass.

        Returns (loss, probs); gradients are left in the layers.
        """
        labels = np.asarray(labels, dtype=np.int64)
        probs = self.forward(x)
        batch = probs.shape[0]
        picked = probs[np.arange(batch), labels]
        loss = float(-np.log(picked + CROSS_ENTROPY_EPS).mean())
        dprobs = np.zeros_like(probs)
        dprobs[np.arange(batch), labels] = -1.0 / (picked + CROSS_ENTROPY_EPS) / batch
        self.backward(dprobs, ortho_lambda)
        return loss + self.ortho_penalty(ortho_lambda), probs

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(x), axis=-1)

    def parameters(self) -> list[np.ndarray]:
        params = []
        for conv, se in zip(self.conv_layers, self.se_blocks):
            params.extend([conv.w, conv.b])
            if se is not None:
                params.extend([se.fc1.w, se.fc1.b, se.fc2.w, se.fc2.b])
        params.extend([self.dense.w, self.dense.b])
        return params

    def gradients(self) -> list[np.ndarray]:
        grads = []
        for conv, se in zip(self.conv_layers, self.se_blocks):
            grads.extend([conv.dw, conv.db])
            if se is not None:
                grads.extend([se.fc1.dw, se.fc1.db, se.fc2.dw, se.fc2.db])
        grads.extend([self.dense.dw, self.dense.db])
        if any(g is None for g in grads):
            raise NoForwardCache("gradients requested before a backward pass")
        return grads

    def set_parameters(self, values: list[np.ndarray]):
        params = self.parameters()
        if len(values) != len(params):
            raise ShapeMismatch(
                f"expected {len(params)} parameter arrays, got {len(values)}"
            )
        for dst, src in zip(params, values):
            if dst.shape != src.shape:
                raise ShapeMismatch(f"parameter shape {src.shape} != {dst.shape}")
            dst[...] = src

    def describe(self) -> dict:
        """Architecture descriptor (used by the model store)."""
        layers = []
        for conv, se in zip(self.conv_layers, self.se_blocks):
            entry = {
                "kind": "conv",
                "out": int(conv.w.shape[0]),
                "in": int(conv.w.shape[1]),
                "kernel": int(conv.w.shape[2]),
                "stride": conv.stride,
                "pad": conv.pad,
            }
            if se is not None:
                entry["se"] = {"hidden": int(se.fc1.w.shape[0]), "gate": se.gate,
                               "alpha": se.alpha}
            layers.append(entry)
        return {
            "input_shape": list(self.input_shape),
            "layers": layers,
            "dense": {"out": int(self.dense.w.shape[0]), "in": int(self.dense.w.shape[1])},
            "activation": self.cfg.activation,
            "alpha": self.cfg.alpha,
            "se_enabled": self.cfg.se_enabled,
            "se_ratio": self.cfg.se_ratio,
            "gate": self.cfg.gate,
            "n_classes": self.cfg.n_classes,
            "channel_plan": list(self.cfg.channel_plan),
            "kernel": self.cfg.kernel,
            "strides": list(self.cfg.strides),
        }

    @classmethod
    def from_descriptor(cls, desc: dict) -> "Network":
        cfg = NetworkConfig(
            channel_plan=tuple(desc["channel_plan"]),
            kernel=desc["kernel"],
            strides=tuple(desc["strides"]),
            activation=desc["activation"],
            alpha=desc["alpha"],
            se_enabled=desc["se_enabled"],
            se_ratio=desc["se_ratio"],
            gate=desc["gate"],
            n_classes=desc["n_classes"],
        )
        return cls.build(tuple(desc["input_shape"]), cfg, seed=0)
