"""Deterministic binary persistence of networks, autoencoders and Adam state.

File layout (all integers little-endian):

    8 bytes   magic "ESSCMD01"
    payload:
        u32   format version (currently 1)
        u32   descriptor length, then that many bytes of sorted-key JSON
        u32   number of parameter blobs
        per blob: u32 ndim, u32 dims..., raw float64 data
        u8    optimizer-state flag
        if set: u64 step count, f64 lr, f64 beta1, f64 beta2, f64 eps,
                then first-moment blobs and second-moment blobs (shapes
                mirror the parameter blobs, no per-blob headers)
    u32   CRC-32 over the payload

Parameters are stored as float64 regardless of training precision so a
save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import BadMagic, ChecksumMismatch, ShapeMismatch, TruncatedData, VersionUnsupported
from .hht import Autoencoder, _reduced_shape
from .nn import Activation, DenseLayer, Network
from .optim import AdamState

MAGIC = b"ESSCMD01"
FORMAT_VERSION = 1


def _blob(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def _payload(desc: dict, params: list[np.ndarray], state: AdamState | None) -> bytes:
    desc_json = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode()
    parts = [
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", len(desc_json)),
        desc_json,
        struct.pack("<I", len(params)),
    ]
    parts.extend(_blob(p) for p in params)
    if state is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01")
        parts.append(
            struct.pack("<Qdddd", state.t, state.lr, state.beta1, state.beta2, state.eps)
        )
        parts.extend(_blob(m) for m in state.m)
        parts.extend(_blob(v) for v in state.v)
    return b"".join(parts)


def _container(desc: dict, params, state) -> bytes:
    payload = _payload(desc, params, state)
    return MAGIC + payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedData(
                f"model file ends at byte {len(self.data)}, needed {self.pos + n}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob(self) -> np.ndarray:
        ndim = self.u32()
        if ndim > 8:
            raise TruncatedData(f"implausible blob rank {ndim}")
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape)
        return arr.astype(np.float64)


def _open_container(data: bytes) -> _Reader:
    if len(data) < len(MAGIC) + 8:
        raise TruncatedData(f"model file of {len(data)} bytes is too short")
    if data[: len(MAGIC)] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, got {data[: len(MAGIC)]!r}")
    payload = data[len(MAGIC) : -4]
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != stored_crc:
        raise ChecksumMismatch("payload CRC-32 does not match")
    reader = _Reader(payload)
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"format version {version}, supported: {FORMAT_VERSION}")
    return reader


def _read_desc_params(reader: _Reader):
    desc = json.loads(reader.take(reader.u32()).decode())
    params = [reader.blob() for _ in range(reader.u32())]
    state = None
    if reader.u8():
        t, lr, b1, b2, eps = struct.unpack("<Qdddd", reader.take(40))
        m = [reader.blob() for _ in range(len(params))]
        v = [reader.blob() for _ in range(len(params))]
        for grp in (m, v):
            for p, s in zip(params, grp):
                if p.shape != s.shape:
                    raise ShapeMismatch("optimizer state shape does not match parameters")
        state = AdamState(m=m, v=v, t=t, beta1=b1, beta2=b2, lr=lr, eps=eps)
    return desc, params, state


def save(net: Network, state: AdamState | None = None) -> bytes:
    """Serialize a network (and optionally its Adam state) to bytes.

    Deterministic: identical inputs produce identical bytes.
    """
    desc = net.describe()
    desc["model_kind"] = "classifier"
    return _container(desc, net.parameters(), state)


def load(data: bytes) -> tuple[Network, AdamState | None]:
    reader = _open_container(data)
    desc, params, state = _read_desc_params(reader)
    if desc.get("model_kind") != "classifier":
        raise ShapeMismatch(f"not a classifier model: {desc.get('model_kind')!r}")
    net = Network.from_descriptor(desc)
    net.set_parameters(params)
    return net, state


def save_autoencoder(ae: Autoencoder) -> bytes:
    desc = {
        "model_kind": "autoencoder",
        "image_shape": list(ae.image_shape),
        "latent_dim": ae.latent_dim,
        "alpha": ae.enc.act.alpha if ae.enc.act else 0.1,
    }
    return _container(desc, [ae.enc.w, ae.enc.b, ae.dec.w, ae.dec.b], None)


def load_autoencoder(data: bytes) -> Autoencoder:
    reader = _open_container(data)
    desc, params, _ = _read_desc_params(reader)
    if desc.get("model_kind") != "autoencoder":
        raise ShapeMismatch(f"not an autoencoder model: {desc.get('model_kind')!r}")
    t_bins, f_bins = desc["image_shape"]
    latent = desc["latent_dim"]
    enc = DenseLayer(params[0], params[1], Activation("leaky_relu", desc["alpha"]))
    dec = DenseLayer(params[2], params[3], None)
    if enc.w.shape != (latent, t_bins * f_bins) or dec.w.shape != (t_bins * f_bins, latent):
        raise ShapeMismatch("autoencoder blob shapes do not match the descriptor")
    return Autoencoder(
        enc=enc,
        dec=dec,
        image_shape=(t_bins, f_bins),
        reduced_shape=_reduced_shape(t_bins, f_bins, latent),
    )
