"""Checkpoint persistence, 2-bit ternary packing, and compression reporting.

Two little-endian binary formats, both CRC-32 trailed so corruption and
truncation are rejected before any parsing:

TNCK checkpoints: magic "TNCK", version u16, arch string, JSON metadata,
then per parametric layer the name, weight shape, float32 weight payload,
float32 bias payload and an optional quantizer record (delta, mu, sigma as
float64).

TERN packed models: magic "TERN", version u16, arch string, JSON metadata,
then per layer either a float32 scale plus codes packed four per byte (2
bits each, first weight in the least-significant pair, 00=0, 01=+1, 10=-1,
11 reserved) or, for non-quantized layers, the raw float32 weights; biases
follow in float32 either way.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .gaussian import TruncGaussParams, clip_threshold, truncated_upper_mean
from .network import LayerSpec, Model, arch_specs, build_from_config
from .ternarize import codes_from_state, is_fresh, sparsity

CHECKPOINT_MAGIC = b"TNCK"
PACKED_MAGIC = b"TERN"
FORMAT_VERSION = 1

_MIN_FILE = 4 + 2 + 4  # magic + version + crc


class ModelIOError(Exception):
    """Base class for every model file rejection."""


class BadMagicError(ModelIOError):
    pass


class UnsupportedVersionError(ModelIOError):
    pass


class CrcMismatchError(ModelIOError):
    pass


class TruncatedFileError(ModelIOError):
    pass


class InvalidCodeError(ModelIOError):
    """A code outside {-1, 0, +1} or the reserved 11 bit pair."""


class FormatError(ModelIOError):
    """Structurally malformed content behind a valid CRC."""


# --- byte-level helpers -----------------------------------------------------


class _Writer:
    def __init__(self):
        self.buf = bytearray()

    def u8(self, v):
        self.buf += struct.pack("<B", v)

    def u16(self, v):
        self.buf += struct.pack("<H", v)

    def u32(self, v):
        self.buf += struct.pack("<I", v)

    def f32(self, v):
        self.buf += struct.pack("<f", v)

    def f64(self, v):
        self.buf += struct.pack("<d", v)

    def raw(self, b: bytes):
        self.buf += b

    def str16(self, s: str):
        b = s.encode("utf-8")
        self.u16(len(b))
        self.raw(b)

    def str32(self, s: str):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.raw(b)

    def f32_array(self, a: np.ndarray):
        self.raw(np.ascontiguousarray(a, dtype="<f4").tobytes())

    def finish(self) -> bytes:
        crc = zlib.crc32(bytes(self.buf)) & 0xFFFFFFFF
        return bytes(self.buf) + struct.pack("<I", crc)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"needed {n} bytes at offset {self.pos}, only {len(self.data) - self.pos} left"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def f32(self):
        return struct.unpack("<f", self.take(4))[0]

    def f64(self):
        return struct.unpack("<d", self.take(8))[0]

    def str16(self) -> str:
        return self.take(self.u16()).decode("utf-8")

    def str32(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def f32_array(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<f4").copy()

    def done(self) -> bool:
        return self.pos == len(self.data)


def _open_container(data: bytes, magic: bytes) -> _Reader:
    """Validate length, magic, CRC and version; return a reader past the header."""
    if len(data) < _MIN_FILE:
        raise TruncatedFileError(f"file of {len(data)} bytes is shorter than any valid model file")
    if data[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {data[:4]!r}")
    stored = struct.unpack("<I", data[-4:])[0]
    actual = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise CrcMismatchError(f"CRC mismatch: stored {stored:#010x}, computed {actual:#010x}")
    r = _Reader(data[:-4])
    r.take(4)  # magic
    version = r.u16()
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}")
    return r


# --- checkpoint format ------------------------------------------------------


@dataclass
class LayerRecord:
    name: str
    shape: tuple[int, ...]
    weights: np.ndarray  # float32
    bias: np.ndarray  # float32
    quant: tuple[float, float, float] | None = None  # delta, mu, sigma


@dataclass
class Checkpoint:
    arch: str
    metadata: dict = field(default_factory=dict)
    layers: list[LayerRecord] = field(default_factory=list)


def checkpoint_from_model(model: Model, metadata: dict | None = None) -> Checkpoint:
    meta = dict(metadata or {})
    if model.arch == "custom":
        meta["specs"] = [s.to_dict() for s in model.specs]
    layers = []
    for layer in model.param_layers():
        quant = None
        if layer.qstate is not None:
            st = layer.qstate
            quant = (st.delta, st.mu, st.sigma)
        layers.append(
            LayerRecord(
                name=layer.name,
                shape=tuple(layer.w.shape),
                weights=layer.w.data.astype(np.float32),
                bias=layer.b.data.astype(np.float32),
                quant=quant,
            )
        )
    return Checkpoint(arch=model.arch, metadata=meta, layers=layers)


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    w = _Writer()
    w.raw(CHECKPOINT_MAGIC)
    w.u16(FORMAT_VERSION)
    w.str16(ckpt.arch)
    w.str32(json.dumps(ckpt.metadata, sort_keys=True))
    w.u16(len(ckpt.layers))
    for rec in ckpt.layers:
        w.str16(rec.name)
        w.u8(len(rec.shape))
        for e in rec.shape:
            w.u32(e)
        w.f32_array(rec.weights)
        w.u32(rec.bias.size)
        w.f32_array(rec.bias)
        if rec.quant is None:
            w.u8(0)
        else:
            w.u8(1)
            for v in rec.quant:
                w.f64(v)
    return w.finish()


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    r = _open_container(data, CHECKPOINT_MAGIC)
    arch = r.str16()
    try:
        metadata = json.loads(r.str32())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"bad metadata JSON: {e}") from e
    nlayers = r.u16()
    layers = []
    for _ in range(nlayers):
        name = r.str16()
        rank = r.u8()
        shape = tuple(r.u32() for _ in range(rank))
        n = int(np.prod(shape)) if shape else 0
        if n <= 0:
            raise FormatError(f"layer {name!r} has empty shape {shape}")
        weights = r.f32_array(n)
        bias = r.f32_array(r.u32())
        quant = None
        if r.u8():
            quant = (r.f64(), r.f64(), r.f64())
        layers.append(LayerRecord(name, shape, weights, bias, quant))
    if not r.done():
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes after the last layer")
    return Checkpoint(arch=arch, metadata=metadata, layers=layers)


def _specs_from(arch: str, metadata: dict) -> list[LayerSpec]:
    if arch == "custom":
        try:
            return [LayerSpec.from_dict(d) for d in metadata["specs"]]
        except (KeyError, TypeError) as e:
            raise FormatError(f"custom arch without usable specs in metadata: {e}") from e
    try:
        return arch_specs(arch)
    except ValueError as e:
        raise FormatError(str(e)) from e


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    model = build_from_config(_specs_from(ckpt.arch, ckpt.metadata), seed=0)
    model.arch = ckpt.arch
    model.meta = dict(ckpt.metadata)
    layers = model.param_layers()
    if len(layers) != len(ckpt.layers):
        raise FormatError(
            f"checkpoint has {len(ckpt.layers)} layers but architecture has {len(layers)}"
        )
    for layer, rec in zip(layers, ckpt.layers):
        if rec.name != layer.name or tuple(layer.w.shape) != rec.shape:
            raise FormatError(
                f"layer mismatch: checkpoint {rec.name}{rec.shape} vs "
                f"model {layer.name}{tuple(layer.w.shape)}"
            )
        layer.w.data = rec.weights.astype(np.float64).reshape(rec.shape)
        layer.b.data = rec.bias.astype(np.float64)
        if rec.quant is not None:
            if layer.qstate is None:
                raise FormatError(f"quantizer record for non-quantized layer {rec.name}")
            delta, mu, sigma = rec.quant
            layer.qstate.delta = delta
            layer.qstate.mu = mu
            layer.qstate.sigma = sigma
            if np.isfinite(sigma) and sigma > 0:
                layer.qstate.delta_c = clip_threshold(delta, sigma)
                layer.qstate.scale = truncated_upper_mean(
                    TruncGaussParams(mu, sigma, layer.qstate.delta_c)
                )
    return model


def save_checkpoint(model: Model, path, metadata: dict | None = None) -> None:
    data = checkpoint_to_bytes(checkpoint_from_model(model, metadata))
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        data = fh.read()
    return model_from_checkpoint(checkpoint_from_bytes(data))


# --- 2-bit packing ----------------------------------------------------------

_CODE_TO_BITS = {0: 0, 1: 1, -1: 2}


def pack_codes(codes) -> bytes:
    """Pack codes in {-1, 0, +1} four per byte, first code in bits 1:0."""
    flat = np.asarray(codes).reshape(-1)
    if flat.size and not np.isin(flat, (-1, 0, 1)).all():
        bad = flat[~np.isin(flat, (-1, 0, 1))][0]
        raise InvalidCodeError(f"code {bad!r} outside {{-1, 0, +1}}")
    u = np.zeros(flat.size, dtype=np.uint8)
    u[flat == 1] = 1
    u[flat == -1] = 2
    pad = (-u.size) % 4
    if pad:
        u = np.concatenate([u, np.zeros(pad, dtype=np.uint8)])
    quads = u.reshape(-1, 4)
    packed = quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)
    return packed.astype(np.uint8).tobytes()


def unpack_codes(data: bytes, n: int) -> np.ndarray:
    """Inverse of pack_codes; rejects the reserved 11 pair and bad padding."""
    expected = (n + 3) // 4
    if len(data) != expected:
        raise FormatError(f"packed payload of {len(data)} bytes cannot hold {n} codes")
    if n == 0:
        return np.zeros(0, dtype=np.int8)
    b = np.frombuffer(data, dtype=np.uint8)
    pairs = np.empty((b.size, 4), dtype=np.uint8)
    pairs[:, 0] = b & 3
    pairs[:, 1] = (b >> 2) & 3
    pairs[:, 2] = (b >> 4) & 3
    pairs[:, 3] = (b >> 6) & 3
    flat = pairs.reshape(-1)
    if np.any(flat == 3):
        raise InvalidCodeError("reserved 11 bit pair in packed codes")
    if np.any(flat[n:]):
        raise FormatError("non-zero padding bit pairs in final byte")
    codes = np.zeros(flat.size, dtype=np.int8)
    codes[flat == 1] = 1
    codes[flat == 2] = -1
    return codes[:n]


# --- packed model format ----------------------------------------------------


@dataclass
class PackedLayer:
    name: str
    shape: tuple[int, ...]
    quantized: bool
    scale: float  # only meaningful when quantized
    codes: np.ndarray | None  # int8, quantized layers
    weights: np.ndarray | None  # float32, non-quantized layers
    bias: np.ndarray


def packed_to_bytes(model: Model) -> bytes:
    w = _Writer()
    w.raw(PACKED_MAGIC)
    w.u16(FORMAT_VERSION)
    w.str16(model.arch)
    meta = {}
    if model.arch == "custom":
        meta["specs"] = [s.to_dict() for s in model.specs]
    w.str32(json.dumps(meta, sort_keys=True))
    params = model.param_layers()
    w.u16(len(params))
    for layer in params:
        w.str16(layer.name)
        w.u8(len(layer.w.shape))
        for e in layer.w.shape:
            w.u32(e)
        if layer.qstate is not None:
            if not is_fresh(layer.qstate, layer.w.data):
                raise ValueError(
                    f"stale quantizer state on layer {layer.name}; refresh before exporting"
                )
            w.u8(1)
            w.f32(layer.qstate.scale)
            w.raw(pack_codes(codes_from_state(layer.w.data, layer.qstate).codes))
        else:
            w.u8(0)
            w.f32_array(layer.w.data)
        w.u32(layer.b.size)
        w.f32_array(layer.b.data)
    return w.finish()


def packed_from_bytes(data: bytes) -> tuple[str, dict, list[PackedLayer]]:
    r = _open_container(data, PACKED_MAGIC)
    arch = r.str16()
    try:
        meta = json.loads(r.str32())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"bad metadata JSON: {e}") from e
    nlayers = r.u16()
    layers = []
    for _ in range(nlayers):
        name = r.str16()
        rank = r.u8()
        shape = tuple(r.u32() for _ in range(rank))
        n = int(np.prod(shape)) if shape else 0
        if n <= 0:
            raise FormatError(f"layer {name!r} has empty shape {shape}")
        quantized = bool(r.u8())
        scale = 0.0
        codes = weights = None
        if quantized:
            scale = r.f32()
            codes = unpack_codes(r.take((n + 3) // 4), n)
        else:
            weights = r.f32_array(n)
        bias = r.f32_array(r.u32())
        layers.append(PackedLayer(name, shape, quantized, scale, codes, weights, bias))
    if not r.done():
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes after the last layer")
    return arch, meta, layers


def export_packed(model: Model, path) -> dict:
    """Write the packed model and return the compression/sparsity report.

    Per quantized layer the ratio is (4 * params) / (packed bytes + 4 bytes
    of scale); non-quantized layers are stored as float32 and excluded from
    the ratio, flagged in the report.
    """
    data = packed_to_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)

    layers = []
    q_params = 0
    q_packed = 0
    for layer in model.param_layers():
        n = layer.w.size
        entry = {
            "name": layer.name,
            "params": n,
            "quantized": layer.qstate is not None,
            "bytes_float32": 4 * n,
        }
        if layer.qstate is not None:
            packed_bytes = (n + 3) // 4
            entry["sparsity"] = sparsity(codes_from_state(layer.w.data, layer.qstate))
            entry["bytes_packed"] = packed_bytes
            entry["compression_ratio"] = (4 * n) / (packed_bytes + 4)
            q_params += n
            q_packed += packed_bytes + 4
        layers.append(entry)
    report = {
        "file": str(path),
        "file_bytes": len(data),
        "layers": layers,
        "totals": {
            "params": sum(l["params"] for l in layers),
            "quantized_params": q_params,
            "bytes_float32_quantized": 4 * q_params,
            "bytes_packed_with_scales": q_packed,
            "compression_ratio": (4 * q_params) / q_packed if q_packed else None,
        },
    }
    return report


def load_packed_and_infer(path, x: np.ndarray) -> np.ndarray:
    """Forward pass straight from a packed file: codes and scales only.

    Each quantized layer computes its linear op on the codes and applies
    the scalar scale to the accumulated result, matching the exporting
    model's ternary forward.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    arch, meta, records = packed_from_bytes(data)
    specs = _specs_from(arch, meta)
    t = np.asarray(x, dtype=np.float64)
    it = iter(records)
    for spec in specs:
        if spec.kind == "relu":
            t = np.maximum(t, 0.0)
            continue
        if spec.kind == "flatten":
            t = t.reshape(t.shape[0], -1)
            continue
        try:
            rec = next(it)
        except StopIteration:
            raise FormatError("fewer layer records than parametric layers in arch") from None
        if rec.quantized:
            eff = rec.codes.astype(np.float64).reshape(rec.shape)
            scale = float(rec.scale)
        else:
            eff = rec.weights.astype(np.float64).reshape(rec.shape)
            scale = None
        if spec.kind == "dense":
            z = t @ eff
        else:
            z = kernels.conv2d_forward(t, eff, spec.stride, spec.padding)
        if scale is not None:
            z = z * scale
        bias = rec.bias.astype(np.float64)
        t = z + (bias if spec.kind == "dense" else bias[None, :, None, None])
    if next(it, None) is not None:
        raise FormatError("more layer records than parametric layers in arch")
    return t
