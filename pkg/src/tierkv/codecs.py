"""Byte-level lossy codecs for KV payloads.

Two families, each with an exact size formula the policy can rely on:

* group quantization: asymmetric min/max uniform quantization over flat groups
  of ``group_size`` elements, codes packed little-endian into bytes;
* token dropping: keep the first ``sink`` and last ``recent`` token blocks.

The ``quantize``/``drop_tokens`` functions return the codec body only; the
``pack_*``/``unpack_*`` helpers add and parse the self-describing stream
header used for spill files.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, InputError

QUANT_MAGIC = b"AKVC"
DROP_MAGIC = b"AKVD"
STREAM_VERSION = 1
METHOD_QUANTIZE = 1

# magic, version u8, method u8, bits u8, group_size u32, element_count u64
_QUANT_HEADER = struct.Struct("<4sBBBIQ")
# magic, version u8, sink u32, recent u32, token_count u64, stride u32
_DROP_HEADER = struct.Struct("<4sBIIQI")
_GROUP_PARAMS = np.dtype([("scale", "<f4"), ("zero", "<f4")])


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 2
    group_size: int = 64

    def __post_init__(self):
        if self.bits not in (2, 4, 8):
            raise ConfigError("bits must be 2, 4 or 8")
        if self.group_size < 1:
            raise ConfigError("group_size must be >= 1")
        if (self.group_size * self.bits) % 8:
            raise ConfigError("group_size * bits must be a whole number of bytes")


@dataclass(frozen=True)
class DropSpec:
    sink_tokens: int = 4
    recent_tokens: int = 16

    def __post_init__(self):
        if self.sink_tokens < 0 or self.recent_tokens < 0:
            raise ConfigError("sink and recent token counts must be >= 0")
        if self.sink_tokens + self.recent_tokens < 1:
            raise ConfigError("at least one token must be kept")


@dataclass(frozen=True)
class KvLayout:
    token_count: int
    stride: int
    element_width: int = 4

    def __post_init__(self):
        if self.token_count < 0 or self.stride < 1:
            raise ConfigError("token_count must be >= 0 and stride >= 1")
        if self.stride % self.element_width:
            raise ConfigError("stride must be a multiple of the element width")

    @property
    def nbytes(self) -> int:
        return self.token_count * self.stride


# -- size formulas -------------------------------------------------------------

def num_groups(n: int, spec: QuantSpec) -> int:
    return -(-n // spec.group_size)


def quantized_size(n: int, spec: QuantSpec) -> int:
    """Body bytes for ``n`` elements: packed codes plus 8 bytes per group."""
    return -(-n * spec.bits // 8) + 8 * num_groups(n, spec)


def quantized_rate(n: int, spec: QuantSpec, element_width: int = 4) -> float:
    return quantized_size(n, spec) / (n * element_width)


def kept_tokens(token_count: int, spec: DropSpec) -> list[int]:
    sink = range(min(spec.sink_tokens, token_count))
    recent = range(max(0, token_count - spec.recent_tokens), token_count)
    return sorted(set(sink) | set(recent))


def dropped_size(layout: KvLayout, spec: DropSpec) -> int:
    return len(kept_tokens(layout.token_count, spec)) * layout.stride


def drop_rate(token_count: int, spec: DropSpec) -> float:
    if token_count == 0:
        return 1.0
    return min(1.0, (spec.sink_tokens + spec.recent_tokens) / token_count)


# -- bit packing ---------------------------------------------------------------

def _pack(codes: np.ndarray, bits: int) -> np.ndarray:
    per_byte = 8 // bits
    pad = (-len(codes)) % per_byte
    if pad:
        codes = np.concatenate([codes, np.zeros(pad, dtype=np.uint8)])
    lanes = codes.reshape(-1, per_byte).astype(np.uint8)
    out = np.zeros(len(lanes), dtype=np.uint8)
    for i in range(per_byte):
        out |= lanes[:, i] << np.uint8(i * bits)
    return out


def _unpack(packed: np.ndarray, bits: int, count: int) -> np.ndarray:
    per_byte = 8 // bits
    mask = np.uint8((1 << bits) - 1)
    lanes = np.empty((len(packed), per_byte), dtype=np.uint8)
    for i in range(per_byte):
        lanes[:, i] = (packed >> np.uint8(i * bits)) & mask
    return lanes.reshape(-1)[:count]


# -- quantization ----------------------------------------------------------------

def _group_params(groups: np.ndarray, levels: int) -> tuple[np.ndarray, np.ndarray]:
    lo = groups.min(axis=1)
    hi = groups.max(axis=1)
    step = ((hi.astype(np.float64) - lo) / levels).astype(np.float32)
    return step, lo.astype(np.float32)


def _codes(groups: np.ndarray, step: np.ndarray, zero: np.ndarray, levels: int) -> np.ndarray:
    safe = np.where(step > 0, step, 1.0).astype(np.float64)
    q = np.rint((groups.astype(np.float64) - zero[:, None]) / safe[:, None])
    q = np.where(step[:, None] > 0, q, 0.0)
    return np.clip(q, 0, levels).astype(np.uint8)


def _encode_groups(groups: np.ndarray, spec: QuantSpec) -> bytes:
    levels = (1 << spec.bits) - 1
    step, zero = _group_params(groups, levels)
    codes = _codes(groups, step, zero, levels)
    packed = _pack(codes.reshape(-1), spec.bits).reshape(len(groups), -1)
    params = np.empty(len(groups), dtype=_GROUP_PARAMS)
    params["scale"], params["zero"] = step, zero
    rows = np.concatenate([params.view(np.uint8).reshape(len(groups), 8), packed], axis=1)
    return rows.tobytes()


def quantize(payload: np.ndarray, spec: QuantSpec) -> bytes:
    """Quantize float elements group by group; returns ``quantized_size`` bytes.

    Each group is stored as ``[scale f32][zero f32][codes]`` with
    ``code = round((x - min) / step)`` and ``step = (max - min) / (2**bits - 1)``.
    The last group may be partial.
    """
    x = np.ascontiguousarray(payload, dtype=np.float32).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise InputError("payload contains non-finite values")
    n = len(x)
    g = spec.group_size
    full = n // g
    out = b""
    if full:
        out += _encode_groups(x[: full * g].reshape(full, g), spec)
    if n % g:
        out += _encode_groups(x[full * g:].reshape(1, -1), spec)
    return out


def dequantize(data: bytes, spec: QuantSpec, n: int) -> np.ndarray:
    """Reconstruct ``n`` float32 elements as ``zero + code * step``."""
    buf = np.frombuffer(data, dtype=np.uint8)
    if len(buf) != quantized_size(n, spec):
        raise FormatError(f"expected {quantized_size(n, spec)} bytes for {n} elements, got {len(buf)}")
    g = spec.group_size
    row = 8 + g * spec.bits // 8
    full = n // g
    parts = []
    if full:
        rows = buf[: full * row].reshape(full, row)
        parts.append(_decode_rows(rows, spec, g))
    rest = n - full * g
    if rest:
        tail = buf[full * row:].reshape(1, -1)
        parts.append(_decode_rows(tail, spec, rest))
    if not parts:
        return np.zeros(0, dtype=np.float32)
    return np.concatenate(parts)


def _decode_rows(rows: np.ndarray, spec: QuantSpec, count: int) -> np.ndarray:
    params = np.ascontiguousarray(rows[:, :8]).view(_GROUP_PARAMS).reshape(-1)
    packed = np.ascontiguousarray(rows[:, 8:])
    per_row = packed.shape[1] * (8 // spec.bits)
    codes = _unpack(packed.reshape(-1), spec.bits, packed.size * (8 // spec.bits))
    codes = codes.reshape(len(rows), per_row)[:, :count]
    step = params["scale"].astype(np.float64)
    zero = params["zero"].astype(np.float64)
    return (zero[:, None] + codes * step[:, None]).astype(np.float32).reshape(-1)


def pack_quantized(payload: np.ndarray, spec: QuantSpec) -> bytes:
    n = int(np.asarray(payload).size)
    header = _QUANT_HEADER.pack(QUANT_MAGIC, STREAM_VERSION, METHOD_QUANTIZE, spec.bits, spec.group_size, n)
    return header + quantize(payload, spec)


def unpack_quantized(stream: bytes) -> tuple[np.ndarray, QuantSpec]:
    if len(stream) < _QUANT_HEADER.size:
        raise FormatError("truncated header")
    magic, version, method, bits, group, n = _QUANT_HEADER.unpack_from(stream)
    if magic != QUANT_MAGIC or version != STREAM_VERSION or method != METHOD_QUANTIZE:
        raise FormatError("not a quantized KV stream")
    try:
        spec = QuantSpec(bits, group)
    except ConfigError as exc:
        raise FormatError(str(exc)) from exc
    return dequantize(stream[_QUANT_HEADER.size:], spec, n), spec


# -- token dropping ----------------------------------------------------------------

def _check_layout(payload: bytes | np.ndarray, layout: KvLayout) -> np.ndarray:
    buf = np.frombuffer(bytes(payload), dtype=np.uint8) if not isinstance(payload, np.ndarray) \
        else np.ascontiguousarray(payload).view(np.uint8).reshape(-1)
    if len(buf) != layout.nbytes:
        raise InputError(f"payload is {len(buf)} bytes, layout expects {layout.nbytes}")
    return buf


def drop_tokens(payload: bytes | np.ndarray, layout: KvLayout, spec: DropSpec) -> tuple[bytes, list[int]]:
    """Keep the sink and recent token blocks; returns (kept bytes, kept indices)."""
    buf = _check_layout(payload, layout)
    kept = kept_tokens(layout.token_count, spec)
    blocks = buf.reshape(layout.token_count, layout.stride)[kept] if layout.token_count else buf[:0]
    return blocks.tobytes(), kept


def restore_tokens(body: bytes, layout: KvLayout, spec: DropSpec) -> tuple[bytes, list[int]]:
    """Re-embed kept blocks at their original indices; dropped tokens become zero bytes."""
    kept = kept_tokens(layout.token_count, spec)
    if len(body) != len(kept) * layout.stride:
        raise FormatError(f"expected {len(kept) * layout.stride} bytes of kept tokens, got {len(body)}")
    out = np.zeros((layout.token_count, layout.stride), dtype=np.uint8)
    if kept:
        out[kept] = np.frombuffer(body, dtype=np.uint8).reshape(len(kept), layout.stride)
    return out.tobytes(), kept


def pack_dropped(payload: bytes | np.ndarray, layout: KvLayout, spec: DropSpec) -> bytes:
    body, _ = drop_tokens(payload, layout, spec)
    header = _DROP_HEADER.pack(DROP_MAGIC, STREAM_VERSION, spec.sink_tokens, spec.recent_tokens,
                               layout.token_count, layout.stride)
    return header + body


def unpack_dropped(stream: bytes, element_width: int = 4) -> tuple[bytes, KvLayout, DropSpec]:
    if len(stream) < _DROP_HEADER.size:
        raise FormatError("truncated header")
    magic, version, sink, recent, t, stride = _DROP_HEADER.unpack_from(stream)
    if magic != DROP_MAGIC or version != STREAM_VERSION:
        raise FormatError("not a token-dropped KV stream")
    try:
        layout, spec = KvLayout(t, stride, element_width), DropSpec(sink, recent)
    except ConfigError as exc:
        raise FormatError(str(exc)) from exc
    full, _ = restore_tokens(stream[_DROP_HEADER.size:], layout, spec)
    return full, layout, spec


def quant_error_bound(lo: float, hi: float, bits: int) -> float:
    return (hi - lo) / (2 * ((1 << bits) - 1))


def ulp(x: float) -> float:
    return float(np.spacing(np.float32(abs(x)))) if math.isfinite(x) else math.inf
