"""Core domain types and KV-cache size arithmetic."""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping

from .errors import ConfigError, ContractError

#: Most recent hit timestamps kept verbatim per entry; older hits are folded
#: into a single decayed scalar.
HISTORY_CAP = 64


class Method(str, enum.Enum):
    QUANTIZE = "quantize"
    TOKENDROP = "tokendrop"

    @classmethod
    def parse(cls, value: str | Method) -> Method:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown compression method {value!r}") from None


@dataclass(frozen=True)
class ModelShape:
    num_layers: int
    num_kv_heads: int
    head_dim: int
    bytes_per_element: int = 2

    def __post_init__(self):
        for name in ("num_layers", "num_kv_heads", "head_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.bytes_per_element not in (1, 2, 4):
            raise ConfigError("bytes_per_element must be 1, 2 or 4")


MODEL_PRESETS: dict[str, ModelShape] = {
    "llama-3.1-8b": ModelShape(32, 8, 128, 2),
    "llama-3.1-70b": ModelShape(80, 8, 128, 2),
    # 1/16 of the 8B per-token footprint; pairs with the desk-scale profile.
    "desk": ModelShape(8, 4, 64, 2),
}


def bytes_per_token(shape: ModelShape) -> int:
    """Keys plus values across all layers and KV heads."""
    return 2 * shape.num_layers * shape.num_kv_heads * shape.head_dim * shape.bytes_per_element


@dataclass(frozen=True)
class CompressionMethod:
    kind: Method
    available_rates: tuple[float, ...]

    def __post_init__(self):
        rates = tuple(sorted({float(r) for r in self.available_rates} | {1.0}))
        if rates[0] <= 0 or rates[-1] > 1.0:
            raise ConfigError(f"rates for {self.kind.value} must lie in (0, 1]")
        object.__setattr__(self, "available_rates", rates)


@dataclass(frozen=True, order=True)
class CompressionChoice:
    """A (method, rate) pair.

    ``rate`` is compressed bytes over full bytes.  Rate 1.0 is canonicalised to
    :data:`FULL` (no method, nothing to decompress) and rate 0.0 with no method
    is the :data:`RECOMPUTE` sentinel: nothing stored, prefill on use.
    """

    method: Method | None
    rate: float

    def __post_init__(self):
        rate = float(self.rate)
        if self.method is None:
            if rate not in (0.0, 1.0):
                raise ContractError("a choice without a method must be FULL or RECOMPUTE")
        elif not 0.0 < rate <= 1.0:
            raise ContractError(f"rate {rate} outside (0, 1]")
        if rate == 1.0:
            object.__setattr__(self, "method", None)
        object.__setattr__(self, "rate", rate)

    @property
    def is_recompute(self) -> bool:
        return self.rate == 0.0

    @property
    def is_full(self) -> bool:
        return self.rate == 1.0

    @property
    def label(self) -> str:
        if self.is_recompute:
            return "recompute"
        if self.is_full:
            return "full"
        return f"{self.method.value}@{self.rate:g}"

    def __str__(self):
        return self.label

    def sort_key(self) -> tuple:
        return (self.rate, self.method.value if self.method else "")


FULL = CompressionChoice(None, 1.0)
RECOMPUTE = CompressionChoice(None, 0.0)


def make_choice(method: Method | str | None, rate: float) -> CompressionChoice:
    if method is None:
        return CompressionChoice(None, rate)
    return CompressionChoice(Method.parse(method), rate)


@dataclass(frozen=True)
class CacheEntry:
    """One reusable context's KV cache record.

    Hit history keeps at most :data:`HISTORY_CAP` timestamps; older hits live
    on as ``folded_mass``, their decayed weight measured at ``folded_at``.
    """

    id: str
    token_count: int
    full_size: int
    class_tag: str
    hit_history: tuple[float, ...] = ()
    created_at: float = 0.0
    folded_mass: float = 0.0
    folded_at: float = 0.0

    def __post_init__(self):
        if self.token_count < 1:
            raise ContractError("token_count must be >= 1")
        if self.full_size < 1:
            raise ContractError("full_size must be >= 1")
        h = self.hit_history
        if any(b <= a for a, b in zip(h, h[1:])):
            raise ContractError("hit_history must be strictly increasing")

    @classmethod
    def create(cls, id: str, token_count: int, class_tag: str, shape: ModelShape,
               created_at: float = 0.0) -> CacheEntry:
        return cls(str(id), int(token_count), int(token_count) * bytes_per_token(shape),
                   class_tag, (), float(created_at))

    def with_hit(self, t: float, half_life: float = 300.0) -> CacheEntry:
        """Return a copy with ``t`` appended to the hit history.

        A hit at the same instant as the last one is nudged forward by one ulp
        so the history stays strictly increasing.
        """
        t = float(t)
        hist = self.hit_history
        if hist and t <= hist[-1]:
            if hist[-1] - t > 1e-9 * max(1.0, abs(t)):
                raise ContractError("hits must be recorded in time order")
            t = math.nextafter(hist[-1], math.inf)
        hist = hist + (t,)
        mass, at = self.folded_mass, self.folded_at
        if len(hist) > HISTORY_CAP:
            old, hist = hist[: len(hist) - HISTORY_CAP], hist[len(hist) - HISTORY_CAP:]
            ref = old[-1]
            mass = mass * 2.0 ** (-(ref - at) / half_life) if mass else 0.0
            mass += sum(2.0 ** (-(ref - o) / half_life) for o in old)
            at = ref
        return replace(self, hit_history=hist, folded_mass=mass, folded_at=at)

    @property
    def hit_count(self) -> int:
        return len(self.hit_history)


@dataclass(frozen=True)
class DeviceTier:
    name: str
    capacity: int
    read_bandwidth: float
    write_bandwidth: float = math.inf
    decompress_coeff: Mapping[Method, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.capacity < 0:
            raise ConfigError(f"tier {self.name}: capacity must be >= 0")
        if not self.read_bandwidth > 0 or not self.write_bandwidth > 0:
            raise ConfigError(f"tier {self.name}: bandwidths must be > 0")
        coeff = {Method.parse(k): float(v) for k, v in dict(self.decompress_coeff).items()}
        if any(v < 0 or not math.isfinite(v) for v in coeff.values()):
            raise ConfigError(f"tier {self.name}: decompression cost must be finite and >= 0")
        object.__setattr__(self, "capacity", int(self.capacity))
        object.__setattr__(self, "decompress_coeff", coeff)

    def decompress_cost(self, choice: CompressionChoice, full_size: int) -> float:
        if choice.method is None:
            return 0.0
        return self.decompress_coeff.get(choice.method, 0.0) * full_size

    def load_delay(self, choice: CompressionChoice, full_size: int) -> float:
        """Seconds to read and decompress ``choice`` of an entry from this tier."""
        size = compressed_size_bytes(full_size, choice)
        return size / self.read_bandwidth + self.decompress_cost(choice, full_size)


def compressed_size_bytes(full_size: int, choice: CompressionChoice) -> int:
    if choice.is_recompute:
        raise ContractError("RECOMPUTE has no stored size")
    if choice.is_full:
        return int(full_size)
    return _ceil_scaled(int(full_size), choice.rate)


@functools.lru_cache(maxsize=65536)
def _ceil_scaled(n: int, rate: float) -> int:
    # Decimal reading of the rate, so 0.1 * 1000 is 100 and not 101.
    return math.ceil(Fraction(repr(rate)) * n)


def compressed_size(entry: CacheEntry, choice: CompressionChoice) -> int:
    return compressed_size_bytes(entry.full_size, choice)


def check_tier_order(tiers) -> None:
    for a, b in zip(tiers, tiers[1:]):
        if a.read_bandwidth < b.read_bandwidth:
            raise ConfigError("tiers must be ordered fastest-first")
