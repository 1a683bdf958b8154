"""The executor: per-tier residency, request serving and decision application.

State lives in an immutable :class:`EngineView` that is replaced wholesale on
every mutation, so :meth:`Engine.snapshot` is a plain reference read and a
reader sees either all of an ``apply`` or none of it.  Writers are serialized
by a lock.
"""

from __future__ import annotations

import hashlib
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Protocol, Sequence

import numpy as np

from . import codecs
from .errors import ConfigError, ConsistencyError, ContractError
from .model import (
    CacheEntry,
    CompressionChoice,
    Method,
    ModelShape,
    bytes_per_token,
    compressed_size,
)
from .policy import Decision
from .profiler import Profile, choice_quality


@dataclass(frozen=True)
class StoredObject:
    entry_id: str
    tier: int
    choice: CompressionChoice
    stored_size: int
    payload: bytes | None = None


@dataclass(frozen=True)
class Hit:
    tier: int
    choice: CompressionChoice


@dataclass(frozen=True)
class Miss:
    pass


@dataclass(frozen=True)
class RequestOutcome:
    context_id: str
    result: Hit | Miss
    delay: float
    quality: float

    @property
    def is_hit(self) -> bool:
        return isinstance(self.result, Hit)


@dataclass(frozen=True)
class EngineView:
    entries: Mapping[str, CacheEntry]
    residency: Mapping[str, StoredObject]
    used: tuple[int, ...]
    clock: float = float("-inf")

    def residents(self) -> dict[str, tuple[CacheEntry, int, CompressionChoice]]:
        return {eid: (self.entries[eid], o.tier, o.choice) for eid, o in self.residency.items()}

    def on_tier(self, tier: int) -> list[StoredObject]:
        return [o for o in self.residency.values() if o.tier == tier]


class Strategy(Protocol):
    def on_miss(self, engine: Engine, entry: CacheEntry, now: float) -> Sequence[Decision]: ...

    def on_hit(self, engine: Engine, entry: CacheEntry, now: float) -> Sequence[Decision]: ...

    def forget(self, entry_id: str) -> None: ...


class Engine:
    """Tiered KV store driven by a placement strategy.

    ``codec_mode`` keeps real compressed payloads (generated from a seeded
    pristine payload per entry).  ``spill_dir`` mirrors objects on the last
    tier as files named ``<entry_id>.<method>.<rate_milli>``.
    """

    def __init__(self, profile: Profile, shape: ModelShape, strategy: Strategy | None = None,
                 codec_mode: bool = False, spill_dir: str | os.PathLike | None = None):
        self.profile = profile
        self.shape = shape
        self.strategy = strategy
        self.codec_mode = codec_mode
        if codec_mode and shape.bytes_per_element == 1:
            raise ConfigError("codec mode needs 2- or 4-byte elements")
        self.spill_dir = Path(spill_dir) if spill_dir is not None else None
        if self.spill_dir is not None:
            self.spill_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._view = EngineView(MappingProxyType({}), MappingProxyType({}),
                                tuple(0 for _ in profile.tiers))

    @property
    def tiers(self):
        return self.profile.tiers

    def snapshot(self) -> EngineView:
        return self._view

    # serving

    def on_request(self, context_id: str, token_count: int, class_tag: str, now: float) -> RequestOutcome:
        """Serve one request, record it in the entry's history, then let the strategy react."""
        curve = self.profile.curve(class_tag)
        with self._lock:
            view = self._view
            if now < view.clock:
                raise ContractError("request times must be non-decreasing")
            entry = view.entries.get(context_id)
            entries = dict(view.entries)
            residency = view.residency
            if entry is not None and (entry.token_count != token_count or entry.class_tag != class_tag):
                # a different context reusing the id: start over
                if context_id in residency:
                    residency = dict(residency)
                    self._drop_spill(residency.pop(context_id))
                if self.strategy is not None:
                    self.strategy.forget(context_id)
                entry = None
            if entry is None:
                entry = CacheEntry.create(context_id, token_count, class_tag, self.shape, now)
            obj = residency.get(context_id)
            if obj is not None:
                tier = self.tiers[obj.tier]
                delay = obj.stored_size / tier.read_bandwidth + tier.decompress_cost(obj.choice, entry.full_size)
                outcome = RequestOutcome(context_id, Hit(obj.tier, obj.choice), delay,
                                         choice_quality(curve, obj.choice))
            else:
                outcome = RequestOutcome(context_id, Miss(), self.profile.device.prefill_delay(token_count), 1.0)
            entry = entry.with_hit(now, self.profile.freq.half_life)
            entries[context_id] = entry
            used = self._recount(residency) if residency is not view.residency else view.used
            self._view = EngineView(MappingProxyType(entries), MappingProxyType(dict(residency)), used, now)
        if self.strategy is not None:
            if outcome.is_hit:
                decisions = self.strategy.on_hit(self, entry, now)
            else:
                decisions = self.strategy.on_miss(self, entry, now)
            if decisions:
                self.apply(decisions)
        return outcome

    # mutation

    def _recount(self, residency: Mapping[str, StoredObject]) -> tuple[int, ...]:
        used = [0] * len(self.tiers)
        for o in residency.values():
            used[o.tier] += o.stored_size
        return tuple(used)

    def apply(self, decisions: Sequence[Decision]) -> None:
        """Apply a batch of placement decisions atomically.

        Raises :class:`ConsistencyError` (leaving state untouched) if a
        decision names an unknown entry or the batch overfills a tier.
        """
        with self._lock:
            view = self._view
            residency = dict(view.residency)
            used = list(view.used)
            old_objs: list[StoredObject] = []
            new_objs: list[StoredObject] = []
            for d in decisions:
                entry = view.entries.get(d.entry_id)
                if entry is None:
                    raise ConsistencyError(f"decision for unknown entry {d.entry_id!r}")
                old = residency.pop(d.entry_id, None)
                if old is not None:
                    used[old.tier] -= old.stored_size
                    old_objs.append(old)
                if d.tier is None or d.choice.is_recompute:
                    continue
                if not 0 <= d.tier < len(self.tiers):
                    raise ConsistencyError(f"decision for {d.entry_id!r} names tier {d.tier}")
                if old is not None and old.tier == d.tier and old.choice == d.choice:
                    obj = old
                else:
                    obj = self._materialize(entry, d.tier, d.choice)
                residency[d.entry_id] = obj
                used[d.tier] += obj.stored_size
                new_objs.append(obj)
            for k, tier in enumerate(self.tiers):
                if used[k] > tier.capacity:
                    raise ConsistencyError(f"tier {tier.name} overfilled: {used[k]} > {tier.capacity}")
            self._view = EngineView(view.entries, MappingProxyType(residency), tuple(used), view.clock)
            if self.spill_dir is not None:
                for o in old_objs:
                    if residency.get(o.entry_id) is not o:
                        self._drop_spill(o)
                for o in new_objs:
                    self._write_spill(o)

    def _materialize(self, entry: CacheEntry, tier: int, choice: CompressionChoice) -> StoredObject:
        if not self.codec_mode:
            return StoredObject(entry.id, tier, choice, compressed_size(entry, choice))
        # always from the pristine payload, never from an already-lossy copy
        payload = encode_payload(entry, choice, self.shape)
        if len(payload) > compressed_size(entry, choice):
            raise ConsistencyError(f"{entry.id}: codec output exceeds the planned size")
        return StoredObject(entry.id, tier, choice, len(payload), payload)

    # spill files

    def spill_path(self, obj: StoredObject) -> Path | None:
        if self.spill_dir is None or obj.tier != len(self.tiers) - 1:
            return None
        method = obj.choice.method.value if obj.choice.method is not None else "full"
        return self.spill_dir / f"{obj.entry_id}.{method}.{round(obj.choice.rate * 1000)}"

    def _write_spill(self, obj: StoredObject) -> None:
        path = self.spill_path(obj)
        if path is not None and not path.exists():
            path.write_bytes(obj.payload if obj.payload is not None else b"")

    def _drop_spill(self, obj: StoredObject) -> None:
        path = self.spill_path(obj)
        if path is not None:
            path.unlink(missing_ok=True)


# -- real payloads -----------------------------------------------------------------

def pristine_payload(entry: CacheEntry, shape: ModelShape) -> np.ndarray:
    """Deterministic stand-in KV tensor for an entry (token-major, flat)."""
    seed = int.from_bytes(hashlib.sha256(entry.id.encode()).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    dtype = np.float16 if shape.bytes_per_element == 2 else np.float32
    per_token = bytes_per_token(shape) // shape.bytes_per_element
    return rng.standard_normal(entry.token_count * per_token).astype(dtype)


def codec_params(entry: CacheEntry, choice: CompressionChoice, shape: ModelShape):
    """Codec settings whose output fits in ``compressed_size(entry, choice)``."""
    budget = compressed_size(entry, choice)
    if choice.method is Method.QUANTIZE:
        n = entry.full_size // shape.bytes_per_element
        for bits in (8, 4, 2):
            spec = codecs.QuantSpec(bits)
            if codecs.quantized_size(n, spec) <= budget:
                return spec
        return codecs.QuantSpec(2)
    if choice.method is Method.TOKENDROP:
        stride = bytes_per_token(shape)
        keep = max(1, min(entry.token_count, budget // stride))
        sink = min(4, keep)
        return codecs.DropSpec(sink, keep - sink)
    return None


def encode_payload(entry: CacheEntry, choice: CompressionChoice, shape: ModelShape) -> bytes:
    if choice.is_recompute:
        raise ContractError("RECOMPUTE has no payload")
    raw = pristine_payload(entry, shape)
    spec = codec_params(entry, choice, shape)
    if spec is None:
        return raw.tobytes()
    if isinstance(spec, codecs.QuantSpec):
        return codecs.quantize(raw, spec)
    layout = codecs.KvLayout(entry.token_count, bytes_per_token(shape), shape.bytes_per_element)
    body, _ = codecs.drop_tokens(raw, layout, spec)
    return body


def predicted_payload_size(entry: CacheEntry, choice: CompressionChoice, shape: ModelShape) -> int:
    spec = codec_params(entry, choice, shape)
    if spec is None:
        return entry.full_size
    if isinstance(spec, codecs.QuantSpec):
        return codecs.quantized_size(entry.full_size // shape.bytes_per_element, spec)
    layout = codecs.KvLayout(entry.token_count, bytes_per_token(shape), shape.bytes_per_element)
    return codecs.dropped_size(layout, spec)

