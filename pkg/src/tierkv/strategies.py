"""Placement strategies the engine can run: the utility planner and the baselines."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Union

from .errors import ConfigError
from .model import FULL, RECOMPUTE, CacheEntry, CompressionChoice, Method, compressed_size, make_choice
from .policy import Decision, Planner
from .profiler import Profile, estimate_freq


@dataclass(frozen=True)
class AdaptCache:
    alpha: float = 1.0
    replan_every: int = 256

    name = "adaptcache"

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.replan_every < 0:
            raise ConfigError("replan_every must be >= 0")


@dataclass(frozen=True)
class FixedLru:
    method: Method
    rate: float

    name = "fixed-lru"

    @property
    def choice(self) -> CompressionChoice:
        return make_choice(self.method, self.rate)


@dataclass(frozen=True)
class NoCompressionLru:
    name = "nocomp-lru"


@dataclass(frozen=True)
class PrefillAlways:
    name = "prefill"


PolicyConfig = Union[AdaptCache, FixedLru, NoCompressionLru, PrefillAlways]


def policy_label(cfg: PolicyConfig) -> str:
    if isinstance(cfg, FixedLru):
        return f"fixed-lru:{cfg.choice.label}"
    return cfg.name


def validate_policy(cfg: PolicyConfig, profile: Profile) -> None:
    if isinstance(cfg, FixedLru):
        rates = {m.kind: m.available_rates for m in profile.methods()}
        if cfg.method not in rates or cfg.rate not in rates[cfg.method]:
            raise ConfigError(f"rate {cfg.rate} is not offered for {cfg.method.value}")


class AdaptCacheStrategy:
    """Admit each new KV cache through the planner; replan residents periodically."""

    def __init__(self, profile: Profile, alpha: float, replan_every: int = 256):
        self.profile = profile
        self.planner = Planner(profile.tiers, alpha, profile.curves, profile.device)
        self.replan_every = replan_every
        self._requests = 0

    def _freqs(self, engine, extra: CacheEntry | None, now: float) -> dict[str, float]:
        view = engine.snapshot()
        est = self.profile.freq
        out = {eid: estimate_freq(view.entries[eid], now, est) for eid in view.residency}
        if extra is not None:
            out[extra.id] = estimate_freq(extra, now, est)
        return out

    def _tick(self, engine, now: float) -> list[Decision]:
        self._requests += 1
        if not self.replan_every or self._requests % self.replan_every:
            return []
        view = engine.snapshot()
        if not view.residency:
            return []
        return self.planner.replan(view.residents(), self._freqs(engine, None, now))

    def on_miss(self, engine, entry: CacheEntry, now: float) -> list[Decision]:
        view = engine.snapshot()
        decisions = self.planner.admit(entry, view.residents(), self._freqs(engine, entry, now))
        if decisions:
            engine.apply(decisions)
        return self._tick(engine, now)

    def on_hit(self, engine, entry: CacheEntry, now: float) -> list[Decision]:
        return self._tick(engine, now)

    def forget(self, entry_id: str) -> None:
        self.planner.forget(entry_id)


class LruStrategy:
    """Fixed (method, rate) for every entry, exclusive LRU across tiers.

    New and re-hit entries go to the fastest tier that can hold them; the
    least recently used residents of a full tier are demoted one tier down,
    and fall out of the last tier.
    """

    def __init__(self, profile: Profile, choice: CompressionChoice):
        self.profile = profile
        self.choice = choice
        self._recency: OrderedDict[str, None] = OrderedDict()

    def _place(self, engine, entry: CacheEntry) -> list[Decision]:
        view = engine.snapshot()
        tiers = engine.tiers
        where = {eid: o.tier for eid, o in view.residency.items()}
        size = {eid: o.stored_size for eid, o in view.residency.items()}
        used = list(view.used)
        need = compressed_size(entry, self.choice)
        target = next((k for k, t in enumerate(tiers) if t.capacity >= need), None)
        if target is None:
            return []
        if entry.id in where:
            if where[entry.id] <= target:
                return []
            used[where.pop(entry.id)] -= size.pop(entry.id)
        moved: dict[str, int | None] = {entry.id: target}
        where[entry.id] = target
        size[entry.id] = need
        used[target] += need
        order = [eid for eid in self._recency if eid != entry.id]
        for k in range(target, len(tiers)):
            victims = [eid for eid in order if where.get(eid) == k]
            while used[k] > tiers[k].capacity:
                victim = victims.pop(0)
                used[k] -= size[victim]
                dest = k + 1 if k + 1 < len(tiers) and size[victim] <= tiers[k + 1].capacity else None
                where[victim] = dest
                moved[victim] = dest
                if dest is not None:
                    used[dest] += size[victim]
                else:
                    del where[victim], size[victim]
                    self._recency.pop(victim, None)
        return [Decision(eid, t, self.choice if t is not None else RECOMPUTE) for eid, t in sorted(moved.items())]

    def _touch(self, eid: str) -> None:
        self._recency.pop(eid, None)
        self._recency[eid] = None

    def on_miss(self, engine, entry: CacheEntry, now: float) -> list[Decision]:
        decisions = self._place(engine, entry)
        if any(d.entry_id == entry.id and d.tier is not None for d in decisions):
            self._touch(entry.id)
        return decisions

    def on_hit(self, engine, entry: CacheEntry, now: float) -> list[Decision]:
        self._touch(entry.id)
        return self._place(engine, entry)

    def forget(self, entry_id: str) -> None:
        self._recency.pop(entry_id, None)


class PrefillStrategy:
    def on_miss(self, engine, entry, now):
        return []

    def on_hit(self, engine, entry, now):
        return []

    def forget(self, entry_id):
        pass


def make_strategy(cfg: PolicyConfig, profile: Profile):
    validate_policy(cfg, profile)
    if isinstance(cfg, AdaptCache):
        return AdaptCacheStrategy(profile, cfg.alpha, cfg.replan_every)
    if isinstance(cfg, FixedLru):
        return LruStrategy(profile, cfg.choice)
    if isinstance(cfg, NoCompressionLru):
        return LruStrategy(profile, FULL)
    if isinstance(cfg, PrefillAlways):
        return PrefillStrategy()
    raise ConfigError(f"unknown policy {cfg!r}")
