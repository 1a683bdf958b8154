"""Estimator inputs: quality curves, device profiles and hit-frequency estimates.

Quality curves and device numbers are supplied as data (a JSON profile); the
optional microbenchmark only re-measures read bandwidth on the local machine.
"""

from __future__ import annotations

import json
import math
import os
import statistics
import tempfile
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ConfigError
from .model import (
    CacheEntry,
    CompressionChoice,
    CompressionMethod,
    DeviceTier,
    Method,
)

LN2 = math.log(2.0)
GB = 10**9
MIB = 1 << 20


@dataclass(frozen=True)
class QualityCurve:
    """Per-method quality-vs-rate knots for one class of contexts."""

    knots: Mapping[Method, tuple[tuple[float, float], ...]]

    def methods(self) -> list[Method]:
        return sorted(self.knots, key=lambda m: m.value)

    def merge(self, other: QualityCurve) -> QualityCurve:
        return QualityCurve({**self.knots, **other.knots})


@dataclass(frozen=True)
class FrequencyEstimator:
    half_life: float = 300.0
    prior_weight: float = 1.0

    def __post_init__(self):
        if not self.half_life > 0:
            raise ConfigError("half_life must be > 0")
        if self.prior_weight < 0:
            raise ConfigError("prior_weight must be >= 0")


@dataclass(frozen=True)
class DeviceProfile:
    tiers: tuple[DeviceTier, ...]
    prefill_seconds_per_token: float

    def __post_init__(self):
        if not self.tiers:
            raise ConfigError("a device profile needs at least one tier")
        if not self.prefill_seconds_per_token > 0:
            raise ConfigError("prefill_s_per_token must be > 0")
        ordered = tuple(sorted(self.tiers, key=lambda t: -t.read_bandwidth))
        object.__setattr__(self, "tiers", ordered)

    def prefill_delay(self, token_count: int) -> float:
        return self.prefill_seconds_per_token * token_count

    def with_capacities(self, capacities: Sequence[int]) -> DeviceProfile:
        tiers = tuple(
            DeviceTier(t.name, int(c), t.read_bandwidth, t.write_bandwidth, t.decompress_coeff)
            for t, c in zip(self.tiers, capacities)
        )
        return DeviceProfile(tiers, self.prefill_seconds_per_token)


@dataclass(frozen=True)
class Profile:
    """Everything the estimator hands to the optimizer, as read from one file."""

    device: DeviceProfile
    curves: Mapping[str, QualityCurve]
    freq: FrequencyEstimator = field(default_factory=FrequencyEstimator)

    @property
    def tiers(self) -> tuple[DeviceTier, ...]:
        return self.device.tiers

    def curve(self, class_tag: str) -> QualityCurve:
        try:
            return self.curves[class_tag]
        except KeyError:
            raise ConfigError(f"no quality curve for class {class_tag!r}") from None

    def methods(self) -> list[CompressionMethod]:
        """Available rates per method: the union of knot rates over all classes."""
        rates: dict[Method, set[float]] = defaultdict(set)
        for curve in self.curves.values():
            for method, knots in curve.knots.items():
                rates[method].update(r for r, _ in knots)
        return [CompressionMethod(m, tuple(rates[m])) for m in sorted(rates, key=lambda m: m.value)]

    def choices(self) -> list[CompressionChoice]:
        """FULL plus every (method, rate < 1) on offer, in a fixed order."""
        out = {CompressionChoice(None, 1.0)}
        for cm in self.methods():
            out.update(CompressionChoice(cm.kind, r) for r in cm.available_rates)
        return sorted(out, key=CompressionChoice.sort_key)

    def to_dict(self) -> dict:
        return {
            "tiers": [
                {
                    "name": t.name,
                    "capacity_bytes": t.capacity,
                    "read_bw_bytes_per_s": t.read_bandwidth,
                    "write_bw_bytes_per_s": t.write_bandwidth,
                    "decompress_s_per_byte": {m.value: c for m, c in sorted(
                        t.decompress_coeff.items(), key=lambda kv: kv[0].value)},
                }
                for t in self.tiers
            ],
            "prefill_s_per_token": self.device.prefill_seconds_per_token,
            "curves": {
                tag: {m.value: [list(k) for k in curve.knots[m]] for m in curve.methods()}
                for tag, curve in sorted(self.curves.items())
            },
            "freq": {"half_life_s": self.freq.half_life, "prior_weight": self.freq.prior_weight},
        }


# -- quality curves ----------------------------------------------------------

def _pool_adjacent_violators(values: Sequence[float]) -> list[float]:
    blocks: list[list[float]] = []  # [mean, count]
    for v in values:
        blocks.append([float(v), 1])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            m2, c2 = blocks.pop()
            m1, c1 = blocks[-1]
            blocks[-1] = [(m1 * c1 + m2 * c2) / (c1 + c2), c1 + c2]
    out: list[float] = []
    for mean, count in blocks:
        out.extend([mean] * count)
    return out


def fit_quality_curve(samples: Iterable[tuple[float, float]], method: Method | str) -> QualityCurve:
    """Fit a monotone quality-vs-rate curve from profiling samples.

    Repeated rates are averaged, then the per-rate means are projected onto
    the non-decreasing sequences (pool-adjacent-violators, each distinct rate
    weighted equally).  Quality at rate 1.0 is pinned to 1.0.
    """
    method = Method.parse(method)
    by_rate: dict[float, list[float]] = defaultdict(list)
    for rate, quality in samples:
        rate, quality = float(rate), float(quality)
        if not 0.0 < rate <= 1.0:
            raise ConfigError(f"sample rate {rate} outside (0, 1]")
        if not 0.0 <= quality <= 1.0:
            raise ConfigError(f"sample quality {quality} outside [0, 1]")
        by_rate[rate].append(quality)
    if not by_rate:
        raise ConfigError(f"no profiling samples for {method.value}")
    by_rate[1.0] = [1.0]
    rates = sorted(by_rate)
    means = [statistics.fmean(by_rate[r]) for r in rates]
    fitted = _pool_adjacent_violators(means)
    return QualityCurve({method: tuple(zip(rates, fitted))})


def quality_at(curve: QualityCurve, method: Method | str | None, rate: float) -> float:
    """Modeled quality of an entry compressed with ``method`` at ``rate``.

    Linear between knots; below the first knot the line runs to the origin.
    FULL and RECOMPUTE (no method) are lossless.
    """
    if method is None:
        return 1.0
    method = Method.parse(method)
    knots = curve.knots.get(method)
    if not knots:
        raise ConfigError(f"curve has no knots for method {method.value}")
    if rate >= 1.0:
        return 1.0
    r0, q0 = knots[0]
    if rate <= r0:
        return min(1.0, max(0.0, q0 * rate / r0))
    for (ra, qa), (rb, qb) in zip(knots, knots[1:]):
        if rate <= rb:
            return qa + (qb - qa) * (rate - ra) / (rb - ra)
    return knots[-1][1]


def choice_quality(curve: QualityCurve, choice: CompressionChoice) -> float:
    if choice.is_recompute or choice.is_full:
        return 1.0
    return quality_at(curve, choice.method, choice.rate)


# -- frequency ---------------------------------------------------------------

def estimate_freq(entry: CacheEntry, now: float, est: FrequencyEstimator) -> float:
    """Exponentially decayed hit count, expressed as hits per second."""
    h = est.half_life
    mass = est.prior_weight
    if entry.folded_mass:
        mass += entry.folded_mass * 2.0 ** (-(now - entry.folded_at) / h)
    for t in entry.hit_history:
        mass += 2.0 ** (-(now - t) / h)
    return mass * LN2 / h


# -- device profiles ---------------------------------------------------------

def _positive(obj: Mapping, key: str, where: str) -> float:
    try:
        value = float(obj[key])
    except KeyError:
        raise ConfigError(f"{where}: missing {key!r}") from None
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: {key!r} is not a number") from None
    if not value > 0 or math.isnan(value):
        raise ConfigError(f"{where}: {key!r} must be > 0")
    return value


def _tier_from_dict(d: Mapping) -> DeviceTier:
    name = str(d.get("name", "?"))
    where = f"tier {name}"
    capacity = _positive(d, "capacity_bytes", where)
    read_bw = _positive(d, "read_bw_bytes_per_s", where)
    write_bw = _positive(d, "write_bw_bytes_per_s", where) if "write_bw_bytes_per_s" in d else read_bw
    coeff = d.get("decompress_s_per_byte", {}) or {}
    return DeviceTier(name, int(capacity), read_bw, write_bw, coeff)


def profile_from_dict(cfg: Mapping) -> Profile:
    try:
        tiers = tuple(_tier_from_dict(t) for t in cfg["tiers"])
    except KeyError:
        raise ConfigError("profile has no 'tiers'") from None
    device = DeviceProfile(tiers, _positive(cfg, "prefill_s_per_token", "profile"))
    curves: dict[str, QualityCurve] = {}
    for tag, per_method in (cfg.get("curves") or {}).items():
        curve = QualityCurve({})
        for method, pairs in per_method.items():
            curve = curve.merge(fit_quality_curve([tuple(p) for p in pairs], method))
        curves[str(tag)] = curve
    f = cfg.get("freq") or {}
    freq = FrequencyEstimator(float(f.get("half_life_s", 300.0)), float(f.get("prior_weight", 1.0)))
    return Profile(device, curves, freq)


def _read_json(path: str | os.PathLike) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read profile {path}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return cfg


def load_profile(path: str | os.PathLike) -> Profile:
    return profile_from_dict(_read_json(path))


def save_profile(profile: Profile, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(profile.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def benchmark_read_bandwidth(path: str | os.PathLike | None = None, nbytes: int = 64 * MIB,
                             trials: int = 5) -> float:
    """Bytes per second over the median of ``trials`` timed reads.

    With ``path=None`` the read is an in-memory copy; otherwise a scratch file
    of ``nbytes`` is written under ``path`` and read back (the page cache is
    not dropped, so this is an upper bound for cold SSD reads).
    """
    if nbytes < 64 * MIB or trials < 5:
        raise ConfigError("microbenchmark needs >= 64 MiB transfers and >= 5 trials")
    times = []
    if path is None:
        src = bytearray(os.urandom(1 << 20)) * (nbytes >> 20)
        for _ in range(trials):
            t0 = time.perf_counter()
            bytes(src)
            times.append(time.perf_counter() - t0)
    else:
        with tempfile.NamedTemporaryFile(dir=path, delete=False) as fh:
            chunk = os.urandom(1 << 20)
            for _ in range(nbytes >> 20):
                fh.write(chunk)
            name = fh.name
        try:
            for _ in range(trials):
                t0 = time.perf_counter()
                with open(name, "rb", buffering=0) as fh:
                    while fh.read(8 * MIB):
                        pass
                times.append(time.perf_counter() - t0)
        finally:
            os.unlink(name)
    return (nbytes >> 20 << 20) / statistics.median(times)


def measure_device_profile(config: str | os.PathLike | Mapping, microbenchmark: bool = False) -> Profile:
    """Load a profile; in microbenchmark mode re-measure each tier's read bandwidth.

    A tier dict may carry ``bench_path`` (a directory) to time file reads
    there; tiers without one are timed as in-memory copies.
    """
    cfg = config if isinstance(config, Mapping) else _read_json(config)
    profile = profile_from_dict(cfg)
    if not microbenchmark:
        return profile
    measured = []
    for raw in cfg["tiers"]:
        t = _tier_from_dict(raw)
        bw = benchmark_read_bandwidth(raw.get("bench_path"))
        measured.append(DeviceTier(t.name, t.capacity, bw, t.write_bandwidth, t.decompress_coeff))
    return Profile(DeviceProfile(tuple(measured), profile.device.prefill_seconds_per_token),
                   profile.curves, profile.freq)
