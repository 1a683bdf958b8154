"""Shared builders for tests: small planner instances and a toy profile."""

from __future__ import annotations

import numpy as np

from tierkv.model import FULL, CacheEntry, DeviceTier, make_choice
from tierkv.profiler import DeviceProfile, FrequencyEstimator, Profile, fit_quality_curve

GB = 10**9
RATES = (0.1, 0.2, 0.25, 0.4, 0.5, 0.75)


def random_instance(rng: np.random.Generator, n_max: int = 6, n_choice: int = 4, n_tiers: int = 2):
    """A planner instance with <= n_max entries and n_choice stored choices per tier."""
    n = int(rng.integers(1, n_max + 1))
    rates = sorted(float(r) for r in rng.choice(RATES, size=n_choice - 1, replace=False))
    knots, q = [], rng.uniform(0.2, 0.9)
    for r in rates:
        knots.append((r, float(q)))
        q = min(1.0, q + rng.uniform(0, 0.2))
    curves = {"c": fit_quality_curve(knots, "quantize")}
    choices = [make_choice("quantize", r) for r in rates] + [FULL]
    entries = []
    for i in range(n):
        t = int(rng.integers(100, 2000))
        entries.append(CacheEntry(f"e{i}", t, t * 1000, "c"))
    total = sum(e.full_size for e in entries)
    tiers = []
    for k in range(n_tiers):
        bw = float(rng.uniform(5e9, 2e10)) / (10 ** k)
        cap = int(total * rng.uniform(0.05, 0.5) * (k + 1))
        tiers.append(DeviceTier(f"t{k}", cap, bw, decompress_coeff={"quantize": float(rng.uniform(0, 1e-10))}))
    dev = DeviceProfile(tuple(tiers), float(rng.uniform(0.2e-6, 3e-6)))
    alpha = float(rng.uniform(0, 0.005))
    freqs = {e.id: float(rng.exponential(1.0)) for e in entries}
    return entries, list(dev.tiers), alpha, curves, dev, freqs, choices


def toy_profile(dram=4 * GB, ssd=16 * GB, prefill=1e-6, half_life=300.0) -> Profile:
    """Two tiers and one class ("c") whose curve offers quantize 0.25/0.5 and tokendrop 0.1."""
    tiers = (DeviceTier("dram", dram, 25 * GB), DeviceTier("ssd", ssd, 1 * GB))
    curve = fit_quality_curve([(0.25, 0.8), (0.5, 0.95)], "quantize").merge(
        fit_quality_curve([(0.1, 0.6)], "tokendrop"))
    return Profile(DeviceProfile(tiers, prefill), {"c": curve}, FrequencyEstimator(half_life, 1.0))
