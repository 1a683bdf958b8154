import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tierkv.defaults import desk_profile_dict, full_profile_dict
from tierkv.errors import ConfigError
from tierkv.model import CacheEntry, Method
from tierkv.profiler import (
    FrequencyEstimator,
    QualityCurve,
    estimate_freq,
    fit_quality_curve,
    load_profile,
    measure_device_profile,
    profile_from_dict,
    quality_at,
    save_profile,
)

LN2 = math.log(2)
samples_st = st.lists(st.tuples(st.floats(0.01, 1.0), st.floats(0.0, 1.0)), min_size=1, max_size=30)


def knots(curve, method="quantize"):
    return list(curve.knots[Method.parse(method)])


class TestFitQualityCurve:
    def test_already_monotone(self):
        c = fit_quality_curve([(0.25, 0.9), (0.5, 0.95), (1.0, 1.0)], "quantize")
        assert knots(c) == [(0.25, 0.9), (0.5, 0.95), (1.0, 1.0)]

    def test_pool_adjacent_violators(self):
        c = fit_quality_curve([(0.25, 0.9), (0.5, 0.85), (1.0, 1.0)], "quantize")
        got = knots(c)
        assert [r for r, _ in got] == [0.25, 0.5, 1.0]
        assert got[0][1] == pytest.approx(0.875) and got[1][1] == pytest.approx(0.875)
        assert got[2] == (1.0, 1.0)

    def test_repeats_averaged(self):
        c = fit_quality_curve([(0.5, 0.6), (0.5, 0.7), (0.5, 0.8)], "tokendrop")
        assert knots(c, "tokendrop")[0] == (0.5, pytest.approx(0.7))

    def test_full_knot_appended_and_pinned(self):
        c = fit_quality_curve([(0.25, 0.5), (1.0, 0.4)], "quantize")
        assert knots(c)[-1] == (1.0, 1.0)

    def test_empty(self):
        with pytest.raises(ConfigError):
            fit_quality_curve([], "quantize")

    @pytest.mark.parametrize("bad", [(0.0, 0.5), (1.5, 0.5), (0.5, -0.1), (0.5, 1.1)])
    def test_out_of_range(self, bad):
        with pytest.raises(ConfigError):
            fit_quality_curve([bad], "quantize")

    @given(samples_st, st.randoms())
    def test_permutation_invariant(self, samples, rnd):
        shuffled = list(samples)
        rnd.shuffle(shuffled)
        a, b = knots(fit_quality_curve(samples, "quantize")), knots(fit_quality_curve(shuffled, "quantize"))
        assert [r for r, _ in a] == [r for r, _ in b]
        assert np.allclose([q for _, q in a], [q for _, q in b], rtol=0, atol=1e-12)

    @given(samples_st)
    def test_fitted_knots_monotone(self, samples):
        ks = knots(fit_quality_curve(samples, "quantize"))
        assert all(a[1] <= b[1] + 1e-12 for a, b in zip(ks, ks[1:]))
        assert ks[-1] == (1.0, 1.0)


class TestQualityAt:
    curve = fit_quality_curve([(0.25, 0.9)], "quantize")

    def test_interpolation(self):
        assert quality_at(self.curve, "quantize", 0.625) == pytest.approx(0.95)

    def test_below_first_knot_through_origin(self):
        assert quality_at(self.curve, "quantize", 0.125) == pytest.approx(0.45)

    def test_rate_one(self):
        assert quality_at(self.curve, "quantize", 1.0) == 1.0

    def test_missing_method(self):
        with pytest.raises(ConfigError):
            quality_at(self.curve, "tokendrop", 0.5)

    def test_no_method_is_lossless(self):
        assert quality_at(self.curve, None, 0.3) == 1.0

    @given(samples_st, st.floats(1e-4, 1.0), st.floats(1e-4, 1.0))
    def test_monotone_and_bounded(self, samples, r1, r2):
        c = fit_quality_curve(samples, "tokendrop")
        lo, hi = sorted((r1, r2))
        a, b = quality_at(c, "tokendrop", lo), quality_at(c, "tokendrop", hi)
        assert 0.0 <= a <= b + 1e-12 <= 1.0 + 1e-12
        assert quality_at(c, "tokendrop", 1.0) == 1.0


class TestEstimateFreq:
    def test_prior_only(self):
        e = CacheEntry("a", 1, 1, "c")
        assert estimate_freq(e, 0.0, FrequencyEstimator(100.0, 1.0)) == pytest.approx(0.00693, abs=5e-6)

    def test_one_hit_one_half_life_ago(self):
        e = CacheEntry("a", 1, 1, "c", (0.0,))
        assert estimate_freq(e, 100.0, FrequencyEstimator(100.0, 0.0)) == pytest.approx(0.003466, abs=5e-7)

    def test_empty(self):
        assert estimate_freq(CacheEntry("a", 1, 1, "c"), 5.0, FrequencyEstimator(100.0, 0.0)) == 0.0

    @given(st.lists(st.floats(0, 1000), max_size=20, unique=True), st.floats(0, 1000), st.floats(0, 500))
    def test_decay_between_hits(self, hits, t0, dt):
        hits = tuple(sorted(hits))
        e = CacheEntry("a", 1, 1, "c", hits)
        est = FrequencyEstimator(50.0, 1.0)
        now = max((hits[-1] if hits else 0.0), t0)
        f0, f1 = estimate_freq(e, now, est), estimate_freq(e, now + dt, est)
        assert f1 <= f0
        # with no prior the decay law is exact
        bare = FrequencyEstimator(50.0, 0.0)
        assert estimate_freq(e, now + dt, bare) == pytest.approx(
            estimate_freq(e, now, bare) * 2 ** (-dt / 50.0), rel=1e-9, abs=1e-300)

    @given(st.lists(st.floats(0, 1000), max_size=20, unique=True), st.floats(0, 100))
    def test_jump_at_hit(self, hits, gap):
        hits = tuple(sorted(hits))
        now = (hits[-1] if hits else 0.0) + gap + 1e-3
        e = CacheEntry("a", 1, 1, "c", hits)
        est = FrequencyEstimator(30.0, 0.5)
        jump = estimate_freq(e.with_hit(now, 30.0), now, est) - estimate_freq(e, now, est)
        assert jump == pytest.approx(LN2 / 30.0, rel=1e-9)

    def test_folding_preserves_estimate(self):
        est = FrequencyEstimator(40.0, 1.0)
        e = CacheEntry("a", 1, 1, "c")
        times = np.cumsum(np.random.default_rng(0).exponential(3.0, 150))
        for t in times:
            e = e.with_hit(float(t), est.half_life)
        now = float(times[-1]) + 7.0
        exact = (1.0 + sum(2 ** (-(now - t) / 40.0) for t in times)) * LN2 / 40.0
        assert estimate_freq(e, now, est) == pytest.approx(exact, rel=1e-12)

    def test_periodic_train_converges(self):
        h = 100.0
        est = FrequencyEstimator(h, 1.0)
        e = CacheEntry("a", 1, 1, "c")
        seen = []
        for i in range(200):
            e = e.with_hit(i * h / 4, h)
            seen.append(estimate_freq(e, i * h / 4, est))
        limit = (1.0 + 1 / (1 - 2 ** -0.25)) * LN2 / h  # prior plus geometric sum of hits
        tail = seen[-50:]
        assert max(tail) / min(tail) - 1 < 0.05
        assert tail[-1] == pytest.approx(limit, rel=0.05)


class TestProfiles:
    def test_full_scale_values(self, tmp_path):
        p = tmp_path / "p.json"
        p.write_text(json.dumps(full_profile_dict()))
        prof = measure_device_profile(p)
        assert [t.capacity for t in prof.tiers] == [100 * 10**9, 400 * 10**9]
        assert prof.tiers[1].read_bandwidth == 1e9

    def test_desk_is_full_scaled(self):
        d, p = desk_profile_dict(), full_profile_dict()
        for a, b in zip(d["tiers"], p["tiers"]):
            assert b["capacity_bytes"] == 100 * a["capacity_bytes"]
            assert a["read_bw_bytes_per_s"] == b["read_bw_bytes_per_s"]

    def test_single_tier(self):
        cfg = desk_profile_dict()
        cfg["tiers"] = cfg["tiers"][:1]
        assert len(profile_from_dict(cfg).tiers) == 1

    def test_slow_first_reordered(self):
        cfg = desk_profile_dict()
        cfg["tiers"] = cfg["tiers"][::-1]
        assert [t.name for t in profile_from_dict(cfg).tiers] == ["dram", "ssd"]

    @pytest.mark.parametrize("key,val", [("read_bw_bytes_per_s", 0), ("read_bw_bytes_per_s", -1),
                                         ("capacity_bytes", "x")])
    def test_bad_tier_values(self, key, val):
        cfg = desk_profile_dict()
        cfg["tiers"][0][key] = val
        with pytest.raises(ConfigError):
            profile_from_dict(cfg)

    def test_unreadable(self, tmp_path):
        with pytest.raises(ConfigError):
            load_profile(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            measure_device_profile(bad)

    def test_round_trip(self, tmp_path):
        prof = profile_from_dict(desk_profile_dict())
        save_profile(prof, tmp_path / "p.json")
        again = load_profile(tmp_path / "p.json")
        assert again.to_dict() == prof.to_dict()

    def test_missing_curve(self):
        prof = profile_from_dict(desk_profile_dict())
        with pytest.raises(ConfigError):
            prof.curve("poetry")

    def test_offered_rates(self):
        prof = profile_from_dict(desk_profile_dict())
        rates = {m.kind: m.available_rates for m in prof.methods()}
        assert rates[Method.QUANTIZE] == (0.1875, 0.3125, 0.5625, 1.0)
        assert rates[Method.TOKENDROP] == (0.05, 0.1, 0.2, 0.4, 1.0)

    def test_microbenchmark_in_memory(self):
        cfg = desk_profile_dict()
        cfg["tiers"] = cfg["tiers"][:1]
        prof = measure_device_profile(cfg, microbenchmark=True)
        assert prof.tiers[0].read_bandwidth > 0

    def test_microbenchmark_rejects_small_transfers(self):
        from tierkv.profiler import benchmark_read_bandwidth
        with pytest.raises(ConfigError):
            benchmark_read_bandwidth(nbytes=1 << 20)


def test_curve_merge_keeps_both_methods():
    c = fit_quality_curve([(0.5, 0.9)], "quantize").merge(fit_quality_curve([(0.5, 0.7)], "tokendrop"))
    assert isinstance(c, QualityCurve)
    assert c.methods() == [Method.QUANTIZE, Method.TOKENDROP]
