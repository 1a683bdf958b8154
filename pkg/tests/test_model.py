import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tierkv.errors import ConfigError, ContractError
from tierkv.model import (
    FULL,
    HISTORY_CAP,
    MODEL_PRESETS,
    RECOMPUTE,
    CacheEntry,
    CompressionChoice,
    CompressionMethod,
    DeviceTier,
    Method,
    ModelShape,
    bytes_per_token,
    check_tier_order,
    compressed_size,
    make_choice,
)

GiB = 1 << 30


def entry(full, tokens=1):
    return CacheEntry("x", tokens, full, "c")


class TestBytesPerToken:
    def test_llama_8b_shape(self):
        assert bytes_per_token(ModelShape(32, 8, 128, 2)) == 131072

    def test_unit_shape(self):
        assert bytes_per_token(ModelShape(1, 1, 1, 1)) == 2

    def test_llama_70b_capacity_order_of_magnitude(self):
        b = bytes_per_token(ModelShape(80, 8, 128, 2))
        assert b == 327680
        total = 500_000 * b
        assert total == pytest.approx(164e9, rel=0.01)
        # within 2x of the ~310 GB quoted for two nodes of GPU plus CPU memory
        assert 310e9 / 2 <= total <= 310e9 * 2

    def test_presets(self):
        assert bytes_per_token(MODEL_PRESETS["llama-3.1-8b"]) == 131072
        assert bytes_per_token(MODEL_PRESETS["desk"]) == 131072 // 16

    @given(st.integers(1, 200), st.integers(1, 64), st.integers(1, 256), st.sampled_from([1, 2, 4]))
    def test_multiplicative(self, layers, heads, dim, width):
        a = bytes_per_token(ModelShape(layers, heads, dim, width))
        assert bytes_per_token(ModelShape(2 * layers, heads, dim, width)) == 2 * a
        assert bytes_per_token(ModelShape(layers, 2 * heads, dim, width)) == 2 * a

    @pytest.mark.parametrize("bad", [(0, 1, 1, 2), (1, 0, 1, 2), (1, 1, 0, 2), (1, 1, 1, 3)])
    def test_invalid_shape(self, bad):
        with pytest.raises(ConfigError):
            ModelShape(*bad)


class TestCompressedSize:
    def test_quarter_gib(self):
        assert compressed_size(entry(GiB), make_choice("quantize", 0.25)) == 268435456

    def test_full_is_identity(self):
        assert compressed_size(entry(12345), FULL) == 12345

    def test_ceiling(self):
        assert compressed_size(entry(3), make_choice("quantize", 0.5)) == 2

    def test_decimal_rate_is_exact(self):
        # 0.1 * 1000 is 100.00000000000001 in binary floating point
        assert compressed_size(entry(1000), make_choice("tokendrop", 0.1)) == 100

    def test_recompute_has_no_size(self):
        with pytest.raises(ContractError):
            compressed_size(entry(10), RECOMPUTE)

    @given(st.integers(1, 10**12), st.floats(1e-6, 1.0), st.floats(1e-6, 1.0))
    def test_monotone_in_rate_and_bounded(self, full, r1, r2):
        lo, hi = sorted((r1, r2))
        a = compressed_size(entry(full), make_choice("quantize", lo))
        b = compressed_size(entry(full), make_choice("quantize", hi))
        assert 1 <= a <= b <= full

    @given(st.integers(1, 10**12), st.integers(1, 10**12), st.floats(1e-6, 1.0))
    def test_monotone_in_full_size(self, f1, f2, rate):
        lo, hi = sorted((f1, f2))
        c = make_choice("tokendrop", rate)
        assert compressed_size(entry(lo), c) <= compressed_size(entry(hi), c)


class TestChoices:
    def test_rate_one_is_full_for_any_method(self):
        assert make_choice("quantize", 1.0) == FULL
        assert make_choice(Method.TOKENDROP, 1.0).is_full

    def test_recompute_sentinel(self):
        assert RECOMPUTE.is_recompute and not RECOMPUTE.is_full
        assert RECOMPUTE.label == "recompute"

    def test_labels(self):
        assert make_choice("quantize", 0.25).label == "quantize@0.25"
        assert FULL.label == "full"

    @pytest.mark.parametrize("rate", [0.0, -0.1, 1.5])
    def test_rate_out_of_range(self, rate):
        with pytest.raises(ContractError):
            make_choice("quantize", rate)

    def test_methodless_partial_rate_rejected(self):
        with pytest.raises(ContractError):
            CompressionChoice(None, 0.5)

    def test_method_parse(self):
        assert Method.parse("quantize") is Method.QUANTIZE
        assert Method.parse(Method.TOKENDROP) is Method.TOKENDROP
        with pytest.raises(ConfigError):
            Method.parse("zip")

    def test_compression_method_adds_full_and_sorts(self):
        cm = CompressionMethod(Method.QUANTIZE, (0.5, 0.25))
        assert cm.available_rates == (0.25, 0.5, 1.0)
        with pytest.raises(ConfigError):
            CompressionMethod(Method.QUANTIZE, (0.0,))


class TestCacheEntry:
    def test_create_uses_shape(self):
        e = CacheEntry.create("a", 10, "qa", ModelShape(1, 1, 1, 2))
        assert e.full_size == 40 and e.hit_history == ()

    def test_history_strictly_increasing(self):
        with pytest.raises(ContractError):
            CacheEntry("a", 1, 1, "c", (1.0, 1.0))
        e = entry(1).with_hit(5.0).with_hit(5.0)
        assert e.hit_history[1] > e.hit_history[0]

    def test_history_is_capped_with_folded_mass(self):
        e = entry(1)
        for t in range(HISTORY_CAP + 10):
            e = e.with_hit(float(t), half_life=10.0)
        assert len(e.hit_history) == HISTORY_CAP
        assert e.hit_history[0] == 10.0
        # ten folded hits at t=0..9 measured at t=9
        expect = sum(2.0 ** (-(9 - t) / 10.0) for t in range(10))
        assert e.folded_at == 9.0
        assert e.folded_mass == pytest.approx(expect, rel=1e-12)

    def test_out_of_order_hit(self):
        with pytest.raises(ContractError):
            entry(1).with_hit(5.0).with_hit(1.0)

    def test_invalid(self):
        with pytest.raises(ContractError):
            CacheEntry("a", 0, 1, "c")


class TestDeviceTier:
    def test_delay(self):
        t = DeviceTier("ssd", GiB, 1e9, decompress_coeff={"quantize": 1e-10})
        c = make_choice("quantize", 0.25)
        assert t.load_delay(c, 10**9) == pytest.approx(0.25 + 0.1)
        assert t.load_delay(FULL, 10**9) == pytest.approx(1.0)

    def test_invalid(self):
        with pytest.raises(ConfigError):
            DeviceTier("x", -1, 1.0)
        with pytest.raises(ConfigError):
            DeviceTier("x", 1, 0.0)
        with pytest.raises(ConfigError):
            DeviceTier("x", 1, 1.0, decompress_coeff={"quantize": math.nan})

    def test_order_check(self):
        fast, slow = DeviceTier("a", 1, 10.0), DeviceTier("b", 1, 1.0)
        check_tier_order([fast, slow])
        with pytest.raises(ConfigError):
            check_tier_order([slow, fast])
