"""Built-in device profiles and quality curves.

Two hierarchies with identical ratios: the full-scale one (100 GB DRAM,
400 GB SSD, SSD reads at 1 GB/s) and a desk-scale one at 1/100 of the
capacities for tests and CI.  The desk profile pairs with the ``desk`` model
preset (1/16 of Llama-3.1-8B's per-token KV bytes), so prefill time per
token is scaled by the same 1/16.

Quality curves are stand-ins for offline profiling: summarization contexts
tolerate token dropping, QA contexts need quantization, coding sits between.
Quantization rates are the group-64 codec's exact rates on fp16 caches.
"""

from __future__ import annotations

from .codecs import QuantSpec, quantized_rate
from .profiler import Profile, profile_from_dict
from .workload import WorkloadSpec

GB = 10**9

# 2/4/8-bit on fp16 with 8 bytes of scale+zero per 64 elements
Q2, Q4, Q8 = (quantized_rate(64, QuantSpec(b, 64), element_width=2) for b in (2, 4, 8))

CURVES = {
    "summarization": {
        "quantize": [[Q2, 0.80], [Q4, 0.95], [Q8, 0.99]],
        "tokendrop": [[0.05, 0.80], [0.1, 0.88], [0.2, 0.94], [0.4, 0.98]],
    },
    "qa": {
        "quantize": [[Q2, 0.90], [Q4, 0.97], [Q8, 0.995]],
        "tokendrop": [[0.05, 0.25], [0.1, 0.40], [0.2, 0.60], [0.4, 0.80]],
    },
    "coding": {
        "quantize": [[Q2, 0.70], [Q4, 0.93], [Q8, 0.99]],
        "tokendrop": [[0.05, 0.55], [0.1, 0.70], [0.2, 0.82], [0.4, 0.92]],
    },
}

# Llama-3.1-8B on one A100: roughly 80 us of prefill per token.
_PREFILL_8B = 80e-6
_DECOMPRESS = {"quantize": 1e-11, "tokendrop": 0.0}


def _profile_dict(dram: int, ssd: int, prefill: float) -> dict:
    return {
        "tiers": [
            {"name": "dram", "capacity_bytes": dram, "read_bw_bytes_per_s": 25 * GB,
             "write_bw_bytes_per_s": 25 * GB, "decompress_s_per_byte": dict(_DECOMPRESS)},
            {"name": "ssd", "capacity_bytes": ssd, "read_bw_bytes_per_s": 1 * GB,
             "write_bw_bytes_per_s": 1 * GB, "decompress_s_per_byte": dict(_DECOMPRESS)},
        ],
        "prefill_s_per_token": prefill,
        "curves": CURVES,
        "freq": {"half_life_s": 300.0, "prior_weight": 1.0},
    }


def full_profile_dict() -> dict:
    return _profile_dict(100 * GB, 400 * GB, _PREFILL_8B)


def desk_profile_dict() -> dict:
    return _profile_dict(1 * GB, 4 * GB, _PREFILL_8B / 16)


def full_profile() -> Profile:
    return profile_from_dict(full_profile_dict())


def desk_profile() -> Profile:
    return profile_from_dict(desk_profile_dict())


PROFILES = {"full": full_profile, "desk": desk_profile}

# About 100 requests per 300 s half-life window, touching ~4 GB of distinct
# full-size KV with the desk model preset.
DESK_WORKLOAD = WorkloadSpec(rate=1 / 3, duration=6 * 3600.0, num_contexts=200, zipf_s=1.0,
                             min_tokens=1024, max_tokens=32768, seed=0)

SWEEP_ALPHAS = (0.0005, 0.005, 0.05, 0.5)
