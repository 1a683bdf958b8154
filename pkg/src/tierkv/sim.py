"""Trace replay: drive an engine with a policy and collect per-request metrics."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .engine import Engine, Hit
from .model import MODEL_PRESETS, ModelShape
from .profiler import Profile
from .strategies import AdaptCache, PolicyConfig, make_strategy, policy_label
from .workload import TraceEvent

ROW_HEADER = ("t_s", "context_id", "result", "tier", "choice", "delay_s", "quality")


@dataclass(frozen=True)
class RequestRow:
    t: float
    context_id: str
    tier: str | None  # None on a miss
    choice: str
    delay: float
    quality: float


@dataclass
class MetricsReport:
    policy: str
    alpha: float | None
    tier_names: tuple[str, ...]
    seed: int = 0
    rows: list[RequestRow] = field(default_factory=list)

    def delays(self) -> np.ndarray:
        return np.array([r.delay for r in self.rows], dtype=np.float64)

    def summary(self) -> dict[str, float]:
        n = len(self.rows)
        d = self.delays()
        nan = math.nan
        out = {
            "mean_ttft_s": float(d.mean()) if n else nan,
            "median_ttft_s": float(np.median(d)) if n else nan,
            "p95_ttft_s": float(np.percentile(d, 95)) if n else nan,
        }
        hits = sum(r.tier is not None for r in self.rows)
        out["hit_rate_total"] = hits / n if n else nan
        for name in self.tier_names:
            out[f"hit_rate_{name}"] = sum(r.tier == name for r in self.rows) / n if n else nan
        out["miss_rate"] = (n - hits) / n if n else nan
        out["mean_quality"] = float(np.mean([r.quality for r in self.rows])) if n else nan
        out["requests"] = n
        return out


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def summary_columns(tier_names: Sequence[str]) -> list[str]:
    return (["policy", "alpha", "mean_ttft_s", "p95_ttft_s", "hit_rate_total"]
            + [f"hit_rate_{t}" for t in tier_names] + ["mean_quality", "median_ttft_s", "miss_rate", "requests"])


def run(trace: Sequence[TraceEvent], profile: Profile, policy: PolicyConfig, seed: int = 0,
        shape: ModelShape | str = "desk", codec_mode: bool = False,
        spill_dir: str | os.PathLike | None = None) -> MetricsReport:
    """Replay ``trace`` under ``policy``.  Deterministic; ``seed`` is recorded only."""
    if isinstance(shape, str):
        if shape not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset {shape!r}")
        shape = MODEL_PRESETS[shape]
    for tag in sorted({ev.class_tag for ev in trace}):
        profile.curve(tag)  # fail before replay on a missing curve
    strategy = make_strategy(policy, profile)
    engine = Engine(profile, shape, strategy, codec_mode=codec_mode, spill_dir=spill_dir)
    names = tuple(t.name for t in profile.tiers)
    alpha = policy.alpha if isinstance(policy, AdaptCache) else None
    rep = MetricsReport(policy_label(policy), alpha, names, seed)
    for ev in trace:
        out = engine.on_request(ev.context_id, ev.token_count, ev.class_tag, ev.t)
        if isinstance(out.result, Hit):
            rep.rows.append(RequestRow(ev.t, ev.context_id, names[out.result.tier], out.result.choice.label,
                                       out.delay, out.quality))
        else:
            rep.rows.append(RequestRow(ev.t, ev.context_id, None, "recompute", out.delay, out.quality))
    return rep


def sweep(trace: Sequence[TraceEvent], profile: Profile, alphas: Sequence[float], seed: int = 0,
          shape: ModelShape | str = "desk", replan_every: int = 256) -> list[tuple[float, MetricsReport]]:
    """One AdaptCache run per alpha; together they trace the delay/quality frontier."""
    if not alphas:
        raise ConfigError("sweep needs at least one alpha")
    return [(a, run(trace, profile, AdaptCache(a, replan_every), seed, shape)) for a in alphas]


def pareto_csv(points: Sequence[tuple[float, MetricsReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("alpha", "mean_ttft_s", "mean_quality"))
    for a, rep in points:
        s = rep.summary()
        w.writerow((_fmt(float(a)), _fmt(s["mean_ttft_s"]), _fmt(s["mean_quality"])))
    return buf.getvalue()


def rows_csv(rep: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_HEADER)
    for r in rep.rows:
        w.writerow((repr(float(r.t)), r.context_id, "hit" if r.tier is not None else "miss",
                    r.tier or "", r.choice, repr(float(r.delay)), repr(float(r.quality))))
    return buf.getvalue()


def summary_csv(reports: Sequence[MetricsReport]) -> str:
    if not reports:
        return ""
    cols = summary_columns(reports[0].tier_names)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for rep in reports:
        s = rep.summary()
        s["policy"], s["alpha"] = rep.policy, rep.alpha
        w.writerow([_fmt(s.get(c)) for c in cols])
    return buf.getvalue()


def report(reports: MetricsReport | Sequence[MetricsReport], out_dir: str | os.PathLike) -> list[Path]:
    """Write ``summary.csv`` plus one ``rows_<policy>[_<alpha>].csv`` per report."""
    if isinstance(reports, MetricsReport):
        reports = [reports]
    out = Path(out_dir)
    files = {"summary.csv": summary_csv(reports)}
    for rep in reports:
        stem = rep.policy.replace(":", "_")
        if rep.alpha is not None:
            stem += f"_{rep.alpha!r}"
        files[f"rows_{stem}.csv"] = rows_csv(rep)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, text in files.items():
            (out / name).write_bytes(text.encode())
            written.append(out / name)
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return written
