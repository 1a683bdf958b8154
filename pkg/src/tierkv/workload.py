"""Synthetic request traces: Poisson arrivals, Zipf context reuse."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError

TRACE_HEADER = ("t_s", "context_id", "token_count", "class_tag")
DEFAULT_CLASSES = ("summarization", "qa", "coding")


@dataclass(frozen=True)
class TraceEvent:
    t: float
    context_id: str
    token_count: int
    class_tag: str


@dataclass(frozen=True)
class WorkloadSpec:
    rate: float = 1.0
    duration: float = 3600.0
    num_contexts: int = 200
    zipf_s: float = 1.0
    min_tokens: int = 1024
    max_tokens: int = 32768
    classes: tuple[str, ...] = DEFAULT_CLASSES
    seed: int = 0

    def __post_init__(self):
        if not self.rate > 0:
            raise ConfigError("rate must be > 0")
        if self.duration < 0:
            raise ConfigError("duration must be >= 0")
        if self.num_contexts < 1:
            raise ConfigError("num_contexts must be >= 1")
        if self.zipf_s < 0:
            raise ConfigError("zipf exponent must be >= 0")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ConfigError("need 1 <= min_tokens <= max_tokens")
        if not self.classes:
            raise ConfigError("at least one class tag is required")


def zipf_probabilities(n: int, s: float) -> np.ndarray:
    weights = np.arange(1, n + 1, dtype=np.float64) ** -s
    return weights / weights.sum()


def _arrival_times(rng: np.random.Generator, rate: float, duration: float) -> np.ndarray:
    if duration == 0:
        return np.zeros(0)
    expected = rate * duration
    batch = int(expected + 10 * math.sqrt(expected) + 16)
    times = np.cumsum(rng.exponential(1.0 / rate, size=batch))
    while times[-1] <= duration:
        more = np.cumsum(rng.exponential(1.0 / rate, size=batch)) + times[-1]
        times = np.concatenate([times, more])
    return times[times <= duration]


def gen_trace(spec: WorkloadSpec) -> list[TraceEvent]:
    """Draw a deterministic trace for ``spec``.

    Per-context properties (token count, class) are drawn up front, so a
    context keeps the same length every time it recurs.  Popularity ranks are
    shuffled over context ids.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.num_contexts
    lo, hi = math.log(spec.min_tokens), math.log(spec.max_tokens)
    tokens = np.floor(np.exp(rng.uniform(lo, hi, size=n))).astype(np.int64).clip(spec.min_tokens, spec.max_tokens)
    classes = rng.integers(0, len(spec.classes), size=n)
    rank_to_ctx = rng.permutation(n)
    times = _arrival_times(rng, spec.rate, spec.duration)
    ranks = rng.choice(n, size=len(times), p=zipf_probabilities(n, spec.zipf_s))
    width = len(str(n - 1))
    out = []
    for t, r in zip(times, ranks):
        c = int(rank_to_ctx[r])
        out.append(TraceEvent(float(t), f"ctx{c:0{width}d}", int(tokens[c]), spec.classes[int(classes[c])]))
    return out


def write_trace(events: list[TraceEvent], path: str | os.PathLike) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for e in events:
        w.writerow((repr(float(e.t)), e.context_id, int(e.token_count), e.class_tag))
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def read_trace(path: str | os.PathLike) -> list[TraceEvent]:
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"cannot read trace {path}: {exc}") from exc
    rows = csv.reader(io.StringIO(text))
    try:
        header = next(rows)
    except StopIteration:
        raise ParseError(f"{path}: empty file, expected header") from None
    if tuple(h.strip() for h in header) != TRACE_HEADER:
        raise ParseError(f"{path}:1: header must be {','.join(TRACE_HEADER)}")
    events: list[TraceEvent] = []
    last = -math.inf
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != 4:
            raise ParseError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        try:
            t = float(row[0])
            tokens = int(row[2])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: bad number") from None
        if not math.isfinite(t) or t < 0:
            raise ParseError(f"{path}:{lineno}: time must be finite and >= 0")
        if tokens < 1:
            raise ParseError(f"{path}:{lineno}: token_count must be >= 1")
        if not row[1] or not row[3]:
            raise ParseError(f"{path}:{lineno}: empty context_id or class_tag")
        if t < last:
            raise ParseError(f"{path}:{lineno}: timestamps must be non-decreasing")
        last = t
        events.append(TraceEvent(t, row[1], tokens, row[3]))
    return events
