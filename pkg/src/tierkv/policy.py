"""Utility scoring and the multi-choice knapsack planner.

Every entry may be stored on any tier at any (method, rate), or not stored at
all (RECOMPUTE).  Choices are scored by::

    freq * (alpha * quality - load_delay)

and the planner picks one choice per entry under per-tier byte budgets.
Per entry and tier the scored choices are reduced to a *ladder*: the upper
convex hull in (size, utility) space, starting at RECOMPUTE.  Planning climbs
ladders greedily by utility gained per byte; admission and eviction descend
them by utility lost per byte freed.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, InstanceTooLargeError
from .model import (
    RECOMPUTE,
    CacheEntry,
    CompressionChoice,
    DeviceTier,
    compressed_size,
)
from .profiler import DeviceProfile, QualityCurve, choice_quality

BRUTE_FORCE_LIMIT = 10**7


@dataclass(frozen=True)
class ScoredChoice:
    entry_id: str
    tier: int | None
    choice: CompressionChoice
    size: int
    utility: float


@dataclass(frozen=True)
class Decision:
    """Target placement for one entry; ``tier=None`` means evict."""

    entry_id: str
    tier: int | None
    choice: CompressionChoice

    @property
    def is_evict(self) -> bool:
        return self.tier is None


@dataclass
class Plan:
    assignments: dict[str, ScoredChoice]
    used: list[int]
    total_utility: float

    def placement(self, entry_id: str) -> tuple[int | None, CompressionChoice]:
        sc = self.assignments[entry_id]
        return sc.tier, sc.choice

    def stored(self) -> dict[str, ScoredChoice]:
        return {k: v for k, v in self.assignments.items() if v.tier is not None}


# -- scoring -----------------------------------------------------------------

def _unit_utility(entry: CacheEntry, choice: CompressionChoice, tier: DeviceTier | None,
                  alpha: float, curve: QualityCurve, device: DeviceProfile) -> float:
    if choice.is_recompute:
        return alpha - device.prefill_delay(entry.token_count)
    if tier is None:
        raise ContractError("a stored choice needs a tier")
    q = choice_quality(curve, choice)
    return alpha * q - tier.load_delay(choice, entry.full_size)


def utility(entry: CacheEntry, choice: CompressionChoice, tier: DeviceTier | None, alpha: float,
            freq: float, curve: QualityCurve, profile: DeviceProfile) -> float:
    """Expected value of holding ``entry`` as ``choice`` on ``tier``.

    RECOMPUTE is lossless (quality 1.0) and costs a full prefill.
    """
    if freq < 0:
        raise ContractError("freq must be >= 0")
    if alpha < 0:
        raise ContractError("alpha must be >= 0")
    return freq * _unit_utility(entry, choice, tier, alpha, curve, profile)


def marginal_utility_drop(entry: CacheEntry, choice_m: CompressionChoice, choice_n: CompressionChoice,
                          tier: DeviceTier, alpha: float, freq: float, curve: QualityCurve,
                          profile: DeviceProfile) -> float:
    """Utility lost per byte saved when moving from ``choice_m`` to the smaller ``choice_n``.

    RECOMPUTE counts as rate 0.  Negative values mean the smaller choice is
    strictly better.
    """
    if choice_m.rate <= choice_n.rate:
        raise ContractError("choice_m must have a strictly larger rate than choice_n")
    u_m = utility(entry, choice_m, tier, alpha, freq, curve, profile)
    u_n = utility(entry, choice_n, None if choice_n.is_recompute else tier, alpha, freq, curve, profile)
    return (u_m - u_n) / (entry.full_size * (choice_m.rate - choice_n.rate))


def prune_dominated(choices: Sequence[ScoredChoice]) -> list[ScoredChoice]:
    """Drop choices no optimal knapsack solution would use.

    First removes choices beaten by one at most as large (IP dominance), then
    those under the upper convex hull of (size, utility) (LP dominance).
    Survivors come back sorted by size with strictly increasing utility and
    strictly decreasing slope.
    """
    if not choices:
        return []
    ordered = sorted(choices, key=lambda c: (c.size, -c.utility))
    frontier: list[ScoredChoice] = []
    for c in ordered:
        if not frontier or c.utility > frontier[-1].utility:
            if frontier and frontier[-1].size == c.size:
                continue
            frontier.append(c)
    hull: list[ScoredChoice] = []
    for c in frontier:
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            # b is kept only if slope(a,b) > slope(b,c); cross-multiplied, sizes strictly increase
            if (b.utility - a.utility) * (c.size - b.size) <= (c.utility - b.utility) * (b.size - a.size):
                hull.pop()
            else:
                break
        hull.append(c)
    return hull


# -- planner -----------------------------------------------------------------

@dataclass(frozen=True)
class _Rung:
    choice: CompressionChoice
    size: int
    unit: float  # utility at freq 1


@dataclass
class _State:
    pos: dict[str, tuple[int | None, int]]
    free: list[int]
    freq: dict[str, float]

    def copy(self) -> _State:
        return _State(dict(self.pos), list(self.free), self.freq)


@dataclass
class _Move:
    entry_id: str
    tier: int | None
    rung: int


def _default_choices(curves: Mapping[str, QualityCurve]) -> list[CompressionChoice]:
    rates: dict = {}
    for curve in curves.values():
        for m, knots in curve.knots.items():
            rates.setdefault(m, set()).update(r for r, _ in knots)
    out = {CompressionChoice(None, 1.0)}
    for m, rs in rates.items():
        out.update(CompressionChoice(m, r) for r in rs)
    return sorted(out, key=CompressionChoice.sort_key)


class Planner:
    """Greedy multi-tier knapsack planner over a fixed hierarchy and weight.

    Ladders depend on the entry, ``alpha``, curves and tiers but not on the
    frequency (a common positive factor), so they are cached per entry id.
    """

    def __init__(self, tiers: Sequence[DeviceTier], alpha: float, curves: Mapping[str, QualityCurve],
                 device: DeviceProfile, choices: Sequence[CompressionChoice] | None = None,
                 improve: bool = True):
        if alpha < 0:
            raise ConfigError("alpha must be >= 0")
        self.tiers = tuple(tiers)
        self.alpha = float(alpha)
        self.curves = curves
        self.device = device
        self.choices = list(choices) if choices is not None else _default_choices(curves)
        self.improve = improve
        self._ladders: dict[str, tuple[tuple[_Rung, ...], ...]] = {}

    # ladders

    def entry_choices(self, entry: CacheEntry) -> list[CompressionChoice]:
        curve = self._curve(entry)
        return [c for c in self.choices if c.method is None or c.method in curve.knots]

    def _curve(self, entry: CacheEntry) -> QualityCurve:
        try:
            return self.curves[entry.class_tag]
        except KeyError:
            raise ConfigError(f"no quality curve for class {entry.class_tag!r}") from None

    def ladders(self, entry: CacheEntry) -> tuple[tuple[_Rung, ...], ...]:
        cached = self._ladders.get(entry.id)
        if cached is not None:
            return cached
        curve = self._curve(entry)
        base = ScoredChoice(entry.id, None, RECOMPUTE, 0,
                            _unit_utility(entry, RECOMPUTE, None, self.alpha, curve, self.device))
        out = []
        for k, tier in enumerate(self.tiers):
            scored = [base]
            for c in self.entry_choices(entry):
                size = compressed_size(entry, c)
                scored.append(ScoredChoice(entry.id, k, c, size,
                                           _unit_utility(entry, c, tier, self.alpha, curve, self.device)))
            hull = prune_dominated(scored)
            out.append(tuple(_Rung(s.choice, s.size, s.utility) for s in hull))
        result = tuple(out)
        self._ladders[entry.id] = result
        return result

    def forget(self, entry_id: str) -> None:
        self._ladders.pop(entry_id, None)

    def _rung(self, eid: str, tier: int | None, j: int) -> _Rung:
        lad = self._ladders[eid]
        return lad[0][0] if tier is None else lad[tier][j]

    def _u(self, st: _State, eid: str, tier: int | None, j: int) -> float:
        return st.freq[eid] * self._rung(eid, tier, j).unit

    def scored(self, st: _State, eid: str) -> ScoredChoice:
        tier, j = st.pos[eid]
        r = self._rung(eid, tier, j)
        return ScoredChoice(eid, tier, r.choice, r.size if tier is not None else 0, st.freq[eid] * r.unit)

    def locate(self, entry: CacheEntry, tier: int | None, choice: CompressionChoice) -> int | None:
        """Rung index of ``choice`` on ``tier``'s ladder, or None if it was pruned."""
        if tier is None:
            return 0
        for j, r in enumerate(self.ladders(entry)[tier]):
            if r.choice == choice:
                return j
        return None

    # greedy ascent

    def plan(self, entries: Sequence[CacheEntry], freqs: Mapping[str, float]) -> Plan:
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            raise ContractError("duplicate entry ids")
        for e in entries:
            if freqs[e.id] < 0:
                raise ContractError("freq must be >= 0")
            self.ladders(e)
        st = _State({e.id: (None, 0) for e in entries}, [t.capacity for t in self.tiers],
                    {e.id: float(freqs[e.id]) for e in entries})
        blocked = self._ascend(st, sorted(ids))
        if self.improve and blocked:
            self._improve(st, blocked)
        return self._to_plan(st)

    def _candidates(self, st: _State, eid: str) -> list[tuple[int, int]]:
        tier, j = st.pos[eid]
        lad = self._ladders[eid]
        if tier is None:
            return [(k, 1) for k in range(len(lad)) if len(lad[k]) > 1]
        return [(tier, j + 1)] if j + 1 < len(lad[tier]) else []

    def _push(self, heap, st: _State, eid: str, version: int) -> None:
        tier, j = st.pos[eid]
        f = st.freq[eid]
        cur = self._rung(eid, tier, j)
        cur_size = cur.size if tier is not None else 0
        for k, nj in self._candidates(st, eid):
            nxt = self._ladders[eid][k][nj]
            gain = f * (nxt.unit - cur.unit)
            if gain <= 0:
                continue
            eff = gain / (nxt.size - cur_size)
            heapq.heappush(heap, (-eff, eid, nxt.size, k, nj, version))

    def _ascend(self, st: _State, ids: Iterable[str]) -> list[tuple[str, int, int]]:
        heap: list = []
        version = {eid: 0 for eid in st.pos}
        for eid in ids:
            self._push(heap, st, eid, 0)
        blocked: list[tuple[str, int, int]] = []
        while heap:
            _, eid, _, k, nj, ver = heapq.heappop(heap)
            if ver != version[eid]:
                continue
            tier, j = st.pos[eid]
            cur_size = self._rung(eid, tier, j).size if tier is not None else 0
            need = self._ladders[eid][k][nj].size - cur_size
            if need > st.free[k]:
                blocked.append((eid, k, nj))
                continue
            st.free[k] -= need
            st.pos[eid] = (k, nj)
            version[eid] += 1
            self._push(heap, st, eid, version[eid])
        return blocked

    # descent: freeing room

    def _down_options(self, st: _State, eid: str) -> list[tuple[int | None, int, int]]:
        """(tier, rung, bytes freed on the current tier) for each downgrade of ``eid``."""
        tier, j = st.pos[eid]
        lad = self._ladders[eid]
        size = lad[tier][j].size
        opts: list[tuple[int | None, int, int]] = []
        if j > 1:
            opts.append((tier, j - 1, size - lad[tier][j - 1].size))
        opts.append((None, 0, size))
        nxt = tier + 1
        if nxt < len(lad):
            best = None
            for nj in range(len(lad[nxt]) - 1, 0, -1):
                if lad[nxt][nj].size <= st.free[nxt]:
                    best = nj
                    break
            if best is not None:
                opts.append((nxt, best, size))
        return opts

    def _make_room(self, st: _State, tier: int, need: int, exclude: set[str]) -> tuple[list[_Move], float] | None:
        """Downgrade residents of ``tier`` until ``need`` bytes are free there.

        Picks the smallest utility drop per freed byte each step and mutates
        ``st``.  Returns the moves and summed utility drop, or None (with
        ``st`` partially modified) if the tier cannot be cleared enough.
        """
        moves: list[_Move] = []
        total = 0.0
        if st.free[tier] >= need:
            return moves, total
        if need > self.tiers[tier].capacity:
            return None
        heap: list = []
        version: dict[str, int] = {}

        def push(eid: str) -> None:
            cur_u = self._u(st, eid, *st.pos[eid])
            ver = version.get(eid, 0)
            for k, nj, freed in self._down_options(st, eid):
                drop = cur_u - self._u(st, eid, k, nj)
                new_size = self._rung(eid, k, nj).size if k is not None else 0
                heapq.heappush(heap, (drop / freed, eid, new_size, k if k is not None else -1, nj, ver))

        for eid in sorted(e for e, (t, _) in st.pos.items() if t == tier and e not in exclude):
            push(eid)
        while st.free[tier] < need:
            if not heap:
                return None
            md, eid, new_size, k, nj, ver = heapq.heappop(heap)
            if ver != version.get(eid, 0):
                continue
            k = None if k == -1 else k
            cur_tier, cur_j = st.pos[eid]
            if k is not None and k != cur_tier and self._rung(eid, k, nj).size > st.free[k]:
                # the slower tier filled up meanwhile
                version[eid] = ver + 1
                push(eid)
                continue
            cur = self._rung(eid, cur_tier, cur_j)
            st.free[cur_tier] += cur.size
            if k is not None:
                st.free[k] -= self._rung(eid, k, nj).size
            total += self._u(st, eid, cur_tier, cur_j) - self._u(st, eid, k, nj)
            st.pos[eid] = (k, nj if k is not None else 0)
            moves.append(_Move(eid, k, nj))
            version[eid] = ver + 1
            if k == tier:
                push(eid)
        return moves, total

    def _try_move(self, st: _State, eid: str, k: int, nj: int) -> tuple[_State, float] | None:
        """Evaluate moving ``eid`` to rung ``nj`` of tier ``k``, displacing others as needed.

        Returns the resulting state and net utility change, or None.
        """
        trial = st.copy()
        tier, j = trial.pos[eid]
        gain = self._u(trial, eid, k, nj) - self._u(trial, eid, tier, j)
        if tier is not None:
            trial.free[tier] += self._rung(eid, tier, j).size
        trial.pos[eid] = (None, 0)
        need = self._ladders[eid][k][nj].size
        res = self._make_room(trial, k, need, {eid})
        if res is None:
            return None
        _, drop = res
        trial.free[k] -= need
        trial.pos[eid] = (k, nj)
        return trial, gain - drop

    def _improve(self, st: _State, blocked: list[tuple[str, int, int]]) -> None:
        # Blocked upgrades are the split items of the greedy; retry each by
        # displacing cheaper residents, keeping only strict improvements.
        blocked = sorted(set(blocked), key=lambda b: (-st.freq[b[0]], b[0], b[1], b[2]))
        for eid, k, nj in blocked:
            tier, j = st.pos[eid]
            if self._u(st, eid, k, nj) <= self._u(st, eid, tier, j):
                continue
            res = self._try_move(st, eid, k, nj)
            if res is not None and res[1] > 1e-12 * max(1.0, abs(self._u(st, eid, k, nj))):
                new = res[0]
                st.pos, st.free = new.pos, new.free
        # An entry that climbed a fast tier's ladder can stop below a better
        # rung on another tier; try those lateral moves once per entry.
        for eid in sorted(st.pos, key=lambda e: (-st.freq[e], e)):
            tier, j = st.pos[eid]
            cur = self._u(st, eid, tier, j)
            best = None
            for k, lad in enumerate(self._ladders[eid]):
                if k == tier:
                    continue
                for nj in range(len(lad) - 1, 0, -1):
                    if self._u(st, eid, k, nj) <= cur:
                        break
                    res = self._try_move(st, eid, k, nj)
                    if res is not None and res[1] > 1e-12 * max(1.0, abs(cur)) and (best is None or res[1] > best[1]):
                        best = res
            if best is not None:
                st.pos, st.free = best[0].pos, best[0].free

    def _to_plan(self, st: _State) -> Plan:
        assignments = {eid: self.scored(st, eid) for eid in sorted(st.pos)}
        used = [t.capacity - f for t, f in zip(self.tiers, st.free)]
        return Plan(assignments, used, float(sum(a.utility for a in assignments.values())))

    # admission

    def state_from(self, residents: Mapping[str, tuple[CacheEntry, int, CompressionChoice]],
                   freqs: Mapping[str, float]) -> _State:
        """Planner state for the current residency; off-ladder placements are kept as-is."""
        free = [t.capacity for t in self.tiers]
        pos: dict[str, tuple[int | None, int]] = {}
        for eid, (entry, tier, choice) in residents.items():
            j = self.locate(entry, tier, choice)
            if j is None:
                raise ContractError(f"{eid}: placement {choice} on tier {tier} is not on its ladder")
            pos[eid] = (tier, j)
            if tier is not None:
                free[tier] -= self._ladders[eid][tier][j].size
        return _State(pos, free, {eid: float(freqs[eid]) for eid in residents})

    def admit(self, new_entry: CacheEntry, residents: Mapping[str, tuple[CacheEntry, int, CompressionChoice]],
              freqs: Mapping[str, float]) -> list[Decision]:
        """Decide where (if anywhere) a freshly computed KV cache goes.

        Every surviving choice of the new entry is tried; for each, residents
        of the target tier are downgraded in order of smallest utility drop
        per freed byte until it fits.  The option with the largest net gain
        wins; if none gains, nothing changes and the entry is not stored.
        """
        if new_entry.id in residents:
            raise ContractError(f"{new_entry.id} is already placed")
        self.ladders(new_entry)
        base = self.state_from(residents, freqs)
        base.pos[new_entry.id] = (None, 0)
        base.freq = {**base.freq, new_entry.id: float(freqs[new_entry.id])}
        best: tuple[float, _State] | None = None
        lad = self._ladders[new_entry.id]
        for k in range(len(lad)):
            for nj in range(len(lad[k]) - 1, 0, -1):
                res = self._try_move(base, new_entry.id, k, nj)
                if res is None:
                    continue
                trial, net = res
                if net > 0 and (best is None or net > best[0]):
                    best = (net, trial)
        if best is None:
            return []
        return self.diff(base, best[1])

    def diff(self, before: _State, after: _State) -> list[Decision]:
        out = []
        for eid in sorted(after.pos):
            if before.pos.get(eid) != after.pos[eid]:
                tier, j = after.pos[eid]
                out.append(Decision(eid, tier, self._rung(eid, tier, j).choice if tier is not None else RECOMPUTE))
        return out

    def replan(self, residents: Mapping[str, tuple[CacheEntry, int, CompressionChoice]],
               freqs: Mapping[str, float]) -> list[Decision]:
        """Plan the current residents from scratch and return the changes."""
        entries = [e for e, _, _ in residents.values()]
        p = self.plan(entries, freqs)
        out = []
        for eid in sorted(p.assignments):
            _, tier, choice = residents[eid]
            sc = p.assignments[eid]
            if (sc.tier, sc.choice) != (tier, choice):
                out.append(Decision(eid, sc.tier, sc.choice))
        return out


def plan(entries: Sequence[CacheEntry], tiers: Sequence[DeviceTier], alpha: float,
         curves: Mapping[str, QualityCurve], profile: DeviceProfile, freqs: Mapping[str, float],
         choices: Sequence[CompressionChoice] | None = None, improve: bool = True) -> Plan:
    """Greedy plan of every entry onto ``tiers``; see :class:`Planner`."""
    return Planner(tiers, alpha, curves, profile, choices, improve).plan(entries, freqs)


def admit(new_entry: CacheEntry, residents: Mapping[str, tuple[CacheEntry, int, CompressionChoice]],
          tiers: Sequence[DeviceTier], alpha: float, curves: Mapping[str, QualityCurve],
          profile: DeviceProfile, freqs: Mapping[str, float],
          choices: Sequence[CompressionChoice] | None = None) -> list[Decision]:
    return Planner(tiers, alpha, curves, profile, choices).admit(new_entry, residents, freqs)


def largest_step(planner: Planner, entries: Sequence[CacheEntry], freqs: Mapping[str, float]) -> float:
    """Largest utility increment between adjacent rungs of any ladder."""
    best = 0.0
    for e in entries:
        for lad in planner.ladders(e):
            for a, b in zip(lad, lad[1:]):
                best = max(best, freqs[e.id] * (b.unit - a.unit))
    return best


# -- exact oracle ------------------------------------------------------------

def brute_force_plan(entries: Sequence[CacheEntry], tiers: Sequence[DeviceTier], alpha: float,
                     curves: Mapping[str, QualityCurve], profile: DeviceProfile,
                     freqs: Mapping[str, float],
                     choices: Sequence[CompressionChoice] | None = None) -> Plan:
    """Exact optimum by enumerating every assignment (no pruning)."""
    choices = list(choices) if choices is not None else _default_choices(curves)
    options: list[list[ScoredChoice]] = []
    for e in entries:
        curve = curves[e.class_tag]
        f = float(freqs[e.id])
        opts = [ScoredChoice(e.id, None, RECOMPUTE, 0, utility(e, RECOMPUTE, None, alpha, f, curve, profile))]
        for k, tier in enumerate(tiers):
            for c in choices:
                if c.method is not None and c.method not in curve.knots:
                    continue
                opts.append(ScoredChoice(e.id, k, c, compressed_size(e, c),
                                         utility(e, c, tier, alpha, f, curve, profile)))
        options.append(opts)
    total = 1
    for o in options:
        total *= len(o)
    if total > BRUTE_FORCE_LIMIT:
        raise InstanceTooLargeError(f"{total} assignments exceed the {BRUTE_FORCE_LIMIT} limit")
    n_t = len(tiers)
    if not entries:
        return Plan({}, [0] * n_t, 0.0)

    util = [np.array([o.utility for o in opts]) for opts in options]
    use = [np.zeros((len(opts), n_t), dtype=np.int64) for opts in options]
    for u, opts in zip(use, options):
        for i, o in enumerate(opts):
            if o.tier is not None:
                u[i, o.tier] = o.size
    caps = np.array([t.capacity for t in tiers], dtype=np.int64)
    radix = [len(o) for o in options]
    strides = np.cumprod([1] + radix[::-1][:-1])[::-1]

    best_val, best_idx = -np.inf, None
    chunk = 1 << 18
    for start in range(0, total, chunk):
        idx = np.arange(start, min(total, start + chunk), dtype=np.int64)
        val = np.zeros(len(idx))
        load = np.zeros((len(idx), n_t), dtype=np.int64)
        for i in range(len(options)):
            digit = (idx // strides[i]) % radix[i]
            val += util[i][digit]
            load += use[i][digit]
        ok = np.all(load <= caps, axis=1)
        if not ok.any():
            continue
        masked = np.where(ok, val, -np.inf)
        a = int(np.argmax(masked))
        if masked[a] > best_val:
            best_val, best_idx = float(masked[a]), int(idx[a])
    digits = [(best_idx // int(s)) % r for s, r in zip(strides, radix)]
    assignments = {options[i][0].entry_id: options[i][d] for i, d in enumerate(digits)}
    used = [0] * n_t
    for sc in assignments.values():
        if sc.tier is not None:
            used[sc.tier] += sc.size
    return Plan(dict(sorted(assignments.items())), used, float(sum(a.utility for a in assignments.values())))

