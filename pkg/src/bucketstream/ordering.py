"""Partition loading order and edge-bucket iteration order for a 3-slot buffer.

A *buffer state* is the set of three node partitions held in fast memory.
Consecutive states differ by one swap.  The loading order must bring every
pair of partitions together at least once so that every edge bucket ``(i, j)``
can be trained; the iteration order then sequences the buckets so that the
partition about to be evicted is finished first, leaving a tail of buckets
("the window") to compute while the swap is in flight.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Set, Tuple

import numpy as np

Bucket = Tuple[int, int]
CAPACITY = 3
ORACLE_MAX_N = 7


class PlanError(ValueError):
    """A buffer sequence or iteration plan is structurally invalid."""


@dataclass
class BufferStateSequence:
    n: int
    states: List[FrozenSet[int]]

    def __post_init__(self):
        self.states = [frozenset(s) for s in self.states]
        validate_states(self.states, self.n)

    @property
    def loads(self) -> List[Tuple[int, int]]:
        """(evicted, loaded) for every swap between consecutive states."""
        return [(next(iter(a - b)), next(iter(b - a))) for a, b in zip(self.states, self.states[1:])]

    def transitions(self) -> List[Tuple[int, int]]:
        return self.loads

    def __len__(self) -> int:
        return len(self.states)


def validate_states(states: Sequence[FrozenSet[int]], n: int) -> None:
    if not states:
        raise PlanError("empty state sequence")
    for k, s in enumerate(states):
        if len(s) != CAPACITY:
            raise PlanError(f"state {k} holds {len(s)} partitions, expected {CAPACITY}")
        if not all(0 <= p < n for p in s):
            raise PlanError(f"state {k} references a partition outside [0, {n})")
    for k, (a, b) in enumerate(zip(states, states[1:])):
        if len(a - b) != 1:
            raise PlanError(f"states {k} and {k + 1} differ by {len(a - b)} swaps")


class _Coverage:
    def __init__(self, n: int):
        self.n = n
        self.m = np.zeros((n, n), dtype=bool)

    def mark(self, state) -> None:
        idx = list(state)
        self.m[np.ix_(idx, idx)] = True

    def done(self) -> bool:
        return bool(self.m.all())

    def column_full(self, c: int) -> bool:
        return bool(self.m[c].all())

    def uncovered_in(self, state) -> int:
        idx = list(state)
        return int((~self.m[np.ix_(idx, idx)]).sum())


def plan_loading_order(n: int) -> BufferStateSequence:
    """Column-by-column covering order.

    The buffer first sweeps partitions ``3..n-1`` past ``{0, 1}``, covering
    column 0.  Afterwards the loop keeps a *current column* resident and swaps
    the other two slots, preferring loads that complete pairs with the current
    column, until every pair has shared a state.  The partition loaded in one
    state is never the one evicted in the next.
    """
    if n < 4:
        raise ValueError(f"n must be >= 4, got {n}")
    cov = _Coverage(n)
    buf = frozenset({0, 1, 2})
    states = [buf]
    cov.mark(buf)
    for i in range(3, n):
        buf = (buf - {i - 2}) | {i}
        states.append(buf)
        cov.mark(buf)

    cur = 0
    guard = 4 * n * n + 16
    while not cov.done():
        guard -= 1
        if guard < 0:
            raise RuntimeError(f"loading order did not converge for n={n}")
        buf = states[-1]
        just = states[-1] - states[-2]
        if cov.column_full(cur):
            if cur + 1 in buf:
                cur += 1
                evictees = sorted(buf - {cur} - just)
            else:
                buf = (buf - {cur}) | {cur + 1}
                states.append(buf)
                cov.mark(buf)
                cur += 1
                if cov.done():
                    break
                # the scan still starts after the last partition the sweep loaded
                evictees = sorted(buf - {cur})
        else:
            evictees = sorted((states[-1] & states[-2]) - {cur})

        begin = (max(just) + 1) % n
        best = None
        best_score = None
        for e in evictees:
            for step in range(n):
                x = (begin + step) % n
                if x in buf:
                    continue
                cand = (buf - {e}) | {x}
                score = (int(not cov.m[x, cur]), cov.uncovered_in(cand))
                if best_score is None or score > best_score:
                    best_score, best = score, cand
        if best is None:
            raise RuntimeError(f"no legal swap from {sorted(buf)}")
        states.append(best)
        cov.mark(best)
    return BufferStateSequence(n, states)


@dataclass
class IterationPlan:
    """Bucket schedule over a buffer sequence.

    ``state_offsets[k]`` is where state ``k``'s buckets begin in
    ``bucket_order``.  ``prefetch_points[k]`` is the count of buckets after
    which the swap leaving state ``k`` may be issued (``None`` for the final
    state).
    """

    buffer_seq: BufferStateSequence
    bucket_order: List[Bucket]
    state_offsets: List[int]
    prefetch_points: List[Optional[int]]

    @property
    def n(self) -> int:
        return self.buffer_seq.n

    @property
    def states(self) -> List[FrozenSet[int]]:
        return self.buffer_seq.states

    def segment(self, k: int) -> List[Bucket]:
        end = self.state_offsets[k + 1] if k + 1 < len(self.state_offsets) else len(self.bucket_order)
        return self.bucket_order[self.state_offsets[k]:end]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "states": [sorted(s) for s in self.states],
            "loads": [[e, l] for e, l in self.buffer_seq.loads],
            "bucket_order": [list(b) for b in self.bucket_order],
            "state_offsets": list(self.state_offsets),
            "prefetch_points": list(self.prefetch_points),
        }

    def to_json(self) -> str:
        # one bucket/state per line keeps fixtures diffable
        d = self.to_dict()
        lines = ["{", f'  "n": {d["n"]},']
        for key in ("states", "loads", "bucket_order"):
            rows = ",\n".join("    " + json.dumps(v) for v in d[key])
            lines.append(f'  "{key}": [\n{rows}\n  ],')
        lines.append(f'  "state_offsets": {json.dumps(d["state_offsets"])},')
        lines.append(f'  "prefetch_points": {json.dumps(d["prefetch_points"])}')
        lines.append("}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "IterationPlan":
        seq = BufferStateSequence(d["n"], [frozenset(s) for s in d["states"]])
        plan = cls(seq, [tuple(b) for b in d["bucket_order"]], list(d["state_offsets"]),
                   list(d["prefetch_points"]))
        check_plan_structure(plan)
        return plan

    @classmethod
    def from_json(cls, text: str) -> "IterationPlan":
        return cls.from_dict(json.loads(text))


def _evictions(states: Sequence[FrozenSet[int]]) -> List[int]:
    return [next(iter(a - b)) for a, b in zip(states, states[1:])]


def _assign_windows(states: Sequence[FrozenSet[int]]) -> Dict[Bucket, int]:
    """Reserve window buckets per non-final state.

    Each bucket is first offered to the earliest state holding both of its
    partitions, provided that state is not about to evict one of them.  States
    left with an empty or single-bucket window then steal buckets from states
    that can spare one, along augmenting chains, first up to one bucket each
    and then up to two.
    """
    last = len(states) - 1
    ev = _evictions(states)
    owner: Dict[Bucket, int] = {}
    win: Dict[int, List[Bucket]] = {k: [] for k in range(last)}
    seen_pairs: Set[Bucket] = set()
    for k, s in enumerate(states):
        for b in itertools.product(sorted(s), repeat=2):
            if b in seen_pairs:
                continue
            seen_pairs.add(b)
            if k < last and ev[k] not in b:
                owner[b] = k
                win[k].append(b)

    def candidates(k: int) -> List[Bucket]:
        p, q = sorted(states[k] - {ev[k]})
        return [(p, p), (p, q), (q, p), (q, q)]

    def move(b: Bucket, k: int) -> None:
        j = owner.get(b)
        if j is not None:
            win[j].remove(b)
        owner[b] = k
        win[k].append(b)

    def augment(k: int, visited: Set, floor: Dict[int, int]) -> bool:
        for b in candidates(k):
            if b in visited:
                continue
            visited.add(b)
            j = owner.get(b)
            if j is None or (j != k and len(win[j]) > floor[j]):
                move(b, k)
                return True
        for b in candidates(k):
            j = owner.get(b)
            if j is not None and j != k and ("state", j) not in visited:
                visited.add(("state", j))
                if augment(j, visited, floor):
                    move(b, k)
                    return True
        return False

    floor = {k: 0 for k in range(last)}
    for target in (1, 2):
        for k in range(last):
            while len(win[k]) < target and augment(k, set(), floor):
                pass
            floor[k] = min(len(win[k]), target)
    return owner


def plan_iteration_order(seq: BufferStateSequence, n: Optional[int] = None) -> IterationPlan:
    """Order every bucket so that each state finishes its evictee first.

    Within a non-final state the buckets touching the partition evicted next
    come first; the prefetch point follows them; the remaining buckets form the
    window that overlaps the swap.
    """
    n = seq.n if n is None else n
    if n != seq.n:
        raise PlanError(f"sequence is for n={seq.n}, not {n}")
    states = seq.states
    validate_states(states, n)
    if len(states) < 2:
        raise PlanError("a plan needs at least two buffer states")
    last = len(states) - 1
    ev = _evictions(states)
    owner = _assign_windows(states)

    done: Set[Bucket] = set()
    order: List[Bucket] = []
    offsets: List[int] = []
    prefetch: List[Optional[int]] = []

    for k, s in enumerate(states):
        offsets.append(len(order))
        if k == last:
            rest = sorted(b for b in itertools.product(sorted(s), repeat=2) if b not in done)
            order.extend(rest)
            done.update(rest)
            prefetch.append(None)
            continue
        e = ev[k]
        if k == 0:
            head = [(0, 1), (1, 1), (1, 0), (1, 2), (2, 1)] if e == 1 else []
            head += [b for p in sorted(s) for b in ((e, p), (p, e))]
        else:
            loaded = next(iter(s - states[k - 1]))
            head = [b for p in sorted(s - {loaded}) for b in ((e, p), (p, e))]
            head += [(e, loaded), (loaded, e)]
        for b in head:
            if b not in done and owner.get(b, k) == k:
                order.append(b)
                done.add(b)
        prefetch.append(len(order))
        window = sorted(
            b for b in itertools.product(sorted(s), repeat=2)
            if b not in done and e not in b and owner.get(b, k) == k
        )
        order.extend(window)
        done.update(window)

    missing = n * n - len(order)
    if missing:
        raise PlanError(f"sequence leaves {missing} buckets uncovered")
    plan = IterationPlan(seq, order, offsets, prefetch)
    check_plan_structure(plan)
    return plan


def check_plan_structure(plan: IterationPlan) -> None:
    n = plan.n
    states = plan.states
    validate_states(states, n)
    if len(states) < 2:
        raise PlanError("a plan needs at least two buffer states")
    if len(plan.bucket_order) != n * n or len(set(plan.bucket_order)) != n * n:
        raise PlanError("bucket_order is not a permutation of all n*n buckets")
    if len(plan.state_offsets) != len(states) or len(plan.prefetch_points) != len(states):
        raise PlanError("state_offsets/prefetch_points length must equal the state count")
    if plan.state_offsets[0] != 0 or any(a > b for a, b in zip(plan.state_offsets, plan.state_offsets[1:])):
        raise PlanError("state_offsets must start at 0 and be non-decreasing")
    for k, s in enumerate(states):
        for b in plan.segment(k):
            if b[0] not in s or b[1] not in s:
                raise PlanError(f"bucket {b} scheduled in state {k} without both partitions resident")


@dataclass
class PrefetchReport:
    ok: bool
    violating_states: List[int]
    window_sizes: List[int]
    # pairs that share non-consecutive states (informational only)
    reappearing_pairs: List[Tuple[int, int]] = field(default_factory=list)


def verify_prefetchable(plan: IterationPlan) -> PrefetchReport:
    """Check that every non-final state ends with at least one bucket free of its evictee.

    The window of a state is the run of buckets after its last bucket touching
    the partition evicted next; it is measured from ``bucket_order`` itself.
    """
    check_plan_structure(plan)
    states = plan.states
    ev = _evictions(states)
    sizes: List[int] = []
    bad: List[int] = []
    for k, e in enumerate(ev):
        seg = plan.segment(k)
        touching = [i for i, b in enumerate(seg) if e in b]
        size = len(seg) - (touching[-1] + 1 if touching else 0)
        sizes.append(size)
        if size == 0:
            bad.append(k)

    where: Dict[Tuple[int, int], List[int]] = {}
    for k, s in enumerate(states):
        for a, b in itertools.combinations(sorted(s), 2):
            where.setdefault((a, b), []).append(k)
    reappearing = sorted(p for p, ks in where.items() if any(y - x > 1 for x, y in zip(ks, ks[1:])))
    return PrefetchReport(not bad, bad, sizes, reappearing)


@dataclass
class IoAccount:
    io_times: int
    comm_volume: float
    volume_over_total: float


def io_accounting(seq: BufferStateSequence, total_size: float, n: Optional[int] = None) -> IoAccount:
    """Each buffer state costs one partition read of ``total_size / n`` bytes."""
    n = seq.n if n is None else n
    io = len(seq.states)
    return IoAccount(io, io * total_size / n, io / n)


def marius_fixture_n4() -> IterationPlan:
    """The n=4 order that trains every available bucket as soon as it can.

    Used as a negative example: after the initial state nothing is left to
    overlap with the swap.
    """
    states = [frozenset({0, 1, 2}), frozenset({0, 1, 3}), frozenset({0, 2, 3})]
    order = [(0, 0), (0, 1), (1, 0), (0, 2), (2, 0), (1, 1), (1, 2), (2, 1), (2, 2),
             (0, 3), (3, 0), (1, 3), (3, 1), (3, 3),
             (2, 3), (3, 2)]
    return IterationPlan(BufferStateSequence(4, states), order, [0, 9, 14], [0, 0, None])


@dataclass
class OracleResult:
    min_states: int
    witness: BufferStateSequence


def oracle_min_io(n: int, require_property1: bool) -> OracleResult:
    """Exact minimum state count by iterative-deepening search.

    The start state is fixed to ``{0, 1, 2}`` (any start is equivalent up to
    relabelling).  Each swap covers at most two new unordered pairs, which
    gives the admissible bound used for pruning.
    """
    if n < 4:
        raise ValueError(f"n must be >= 4, got {n}")
    if n > ORACLE_MAX_N:
        raise ValueError(f"oracle budget is n <= {ORACLE_MAX_N}, got {n}")
    pair_bit = {p: 1 << i for i, p in enumerate(itertools.combinations(range(n), 2))}
    full = (1 << len(pair_bit)) - 1

    def bit(a: int, b: int) -> int:
        return pair_bit[(a, b) if a < b else (b, a)]

    def bound(mask: int) -> int:
        return (len(pair_bit) - bin(mask).count("1") + 1) // 2

    start = frozenset({0, 1, 2})
    m0 = bit(0, 1) | bit(0, 2) | bit(1, 2)
    path: List[FrozenSet[int]] = [start]
    best_depth: Dict[Tuple, int] = {}

    def dfs(state, loaded, mask, depth, limit) -> bool:
        if mask == full:
            return True
        if depth + bound(mask) > limit:
            return False
        key = (state, loaded, mask)
        if best_depth.get(key, limit + 1) <= depth:
            return False
        best_depth[key] = depth
        for e in sorted(state):
            if require_property1 and e == loaded:
                continue
            keep = state - {e}
            for x in range(n):
                if x in state:
                    continue
                gain = 0
                for k in keep:
                    gain |= bit(k, x)
                if mask | gain == mask:
                    continue
                nxt = keep | {x}
                path.append(nxt)
                if dfs(nxt, x, mask | gain, depth + 1, limit):
                    return True
                path.pop()
        return False

    limit = 1 + bound(m0)
    while True:
        best_depth.clear()
        if dfs(start, None, m0, 1, limit):
            return OracleResult(len(path), BufferStateSequence(n, list(path)))
        limit += 1
