"""Epoch orchestration over a 3-slot partition buffer with a modeled I/O timeline.

Two serial engines share one clock: compute trains buckets in plan order, and
the transfer engine performs partition swaps.  A swap leaving state ``k`` is
issued at that state's prefetch point (or, for the baseline, once the state's
last bucket finishes) and costs ``partition_bytes / (w + r)``: the outgoing
partition is written while the incoming one is read.  A bucket cannot start
until both of its partitions are resident; any wait is a stall.

The three initial reads (``partition_bytes / r`` each) and the final write-back
(``partition_bytes / w`` each) are reported separately from swap stalls.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .embedding import (AdagradState, ScoreModel, adagrad_step, batch_gradients, batch_loss,
                        gather, sample_negatives)
from .graph_store import EmbeddingPartition, Graph, PartitionPlan, PartitionStore
from .ordering import IterationPlan

FLOAT_BYTES = 4


@dataclass
class CostModel:
    """t: seconds per edge; w/r: write/read bytes per second; M: buffer bytes; d: dimension."""

    t: float = 1e-7
    w: float = 2e9
    r: float = 3e9
    M: float = 15e9
    d: int = 100

    def __post_init__(self):
        for name in ("t", "w", "r", "M", "d"):
            if not getattr(self, name) > 0:
                raise ValueError(f"cost parameter {name} must be positive, got {getattr(self, name)}")

    def exchange_seconds(self, partition_bytes: float) -> float:
        return partition_bytes / (self.w + self.r)


@dataclass
class CoverageCheck:
    lhs: float
    rhs: float
    covered: bool


def theorem3_check(num_edges: float, num_nodes: float, cost: CostModel) -> CoverageCheck:
    """Edge density against the threshold above which swaps hide under compute.

    With partitions sized to fill a third of the buffer (embeddings plus
    optimizer state), each swap must finish within two average buckets.
    """
    if num_edges <= 0 or num_nodes <= 0:
        raise ValueError("edge and node counts must be positive")
    lhs = num_edges / num_nodes ** 2
    rhs = 96 * cost.d ** 2 / (cost.M * cost.t * (cost.w + cost.r))
    return CoverageCheck(lhs, rhs, lhs >= rhs)


def partitions_for_buffer(num_nodes: float, cost: CostModel) -> float:
    """Smallest partition count whose E+S partitions fit three to a buffer of ``M`` bytes."""
    return num_nodes * cost.d * FLOAT_BYTES * 2 / (cost.M / 3)


@dataclass
class TimelineEvent:
    kind: str  # compute | load | offload | stall
    start: float
    end: float
    label: str
    state: int = -1
    partitions: Tuple[int, ...] = ()

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class OverlapTimeline:
    events: List[TimelineEvent] = field(default_factory=list)
    compute_s: float = 0.0
    transfer_s: float = 0.0
    stall_s: float = 0.0
    fill_s: float = 0.0
    flush_s: float = 0.0
    epoch_s: float = 0.0
    stall_by_state: List[float] = field(default_factory=list)

    @property
    def utilization(self) -> float:
        busy = self.compute_s + self.stall_s
        return 1.0 if busy == 0 else self.compute_s / busy

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "start", "end", "label"])
        for e in self.events:
            w.writerow([e.kind, repr(float(e.start)), repr(float(e.end)), e.label])
        return buf.getvalue()


def utilization_report(tl: OverlapTimeline) -> dict:
    if not tl.events:
        raise ValueError("empty timeline")
    return {
        "compute_s": tl.compute_s,
        "transfer_s": tl.transfer_s,
        "stall_s": tl.stall_s,
        "fill_s": tl.fill_s,
        "flush_s": tl.flush_s,
        "epoch_s": tl.epoch_s,
        "utilization": tl.utilization,
        "duty_cycle": tl.compute_s / tl.epoch_s if tl.epoch_s else 1.0,
        "stall_by_state": list(tl.stall_by_state),
    }


def check_dependencies(tl: OverlapTimeline) -> None:
    """Replay a timeline and fail if a bucket ran outside the residency of its partitions.

    A partition is usable from the end of its load until the start of its offload.
    """
    spans: Dict[int, List[List[float]]] = {}
    for e in sorted(tl.events, key=lambda e: (e.start, e.kind != "offload")):
        if e.kind == "load":
            spans.setdefault(e.partitions[0], []).append([e.end, float("inf")])
        elif e.kind == "offload":
            open_spans = spans.get(e.partitions[0])
            if not open_spans or open_spans[-1][1] != float("inf"):
                raise AssertionError(f"{e.label} at {e.start} but partition {e.partitions[0]} is not resident")
            open_spans[-1][1] = e.start
    eps = 1e-12
    for e in tl.events:
        if e.kind != "compute":
            continue
        for p in e.partitions:
            if not any(lo <= e.start + eps and e.end <= hi + eps for lo, hi in spans.get(p, [])):
                raise AssertionError(f"{e.label} [{e.start}, {e.end}] runs while partition {p} is not resident")


class Trainer:
    """Real training against a 3-slot buffer that swaps through the partition store."""

    def __init__(self, store: PartitionStore, graph: Graph, pplan: PartitionPlan, model: ScoreModel,
                 lr: float = 0.1, batch_size: int = 1000, negatives: int = 64, seed: int = 0,
                 corrupt: str = "dst"):
        if store.n != pplan.n or store.num_nodes != pplan.num_nodes or store.dim != model.dim:
            raise ValueError("store does not match the partition plan / model")
        if model.uses_relations and not graph.typed:
            raise ValueError(f"{model.kind} needs a typed graph")
        self.store, self.graph, self.pplan, self.model = store, graph, pplan, model
        self.opt = AdagradState(lr)
        self.batch_size, self.negatives, self.corrupt = batch_size, negatives, corrupt
        self.seed = seed
        self.epoch = 0
        ps = pplan.part_size
        self.emb = np.zeros((3 * ps, model.dim), dtype=np.float32)
        self.acc = np.zeros_like(self.emb)
        self.slot_of: Dict[int, int] = {}
        self.rel = self.rel_acc = None
        if model.uses_relations:
            rel = store.load_relations()
            self.rel, self.rel_acc = rel.embeddings.copy(), rel.opt_states.copy()
        self.rng = np.random.default_rng(seed)

    def begin_epoch(self) -> None:
        self.rng = np.random.default_rng((self.seed, self.epoch))
        self.loss_sum = 0.0
        self.edges_seen = 0
        self.trained: List[Tuple[int, int]] = []

    def end_epoch(self) -> None:
        if self.rel is not None:
            self.store.save_relations(EmbeddingPartition(-1, self.model.dim, self.rel.shape[0], self.rel, self.rel_acc))
        self.epoch += 1

    def load(self, p: int) -> None:
        free = sorted(set(range(3)) - set(self.slot_of.values()))
        if not free:
            raise RuntimeError("buffer full")
        part = self.store.load_partition(p)
        s = free[0]
        base = s * self.pplan.part_size
        self.emb[base:base + part.node_count] = part.embeddings
        self.acc[base:base + part.node_count] = part.opt_states
        self.slot_of[p] = s

    def evict(self, p: int) -> None:
        s = self.slot_of.pop(p)
        base = s * self.pplan.part_size
        count = self.pplan.node_count(p)
        self.store.save_partition(EmbeddingPartition(
            p, self.model.dim, count, self.emb[base:base + count].copy(), self.acc[base:base + count].copy()))

    def local(self, nodes: np.ndarray) -> np.ndarray:
        ps = self.pplan.part_size
        parts = nodes // ps
        table = np.full(self.pplan.n, -1, dtype=np.int64)
        for p, s in self.slot_of.items():
            table[p] = s
        slots = table[parts]
        if (slots < 0).any():
            raise RuntimeError("edge references a partition that is not resident")
        return slots * ps + (nodes - parts * ps)

    def train_bucket(self, i: int, j: int) -> float:
        pos = self.pplan.bucket(i, j)
        self.trained.append((i, j))
        if pos.size == 0:
            return 0.0
        pos = pos[self.rng.permutation(pos.size)]
        g = self.graph
        resident = [self.pplan.node_range(p) for p in sorted(self.slot_of)]
        total = 0.0
        for lo in range(0, pos.size, self.batch_size):
            idx = pos[lo:lo + self.batch_size]
            src, dst = self.local(g.src[idx]), self.local(g.dst[idx])
            rel = g.rel[idx] if self.model.uses_relations else None
            negs = self.local(sample_negatives(resident, self.negatives, idx.size, self.rng))
            b = gather(self.model, self.emb, self.rel, src, rel, dst, negs, self.corrupt)
            total += batch_loss(self.model, b)
            grads = batch_gradients(self.model, b)
            adagrad_step(self.emb, self.acc, grads.node_rows, grads.node_grad, self.opt)
            if grads.rel_rows is not None:
                adagrad_step(self.rel, self.rel_acc, grads.rel_rows, grads.rel_grad, self.opt)
        self.loss_sum += total
        self.edges_seen += pos.size
        return total


@dataclass
class EpochResult:
    timeline: OverlapTimeline
    loss: Optional[float]
    edges: int
    buckets: List[Tuple[int, int]]


def run_epoch(plan: IterationPlan, cost: CostModel, mode: str = "cost-only",
              bucket_sizes: Optional[np.ndarray] = None, partition_bytes: Optional[float] = None,
              trainer: Optional[Trainer] = None, prefetch: bool = True, timing: str = "modeled") -> EpochResult:
    """Process every bucket of ``plan`` once and build the overlap timeline.

    ``mode="cost-only"`` charges ``bucket_sizes[i, j] * t`` per bucket and moves
    no data.  ``mode="real-train"`` trains through ``trainer``, performing each
    swap on the store; the timeline still uses modeled durations unless
    ``timing="measured"``, which charges measured wall time per bucket.
    """
    n = plan.n
    if mode == "real-train":
        if trainer is None:
            raise ValueError("real-train mode needs a trainer")
        if trainer.pplan.n != n:
            raise ValueError(f"plan is for n={n} but the store has n={trainer.pplan.n}")
        if bucket_sizes is None:
            bucket_sizes = trainer.pplan.bucket_sizes
        if partition_bytes is None:
            partition_bytes = 2 * trainer.pplan.part_size * trainer.model.dim * FLOAT_BYTES
    elif mode != "cost-only":
        raise ValueError("mode must be 'cost-only' or 'real-train'")
    if timing not in ("modeled", "measured"):
        raise ValueError("timing must be 'modeled' or 'measured'")
    if bucket_sizes is None or partition_bytes is None:
        raise ValueError("cost-only mode needs bucket_sizes and partition_bytes")
    bucket_sizes = np.asarray(bucket_sizes, dtype=np.float64)
    if bucket_sizes.shape != (n, n):
        raise ValueError(f"bucket_sizes must be {n}x{n}")

    tl = OverlapTimeline()
    ev = tl.events
    states = plan.states
    ready: Dict[int, float] = {}
    read_s = partition_bytes / cost.r
    write_s = partition_bytes / cost.w
    swap_s = cost.exchange_seconds(partition_bytes)

    # initial fill, one read at a time
    clock_x = 0.0
    for p in sorted(states[0]):
        ev.append(TimelineEvent("load", clock_x, clock_x + read_s, f"load P{p}", 0, (p,)))
        clock_x += read_s
        ready[p] = clock_x
        if trainer is not None:
            trainer.load(p)
    fill_ready = set(states[0])
    if trainer is not None:
        trainer.begin_epoch()

    clock_c = 0.0
    stall_by_state = [0.0] * len(states)
    total_loss = 0.0
    swaps = plan.buffer_seq.transitions()

    def issue_swap(k: int, at: float) -> None:
        nonlocal clock_x
        out, inc = swaps[k]
        start = max(at, clock_x)
        end = start + swap_s
        ev.append(TimelineEvent("offload", start, end, f"offload P{out}", k, (out,)))
        ev.append(TimelineEvent("load", start, end, f"load P{inc}", k, (inc,)))
        clock_x = end
        ready.pop(out, None)
        fill_ready.discard(out)
        ready[inc] = end
        tl.transfer_s += swap_s
        if trainer is not None:
            trainer.evict(out)
            trainer.load(inc)

    for k in range(len(states)):
        seg_start = plan.state_offsets[k]
        seg = plan.segment(k)
        pp = plan.prefetch_points[k]
        for idx, (i, j) in enumerate(seg, start=seg_start):
            if prefetch and pp is not None and idx == pp:
                issue_swap(k, clock_c)
            start = max(clock_c, ready[i], ready[j])
            if start > clock_c:
                wait = start - clock_c
                binding = i if ready[i] >= ready[j] else j
                if binding in fill_ready:
                    tl.fill_s += wait
                else:
                    tl.stall_s += wait
                    stall_by_state[k] += wait
                ev.append(TimelineEvent("stall", clock_c, start, f"wait ({i},{j})", k, (i, j)))
            if trainer is not None:
                t0 = time.perf_counter()
                total_loss += trainer.train_bucket(i, j)
                measured = time.perf_counter() - t0
            dur = measured if (trainer is not None and timing == "measured") else bucket_sizes[i, j] * cost.t
            ev.append(TimelineEvent("compute", start, start + dur, f"bucket ({i},{j})", k, (i, j)))
            clock_c = start + dur
            tl.compute_s += dur
        if pp is not None and (not prefetch or pp == seg_start + len(seg)):
            issue_swap(k, clock_c)

    # write back whatever is still resident
    flush_start = max(clock_c, clock_x)
    clock_f = flush_start
    for p in sorted(states[-1]):
        ev.append(TimelineEvent("offload", clock_f, clock_f + write_s, f"offload P{p}", len(states) - 1, (p,)))
        clock_f += write_s
        if trainer is not None:
            trainer.evict(p)
    tl.flush_s = clock_f - flush_start
    tl.epoch_s = clock_f
    tl.stall_by_state = stall_by_state
    ev.sort(key=lambda e: (e.start, e.end, e.kind, e.label))

    loss = edges = None
    buckets = list(plan.bucket_order)
    if trainer is not None:
        edges = trainer.edges_seen
        loss = trainer.loss_sum / max(edges, 1)
        buckets = list(trainer.trained)
        trainer.end_epoch()
    return EpochResult(tl, loss, edges or int(bucket_sizes.sum()), buckets)


@dataclass
class SweepPoint:
    density_ratio: float
    num_edges: float
    check: CoverageCheck
    stall_s: float
    stall_s_baseline: float
    epoch_s: float
    epoch_s_baseline: float
    utilization: float


def uniform_sweep(plan: IterationPlan, cost: CostModel, ratios: Sequence[float]) -> List[SweepPoint]:
    """Cost-only runs on uniform buckets at edge densities ``ratio * threshold``.

    Node count and partition size follow from ``M``: partitions hold a third of
    the buffer, and ``n`` partitions cover all nodes.
    """
    n = plan.n
    num_nodes = cost.M / 3 * n / (cost.d * FLOAT_BYTES * 2)
    partition_bytes = cost.M / 3
    rhs = theorem3_check(1.0, 1.0, cost).rhs
    out = []
    for ratio in ratios:
        num_edges = ratio * rhs * num_nodes ** 2
        sizes = np.full((n, n), num_edges / n ** 2)
        check = theorem3_check(num_edges, num_nodes, cost)
        a = run_epoch(plan, cost, "cost-only", sizes, partition_bytes, prefetch=True).timeline
        b = run_epoch(plan, cost, "cost-only", sizes, partition_bytes, prefetch=False).timeline
        out.append(SweepPoint(float(ratio), num_edges, check, a.stall_s, b.stall_s, a.epoch_s, b.epoch_s,
                              a.utilization))
    return out
