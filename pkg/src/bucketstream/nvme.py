"""Deterministic NVMe queue-pair simulator.

Commands move 4 KB pages between a backing file and a host buffer through
submission/completion rings.  Concurrency among the workers that share a queue
is modelled, not raced: a seeded permutation decides the order in which
workers take locks or bump the shared completion counter, so a run is a pure
function of its inputs and seed.

Three knobs select how a batch is driven:

* enqueue: every worker atomically claims the SQ tail (one lock event each),
  or slots ``tail_old + i`` are precomputed and written without locks;
* SQ doorbell: rung by every worker, or once by worker 0 after the batch;
* completion: every worker rings the CQ head doorbell for its own entry, or
  the last worker to increment the shared poll counter rings it once.
"""
from __future__ import annotations

import hashlib
import itertools
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

PAGE_SIZE = 4096
READ, WRITE = "read", "write"

ENQUEUE_MODES = ("per-command-atomic", "batch-precomputed")
DOORBELL_MODES = ("per-command", "full-coalesced")
POLLING_MODES = ("per-thread", "batch-counter")


class QueueFullError(RuntimeError):
    pass


class AlignmentError(ValueError):
    pass


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class NvmeCommand:
    opcode: str
    device_offset: int
    length: int
    buffer_offset: int
    cid: int


@dataclass(frozen=True)
class AccessStrategy:
    enqueue_mode: str = "batch-precomputed"
    doorbell_mode: str = "full-coalesced"
    polling_mode: str = "batch-counter"

    def __post_init__(self):
        if self.enqueue_mode not in ENQUEUE_MODES:
            raise ValueError(f"enqueue_mode must be one of {ENQUEUE_MODES}")
        if self.doorbell_mode not in DOORBELL_MODES:
            raise ValueError(f"doorbell_mode must be one of {DOORBELL_MODES}")
        if self.polling_mode not in POLLING_MODES:
            raise ValueError(f"polling_mode must be one of {POLLING_MODES}")

    @property
    def label(self) -> str:
        return f"{self.enqueue_mode}/{self.doorbell_mode}/{self.polling_mode}"

    @classmethod
    def naive(cls) -> "AccessStrategy":
        return cls("per-command-atomic", "per-command", "per-thread")

    @classmethod
    def optimized(cls) -> "AccessStrategy":
        return cls()


def all_strategies() -> List[AccessStrategy]:
    return [AccessStrategy(*combo) for combo in itertools.product(ENQUEUE_MODES, DOORBELL_MODES, POLLING_MODES)]


@dataclass
class CommandBatch:
    """Column form of a command list; this is what the rings operate on."""

    opcode: str
    device_offset: np.ndarray
    buffer_offset: np.ndarray
    cid: np.ndarray
    page_size: int = PAGE_SIZE

    def __len__(self) -> int:
        return int(self.cid.shape[0])

    @classmethod
    def from_commands(cls, cmds: Sequence[NvmeCommand], page_size: int = PAGE_SIZE) -> "CommandBatch":
        if not cmds:
            raise ValueError("empty command batch")
        ops = {c.opcode for c in cmds}
        if len(ops) != 1 or not ops <= {READ, WRITE}:
            raise ValueError(f"a batch must hold a single opcode (read or write), got {sorted(ops)}")
        for c in cmds:
            if c.length != page_size or c.device_offset % page_size or c.buffer_offset % page_size:
                raise AlignmentError(f"command {c.cid}: offsets and length must be whole {page_size}-byte pages")
        return cls(ops.pop(),
                   np.array([c.device_offset for c in cmds], dtype=np.int64),
                   np.array([c.buffer_offset for c in cmds], dtype=np.int64),
                   np.array([c.cid for c in cmds], dtype=np.int64), page_size)

    def commands(self) -> List[NvmeCommand]:
        return [NvmeCommand(self.opcode, int(d), self.page_size, int(b), int(c))
                for d, b, c in zip(self.device_offset, self.buffer_offset, self.cid)]


@dataclass
class NvmeQueuePair:
    depth: int = 1024
    sq_tail: int = 0
    sq_head: int = 0
    cq_tail: int = 0
    cq_head: int = 0
    sq_doorbell_writes: int = 0
    cq_doorbell_writes: int = 0
    lock_events: int = 0
    poll_counter: int = 0
    commands: int = 0
    batches: int = 0
    last_incrementer: Optional[int] = None
    last_slots: Optional[np.ndarray] = None
    sq_cids: np.ndarray = field(default=None, repr=False)
    cq_cids: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("queue depth must be >= 2")
        self.sq_cids = np.full(self.depth, -1, dtype=np.int64)
        self.cq_cids = np.full(self.depth, -1, dtype=np.int64)
        self._digest = hashlib.blake2b(digest_size=16)

    @property
    def free_slots(self) -> int:
        return self.depth - 1 - (self.sq_tail - self.sq_head) % self.depth

    @property
    def event_digest(self) -> str:
        return self._digest.hexdigest()


@dataclass
class BatchReport:
    commands: int
    sq_rings: int
    cq_rings: int
    lock_events: int
    slots: np.ndarray
    completion_order: np.ndarray
    last_incrementer: Optional[int]


def submit_batch(qp: NvmeQueuePair, cmds: Union[CommandBatch, Sequence[NvmeCommand]],
                 strat: AccessStrategy, workers: int, device: np.ndarray, buffer: np.ndarray,
                 rng: np.random.Generator) -> BatchReport:
    """Drive one batch through the queue pair and apply it to ``device``/``buffer``.

    ``device`` and ``buffer`` are uint8 arrays reshaped as ``(pages, page_size)``.
    Commands are executed in SQ slot order, which is also completion order.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    batch = cmds if isinstance(cmds, CommandBatch) else CommandBatch.from_commands(cmds)
    k = len(batch)
    if k == 0:
        raise ValueError("empty command batch")
    if k > qp.free_slots:
        raise QueueFullError(f"batch of {k} exceeds {qp.free_slots} free SQ slots")
    ps = batch.page_size
    if (batch.device_offset % ps).any() or (batch.buffer_offset % ps).any():
        raise AlignmentError(f"command offsets must be multiples of {ps}")

    q = qp.depth
    tail_old = qp.sq_tail
    lock_events = 0
    if strat.enqueue_mode == "batch-precomputed":
        # worker i writes slot tail_old + i: no two workers touch the same slot
        order = np.arange(k)
        slots = (tail_old + order) % q
    else:
        # workers win the tail lock in a scheduler-chosen order
        order = rng.permutation(k)
        slots = np.empty(k, dtype=np.int64)
        slots[order] = (tail_old + np.arange(k)) % q
        lock_events = k
    qp.sq_cids[slots] = batch.cid
    qp.sq_tail = (tail_old + k) % q
    sq_rings = 1 if strat.doorbell_mode == "full-coalesced" else k

    # device consumes the SQ in slot order
    seq = (tail_old + np.arange(k)) % q
    executed = qp.sq_cids[seq]
    by_slot = np.argsort((slots - tail_old) % q, kind="stable")
    dev_pages = batch.device_offset[by_slot] // ps
    buf_pages = batch.buffer_offset[by_slot] // ps
    if batch.opcode == READ:
        buffer[buf_pages] = device[dev_pages]
    elif batch.opcode == WRITE:
        device[dev_pages] = buffer[buf_pages]
    else:
        raise ValueError(f"unknown opcode {batch.opcode!r}")
    qp.sq_head = (qp.sq_head + k) % q
    cq_seq = (qp.cq_tail + np.arange(k)) % q
    qp.cq_cids[cq_seq] = executed
    qp.cq_tail = (qp.cq_tail + k) % q

    completed = qp.cq_cids[cq_seq]
    if np.unique(completed).size != k or not np.array_equal(np.sort(completed), np.sort(batch.cid)):
        raise RuntimeError("completion set differs from submission set")

    last = None
    if strat.polling_mode == "batch-counter":
        arrivals = rng.permutation(k) % workers
        qp.poll_counter += k
        last = int(arrivals[-1])
        cq_rings = 1
    else:
        cq_rings = k
    qp.cq_head = (qp.cq_head + k) % q

    qp.sq_doorbell_writes += sq_rings
    qp.cq_doorbell_writes += cq_rings
    qp.lock_events += lock_events
    qp.commands += k
    qp.batches += 1
    qp.last_incrementer = last
    qp.last_slots = slots
    qp._digest.update(slots.astype("<i8").tobytes())
    qp._digest.update(completed.astype("<i8").tobytes())
    return BatchReport(k, sq_rings, cq_rings, lock_events, slots, completed, last)


@dataclass
class NvmeCost:
    """Latency model: per-doorbell cost plus bandwidth split evenly across queues."""

    page_size: int = PAGE_SIZE
    bandwidth: float = 3.06e9
    ring_latency: float = 1e-6
    queue_count: int = 8
    queue_parallelism: float = 1.0

    def validate(self) -> None:
        for name in ("page_size", "bandwidth", "ring_latency", "queue_count", "queue_parallelism"):
            if not getattr(self, name) > 0:
                raise CostError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def page_time(self) -> float:
        return self.page_size * self.queue_count / self.bandwidth


@dataclass
class NvmeReport:
    commands: int = 0
    sq_rings: int = 0
    cq_rings: int = 0
    lock_events: int = 0
    batches: int = 0
    modeled_seconds: float = 0.0
    rings_per_queue: List[int] = field(default_factory=list)
    pages_per_queue: List[int] = field(default_factory=list)
    event_digest: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def merge(self, other: "NvmeReport") -> "NvmeReport":
        width = max(len(self.rings_per_queue), len(other.rings_per_queue))

        def add(a, b):
            return [x + y for x, y in itertools.zip_longest(a, b, fillvalue=0)][:width]

        digest = hashlib.blake2b((self.event_digest + other.event_digest).encode(), digest_size=16).hexdigest()
        return NvmeReport(
            self.commands + other.commands, self.sq_rings + other.sq_rings,
            self.cq_rings + other.cq_rings, self.lock_events + other.lock_events,
            self.batches + other.batches, self.modeled_seconds + other.modeled_seconds,
            add(self.rings_per_queue, other.rings_per_queue),
            add(self.pages_per_queue, other.pages_per_queue), digest)


def model_time(report: NvmeReport, cost: NvmeCost) -> float:
    cost.validate()
    if not report.rings_per_queue:
        return 0.0
    per_queue = [rings * cost.ring_latency + pages * cost.page_time / cost.queue_parallelism
                 for rings, pages in zip(report.rings_per_queue, report.pages_per_queue)]
    return max(per_queue)


@dataclass
class NvmeConfig:
    page_size: int = PAGE_SIZE
    depth: int = 1024
    queue_count: int = 8
    batch_size: int = 32
    workers: int = 32
    seed: int = 0
    ring_latency: float = 1e-6
    bandwidth: float = 3.06e9

    def cost(self) -> NvmeCost:
        return NvmeCost(self.page_size, self.bandwidth, self.ring_latency, self.queue_count)


def _stripe(npages: int, base_page: int, opcode: str, cfg: NvmeConfig, cid0: int):
    """Round-robin pages over queues and cut each queue's share into batches."""
    pages = np.arange(npages, dtype=np.int64)
    for qi in range(cfg.queue_count):
        mine = pages[qi::cfg.queue_count]
        for start in range(0, mine.size, cfg.batch_size):
            chunk = mine[start:start + cfg.batch_size]
            yield qi, CommandBatch(opcode, (base_page + chunk) * cfg.page_size,
                                   chunk * cfg.page_size, cid0 + chunk, cfg.page_size)


def transfer_pages(buffer: np.ndarray, device: np.ndarray, base_page: int, direction: str,
                   strat: AccessStrategy, cfg: NvmeConfig, queues: Optional[List[NvmeQueuePair]] = None,
                   rng: Optional[np.random.Generator] = None) -> NvmeReport:
    """Move ``buffer`` (uint8, page multiple) to or from ``device`` starting at ``base_page``."""
    if direction not in ("load", "offload"):
        raise ValueError("direction must be 'load' or 'offload'")
    ps = cfg.page_size
    if buffer.size % ps:
        raise AlignmentError(f"buffer length {buffer.size} is not a multiple of {ps}")
    queues = queues or [NvmeQueuePair(cfg.depth) for _ in range(cfg.queue_count)]
    if len(queues) != cfg.queue_count:
        raise ValueError("queue list length must equal queue_count")
    rng = rng or np.random.default_rng(cfg.seed)
    before = [(qp.sq_doorbell_writes, qp.cq_doorbell_writes, qp.lock_events, qp.commands, qp.batches) for qp in queues]
    bufp = buffer.reshape(-1, ps)
    devp = device.reshape(-1, ps)
    opcode = READ if direction == "load" else WRITE
    for qi, batch in _stripe(bufp.shape[0], base_page, opcode, cfg, 0):
        submit_batch(queues[qi], batch, strat, cfg.workers, devp, bufp, rng)

    rep = NvmeReport()
    for qp, (sq0, cq0, lk0, c0, b0) in zip(queues, before):
        sq, cq = qp.sq_doorbell_writes - sq0, qp.cq_doorbell_writes - cq0
        rep.sq_rings += sq
        rep.cq_rings += cq
        rep.lock_events += qp.lock_events - lk0
        rep.commands += qp.commands - c0
        rep.batches += qp.batches - b0
        rep.rings_per_queue.append(sq + cq)
        rep.pages_per_queue.append(qp.commands - c0)
    digest = hashlib.blake2b(digest_size=16)
    for qp in queues:
        digest.update(qp.event_digest.encode())
    rep.event_digest = digest.hexdigest()
    rep.modeled_seconds = model_time(rep, cfg.cost())
    return rep


def transfer_partition(path: os.PathLike, direction: str, partition_bytes: int,
                       strat: AccessStrategy, cfg: Optional[NvmeConfig] = None,
                       buffer: Optional[np.ndarray] = None, offset: int = 0,
                       queues: Optional[List[NvmeQueuePair]] = None):
    """Load a file region into a host buffer, or offload a buffer to it, page by page.

    The file is the device media.  ``partition_bytes`` is rounded up to whole
    pages; the pad reads as zeros and is never written past the logical end.
    Returns ``(buffer, report)``; the buffer is padded to a page multiple.
    """
    cfg = cfg or NvmeConfig()
    ps = cfg.page_size
    if offset % ps:
        raise AlignmentError(f"file offset {offset} is not page aligned")
    if partition_bytes < 0:
        raise ValueError("partition_bytes must be non-negative")
    padded = math.ceil(partition_bytes / ps) * ps
    path = Path(path)
    device = np.zeros(padded, dtype=np.uint8)
    if direction == "load":
        try:
            raw = np.fromfile(path, dtype=np.uint8, count=partition_bytes, offset=offset)
        except OSError as exc:
            raise IOError(f"cannot read {path}: {exc}") from exc
        if raw.size != partition_bytes:
            raise IOError(f"{path}: short read ({raw.size}/{partition_bytes} bytes)")
        device[:partition_bytes] = raw
        host = np.zeros(padded, dtype=np.uint8)
        rep = transfer_pages(host, device, 0, "load", strat, cfg, queues)
        return host, rep
    if direction != "offload":
        raise ValueError("direction must be 'load' or 'offload'")
    if buffer is None:
        raise ValueError("offload needs a buffer")
    host = np.zeros(padded, dtype=np.uint8)
    src = np.frombuffer(buffer, dtype=np.uint8) if not isinstance(buffer, np.ndarray) else buffer.view(np.uint8).reshape(-1)
    host[:min(src.size, padded)] = src[:padded]
    rep = transfer_pages(host, device, 0, "offload", strat, cfg, queues)
    try:
        mode = "r+b" if path.exists() else "wb"
        with open(path, mode) as fh:
            fh.seek(offset)
            fh.write(device[:partition_bytes].tobytes())
    except OSError as exc:
        raise IOError(f"cannot write {path}: {exc}") from exc
    return host, rep


class NvmeBackend:
    """Adapter exposing the simulator as the partition store's read/write functions."""

    def __init__(self, cfg: Optional[NvmeConfig] = None, strat: Optional[AccessStrategy] = None):
        self.cfg = cfg or NvmeConfig()
        self.strat = strat or AccessStrategy.optimized()
        self.queues = [NvmeQueuePair(self.cfg.depth) for _ in range(self.cfg.queue_count)]
        self.reports: List[tuple] = []

    def read(self, path: Path, offset: int, length: int) -> bytes:
        host, rep = transfer_partition(path, "load", length, self.strat, self.cfg, offset=offset, queues=self.queues)
        self.reports.append(("load", Path(path).name, rep))
        return host[:length].tobytes()

    def write(self, path: Path, offset: int, data: bytes) -> None:
        _, rep = transfer_partition(path, "offload", len(data), self.strat, self.cfg,
                                    buffer=np.frombuffer(data, dtype=np.uint8), offset=offset, queues=self.queues)
        path = Path(path)
        if path.stat().st_size > offset + len(data):
            os.truncate(path, offset + len(data))
        self.reports.append(("offload", path.name, rep))

    def total(self) -> NvmeReport:
        out = NvmeReport()
        for _, _, rep in self.reports:
            out = out.merge(rep)
        return out
