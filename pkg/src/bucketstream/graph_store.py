"""Edge-list ingestion, node/edge partitioning and the file-backed partition store.

Each node partition lives in one file, ``part_<id>.bin``, holding the embedding
matrix immediately followed by the Adagrad accumulator matrix, both as raw
little-endian float32.  Loading or saving a partition is a single contiguous
byte request against that file.
"""
from __future__ import annotations

import json
import math
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

FLOAT = np.dtype("<f4")
FLOAT_BYTES = FLOAT.itemsize
META_NAME = "store.json"
RELATIONS_NAME = "relations.bin"

FORMATS = ("tsv-triples", "tsv-pairs", "tsv-labels")


class GraphFormatError(ValueError):
    """Raised for malformed edge-list input."""


class StoreError(IOError):
    """Raised when a partition file is missing, short or cannot be written."""


class ShapeError(ValueError):
    pass


@dataclass
class Graph:
    """A (possibly multi-relation) edge list with dense integer ids.

    ``rel`` is ``None`` for untyped graphs; otherwise it is aligned with
    ``src`` and ``dst``.
    """

    num_nodes: int
    num_relations: int
    src: np.ndarray
    dst: np.ndarray
    rel: Optional[np.ndarray] = None
    node_labels: Optional[List[str]] = None
    relation_labels: Optional[List[str]] = None

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        if self.rel is not None:
            self.rel = np.asarray(self.rel, dtype=np.int64)
        self.validate()

    @property
    def num_edges(self) -> int:
        return int(self.src.shape[0])

    @property
    def typed(self) -> bool:
        return self.rel is not None

    @property
    def edges(self) -> List[Tuple[int, Optional[int], int]]:
        rel = self.rel if self.rel is not None else [None] * self.num_edges
        return [
            (int(s), None if r is None else int(r), int(d))
            for s, r, d in zip(self.src, rel, self.dst)
        ]

    def validate(self) -> None:
        if self.num_edges == 0:
            raise GraphFormatError("graph has no edges")
        if self.src.shape != self.dst.shape:
            raise GraphFormatError("src/dst length mismatch")
        lo = min(self.src.min(), self.dst.min())
        hi = max(self.src.max(), self.dst.max())
        if lo < 0 or hi >= self.num_nodes:
            raise GraphFormatError(f"node id out of range [0, {self.num_nodes})")
        if self.rel is not None:
            if self.rel.shape != self.src.shape:
                raise GraphFormatError("rel length mismatch")
            if self.rel.min() < 0 or self.rel.max() >= self.num_relations:
                raise GraphFormatError(f"relation id out of range [0, {self.num_relations})")
        elif self.num_relations != 0:
            raise GraphFormatError("untyped graph must have num_relations=0")

    def subset(self, positions: np.ndarray) -> "Graph":
        """Graph with the same id space restricted to the given edge positions."""
        return Graph(
            self.num_nodes,
            self.num_relations,
            self.src[positions],
            self.dst[positions],
            None if self.rel is None else self.rel[positions],
            self.node_labels,
            self.relation_labels,
        )

    def save(self, path: os.PathLike) -> None:
        arrays = {"src": self.src, "dst": self.dst,
                  "counts": np.array([self.num_nodes, self.num_relations])}
        if self.rel is not None:
            arrays["rel"] = self.rel
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path: os.PathLike) -> "Graph":
        with np.load(path) as z:
            num_nodes, num_relations = (int(x) for x in z["counts"])
            rel = z["rel"] if "rel" in z.files else None
            return cls(num_nodes, num_relations, z["src"], z["dst"], rel)


def _dense_ids(tokens: Sequence[str]) -> Tuple[np.ndarray, List[str]]:
    mapping: Dict[str, int] = {}
    out = np.empty(len(tokens), dtype=np.int64)
    for i, tok in enumerate(tokens):
        out[i] = mapping.setdefault(tok, len(mapping))
    return out, list(mapping)


def _read_rows(path: Path, format: str) -> List[List[str]]:
    if not path.exists():
        raise FileNotFoundError(path)
    ncols = 2 if format == "tsv-pairs" else 3
    rows: List[List[str]] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            parts = [p.strip() for p in parts]
            if len(parts) != ncols:
                raise GraphFormatError(
                    f"{path}:{lineno}: expected {ncols} columns, got {len(parts)}"
                )
            if format != "tsv-labels":
                for p in parts:
                    try:
                        v = int(p)
                    except ValueError:
                        raise GraphFormatError(f"{path}:{lineno}: not an integer: {p!r}") from None
                    if v < 0:
                        raise GraphFormatError(f"{path}:{lineno}: negative id {v}")
            rows.append(parts)
    if not rows:
        raise GraphFormatError(f"{path}: no edges")
    return rows


def ingest(path: os.PathLike, format: str = "tsv-triples", remap: bool = False) -> Graph:
    """Read an edge list.

    ``tsv-triples`` rows are ``src rel dst``, ``tsv-pairs`` rows are ``src dst``;
    both must be decimal integers.  ``tsv-labels`` rows are arbitrary
    ``head relation tail`` tokens (raw FB15k style) and are always remapped.
    Columns may be separated by tabs or spaces; ``#`` lines are comments.

    Without ``remap`` the id space is ``[0, max_id]``; with it, ids are made
    dense in order of first appearance.
    """
    return ingest_many([path], format, remap)[0]


def ingest_many(paths: Sequence[os.PathLike], format: str = "tsv-triples",
                remap: bool = False) -> List[Graph]:
    """Read several edge lists (e.g. train/valid/test) into one shared id space."""
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    tables = [_read_rows(Path(p), format) for p in paths]
    sizes = [len(t) for t in tables]
    cols = list(zip(*[row for t in tables for row in t]))
    src_tok, dst_tok = cols[0], cols[-1]
    node_labels = rel_labels = None
    if remap or format == "tsv-labels":
        nodes, node_labels = _dense_ids([t for pair in zip(src_tok, dst_tok) for t in pair])
        src, dst = nodes[0::2], nodes[1::2]
        num_nodes = len(node_labels)
    else:
        src = np.array(src_tok, dtype=np.int64)
        dst = np.array(dst_tok, dtype=np.int64)
        num_nodes = int(max(src.max(), dst.max())) + 1
    rel = None
    num_rel = 0
    if format != "tsv-pairs":
        if remap or format == "tsv-labels":
            rel, rel_labels = _dense_ids(cols[1])
            num_rel = len(rel_labels)
        else:
            rel = np.array(cols[1], dtype=np.int64)
            num_rel = int(rel.max()) + 1
    out = []
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        out.append(Graph(num_nodes, num_rel, src[lo:hi], dst[lo:hi],
                         None if rel is None else rel[lo:hi], node_labels, rel_labels))
    return out


@dataclass
class PartitionPlan:
    """Node-id range partitioning plus the edge-bucket index.

    ``order`` lists edge positions grouped by bucket; bucket ``(i, j)`` is
    ``order[offsets[i*n + j]:offsets[i*n + j + 1]]``.
    """

    n: int
    num_nodes: int
    part_size: int
    order: np.ndarray
    offsets: np.ndarray

    @property
    def bucket_sizes(self) -> np.ndarray:
        return np.diff(self.offsets).reshape(self.n, self.n)

    def partition_of(self, nodes) -> np.ndarray:
        return np.asarray(nodes, dtype=np.int64) // self.part_size

    def node_range(self, k: int) -> Tuple[int, int]:
        lo = min(k * self.part_size, self.num_nodes)
        return lo, min(lo + self.part_size, self.num_nodes)

    def node_count(self, k: int) -> int:
        lo, hi = self.node_range(k)
        return hi - lo

    def bucket(self, i: int, j: int) -> np.ndarray:
        b = i * self.n + j
        return self.order[self.offsets[b]:self.offsets[b + 1]]

    def bucket_index(self) -> Dict[Tuple[int, int], slice]:
        return {
            (i, j): slice(int(self.offsets[i * self.n + j]), int(self.offsets[i * self.n + j + 1]))
            for i in range(self.n) for j in range(self.n)
        }


def partition(g: Graph, n: int) -> PartitionPlan:
    """Split nodes into ``n`` id ranges of ``ceil(|V|/n)`` and bucket the edges.

    The stable sort keeps ingestion order inside every bucket.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > g.num_nodes:
        raise ValueError(f"n={n} exceeds num_nodes={g.num_nodes}")
    size = math.ceil(g.num_nodes / n)
    key = (g.src // size) * n + (g.dst // size)
    order = np.argsort(key, kind="stable")
    counts = np.bincount(key, minlength=n * n)
    offsets = np.zeros(n * n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return PartitionPlan(n, g.num_nodes, size, order.astype(np.int64), offsets)


@dataclass
class EmbeddingPartition:
    partition_id: int
    dim: int
    node_count: int
    embeddings: np.ndarray
    opt_states: np.ndarray

    def __post_init__(self):
        shape = (self.node_count, self.dim)
        if self.embeddings.shape != shape or self.opt_states.shape != shape:
            raise ShapeError(
                f"partition {self.partition_id}: expected {shape}, got "
                f"{self.embeddings.shape} and {self.opt_states.shape}"
            )

    @property
    def nbytes(self) -> int:
        return partition_nbytes(self.node_count, self.dim)

    def to_bytes(self) -> bytes:
        return (np.ascontiguousarray(self.embeddings, dtype=FLOAT).tobytes()
                + np.ascontiguousarray(self.opt_states, dtype=FLOAT).tobytes())

    @classmethod
    def from_bytes(cls, partition_id: int, dim: int, node_count: int, raw) -> "EmbeddingPartition":
        expected = partition_nbytes(node_count, dim)
        if len(raw) != expected:
            raise ShapeError(
                f"partition {partition_id}: {len(raw)} bytes, expected {expected} "
                f"for {node_count} rows of dim {dim}"
            )
        flat = np.frombuffer(raw, dtype=FLOAT).astype(np.float32)
        half = node_count * dim
        return cls(partition_id, dim, node_count,
                   flat[:half].reshape(node_count, dim), flat[half:].reshape(node_count, dim))


def partition_nbytes(node_count: int, dim: int) -> int:
    return 2 * node_count * dim * FLOAT_BYTES


def init_embeddings(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    bound = 0.5 / math.sqrt(dim)
    return rng.uniform(-bound, bound, size=(rows, dim)).astype(np.float32)


# (path, offset, length) -> bytes ; (path, offset, data) -> None
ReadFn = Callable[[Path, int, int], bytes]
WriteFn = Callable[[Path, int, bytes], None]


def _file_read(path: Path, offset: int, length: int) -> bytes:
    with open(path, "rb") as fh:
        fh.seek(offset)
        return fh.read(length)


def _file_write(path: Path, offset: int, data: bytes) -> None:
    mode = "r+b" if path.exists() else "wb"
    with open(path, mode) as fh:
        fh.seek(offset)
        fh.write(data)
        fh.truncate(offset + len(data))


@dataclass
class StoreRequest:
    op: str
    partition_id: int
    offset: int
    length: int


@dataclass
class PartitionStore:
    """Directory of partition files plus a ``store.json`` sidecar.

    ``read_fn``/``write_fn`` carry out the single contiguous request issued per
    load/save; the pipeline swaps in the NVMe simulator here.
    """

    directory: Path
    n: int
    dim: int
    num_nodes: int
    part_size: int
    seed: int
    num_relations: int = 0
    read_fn: ReadFn = field(default=_file_read, repr=False)
    write_fn: WriteFn = field(default=_file_write, repr=False)
    requests: List[StoreRequest] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.directory = Path(self.directory)
        self._locks = [threading.Lock() for _ in range(self.n)]
        self._log_lock = threading.Lock()

    # layout -------------------------------------------------------------
    def node_range(self, k: int) -> Tuple[int, int]:
        lo = min(k * self.part_size, self.num_nodes)
        return lo, min(lo + self.part_size, self.num_nodes)

    def node_count(self, k: int) -> int:
        lo, hi = self.node_range(k)
        return hi - lo

    def path(self, partition_id: int) -> Path:
        return self.directory / f"part_{partition_id}.bin"

    @property
    def relations_path(self) -> Path:
        return self.directory / RELATIONS_NAME

    def metadata(self) -> dict:
        return {
            "n": self.n,
            "dim": self.dim,
            "num_nodes": self.num_nodes,
            "num_relations": self.num_relations,
            "part_size": self.part_size,
            "seed": self.seed,
            "byte_order": "little",
            "dtype": "float32",
            "layout": "embeddings,opt_states",
            "node_ranges": [list(self.node_range(k)) for k in range(self.n)],
        }

    def write_metadata(self) -> None:
        text = json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n"
        (self.directory / META_NAME).write_text(text)

    @classmethod
    def open(cls, directory: os.PathLike, dim: Optional[int] = None) -> "PartitionStore":
        directory = Path(directory)
        meta_path = directory / META_NAME
        if not meta_path.exists():
            raise StoreError(f"{meta_path} not found")
        meta = json.loads(meta_path.read_text())
        store = cls(directory, meta["n"], meta["dim"], meta["num_nodes"],
                    meta["part_size"], meta["seed"], meta.get("num_relations", 0))
        if dim is not None:
            store.dim = dim  # a mismatch surfaces as ShapeError on load
        return store

    # I/O ----------------------------------------------------------------
    def _log(self, op: str, pid: int, offset: int, length: int) -> None:
        with self._log_lock:
            self.requests.append(StoreRequest(op, pid, offset, length))

    def load_partition(self, partition_id: int) -> EmbeddingPartition:
        if not 0 <= partition_id < self.n:
            raise StoreError(f"no partition {partition_id}")
        path = self.path(partition_id)
        if not path.exists():
            raise StoreError(f"partition {partition_id}: {path} missing")
        count = self.node_count(partition_id)
        length = partition_nbytes(count, self.dim)
        actual = path.stat().st_size
        if actual != length:
            raise ShapeError(
                f"partition {partition_id}: file has {actual} bytes, expected {length} "
                f"(node_count={count}, dim={self.dim})"
            )
        self._log("read", partition_id, 0, length)
        raw = self.read_fn(path, 0, length)
        if len(raw) != length:
            raise StoreError(f"partition {partition_id}: short read ({len(raw)}/{length})")
        return EmbeddingPartition.from_bytes(partition_id, self.dim, count, raw)

    def save_partition(self, p: EmbeddingPartition) -> None:
        if not 0 <= p.partition_id < self.n:
            raise StoreError(f"no partition {p.partition_id}")
        expected = (self.node_count(p.partition_id), self.dim)
        if (p.node_count, p.dim) != expected:
            raise ShapeError(f"partition {p.partition_id}: shape {(p.node_count, p.dim)} != {expected}")
        data = p.to_bytes()
        with self._locks[p.partition_id]:
            self._log("write", p.partition_id, 0, len(data))
            try:
                self.write_fn(self.path(p.partition_id), 0, data)
            except OSError as exc:
                raise StoreError(f"partition {p.partition_id}: {exc}") from exc

    def load_relations(self) -> EmbeddingPartition:
        raw = self.relations_path.read_bytes()
        return EmbeddingPartition.from_bytes(-1, self.dim, self.num_relations, raw)

    def save_relations(self, p: EmbeddingPartition) -> None:
        tmp = self.relations_path.with_suffix(".tmp")
        tmp.write_bytes(p.to_bytes())
        tmp.replace(self.relations_path)


def init_store(plan: PartitionPlan, dim: int, seed: int, directory: os.PathLike,
               num_relations: int = 0) -> PartitionStore:
    """Write freshly initialised partitions (and relation table, if any).

    Partition ``k`` draws from ``default_rng((seed, k))``, so files are
    reproducible independently of each other.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    store = PartitionStore(directory, plan.n, dim, plan.num_nodes, plan.part_size, seed, num_relations)
    for k in range(plan.n):
        count = plan.node_count(k)
        rng = np.random.default_rng((seed, k))
        part = EmbeddingPartition(k, dim, count, init_embeddings(rng, count, dim),
                                  np.zeros((count, dim), dtype=np.float32))
        try:
            _file_write(store.path(k), 0, part.to_bytes())
        except OSError as exc:
            raise StoreError(f"partition {k}: {exc}") from exc
    if num_relations:
        rng = np.random.default_rng((seed, plan.n))
        rel = EmbeddingPartition(-1, dim, num_relations, init_embeddings(rng, num_relations, dim),
                                 np.zeros((num_relations, dim), dtype=np.float32))
        store.save_relations(rel)
    store.write_metadata()
    return store
