"""Score functions, contrastive loss with reusable intermediates, Adagrad and ranking metrics.

For every model the score factors as ``f(s, r, d) = q(s, r) . d``:

* ``dot``:      q = s
* ``distmult``: q = s * r
* ``complex``:  vectors are split in half, ``[re | im]``; q holds the real and
  imaginary parts of ``s * r`` so that ``q . d = Re(sum s * r * conj(d))``.

The loss of one positive against its ``k`` negatives is
``-(f(pos) - logsumexp(f(neg)))``.  A forward pass caches

* ``ir1`` = q (one row per positive),
* ``ir2`` = q * d_pos (row sums are the positive scores),
* ``ir3`` = exp(f(neg) - shift) with the per-row max as ``shift``,

and the backward pass reads gradients straight off those arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

MODELS = ("dot", "distmult", "complex")


class StaleBatchError(RuntimeError):
    """Gradients requested for a batch whose forward pass is missing or out of date."""


@dataclass(frozen=True)
class ScoreModel:
    kind: str
    dim: int

    def __post_init__(self):
        if self.kind not in MODELS:
            raise ValueError(f"unknown model {self.kind!r}; expected one of {MODELS}")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.kind == "complex" and self.dim % 2:
            raise ValueError(f"complex needs an even dim, got {self.dim}")

    @property
    def uses_relations(self) -> bool:
        return self.kind != "dot"

    def _check(self, *vecs) -> None:
        for v in vecs:
            if v is not None and np.shape(v)[-1] != self.dim:
                raise ValueError(f"expected last dimension {self.dim}, got {np.shape(v)[-1]}")

    def query(self, s: np.ndarray, r: Optional[np.ndarray]) -> np.ndarray:
        """The left factor q(s, r); works on single vectors or row stacks."""
        self._check(s, r)
        if self.kind == "dot":
            if r is not None:
                raise ValueError("dot takes no relation vector")
            return s
        if r is None:
            raise ValueError(f"{self.kind} needs a relation vector")
        if self.kind == "distmult":
            return s * r
        h = self.dim // 2
        sr, si, rr, ri = s[..., :h], s[..., h:], r[..., :h], r[..., h:]
        return np.concatenate([sr * rr - si * ri, sr * ri + si * rr], axis=-1)

    def score(self, s, r, d) -> float:
        self._check(d)
        return float(np.sum(self.query(np.asarray(s), None if r is None else np.asarray(r)) * np.asarray(d)))

    def query_backward(self, g: np.ndarray, s: np.ndarray, r: Optional[np.ndarray]):
        """Map dL/dq to (dL/ds, dL/dr)."""
        if self.kind == "dot":
            return g, None
        if self.kind == "distmult":
            return g * r, g * s
        h = self.dim // 2
        gr, gi = g[..., :h], g[..., h:]
        sr, si, rr, ri = s[..., :h], s[..., h:], r[..., :h], r[..., h:]
        ds = np.concatenate([gr * rr + gi * ri, -gr * ri + gi * rr], axis=-1)
        dr = np.concatenate([gr * sr + gi * si, -gr * si + gi * sr], axis=-1)
        return ds, dr

    def conjugate(self, r: np.ndarray) -> np.ndarray:
        """Relation vector that scores the reversed triple: f(s, r, d) = f(d, conj(r), s)."""
        if self.kind != "complex":
            return r
        h = self.dim // 2
        return np.concatenate([r[..., :h], -r[..., h:]], axis=-1)


_GUARDED = ("heads", "rels", "tails", "negs", "head_emb", "rel_emb", "tail_emb", "neg_emb")


@dataclass(eq=False)
class Batch:
    """Positives as ``(head, rel, tail)`` rows plus ``k`` corrupted tails each.

    ``heads/rels/tails/negs`` index into the row tables supplied to
    :func:`gather`; the ``*_emb`` arrays hold the gathered float64 rows.  When
    sources are corrupted instead of destinations, the triple is reversed and
    ``rel_emb`` carries the conjugated relation.
    """

    heads: np.ndarray
    rels: Optional[np.ndarray]
    tails: np.ndarray
    negs: np.ndarray
    head_emb: np.ndarray
    rel_emb: Optional[np.ndarray]
    tail_emb: np.ndarray
    neg_emb: np.ndarray
    reversed: bool = False
    ir1: Optional[np.ndarray] = field(default=None, repr=False)
    ir2: Optional[np.ndarray] = field(default=None, repr=False)
    ir3: Optional[np.ndarray] = field(default=None, repr=False)
    shift: Optional[np.ndarray] = field(default=None, repr=False)
    version: int = 0
    loss_version: int = -1

    def __setattr__(self, name, value):
        if name in _GUARDED and "loss_version" in self.__dict__:
            object.__setattr__(self, "version", self.version + 1)
        object.__setattr__(self, name, value)

    @property
    def size(self) -> int:
        return int(self.heads.shape[0])

    @property
    def k(self) -> int:
        return int(self.negs.shape[1])

    def _freeze(self) -> None:
        for name in _GUARDED:
            a = getattr(self, name)
            if isinstance(a, np.ndarray):
                a.setflags(write=False)


def gather(model: ScoreModel, nodes: np.ndarray, relations: Optional[np.ndarray],
           src: np.ndarray, rel: Optional[np.ndarray], dst: np.ndarray, negs: np.ndarray,
           corrupt: str = "dst") -> Batch:
    """Build a batch from row indices into ``nodes`` (and ``relations``).

    ``negs`` has shape ``(len(src), k)`` and replaces the destination
    (``corrupt="dst"``) or the source (``corrupt="src"``).
    """
    if negs.ndim != 2 or negs.shape[0] != src.shape[0]:
        raise ValueError("negs must have shape (positives, k)")
    if negs.shape[1] < 1:
        raise ValueError("need at least one negative per positive")
    if model.uses_relations and (rel is None or relations is None):
        raise ValueError(f"{model.kind} needs relation ids and a relation table")
    if corrupt == "src":
        heads, tails = dst, src
    elif corrupt == "dst":
        heads, tails = src, dst
    else:
        raise ValueError("corrupt must be 'src' or 'dst'")
    f64 = np.float64
    rel_emb = None
    if model.uses_relations:
        rel_emb = relations[rel].astype(f64)
        if corrupt == "src":
            rel_emb = model.conjugate(rel_emb)
    return Batch(heads, rel if model.uses_relations else None, tails, negs,
                 nodes[heads].astype(f64), rel_emb, nodes[tails].astype(f64), nodes[negs].astype(f64),
                 reversed=corrupt == "src")


def batch_loss(model: ScoreModel, batch: Batch) -> float:
    """Summed contrastive loss; fills the batch's intermediates for reuse."""
    q = model.query(batch.head_emb, batch.rel_emb)
    ir2 = q * batch.tail_emb
    pos = ir2.sum(axis=1)
    neg = np.einsum("pd,pkd->pk", q, batch.neg_emb)
    shift = neg.max(axis=1)
    ir3 = np.exp(neg - shift[:, None])
    lse = shift + np.log(ir3.sum(axis=1))
    batch.ir1, batch.ir2, batch.ir3, batch.shift = q, ir2, ir3, shift
    for a in (q, ir2, ir3, shift):
        a.setflags(write=False)
    batch._freeze()
    batch.loss_version = batch.version
    return float(-(pos - lse).sum())


@dataclass
class Gradients:
    """Per-row gradients, summed over every occurrence in the batch.

    ``node_rows`` / ``rel_rows`` are sorted and unique; row ``i`` of
    ``node_grad`` belongs to ``node_rows[i]``.
    """

    node_rows: np.ndarray
    node_grad: np.ndarray
    rel_rows: Optional[np.ndarray]
    rel_grad: Optional[np.ndarray]

    def node_dict(self) -> Dict[int, np.ndarray]:
        return {int(i): g for i, g in zip(self.node_rows, self.node_grad)}


def segment_sum(rows: np.ndarray, grads: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Sum gradient rows sharing an index; fixed order, so results are bit-stable."""
    uniq, inverse = np.unique(rows, return_inverse=True)
    d = grads.shape[1]
    flat = (inverse.reshape(-1, 1) * d + np.arange(d)).ravel()
    summed = np.bincount(flat, weights=grads.ravel(), minlength=uniq.size * d)
    return uniq, summed.reshape(uniq.size, d)


def batch_gradients(model: ScoreModel, batch: Batch) -> Gradients:
    """Analytic gradients of :func:`batch_loss` from the cached intermediates."""
    if batch.ir1 is None or batch.loss_version != batch.version:
        raise StaleBatchError("batch changed (or was never scored) since batch_loss; re-run batch_loss")
    q = batch.ir1
    w = batch.ir3 / batch.ir3.sum(axis=1, keepdims=True)
    g_q = -batch.tail_emb + np.einsum("pk,pkd->pd", w, batch.neg_emb)
    g_head, g_rel = model.query_backward(g_q, batch.head_emb, batch.rel_emb)

    # node rows receive: g_head from heads, -q from tails, w * q from each negative
    p, k = batch.size, batch.k
    rows = np.concatenate([batch.heads, batch.tails, batch.negs.reshape(-1)])
    node_rows, inverse = np.unique(rows, return_inverse=True)
    cols = np.concatenate([np.arange(p), p + np.arange(p), p + np.repeat(np.arange(p), k)])
    vals = np.concatenate([np.ones(p), -np.ones(p), w.reshape(-1)])
    scatter = sparse.csr_matrix((vals, (inverse, cols)), shape=(node_rows.size, 2 * p))
    node_grad = scatter @ np.concatenate([g_head, q])
    rel_rows = rel_grad = None
    if g_rel is not None:
        if batch.reversed:
            g_rel = model.conjugate(g_rel)
        rel_rows, rel_grad = segment_sum(batch.rels, g_rel)
    return Gradients(node_rows, node_grad, rel_rows, rel_grad)


@dataclass
class AdagradState:
    learning_rate: float = 0.1
    epsilon: float = 1e-10

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ValueError("learning_rate and epsilon must be positive")


def adagrad_step(params: np.ndarray, acc: np.ndarray, rows: np.ndarray, grads: np.ndarray,
                 state: AdagradState) -> None:
    """Row-sparse Adagrad on float32 tables; arithmetic in float64.

    ``rows`` must be unique (as produced by :func:`segment_sum`).
    """
    if grads.shape != (rows.shape[0], params.shape[1]):
        raise ValueError(f"gradient shape {grads.shape} does not match {rows.shape[0]} rows of {params.shape[1]}")
    g = grads.astype(np.float64)
    a = acc[rows].astype(np.float64) + g * g
    p = params[rows].astype(np.float64) - state.learning_rate * g / (np.sqrt(a) + state.epsilon)
    acc[rows] = a
    params[rows] = p


def sample_negatives(resident: Sequence[Tuple[int, int]], k: int, num_positives: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Uniform node ids from the union of resident ``[lo, hi)`` ranges, shape ``(P, k)``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranges = [(lo, hi) for lo, hi in resident if hi > lo]
    if not ranges:
        raise ValueError("no resident nodes to sample from")
    sizes = np.array([hi - lo for lo, hi in ranges], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(sizes)])
    u = rng.integers(0, starts[-1], size=(num_positives, k))
    which = np.searchsorted(starts, u, side="right") - 1
    los = np.array([lo for lo, _ in ranges], dtype=np.int64)
    return los[which] + (u - starts[which])


@dataclass
class RankMetrics:
    mrr: float
    hits_at_k: float
    k: int
    count: int
    ranks: np.ndarray = field(repr=False)


def rank_against(true_scores: np.ndarray, cand_scores: np.ndarray) -> np.ndarray:
    """Pessimistic rank: candidates scoring equal to the truth count as ahead of it."""
    return 1 + (cand_scores >= true_scores[:, None]).sum(axis=1)


def evaluate(model: ScoreModel, nodes: np.ndarray, relations: Optional[np.ndarray],
             src: np.ndarray, rel: Optional[np.ndarray], dst: np.ndarray, k: int = 10,
             num_candidates: int = 999, rng: Optional[np.random.Generator] = None,
             chunk: int = 256) -> RankMetrics:
    """Rank each test edge against ``num_candidates`` uniform destination corruptions (unfiltered)."""
    if src.size == 0:
        raise ValueError("empty test set")
    if num_candidates < 1:
        raise ValueError("num_candidates must be >= 1")
    rng = rng or np.random.default_rng(0)
    num_nodes = nodes.shape[0]
    ranks = np.empty(src.size, dtype=np.int64)
    for lo in range(0, src.size, chunk):
        sl = slice(lo, lo + chunk)
        s = nodes[src[sl]].astype(np.float64)
        r = relations[rel[sl]].astype(np.float64) if model.uses_relations else None
        q = model.query(s, r)
        true = (q * nodes[dst[sl]]).sum(axis=1)
        cand = rng.integers(0, num_nodes, size=(q.shape[0], num_candidates))
        cand_scores = np.einsum("pd,pcd->pc", q, nodes[cand].astype(np.float64))
        ranks[sl] = rank_against(true, cand_scores)
    return RankMetrics(float(np.mean(1.0 / ranks)), float(np.mean(ranks <= k)), k, int(src.size), ranks)


def random_mrr(num_candidates: int) -> float:
    """Expected MRR when the true rank is uniform over ``1..c+1``."""
    c1 = num_candidates + 1
    return float(np.sum(1.0 / np.arange(1, c1 + 1)) / c1)
