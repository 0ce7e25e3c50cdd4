"""End-to-end steps shared by the command line and the demos."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .config import RunConfig
from .embedding import ScoreModel, evaluate, random_mrr
from .graph_store import Graph, PartitionPlan, PartitionStore, ingest_many, init_store, partition
from .nvme import AccessStrategy, NvmeBackend, NvmeConfig
from .ordering import IterationPlan, plan_iteration_order, plan_loading_order
from .pipeline import CostModel, Trainer, run_epoch, utilization_report


def nvme_config(cfg: RunConfig) -> NvmeConfig:
    nv = cfg.nvme
    return NvmeConfig(nv.page_size, nv.depth, nv.queue_count, nv.batch_size, nv.workers, nv.seed,
                      nv.ring_latency, nv.bandwidth)


def nvme_strategy(cfg: RunConfig) -> AccessStrategy:
    nv = cfg.nvme
    return AccessStrategy(nv.enqueue_mode, nv.doorbell_mode, nv.polling_mode)


def cost_model(cfg: RunConfig) -> CostModel:
    c = cfg.cost
    return CostModel(c.t, c.w, c.r, c.M, c.d)


def load_dataset(cfg: RunConfig) -> Tuple[Graph, Graph]:
    """Train and test graphs in one id space; without a test file a seeded holdout is used."""
    ds = cfg.dataset
    if not ds.train:
        raise ValueError("dataset.train is not set")
    if ds.test:
        train, test = ingest_many([ds.train, ds.test], ds.format, ds.remap)
        return train, test
    (full,) = ingest_many([ds.train], ds.format, ds.remap)
    return split_holdout(full, ds.test_fraction, cfg.seed)


def split_holdout(g: Graph, fraction: float, seed: int) -> Tuple[Graph, Graph]:
    rng = np.random.default_rng((seed, 7))
    perm = rng.permutation(g.num_edges)
    cut = max(1, int(round(g.num_edges * fraction)))
    if cut >= g.num_edges:
        raise ValueError("holdout would leave no training edges")
    return g.subset(np.sort(perm[cut:])), g.subset(np.sort(perm[:cut]))


def save_partition_plan(pplan: PartitionPlan, path: Path) -> None:
    np.savez(path, order=pplan.order, offsets=pplan.offsets,
             shape=np.array([pplan.n, pplan.num_nodes, pplan.part_size]))


def load_partition_plan(path: Path) -> PartitionPlan:
    with np.load(path) as z:
        n, num_nodes, part_size = (int(x) for x in z["shape"])
        return PartitionPlan(n, num_nodes, part_size, z["order"], z["offsets"])


def build_plan(n: int) -> IterationPlan:
    return plan_iteration_order(plan_loading_order(n))


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    mrr: float
    hits: float
    seconds: float


METRIC_FIELDS = ("epoch", "loss", "mrr", "hits@10", "seconds")


def metrics_csv(rows: List[EpochMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow([r.epoch, repr(r.loss), repr(r.mrr), repr(r.hits), repr(r.seconds)])
    return buf.getvalue()


def read_table(store: PartitionStore) -> np.ndarray:
    """All node embeddings, partition by partition (plain file reads)."""
    plain = PartitionStore.open(store.directory)
    parts = [plain.load_partition(k).embeddings for k in range(plain.n)]
    return np.concatenate(parts) if parts else np.zeros((0, plain.dim), np.float32)


def evaluate_store(cfg: RunConfig, store: PartitionStore, test: Graph):
    model = ScoreModel(cfg.model, cfg.dim)
    nodes = read_table(store)
    rels = store.load_relations().embeddings if model.uses_relations else None
    idx = np.arange(test.num_edges)
    if cfg.eval_max_edges and test.num_edges > cfg.eval_max_edges:
        idx = np.sort(np.random.default_rng((cfg.seed, 11)).choice(test.num_edges, cfg.eval_max_edges, replace=False))
    rng = np.random.default_rng((cfg.seed, 13))
    return evaluate(model, nodes, rels, test.src[idx], None if test.rel is None else test.rel[idx],
                    test.dst[idx], cfg.eval_k, cfg.eval_candidates, rng)


@dataclass
class TrainOutcome:
    metrics: List[EpochMetrics]
    summary: dict
    timeline_csv: str


def train(cfg: RunConfig, graph: Graph, test: Graph, store_dir: Path, init: bool = True,
          pplan: Optional[PartitionPlan] = None, plan: Optional[IterationPlan] = None) -> TrainOutcome:
    """Train ``cfg.epochs`` epochs through the swap pipeline, evaluating after each."""
    model = ScoreModel(cfg.model, cfg.dim)
    pplan = pplan or partition(graph, cfg.n)
    plan = plan or build_plan(pplan.n)
    if plan.n != pplan.n:
        raise ValueError(f"plan is for n={plan.n}, partitions use n={pplan.n}")
    if init:
        store = init_store(pplan, cfg.dim, cfg.seed, store_dir, graph.num_relations if model.uses_relations else 0)
    else:
        store = PartitionStore.open(store_dir)
        if store.dim != cfg.dim or store.n != pplan.n or store.num_nodes != pplan.num_nodes:
            raise ValueError("existing store does not match the configuration; use --init")
    backend = NvmeBackend(nvme_config(cfg), nvme_strategy(cfg))
    store.read_fn, store.write_fn = backend.read, backend.write
    trainer = Trainer(store, graph, pplan, model, cfg.lr, cfg.batch_size, cfg.negatives, cfg.seed, cfg.corrupt)
    cost = cost_model(cfg)
    rows: List[EpochMetrics] = []
    result = None
    for epoch in range(cfg.epochs):
        result = run_epoch(plan, cost, "real-train", trainer=trainer, timing=cfg.timing)
        ev = evaluate_store(cfg, store, test)
        rows.append(EpochMetrics(epoch, float(result.loss), ev.mrr, ev.hits_at_k, result.timeline.epoch_s))
    nv = backend.total()
    summary = {
        "epochs": cfg.epochs,
        "n": pplan.n,
        "num_nodes": graph.num_nodes,
        "train_edges": graph.num_edges,
        "test_edges": test.num_edges,
        "random_mrr": random_mrr(cfg.eval_candidates),
        "nvme": {k: v for k, v in nv.to_dict().items() if k in
                 ("commands", "sq_rings", "cq_rings", "lock_events", "batches", "modeled_seconds")},
        "swaps_per_epoch": len(plan.states) - 1,
    }
    if result is not None:
        summary["last_epoch"] = utilization_report(result.timeline)
        summary["last_epoch"].pop("stall_by_state")
    return TrainOutcome(rows, summary, result.timeline.to_csv() if result else "kind,start,end,label\n")


def dump_json(obj, path: Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
