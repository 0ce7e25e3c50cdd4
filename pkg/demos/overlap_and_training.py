"""
When do swaps hide under compute?
=================================

A swap writes one partition while reading the next.  It is hidden when the
buckets left in the current state take longer than the exchange.  Edge density
relative to a threshold set by buffer size, dimension and bandwidth decides
which side wins.  The second half trains a small model through the same swaps.
"""

import tempfile
from pathlib import Path

import numpy as np

from bucketstream import workflow as wf
from bucketstream.config import RunConfig
from bucketstream.embedding import random_mrr
from bucketstream.ordering import plan_iteration_order, plan_loading_order
from bucketstream.pipeline import CostModel, check_dependencies, run_epoch, theorem3_check, uniform_sweep
from bucketstream.synthetic import planted_kg, split

cost = CostModel(t=1e-7, w=2e9, r=3e9, M=15e9, d=100)
for name, edges, nodes in (("twitter", 1.46e9, 4.16e7), ("freebase86m", 304.7e6, 86.05e6)):
    c = theorem3_check(edges, nodes, cost)
    print(f"{name}: density {c.lhs:.2e} vs threshold {c.rhs:.2e} -> covered={c.covered}")

# Uniform buckets at densities around the threshold.
plan = plan_iteration_order(plan_loading_order(8))
print(f"{'ratio':>6} {'stall_s':>9} {'epoch_s':>9} {'baseline':>9}")
for pt in uniform_sweep(plan, cost, np.geomspace(0.25, 4, 9)):
    print(f"{pt.density_ratio:6.2f} {pt.stall_s:9.3f} {pt.epoch_s:9.3f} {pt.epoch_s_baseline:9.3f}")

# Skewed buckets: the replayed timeline still never runs a bucket early.
sizes = np.random.default_rng(0).pareto(1.5, size=(8, 8)) * 2e6
res = run_epoch(plan, cost, "cost-only", sizes, 5e9)
check_dependencies(res.timeline)
print(f"skewed buckets: stall {res.timeline.stall_s:.3f} s, utilization {res.timeline.utilization:.3f}")

# A small knowledge graph trained through partition swaps.
g = planted_kg(num_nodes=2000, num_relations=20, num_edges=40000, clusters=20)
train, test = split(g, 2000)
cfg = RunConfig(n=4, dim=32, epochs=5, negatives=32, eval_candidates=999).validate()
with tempfile.TemporaryDirectory() as d:
    out = wf.train(cfg, train, test, Path(d) / "store")
for m in out.metrics:
    print(f"epoch {m.epoch}: loss {m.loss:.3f} mrr {m.mrr:.4f} hits@10 {m.hits:.3f}")
print(f"random ranking would give mrr {random_mrr(999):.4f}")
