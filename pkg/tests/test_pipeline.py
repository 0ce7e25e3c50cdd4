import numpy as np
import pytest

from bucketstream.embedding import ScoreModel
from bucketstream.graph_store import PartitionStore, init_store, partition
from bucketstream.ordering import plan_iteration_order, plan_loading_order
from bucketstream.pipeline import (CostModel, OverlapTimeline, TimelineEvent, Trainer, check_dependencies,
                                   run_epoch, theorem3_check, uniform_sweep, utilization_report)
from bucketstream.synthetic import powerlaw_graph


def test_coverage_threshold_examples():
    cost = CostModel()
    twitter = theorem3_check(1.46e9, 4.16e7, cost)
    assert twitter.rhs == pytest.approx(1.28e-7)
    assert twitter.lhs == pytest.approx(8.44e-7, rel=1e-3)
    assert twitter.covered
    freebase = theorem3_check(304.7e6, 86.05e6, cost)
    assert not freebase.covered
    with pytest.raises(ValueError):
        theorem3_check(0, 10, cost)
    with pytest.raises(ValueError):
        CostModel(w=0)


@pytest.mark.parametrize("n", [6, 8, 12, 16])
def test_uniform_sweep_stalls_follow_threshold(n):
    plan = plan_iteration_order(plan_loading_order(n))
    points = uniform_sweep(plan, CostModel(), np.geomspace(0.25, 4, 20))
    for pt in points:
        assert (pt.stall_s <= 1e-12) == pt.check.covered, pt
        assert pt.epoch_s < pt.epoch_s_baseline
        assert pt.stall_s < pt.stall_s_baseline


def test_timeline_respects_residency():
    plan = plan_iteration_order(plan_loading_order(8))
    rng = np.random.default_rng(0)
    sizes = rng.integers(0, 5_000_000, size=(8, 8))
    for prefetch in (True, False):
        tl = run_epoch(plan, CostModel(), "cost-only", sizes, 5e9, prefetch=prefetch).timeline
        check_dependencies(tl)
        assert sum(e.kind == "compute" for e in tl.events) == 64


def test_dependency_check_catches_early_compute():
    tl = OverlapTimeline([TimelineEvent("load", 0, 2, "load P0", 0, (0,)),
                          TimelineEvent("compute", 1, 3, "bucket (0,0)", 0, (0, 0))])
    with pytest.raises(AssertionError):
        check_dependencies(tl)
    tl = OverlapTimeline([TimelineEvent("load", 0, 1, "load P0", 0, (0,)),
                          TimelineEvent("offload", 2, 3, "offload P0", 0, (0,)),
                          TimelineEvent("compute", 1.5, 2.5, "bucket (0,0)", 0, (0, 0))])
    with pytest.raises(AssertionError):
        check_dependencies(tl)


def test_utilization_examples():
    tl = OverlapTimeline([TimelineEvent("compute", 0, 3, "b", 0, (0, 0))], compute_s=3.0, stall_s=1.0, epoch_s=5.0)
    rep = utilization_report(tl)
    assert rep["utilization"] == pytest.approx(0.75)
    assert rep["duty_cycle"] == pytest.approx(0.6)
    assert OverlapTimeline(compute_s=2.0).utilization == 1.0
    with pytest.raises(ValueError):
        utilization_report(OverlapTimeline())


def test_timeline_csv_columns():
    plan = plan_iteration_order(plan_loading_order(4))
    tl = run_epoch(plan, CostModel(), "cost-only", np.full((4, 4), 1e6), 1e9).timeline
    lines = tl.to_csv().splitlines()
    assert lines[0] == "kind,start,end,label"
    assert len(lines) == 1 + len(tl.events)


def test_run_epoch_argument_errors():
    plan = plan_iteration_order(plan_loading_order(4))
    with pytest.raises(ValueError):
        run_epoch(plan, CostModel(), "cost-only")
    with pytest.raises(ValueError):
        run_epoch(plan, CostModel(), "cost-only", np.ones((3, 3)), 1.0)
    with pytest.raises(ValueError):
        run_epoch(plan, CostModel(), "real-train")
    with pytest.raises(ValueError):
        run_epoch(plan, CostModel(), "warp", np.ones((4, 4)), 1.0)


def _setup(tmp_path, n=5, model="complex"):
    g = powerlaw_graph(400, 6000, seed=1, num_relations=3)
    pplan = partition(g, n)
    m = ScoreModel(model, 8)
    store = init_store(pplan, 8, 0, tmp_path / "store", g.num_relations if m.uses_relations else 0)
    return g, pplan, m, store


def test_real_training_visits_every_bucket_and_writes_back(tmp_path):
    g, pplan, m, store = _setup(tmp_path)
    before = [store.load_partition(k).embeddings.copy() for k in range(5)]
    plan = plan_iteration_order(plan_loading_order(5))
    tr = Trainer(store, g, pplan, m, batch_size=256, negatives=8)
    res = run_epoch(plan, CostModel(), "real-train", trainer=tr)
    assert sorted(res.buckets) == sorted((i, j) for i in range(5) for j in range(5))
    assert res.edges == g.num_edges
    check_dependencies(res.timeline)
    reopened = PartitionStore.open(store.directory)
    for k in range(5):
        after = reopened.load_partition(k)
        assert after.embeddings.shape == before[k].shape
        if pplan.node_count(k):
            assert not np.array_equal(after.embeddings, before[k])
            assert after.opt_states.any()


def test_real_training_loss_drops(tmp_path):
    g, pplan, m, store = _setup(tmp_path, n=4, model="distmult")
    plan = plan_iteration_order(plan_loading_order(4))
    tr = Trainer(store, g, pplan, m, lr=0.1, batch_size=500, negatives=16)
    losses = [run_epoch(plan, CostModel(), "real-train", trainer=tr).loss for _ in range(4)]
    assert losses[-1] < losses[0]


def test_real_training_is_deterministic(tmp_path):
    outs = []
    for name in ("a", "b"):
        g, pplan, m, store = _setup(tmp_path / name, n=4)
        plan = plan_iteration_order(plan_loading_order(4))
        tr = Trainer(store, g, pplan, m, batch_size=300, negatives=4)
        run_epoch(plan, CostModel(), "real-train", trainer=tr)
        outs.append(b"".join(PartitionStore.open(store.directory).load_partition(k).to_bytes() for k in range(4)))
    assert outs[0] == outs[1]


def test_trainer_rejects_mismatched_store(tmp_path):
    g, pplan, m, store = _setup(tmp_path, n=4)
    with pytest.raises(ValueError):
        Trainer(store, g, partition(g, 5), m)
    with pytest.raises(ValueError):
        run_epoch(plan_iteration_order(plan_loading_order(5)), CostModel(), "real-train",
                  trainer=Trainer(store, g, pplan, m))
