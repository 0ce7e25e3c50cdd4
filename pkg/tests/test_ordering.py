import itertools
import json

import pytest

from bucketstream.ordering import (BufferStateSequence, IterationPlan, PlanError, io_accounting,
                                   marius_fixture_n4, oracle_min_io, plan_iteration_order,
                                   plan_loading_order, verify_prefetchable)

# Reference counts for the calibrated covering order
STATE_COUNTS = {6: 8, 8: 16, 10: 24, 12: 36, 14: 50, 16: 66}
VOLUMES = {6: 1.33, 8: 2.00, 10: 2.40, 12: 3.00, 14: 3.57, 16: 4.13}


def plan_for(n):
    return plan_iteration_order(plan_loading_order(n))


def test_n6_sequence_sweeps_column_zero_first():
    seq = plan_loading_order(6)
    assert [sorted(s) for s in seq.states] == [
        [0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 5], [1, 4, 5], [1, 3, 5], [2, 3, 5], [2, 4, 5]]


@pytest.mark.parametrize("n", sorted(STATE_COUNTS))
def test_state_counts_and_volume(n):
    acct = io_accounting(plan_loading_order(n), 1.0)
    assert acct.io_times == STATE_COUNTS[n]
    assert acct.volume_over_total == pytest.approx(VOLUMES[n], abs=0.006)


def test_volume_in_bytes():
    acct = io_accounting(plan_loading_order(8), 32e9)
    assert acct.comm_volume == pytest.approx(64e9)


@pytest.mark.parametrize("n", range(4, 33))
def test_sequence_invariants(n):
    seq = plan_loading_order(n)
    assert seq.states[0] == {0, 1, 2}
    for a, b in zip(seq.states, seq.states[1:]):
        assert len(a - b) == 1 and len(b) == 3
    pairs = set()
    for s in seq.states:
        pairs.update(itertools.combinations(sorted(s), 2))
    assert len(pairs) == n * (n - 1) // 2
    loads = seq.loads
    for (_, loaded), (evicted, _) in zip(loads, loads[1:]):
        assert loaded != evicted


def test_small_n_rejected():
    with pytest.raises(ValueError):
        plan_loading_order(3)


def test_deterministic():
    assert plan_for(11).to_json() == plan_for(11).to_json()


def test_n6_bucket_order_prefix_and_window():
    plan = plan_for(6)
    assert plan.bucket_order[:9] == [(0, 1), (1, 1), (1, 0), (1, 2), (2, 1), (0, 0), (0, 2), (2, 0), (2, 2)]
    assert plan.prefetch_points[0] == 5
    window = plan.segment(0)[plan.prefetch_points[0]:]
    assert window == [(0, 0), (0, 2), (2, 0), (2, 2)]
    assert all(1 not in b for b in window)


@pytest.mark.parametrize("n", range(4, 33))
def test_iteration_plan_invariants(n):
    plan = plan_for(n)
    assert len(plan.bucket_order) == n * n == len(set(plan.bucket_order))
    for k, s in enumerate(plan.states):
        seg = plan.segment(k)
        for b in seg:
            assert b[0] in s and b[1] in s
        if k + 1 < len(plan.states):
            ev = next(iter(s - plan.states[k + 1]))
            pp = plan.prefetch_points[k] - plan.state_offsets[k]
            assert all(ev in b for b in seg[:pp])
            assert all(ev not in b for b in seg[pp:])
            assert len(seg) > pp
    assert plan.prefetch_points[-1] is None


def test_plan_json_round_trip():
    plan = plan_for(9)
    again = IterationPlan.from_json(plan.to_json())
    assert again.bucket_order == plan.bucket_order
    assert again.states == plan.states
    assert again.to_json() == plan.to_json()


def test_committed_fixture_matches(fixtures_dir):
    assert (fixtures_dir / "plan_n6.json").read_text() == plan_for(6).to_json()
    doc = json.loads((fixtures_dir / "plan_n6.json").read_text())
    assert set(doc) >= {"n", "states", "loads", "bucket_order", "prefetch_points"}


@pytest.mark.parametrize("n", range(4, 33))
def test_generated_plans_are_prefetchable(n):
    rep = verify_prefetchable(plan_for(n))
    assert rep.ok and rep.violating_states == []
    assert min(rep.window_sizes) >= 1


def test_greedy_order_is_not_prefetchable(fixtures_dir):
    rep = verify_prefetchable(marius_fixture_n4())
    assert not rep.ok and rep.violating_states == [0]
    loaded = IterationPlan.from_json((fixtures_dir / "marius_n4.json").read_text())
    assert not verify_prefetchable(loaded).ok


def test_reappearing_pairs_are_reported_not_fatal():
    rep = verify_prefetchable(plan_for(12))
    assert rep.ok
    assert isinstance(rep.reappearing_pairs, list)


def test_single_state_plan_rejected():
    seq = BufferStateSequence(3, [frozenset({0, 1, 2})])
    plan = IterationPlan(seq, [(i, j) for i in range(3) for j in range(3)], [0], [None])
    with pytest.raises(PlanError):
        verify_prefetchable(plan)
    with pytest.raises(PlanError):
        plan_iteration_order(seq)


def test_double_swap_rejected():
    with pytest.raises(PlanError):
        BufferStateSequence(5, [{0, 1, 2}, {0, 3, 4}])


def test_uncovering_sequence_rejected():
    seq = BufferStateSequence(4, [{0, 1, 2}, {0, 1, 3}])
    with pytest.raises(PlanError):
        plan_iteration_order(seq)


def test_wrong_residency_rejected():
    plan = plan_for(4)
    bad = plan.to_dict()
    order = bad["bucket_order"]
    order[0], order[-1] = order[-1], order[0]
    with pytest.raises(PlanError):
        IterationPlan.from_dict(bad)


@pytest.mark.parametrize("n", [4, 5, 6, 7])
def test_oracle_proximity(n):
    strict = oracle_min_io(n, True)
    loose = oracle_min_io(n, False)
    assert strict.min_states >= loose.min_states
    assert len(plan_loading_order(n)) <= strict.min_states + 2
    states = strict.witness.states
    assert len(states) == strict.min_states
    pairs = set()
    for s in states:
        pairs.update(itertools.combinations(sorted(s), 2))
    assert len(pairs) == n * (n - 1) // 2
    loads = strict.witness.loads
    assert all(l != e for (_, l), (e, _) in zip(loads, loads[1:]))


def test_oracle_values():
    assert oracle_min_io(4, False).min_states == 3
    assert oracle_min_io(6, True).min_states == 8
    assert len(plan_loading_order(6)) <= oracle_min_io(6, True).min_states + 1


def test_oracle_budget():
    with pytest.raises(ValueError):
        oracle_min_io(8, True)
