"""
Planning partition swaps for a three-slot buffer
================================================

Every pair of partitions has to share the buffer at least once per epoch, so
the order of loads decides the I/O volume.  The order of buckets inside each
buffer state then decides whether the next swap can overlap with compute.
"""

import numpy as np

from bucketstream.ordering import (io_accounting, marius_fixture_n4, oracle_min_io, plan_iteration_order,
                                   plan_loading_order, verify_prefetchable)

# A loading order for six partitions: each step evicts one partition and
# loads another, and the union of states covers all fifteen pairs.
seq = plan_loading_order(6)
for k, state in enumerate(seq.states):
    print(k, sorted(state))
print("swaps (evicted, loaded):", seq.loads)

# Swap counts grow roughly like n^2 / 4; volume is measured in units of the
# whole embedding table.
for n in (6, 8, 10, 12, 14, 16):
    acct = io_accounting(plan_loading_order(n), 1.0)
    print(f"n={n:2d} states={acct.io_times:3d} volume={acct.volume_over_total:.2f}x")

# Small cases against an exhaustive search.
for n in range(4, 8):
    print(f"n={n} planned={len(plan_loading_order(n))} optimum={oracle_min_io(n, True).min_states}")

# Bucket order: first the buckets that need the partition about to leave,
# then the rest.  The tail after the prefetch point is the overlap window.
plan = plan_iteration_order(seq)
for k in range(len(plan.states) - 1):
    seg = plan.segment(k)
    pp = plan.prefetch_points[k] - plan.state_offsets[k]
    print(f"state {k}: before swap {seg[:pp]}  window {seg[pp:]}")

report = verify_prefetchable(plan)
print("prefetchable:", report.ok, "window sizes:", report.window_sizes)

# A greedy order that finishes a state's buckets without regard to the
# next eviction leaves no window in its first state.
greedy = verify_prefetchable(marius_fixture_n4())
print("greedy order prefetchable:", greedy.ok, "states without window:", greedy.violating_states)

# Larger plans stay prefetchable; the smallest window is what bounds overlap.
sizes = [min(verify_prefetchable(plan_iteration_order(plan_loading_order(n))).window_sizes) for n in range(4, 25)]
print("smallest window for n=4..24:", np.array(sizes))
