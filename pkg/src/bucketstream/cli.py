"""Command line: ingest, partition, order, simulate, train, eval, report.

Exit status is 0 on success, 1 for invalid input or a failed verification,
and 2 for runtime failures (I/O and the like).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import workflow as wf
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .embedding import random_mrr
from .graph_store import Graph, PartitionStore, init_store, partition
from .nvme import all_strategies, transfer_partition
from .ordering import IterationPlan, PlanError, io_accounting, verify_prefetchable
from .pipeline import check_dependencies, partitions_for_buffer, run_epoch, theorem3_check, utilization_report

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class VerificationFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _sci(x: float, digits: int) -> str:
    mant, exp = f"{x:.{digits - 1}e}".split("e")
    return f"{mant}e{int(exp)}"


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_ingest(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    train, test = wf.load_dataset(cfg)
    train.save(out / "graph.npz")
    test.save(out / "test.npz")
    info = {"num_nodes": train.num_nodes, "num_relations": train.num_relations,
            "train_edges": train.num_edges, "test_edges": test.num_edges}
    wf.dump_json(info, out / "graph.json")
    print(f"nodes={train.num_nodes} relations={train.num_relations} "
          f"train_edges={train.num_edges} test_edges={test.num_edges}")
    return EXIT_OK


def _graph(out: Path) -> Graph:
    path = out / "graph.npz"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run ingest first")
    return Graph.load(path)


def cmd_partition(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    g = _graph(out)
    pplan = partition(g, cfg.n)
    wf.save_partition_plan(pplan, out / "partition.npz")
    sizes = pplan.bucket_sizes
    np.savetxt(out / "bucket_sizes.csv", sizes, fmt="%d", delimiter=",")
    if args.init:
        init_store(pplan, cfg.dim, cfg.seed, out / "store", g.num_relations if cfg.model != "dot" else 0)
    print(f"n={pplan.n} part_size={pplan.part_size} edges={int(sizes.sum())} "
          f"largest_bucket={int(sizes.max())} empty_buckets={int((sizes == 0).sum())}")
    return EXIT_OK


def cmd_order(cfg: RunConfig, args) -> int:
    if args.plan:
        plan = IterationPlan.from_json(Path(args.plan).read_text())
    else:
        if cfg.n < 4:
            raise ConfigError(f"order needs n >= 4, got {cfg.n}")
        plan = wf.build_plan(cfg.n)
    if args.emit_fixture:
        sys.stdout.write(plan.to_json())
        return EXIT_OK
    report = verify_prefetchable(plan)
    acct = io_accounting(plan.buffer_seq, 1.0)
    if not args.plan:
        out = _out(cfg)
        (out / "plan.json").write_text(plan.to_json())
    print(f"io_times={acct.io_times}, volume={acct.volume_over_total:.2f}S, "
          f"prefetchable={'yes' if report.ok else 'no'}")
    if not report.ok:
        print(f"states without a prefetch window: {report.violating_states}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def _simulate_io(cfg: RunConfig) -> int:
    out = _out(cfg)
    ncfg = wf.nvme_config(cfg)
    size = cfg.nvme.block_bytes
    block = np.frombuffer(np.random.default_rng(cfg.seed).bytes(size), dtype=np.uint8)
    scratch = out / "io_block.bin"
    rows = []
    for strat in all_strategies():
        _, off = transfer_partition(scratch, "offload", size, strat, ncfg, buffer=block)
        back, rep = transfer_partition(scratch, "load", size, strat, ncfg)
        if not np.array_equal(back[:size], block):
            raise RuntimeError(f"round trip mismatch under {strat.label}")
        rows.append([strat.enqueue_mode, strat.doorbell_mode, strat.polling_mode, rep.commands, rep.batches,
                     rep.sq_rings, rep.cq_rings, rep.lock_events, rep.modeled_seconds,
                     size / rep.modeled_seconds / 1e9])
    scratch.unlink()
    header = ["enqueue", "doorbell", "polling", "commands", "batches", "sq_rings", "cq_rings",
              "lock_events", "modeled_seconds", "modeled_gbps"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r[:8] + [repr(r[8]), repr(r[9])])
    (out / "io.csv").write_text(buf.getvalue())
    print(f"{'enqueue':<19} {'doorbell':<15} {'polling':<14} {'cmds':>6} {'sq':>6} {'cq':>6} {'locks':>6} {'GB/s':>7}")
    for r in rows:
        print(f"{r[0]:<19} {r[1]:<15} {r[2]:<14} {r[3]:>6} {r[5]:>6} {r[6]:>6} {r[7]:>6} {r[9]:>7.3f}")
    return EXIT_OK


def _simulate_overlap(cfg: RunConfig) -> int:
    out = _out(cfg)
    cost = wf.cost_model(cfg)
    gs = cfg.graph_stats
    check = theorem3_check(gs.num_edges, gs.num_nodes, cost)
    n = max(cfg.n, 4, math.ceil(partitions_for_buffer(gs.num_nodes, cost)))
    plan = wf.build_plan(n)
    part_bytes = 2 * math.ceil(gs.num_nodes / n) * cost.d * 4
    sizes = np.full((n, n), gs.num_edges / n ** 2)
    res = run_epoch(plan, cost, "cost-only", sizes, part_bytes, prefetch=True)
    base = run_epoch(plan, cost, "cost-only", sizes, part_bytes, prefetch=False)
    check_dependencies(res.timeline)
    (out / "timeline.csv").write_text(res.timeline.to_csv())
    summary = {
        "lhs": check.lhs, "rhs": check.rhs, "covered": check.covered, "n": n,
        "partition_bytes": part_bytes,
        "prefetch": utilization_report(res.timeline),
        "no_prefetch": utilization_report(base.timeline),
    }
    wf.dump_json(summary, out / "overlap.json")
    rel = "≥" if check.covered else "<"
    print(f"covered={'true' if check.covered else 'false'} ({_sci(check.lhs, 2)} {rel} {_sci(check.rhs, 3)})")
    print(f"n={n} stall_s={res.timeline.stall_s:.3f} epoch_s={res.timeline.epoch_s:.3f} "
          f"(no prefetch: {base.timeline.epoch_s:.3f}) utilization={res.timeline.utilization:.3f}")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, args) -> int:
    return _simulate_io(cfg) if args.which == "io" else _simulate_overlap(cfg)


def _test_graph(out: Path) -> Graph:
    path = out / "test.npz"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run ingest first")
    return Graph.load(path)


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    g, test = _graph(out), _test_graph(out)
    pplan = wf.load_partition_plan(out / "partition.npz") if (out / "partition.npz").exists() else None
    if pplan is not None and pplan.n != cfg.n:
        pplan = None
    plan = None
    if (out / "plan.json").exists():
        cand = IterationPlan.from_json((out / "plan.json").read_text())
        plan = cand if cand.n == cfg.n else None
    store_dir = out / "store"
    if not args.init and not (store_dir / "store.json").exists():
        raise ConfigError(f"{store_dir} is not initialised; pass --init")
    res = wf.train(cfg, g, test, store_dir, init=args.init, pplan=pplan, plan=plan)
    (out / "metrics.csv").write_text(wf.metrics_csv(res.metrics))
    (out / "timeline.csv").write_text(res.timeline_csv)
    wf.dump_json(res.summary, out / "train.json")
    for m in res.metrics:
        print(f"epoch={m.epoch} loss={m.loss:.4f} mrr={m.mrr:.4f} hits@{cfg.eval_k}={m.hits:.4f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    test = _test_graph(out)
    store = PartitionStore.open(out / "store")
    res = wf.evaluate_store(cfg, store, test)
    base = random_mrr(cfg.eval_candidates)
    doc = {"mrr": res.mrr, f"hits@{cfg.eval_k}": res.hits_at_k, "count": res.count,
           "candidates": cfg.eval_candidates, "random_mrr": base, "ratio_to_random": res.mrr / base}
    wf.dump_json(doc, out / "eval.json")
    print(f"mrr={res.mrr:.4f} hits@{cfg.eval_k}={res.hits_at_k:.4f} random_mrr={base:.4f} "
          f"ratio={res.mrr / base:.1f}")
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    doc = {"config": cfg.to_dict()}
    for name in ("graph.json", "overlap.json", "train.json", "eval.json"):
        p = out / name
        if p.exists():
            doc[name[:-5]] = json.loads(p.read_text())
    if (out / "plan.json").exists():
        plan = IterationPlan.from_json((out / "plan.json").read_text())
        rep = verify_prefetchable(plan)
        acct = io_accounting(plan.buffer_seq, 1.0)
        doc["plan"] = {"n": plan.n, "io_times": acct.io_times, "volume_over_total": acct.volume_over_total,
                       "prefetchable": rep.ok, "min_window": min(rep.window_sizes)}
    if (out / "metrics.csv").exists():
        doc["metrics"] = list(csv.DictReader(io.StringIO((out / "metrics.csv").read_text())))
    if (out / "io.csv").exists():
        doc["io"] = list(csv.DictReader(io.StringIO((out / "io.csv").read_text())))
    wf.dump_json(doc, out / "report.json")
    sections = [k for k in doc if k != "config"]
    print(f"report.json written with sections: {', '.join(sections) if sections else '(none)'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set cost.t=2e-7")
    common.add_argument("--n", type=int, help="partition count")
    common.add_argument("--seed", type=int)

    p = _Parser(prog="bucketstream", description="Out-of-core graph embedding with prefetch-aware partition swaps.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", parents=[common], help="read edge lists")
    s.add_argument("--train", help="training edge file")
    s.add_argument("--test", help="test edge file (shares the id space)")
    s.add_argument("--format", choices=["tsv-triples", "tsv-pairs", "tsv-labels"])
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("partition", parents=[common], help="bucket the edges")
    s.add_argument("--init", action="store_true", help="also write freshly initialised partition files")
    s.add_argument("--dim", type=int)
    s.set_defaults(func=cmd_partition)

    s = sub.add_parser("order", parents=[common], help="plan partition swaps and bucket order")
    s.add_argument("--emit-fixture", action="store_true", help="print the plan JSON to stdout")
    s.add_argument("--plan", help="verify an existing plan file instead of generating one")
    s.set_defaults(func=cmd_order)

    s = sub.add_parser("simulate", parents=[common], help="NVMe strategy table or overlap timeline")
    s.add_argument("which", choices=["io", "overlap"])
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", parents=[common], help="train through the swap pipeline")
    s.add_argument("--init", action="store_true", help="start from freshly initialised partitions")
    s.add_argument("--epochs", type=int)
    s.add_argument("--dim", type=int)
    s.add_argument("--model", choices=["dot", "distmult", "complex"])
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="rank test edges against sampled corruptions")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", parents=[common], help="collect outputs into report.json")
    s.set_defaults(func=cmd_report)
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    sets = list(args.set)
    for flag, key in (("n", "n"), ("seed", "seed"), ("epochs", "epochs"), ("dim", "dim"), ("model", "model"),
                      ("train", "dataset.train"), ("test", "dataset.test"), ("format", "dataset.format")):
        value = getattr(args, flag, None)
        if value is not None:
            sets.append(f"{key}={json.dumps(value)}")
    if args.out:
        sets.append(f"out_dir={json.dumps(args.out)}")
    return apply_overrides(cfg, sets)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config(args)
        return args.func(cfg, args)
    except (ConfigError, PlanError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
