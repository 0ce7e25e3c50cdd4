"""Seeded synthetic graphs for tests, demos and the offline quality check."""
from __future__ import annotations

from pathlib import Path
from typing import Tuple

import numpy as np

from .graph_store import Graph


def powerlaw_graph(num_nodes: int, num_edges: int, seed: int = 0, exponent: float = 1.2,
                   num_relations: int = 0) -> Graph:
    """Edges whose endpoints follow a Zipf-like popularity over shuffled node ids."""
    rng = np.random.default_rng(seed)
    weights = 1.0 / np.arange(1, num_nodes + 1) ** exponent
    weights = weights[rng.permutation(num_nodes)]
    weights /= weights.sum()
    src = rng.choice(num_nodes, size=num_edges, p=weights)
    dst = rng.choice(num_nodes, size=num_edges, p=weights)
    # pin the id space so every node is addressable
    src[0], dst[0] = 0, num_nodes - 1
    rel = rng.integers(0, num_relations, num_edges) if num_relations else None
    return Graph(num_nodes, num_relations, src, dst, rel)


def planted_kg(num_nodes: int = 14951, num_relations: int = 1345, num_edges: int = 542213,
               clusters: int = 100, seed: int = 0, noise: float = 0.05, source_types: int = 4) -> Graph:
    """A knowledge graph with learnable structure.

    Nodes fall into ``clusters`` groups, and groups into ``source_types``
    coarse types.  A relation sends each source type to a fixed target group,
    and targets inside a group are drawn with Zipf-like popularity; ``noise``
    of the edges get a uniformly random target instead.
    Relation usage is itself skewed, as in real KGs.  The default sizes match
    FB15k (train + test edges).
    """
    rng = np.random.default_rng(seed)
    group = rng.integers(0, clusters, num_nodes)
    members = [np.flatnonzero(group == c) for c in range(clusters)]
    members = [m if m.size else rng.integers(0, num_nodes, 1) for m in members]
    pop = [1.0 / np.arange(1, m.size + 1) ** 1.1 for m in members]
    pop = [p / p.sum() for p in pop]
    target = rng.integers(0, clusters, size=(num_relations, source_types))

    rel_w = 1.0 / np.arange(1, num_relations + 1) ** 0.9
    rel = rng.choice(num_relations, size=num_edges, p=rel_w / rel_w.sum())
    src = rng.integers(0, num_nodes, num_edges)
    tgt_group = target[rel, group[src] % source_types]
    dst = np.empty(num_edges, dtype=np.int64)
    order = np.argsort(tgt_group, kind="stable")
    bounds = np.searchsorted(tgt_group[order], np.arange(clusters + 1))
    for c in range(clusters):
        idx = order[bounds[c]:bounds[c + 1]]
        dst[idx] = rng.choice(members[c], size=idx.size, p=pop[c])
    flip = rng.random(num_edges) < noise
    dst[flip] = rng.integers(0, num_nodes, int(flip.sum()))
    src[0], dst[0] = 0, num_nodes - 1
    return Graph(num_nodes, num_relations, src, dst, rel)


def write_labelled(g: Graph, path: Path, prefix: str = "/m/") -> None:
    """Write ``head<TAB>relation<TAB>tail`` rows with string labels."""
    lines = [f"{prefix}{s:06x}\t/r/{r}\t{prefix}{d:06x}\n" for s, r, d in zip(g.src, g.rel, g.dst)]
    Path(path).write_text("".join(lines))


def split(g: Graph, test_edges: int, seed: int = 0) -> Tuple[Graph, Graph]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(g.num_edges)
    return g.subset(np.sort(perm[test_edges:])), g.subset(np.sort(perm[:test_edges]))
