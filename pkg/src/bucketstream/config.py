"""Run configuration: one JSON file, nested sections, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from .embedding import MODELS
from .graph_store import FORMATS


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    train: Optional[str] = None
    test: Optional[str] = None
    format: str = "tsv-triples"
    remap: bool = False
    # used only when no test file is given
    test_fraction: float = 0.1


@dataclass
class CostConfig:
    t: float = 1e-7
    w: float = 2e9
    r: float = 3e9
    M: float = 15e9
    d: int = 100


@dataclass
class NvmeSettings:
    page_size: int = 4096
    depth: int = 1024
    queue_count: int = 8
    batch_size: int = 32
    workers: int = 32
    seed: int = 0
    ring_latency: float = 1e-6
    bandwidth: float = 3.06e9
    block_bytes: int = 8 << 20
    enqueue_mode: str = "batch-precomputed"
    doorbell_mode: str = "full-coalesced"
    polling_mode: str = "batch-counter"


@dataclass
class GraphStats:
    # defaults: the Twitter graph
    num_edges: float = 1.46e9
    num_nodes: float = 4.16e7


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    n: int = 4
    dim: int = 50
    model: str = "complex"
    lr: float = 0.1
    batch_size: int = 1000
    negatives: int = 64
    epochs: int = 10
    corrupt: str = "dst"
    eval_candidates: int = 999
    eval_k: int = 10
    eval_max_edges: int = 0
    seed: int = 0
    timing: str = "modeled"
    cost: CostConfig = field(default_factory=CostConfig)
    nvme: NvmeSettings = field(default_factory=NvmeSettings)
    graph_stats: GraphStats = field(default_factory=GraphStats)
    out_dir: str = "out"

    def validate(self) -> "RunConfig":
        checks = [
            (self.n >= 1, "n must be >= 1"),
            (self.dim >= 1, "dim must be >= 1"),
            (self.model in MODELS, f"model must be one of {MODELS}"),
            (self.model != "complex" or self.dim % 2 == 0, "complex needs an even dim"),
            (self.lr > 0, "lr must be positive"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.negatives >= 1, "negatives must be >= 1"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.corrupt in ("src", "dst"), "corrupt must be 'src' or 'dst'"),
            (self.eval_candidates >= 1, "eval_candidates must be >= 1"),
            (self.eval_k >= 1, "eval_k must be >= 1"),
            (self.eval_max_edges >= 0, "eval_max_edges must be >= 0"),
            (self.timing in ("modeled", "measured"), "timing must be 'modeled' or 'measured'"),
            (self.dataset.format in FORMATS, f"dataset.format must be one of {FORMATS}"),
            (0 < self.dataset.test_fraction < 1, "dataset.test_fraction must be in (0, 1)"),
            (all(v > 0 for v in dataclasses.asdict(self.cost).values()), "cost parameters must be positive"),
            (self.graph_stats.num_edges > 0 and self.graph_stats.num_nodes > 0, "graph_stats must be positive"),
        ]
        nv = self.nvme
        checks += [
            (nv.page_size > 0 and nv.depth >= 2 and nv.queue_count >= 1, "nvme geometry must be positive"),
            (1 <= nv.batch_size < nv.depth, "nvme.batch_size must be in [1, depth)"),
            (nv.workers >= 1 and nv.ring_latency > 0 and nv.bandwidth > 0, "nvme timing must be positive"),
            (nv.block_bytes > 0, "nvme.block_bytes must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data: Dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else fields[name].default
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, path)
            continue
        kwargs[name] = _coerce(value, default, path)
    return cls(**kwargs)


def _coerce(value, default, path: str):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{path} must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path} must be a string")
    return value


def from_dict(data: Dict[str, Any]) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_config(path: Optional[os.PathLike]) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)


def apply_overrides(cfg: RunConfig, assignments) -> RunConfig:
    """Apply ``dotted.key=value`` strings; values are parsed as JSON when possible."""
    data = cfg.to_dict()
    for item in assignments or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config section {p!r} in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return from_dict(data)
