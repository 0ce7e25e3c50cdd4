"""Out-of-core knowledge-graph embedding with prefetch-aware partition swapping."""
from .embedding import ScoreModel, batch_gradients, batch_loss, evaluate, random_mrr
from .graph_store import Graph, PartitionPlan, PartitionStore, ingest, init_store, partition
from .nvme import AccessStrategy, NvmeConfig, submit_batch, transfer_partition
from .ordering import (IterationPlan, io_accounting, oracle_min_io, plan_iteration_order,
                       plan_loading_order, verify_prefetchable)
from .pipeline import CostModel, run_epoch, theorem3_check, utilization_report

__version__ = "0.1.0"

__all__ = [
    "AccessStrategy", "CostModel", "Graph", "IterationPlan", "NvmeConfig", "PartitionPlan",
    "PartitionStore", "ScoreModel", "batch_gradients", "batch_loss", "evaluate", "ingest",
    "init_store", "io_accounting", "oracle_min_io", "partition", "plan_iteration_order",
    "plan_loading_order", "random_mrr", "run_epoch", "submit_batch", "theorem3_check",
    "transfer_partition", "utilization_report", "verify_prefetchable",
]
