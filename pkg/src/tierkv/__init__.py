"""tierkv: stability-aware two-tier KV cache management and serving simulation.

The package splits into small layers:

* :mod:`tierkv.config` — frozen run configuration and flat-file config I/O.
* :mod:`tierkv.trace` — binary top-K selection traces (synthetic generation,
  load/save with byte-offset diagnostics).
* :mod:`tierkv.stability` — rank-correlation overlap, temporal stability,
  head classification into stable/unstable sets, cross-task overlap.
* :mod:`tierkv.scoring` — per-page min/max key metadata and upper-bound
  query scoring with top-K selection.
* :mod:`tierkv.blocktable` — paged physical block pool, logical→physical
  mapping with shadow/dirty tracking and block recycling.
* :mod:`tierkv.tiering` — fast↔slow transfer events, write-once offload
  ledger, transfer timing.
* :mod:`tierkv.attention` — float64 reference attention (dense and
  page-sparse) for numerical validation.
* :mod:`tierkv.simulator` — batch serving simulator with dense and
  selection-based residency policies.
"""

from .config import Config, HeadId, load_config, save_config
from .errors import (AdmissionError, ConfigError, ConsistencyError,
                     DegeneratePoolError, PoolExhausted, TierKVError,
                     TraceFormatError)
from .trace import TopKTrace, gen_synthetic_trace, load_trace, save_trace
from .stability import (HeadProfile, StabilityReport, classify_heads,
                        compute_stability_report, cross_task_overlap, rco,
                        temporal_stability)
from .scoring import (MinMaxCache, MinMaxMeta, TopKSet, build_minmax,
                      rerank_due, score_page, score_pages, select_topk)
from .blocktable import NULL_BLOCK, BlockTable, PhysicalPool, RecyclePlan
from .tiering import TierStore, TransferEvent, transfer_time
from .attention import AttentionState, dense_decode, sparse_decode, sparsity_error
from .workload import Request, assign_poisson_arrivals, make_requests
from .simulator import (CostModel, Metrics, SimResult, memory_savings,
                        run_offline, run_online)

__version__ = "0.1.0"

__all__ = [
    "AdmissionError", "AttentionState", "BlockTable", "Config", "ConfigError",
    "ConsistencyError", "CostModel", "DegeneratePoolError", "HeadId",
    "HeadProfile", "Metrics", "MinMaxCache", "MinMaxMeta", "NULL_BLOCK",
    "PhysicalPool", "PoolExhausted", "RecyclePlan", "Request", "SimResult",
    "StabilityReport", "TierKVError", "TierStore", "TopKSet", "TopKTrace",
    "TraceFormatError", "TransferEvent", "assign_poisson_arrivals",
    "build_minmax", "classify_heads", "compute_stability_report",
    "cross_task_overlap", "dense_decode", "gen_synthetic_trace", "load_config",
    "load_trace", "make_requests", "memory_savings", "rco", "rerank_due",
    "run_offline", "run_online", "save_config", "save_trace", "score_page",
    "score_pages", "select_topk", "sparse_decode", "sparsity_error",
    "temporal_stability", "transfer_time",
]
