"""Adaptive multi-queue request scheduling for LLM inference serving.

The package bundles the scheduling policies (EWSJF plus FCFS and greedy SJF
baselines), the prompt-length queue partitioner, a batch cost model, a
discrete-event serving simulator and a Bayesian meta-optimizer for the
scheduling policy parameters.
"""

from ewsjf.costmodel import CostModelParams, batch_execution_time, prefill_cost
from ewsjf.engine import EngineConfig, MetricsReport, compute_metrics, run_simulation
from ewsjf.exceptions import (
    ConfigError,
    ContractViolation,
    EmptyInputError,
    TraceParseError,
)
from ewsjf.experiment import RunConfig, run_sweep, short_saturation_rate
from ewsjf.metaopt import MetaOptimizer, RewardConfig, compute_reward, propose_next, run_meta_loop
from ewsjf.partitioner import (
    PartitionParams,
    QueuePartition,
    QueuePartitioner,
    QueueSpec,
    kmeans_1d,
    online_adjust,
    prune_partition,
    refine_and_prune,
    refine_cluster,
    scheduling_utility,
)
from ewsjf.scheduler import (
    BatchBudget,
    EWSJFPolicy,
    FCFSPolicy,
    MetaParams,
    SJFPolicy,
    SchedulerState,
    ScoringWeights,
    create_bubble_queue,
    fcfs_step,
    route,
    score_queue,
    sjf_step,
    tactical_step,
    weights_for_queue,
)
from ewsjf.workload import (
    Request,
    RequestTrace,
    WorkloadConfig,
    WorkloadStats,
    generate_mixed_workload,
    load_trace,
    save_trace,
    trace_stats,
)

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "run_sweep",
    "short_saturation_rate",
    "BatchBudget",
    "ConfigError",
    "ContractViolation",
    "CostModelParams",
    "EWSJFPolicy",
    "EmptyInputError",
    "EngineConfig",
    "FCFSPolicy",
    "MetaOptimizer",
    "MetaParams",
    "MetricsReport",
    "PartitionParams",
    "QueuePartition",
    "QueuePartitioner",
    "QueueSpec",
    "Request",
    "RequestTrace",
    "RewardConfig",
    "SJFPolicy",
    "SchedulerState",
    "ScoringWeights",
    "TraceParseError",
    "WorkloadConfig",
    "WorkloadStats",
    "batch_execution_time",
    "compute_metrics",
    "compute_reward",
    "create_bubble_queue",
    "fcfs_step",
    "generate_mixed_workload",
    "kmeans_1d",
    "load_trace",
    "online_adjust",
    "prefill_cost",
    "propose_next",
    "prune_partition",
    "refine_and_prune",
    "refine_cluster",
    "route",
    "run_meta_loop",
    "run_simulation",
    "save_trace",
    "scheduling_utility",
    "score_queue",
    "sjf_step",
    "tactical_step",
    "trace_stats",
    "weights_for_queue",
]
