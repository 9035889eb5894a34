"""Run configuration and scheduler-comparison sweeps."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from ewsjf.costmodel import CostModelParams, prefill_cost
from ewsjf.engine import SCHEDULERS, EngineConfig, MetricsReport, run_simulation
from ewsjf.exceptions import ConfigError
from ewsjf.metaopt import DEFAULT_BOUNDS, RewardConfig
from ewsjf.partitioner import PartitionParams, QueuePartition, refine_and_prune
from ewsjf.scheduler import BatchBudget, MetaParams
from ewsjf.workload import RequestTrace, WorkloadConfig, generate_mixed_workload

SECTIONS = (
    "workload",
    "cost_model",
    "batch_budget",
    "meta_params",
    "partition_params",
    "engine",
    "reward",
    "sweep",
    "metaopt",
    "history_requests",
    "output_dir",
)


@dataclass(frozen=True)
class MetaoptSettings:
    trials: int = 12
    n_init: int = 4
    seed: int = 0
    surrogate: str = "gp"
    bounds: Optional[dict] = None

    def resolved_bounds(self) -> dict:
        if self.bounds is None:
            return dict(DEFAULT_BOUNDS)
        return {k: tuple(v) for k, v in self.bounds.items()}


@dataclass(frozen=True)
class RunConfig:
    workload: WorkloadConfig = WorkloadConfig()
    engine: EngineConfig = EngineConfig()
    meta_params: MetaParams = MetaParams()
    partition_params: PartitionParams = PartitionParams()
    reward: RewardConfig = RewardConfig()
    metaopt: MetaoptSettings = MetaoptSettings()
    schedulers: Tuple[str, ...] = ("fcfs", "sjf", "ewsjf")
    arrival_rates: Tuple[float, ...] = (10.0, 20.0, 40.0)
    history_requests: int = 20000
    output_dir: str = "out"

    def __post_init__(self):
        for s in self.schedulers:
            if s not in SCHEDULERS:
                raise ConfigError(f"unknown scheduler {s!r}")
        for r in self.arrival_rates:
            if not r > 0:
                raise ConfigError(f"arrival rates must be positive, got {r}")
        if self.history_requests < 1:
            raise ConfigError("history_requests must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cost = CostModelParams.from_dict(doc.get("cost_model", {}))
        budget = BatchBudget.from_dict(doc.get("batch_budget", {}))
        pparams = PartitionParams.from_dict(doc.get("partition_params", {}))
        engine_doc = dict(doc.get("engine", {}))
        engine = EngineConfig.from_dict(engine_doc, cost_model=cost, batch_budget=budget, partition_params=pparams)
        sweep = doc.get("sweep", {})
        unknown = set(sweep) - {"schedulers", "arrival_rates"}
        if unknown:
            raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
        meta_doc = doc.get("metaopt", {})
        unknown = set(meta_doc) - set(MetaoptSettings.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown metaopt keys: {sorted(unknown)}")
        return cls(
            workload=WorkloadConfig.from_dict(doc.get("workload", {})),
            engine=engine,
            meta_params=MetaParams.from_dict(doc.get("meta_params", {})),
            partition_params=pparams,
            reward=RewardConfig.from_dict(doc.get("reward", {})),
            metaopt=MetaoptSettings(**meta_doc),
            schedulers=tuple(sweep.get("schedulers", cls.schedulers)),
            arrival_rates=tuple(float(r) for r in sweep.get("arrival_rates", cls.arrival_rates)),
            history_requests=int(doc.get("history_requests", cls.history_requests)),
            output_dir=str(doc.get("output_dir", cls.output_dir)),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_dict(doc)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(
            self,
            workload=replace(self.workload, rng_seed=seed),
            metaopt=replace(self.metaopt, seed=seed),
        )


def baseline_partition(
    workload: WorkloadConfig,
    history_requests: int,
    params: PartitionParams,
    meta: MetaParams,
) -> QueuePartition:
    """Offline partition learned from a history trace drawn from the same workload."""
    history = generate_mixed_workload(
        replace(workload, rng_seed=workload.rng_seed + 1, total_requests=history_requests)
    )
    return refine_and_prune(history.prompt_lens, replace(params, alpha=meta.alpha, max_queues=meta.max_queues))


@dataclass
class SweepResult:
    rows: List[dict] = field(default_factory=list)
    reports: Dict[Tuple[str, float], MetricsReport] = field(default_factory=dict)
    failures: List[str] = field(default_factory=list)


def run_sweep(
    cfg: RunConfig,
    trace: Optional[RequestTrace] = None,
    partition: Optional[QueuePartition] = None,
) -> SweepResult:
    """One simulation per (scheduler, arrival rate).

    Without ``trace`` a fresh trace is generated per rate. A given
    ``partition`` pins the multi-queue policy; otherwise it starts from an
    offline baseline and keeps adapting.
    """
    result = SweepResult()
    if trace is not None:
        span = trace[-1].arrival_time if len(trace) else 0.0
        plans = [(len(trace) / span if span > 0 else 0.0, trace, cfg.workload)]
    else:
        plans = []
        for rate in cfg.arrival_rates:
            wl = replace(cfg.workload, arrival_rate=rate)
            plans.append((rate, None, wl))
    run = 0
    for scheduler in cfg.schedulers:
        for rate, given, wl in plans:
            label = f"{scheduler}@{rate:g}"
            row = {"run": run, "scheduler": scheduler, "arrival_rate": rate}
            run += 1
            try:
                tr = given if given is not None else generate_mixed_workload(wl)
                engine = replace(cfg.engine, scheduler=scheduler)
                part = partition
                if scheduler == "ewsjf":
                    if partition is not None:
                        engine = replace(engine, adaptive=False)
                    elif given is not None:
                        part = refine_and_prune(
                            given.prompt_lens,
                            replace(cfg.partition_params, alpha=cfg.meta_params.alpha,
                                    max_queues=cfg.meta_params.max_queues),
                        )
                    else:
                        part = baseline_partition(wl, cfg.history_requests, cfg.partition_params, cfg.meta_params)
                report = run_simulation(tr, engine, cfg.meta_params, part)
            except Exception as exc:  # a failed run becomes a failed row
                row["status"] = f"failed: {exc}"
                result.failures.append(f"{label}: {exc}")
            else:
                row.update(report.row())
                row["status"] = "ok"
                result.reports[(scheduler, rate)] = report
            result.rows.append(row)
    return result


def _expected_max_uniform(lo: int, hi: int, n: int) -> float:
    """E[max] of ``n`` iid draws from the integers ``lo..hi``."""
    m = hi - lo + 1
    return lo + sum(1.0 - (k / m) ** n for k in range(1, m))


def short_saturation_rate(workload: WorkloadConfig, cost: CostModelParams, budget: BatchBudget) -> float:
    """Total arrival rate at which short requests alone fill the engine.

    Assumes full batches of ``budget.max_requests`` average-length shorts.
    Above this rate a shortest-first scheduler always has short work queued.
    """
    n = budget.max_requests
    lo, hi = workload.short_len_range
    mean_len = (lo + hi) / 2
    n = min(n, max(1, budget.max_tokens // max(1, int(mean_len))))
    prefill = prefill_cost(cost, mean_len) * sum(cost.batch_efficiency**k for k in range(n))
    longest = _expected_max_uniform(*workload.short_output_range, n)
    decode = longest * cost.decode_per_token * (1.0 + cost.batch_efficiency * (n - 1))
    capacity = n / (prefill + decode)
    if workload.short_fraction == 0:
        return float("inf")
    return capacity / workload.short_fraction
