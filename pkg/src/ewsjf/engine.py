"""Discrete-event simulation of a batch-serial serving engine.

One engine runs one batch at a time. Whenever it is idle and requests are
pending, the active policy forms the next batch; the batch holds the engine
for its modelled execution time. A request's first token appears when its
own (discounted) prefill finishes within the batch, in pull order.

For the multi-queue policy two background ticks can run: a strategic tick
that rebuilds the partition from recently completed requests, and a more
frequent online tick that nudges boundaries.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from ewsjf.costmodel import CostModelParams, batch_execution_time, prefill_shares
from ewsjf.exceptions import ConfigError
from ewsjf.partitioner import PartitionParams, QueuePartition, online_adjust, refine_and_prune
from ewsjf.scheduler import BatchBudget, EWSJFPolicy, MetaParams, make_policy
from ewsjf.workload import RequestTrace

SCHEDULERS = ("ewsjf", "fcfs", "sjf")

METRIC_COLUMNS = (
    "requests_completed",
    "elapsed",
    "req_per_s",
    "tok_per_s",
    "ttft_mean",
    "ttft_p95",
    "ttft_mean_short",
    "ttft_p95_short",
    "ttft_mean_long",
    "ttft_p95_long",
    "max_wait",
    "busy_fraction",
    "pending_at_end",
    "truncated",
)


@dataclass(frozen=True)
class EngineConfig:
    scheduler: str = "ewsjf"
    batch_budget: BatchBudget = BatchBudget()
    cost_model: CostModelParams = CostModelParams()
    strategic_interval: float = 600.0
    online_interval: float = 60.0
    horizon: Optional[float] = None
    adaptive: bool = True
    class_boundary: int = 512
    backlog_interval: float = 1.0
    monitor_window: int = 50000
    min_window: int = 100
    max_shift: float = 0.25
    partition_params: PartitionParams = PartitionParams()

    def __post_init__(self):
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"scheduler must be one of {SCHEDULERS}, got {self.scheduler!r}")
        if not self.strategic_interval > self.online_interval > 0:
            raise ConfigError("need strategic_interval > online_interval > 0")
        if self.horizon is not None and self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        if not self.backlog_interval > 0:
            raise ConfigError("backlog_interval must be positive")
        if self.monitor_window < 1:
            raise ConfigError("monitor_window must be positive")
        if self.min_window < 1:
            raise ConfigError("min_window must be positive")

    @classmethod
    def from_dict(cls, data: dict, **sections) -> "EngineConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown engine keys: {sorted(unknown)}")
        return cls(**{**data, **sections})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsReport:
    requests_completed: int = 0
    elapsed: float = 0.0
    req_per_s: float = 0.0
    tok_per_s: float = 0.0
    ttft_mean: float = 0.0
    ttft_p95: float = 0.0
    ttft_mean_short: float = 0.0
    ttft_p95_short: float = 0.0
    ttft_mean_long: float = 0.0
    ttft_p95_long: float = 0.0
    max_wait: float = 0.0
    busy_fraction: float = 0.0
    pending_at_end: int = 0
    truncated: bool = False
    empty: bool = False
    n_short: int = 0
    n_long: int = 0
    per_queue_load: dict = field(default_factory=dict)
    backlog_trace: list = field(default_factory=list)
    partition: Optional[QueuePartition] = None
    batches: Optional[list] = None

    def row(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_COLUMNS}


def nearest_rank(values: Sequence[float], pct: float) -> float:
    if not values:
        return 0.0
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


def _mean(values):
    return sum(values) / len(values) if values else 0.0


def compute_metrics(completed: Sequence, class_boundary: int, elapsed: float, busy_time: float = 0.0) -> MetricsReport:
    """Exact statistics over completed requests; p95 uses the nearest rank."""
    if not completed:
        return MetricsReport(elapsed=elapsed, empty=True)
    ttft = [r.first_token_time - r.arrival_time for r in completed]
    short = [t for t, r in zip(ttft, completed) if r.prompt_len < class_boundary]
    long_ = [t for t, r in zip(ttft, completed) if r.prompt_len >= class_boundary]
    waits = [(r.start_time if r.start_time is not None else r.first_token_time) - r.arrival_time for r in completed]
    tokens = sum(r.prompt_len + r.output_len for r in completed)
    rate = (lambda x: x / elapsed) if elapsed > 0 else (lambda x: 0.0)
    return MetricsReport(
        requests_completed=len(completed),
        elapsed=elapsed,
        req_per_s=rate(len(completed)),
        tok_per_s=rate(tokens),
        ttft_mean=_mean(ttft),
        ttft_p95=nearest_rank(ttft, 95),
        ttft_mean_short=_mean(short),
        ttft_p95_short=nearest_rank(short, 95),
        ttft_mean_long=_mean(long_),
        ttft_p95_long=nearest_rank(long_, 95),
        max_wait=max(waits),
        busy_fraction=rate(busy_time),
        n_short=len(short),
        n_long=len(long_),
        per_queue_load=dict(sorted(Counter(r.assigned_queue for r in completed).items())),
    )


def run_simulation(
    trace: RequestTrace,
    config: EngineConfig = EngineConfig(),
    meta: MetaParams = MetaParams(),
    partition: Optional[QueuePartition] = None,
    record_batches: bool = False,
) -> MetricsReport:
    """Replay ``trace`` through the configured policy.

    ``partition`` seeds the multi-queue policy; with ``config.adaptive`` off it
    stays pinned, otherwise strategic and online ticks keep refining it. The
    input trace is not mutated.
    """
    requests = [r.fresh() for r in trace]
    policy = make_policy(config.scheduler, partition, meta, config.cost_model)
    adaptive = isinstance(policy, EWSJFPolicy) and config.adaptive
    current = partition
    pparams = PartitionParams(
        alpha=meta.alpha,
        min_width=config.partition_params.min_width,
        max_queues=meta.max_queues,
        epsilon=config.partition_params.epsilon,
        coarse_k=config.partition_params.coarse_k,
    )
    budget, cost, boundary = config.batch_budget, config.cost_model, config.class_boundary
    horizon = math.inf if config.horizon is None else config.horizon

    inf = math.inf
    n, i = len(requests), 0
    busy_until, inflight = inf, []
    next_strategic = config.strategic_interval if adaptive else inf
    next_online = config.online_interval if adaptive else inf
    next_sample, samples = 0.0, 0
    pending_short = pending_long = 0
    completed, strategic_window, online_window = [], [], []
    backlog, batches = [], [] if record_batches else None
    busy_time, now, truncated = 0.0, 0.0, False

    while True:
        if i == n and not inflight and pending_short + pending_long == 0:
            break
        arrival = requests[i].arrival_time if i < n else inf
        t = min(arrival, busy_until, next_strategic, next_online, next_sample)
        if t > horizon:
            truncated = True
            now = horizon
            break
        now = t

        if busy_until == t:
            completed.extend(inflight)
            lens = [r.prompt_len for r in inflight]
            strategic_window.extend(lens)
            online_window.extend(lens)
            if len(strategic_window) > config.monitor_window:
                del strategic_window[: len(strategic_window) - config.monitor_window]
            inflight, busy_until = [], inf

        while i < n and requests[i].arrival_time <= t:
            r = requests[i]
            policy.submit(r, t)
            if r.prompt_len < boundary:
                pending_short += 1
            else:
                pending_long += 1
            i += 1

        if next_strategic == t:
            next_strategic += config.strategic_interval
            if len(strategic_window) >= config.min_window:
                current = refine_and_prune(strategic_window, pparams)
                policy.adopt(current)
            strategic_window, online_window = [], []
        if next_online == t:
            next_online += config.online_interval
            if current is not None and online_window:
                adjusted = online_adjust(current, online_window, max_shift=config.max_shift)
                if adjusted != current:
                    current = adjusted
                    policy.adopt(current)
            online_window = []

        if not inflight and pending_short + pending_long > 0:
            batch = policy.step(t, budget)
            if not batch:
                raise RuntimeError("policy returned an empty batch with work pending")
            elapsed_prefill = 0.0
            for r, share in zip(batch, prefill_shares(cost, batch)):
                elapsed_prefill += share
                r.start_time = t
                r.first_token_time = t + elapsed_prefill
                if r.prompt_len < boundary:
                    pending_short -= 1
                else:
                    pending_long -= 1
            duration = batch_execution_time(cost, batch)
            for r in batch:
                r.completion_time = t + duration
            busy_time += duration
            inflight, busy_until = batch, t + duration
            if record_batches:
                batches.append(tuple(r.id for r in batch))

        if next_sample == t:
            backlog.append((t, pending_short, pending_long))
            samples += 1
            next_sample = samples * config.backlog_interval

    if not backlog or backlog[-1][0] != now:
        backlog.append((now, pending_short, pending_long))
    elapsed = now if truncated else max((r.completion_time for r in completed), default=0.0)
    report = compute_metrics(completed, boundary, elapsed, busy_time)
    report.truncated = truncated
    report.pending_at_end = pending_short + pending_long + len(inflight) if truncated else 0
    report.backlog_trace = backlog
    report.partition = current
    report.batches = batches
    return report


def write_metrics_csv(rows: Sequence[dict], path) -> None:
    """Rows carry ``run``, ``scheduler``, ``arrival_rate``, ``status`` plus metric columns."""
    columns = ("run", "scheduler", "arrival_rate", "status") + METRIC_COLUMNS
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in columns})


def write_backlog_csv(backlog: Sequence[tuple], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("time", "short_pending", "long_pending"))
        for t, s, l in backlog:
            writer.writerow((_fmt(t), s, l))


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value
