"""Tactical scheduling: routing, bubble queues, queue scoring and batch building.

Each queue is scored through its oldest request ``r`` (prompt length ``b``,
wait ``W``) as::

    score = (q_index / (b + 1)) * (w_base + w_urg * W / prefill_cost(b) + w_fair * ln(b + 1))

The highest-scoring queue (ties to the lowest index) is drained FIFO into the
batch, then the batch is topped up from neighbouring queues, nearest first.
FCFS and greedy shortest-first baselines share the same batch budget rules.
"""

from __future__ import annotations

import bisect
import heapq
import itertools
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional

from ewsjf.costmodel import CostModelParams, prefill_cost
from ewsjf.exceptions import ConfigError, ContractViolation
from ewsjf.partitioner import QueuePartition, QueueSpec, queue_id

# Near-miss tolerance: a length within 10% of a neighbour joins it.
NEAR_ABOVE = (11, 10)
NEAR_BELOW = (9, 10)


@dataclass(frozen=True)
class ScoringWeights:
    w_base: float = 1.0
    w_urg: float = 1.0
    w_fair: float = 0.0

    def __post_init__(self):
        for name in ("w_base", "w_urg", "w_fair"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        if self.w_fair < 0:
            raise ConfigError("w_fair must be >= 0")


@dataclass(frozen=True)
class MetaParams:
    """Meta-policy parameters.

    The three linear maps turn a queue's mean prompt length into its scoring
    weights; the remaining fields steer partitioning and queue lifecycle.
    """

    a_u: float = 0.0
    b_u: float = 1.0
    a_f: float = 0.0
    b_f: float = 0.1
    a_b: float = 0.0
    b_b: float = 0.0
    alpha: float = 2.0
    bubble_width: int = 64
    empty_threshold: int = 50
    max_queues: int = 32

    def __post_init__(self):
        if not self.alpha > 1:
            raise ConfigError(f"alpha must be > 1, got {self.alpha}")
        if self.empty_threshold < 1:
            raise ConfigError("empty_threshold must be >= 1")
        if self.bubble_width < 1:
            raise ConfigError("bubble_width must be >= 1")
        if self.max_queues < 1:
            raise ConfigError("max_queues must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "MetaParams":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown meta_params keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BatchBudget:
    max_requests: int = 16
    max_tokens: int = 16384

    def __post_init__(self):
        if self.max_requests < 1 or self.max_tokens < 1:
            raise ConfigError("batch budget limits must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "BatchBudget":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown batch_budget keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


class _Batch:
    """Batch under construction with budget accounting."""

    __slots__ = ("budget", "requests", "tokens")

    def __init__(self, budget: BatchBudget):
        self.budget = budget
        self.requests = []
        self.tokens = 0

    def admits(self, request) -> bool:
        # the first request is always admitted so oversized prompts cannot deadlock
        if not self.requests:
            return True
        return (
            len(self.requests) < self.budget.max_requests
            and self.tokens + request.prompt_len <= self.budget.max_tokens
        )

    def add(self, request):
        self.requests.append(request)
        self.tokens += request.prompt_len

    @property
    def full(self) -> bool:
        return len(self.requests) >= self.budget.max_requests or self.tokens >= self.budget.max_tokens


@dataclass
class LiveQueue:
    """A queue inside the running scheduler: interval spec, FIFO and weights."""

    spec: QueueSpec
    weights: ScoringWeights
    fifo: deque = field(default_factory=deque)

    @property
    def id(self):
        return self.spec.id


@dataclass
class SchedulerState:
    queues: List[LiveQueue] = field(default_factory=list)
    clock: float = 0.0
    score_evals: int = 0
    bubbles_created: int = 0
    queues_removed: int = 0

    def __post_init__(self):
        self._reindex()

    @classmethod
    def from_partition(cls, partition: QueuePartition, meta: MetaParams) -> "SchedulerState":
        state = cls()
        state.queues = [
            LiveQueue(replace(q, empty_count=0), weights_for_queue(meta, q.mean_len)) for q in partition
        ]
        state._reindex()
        return state

    def _reindex(self):
        for pos, q in enumerate(self.queues):
            q.spec.index = pos + 1
        self._starts = [q.spec.min_len for q in self.queues]

    def insert(self, pos: int, queue: LiveQueue):
        self.queues.insert(pos, queue)
        self._reindex()

    def by_id(self, qid) -> LiveQueue:
        for q in self.queues:
            if q.id == qid:
                return q
        raise KeyError(qid)

    def find(self, length) -> Optional[int]:
        pos = bisect.bisect_right(self._starts, length) - 1
        if pos >= 0 and self.queues[pos].spec.contains(length):
            return pos
        return None

    def neighbours(self, length):
        """Positions of the queues just below and above an uncovered length."""
        pos = bisect.bisect_right(self._starts, length) - 1
        left = pos if pos >= 0 else None
        right = pos + 1 if pos + 1 < len(self.queues) else None
        return left, right

    @property
    def pending(self) -> int:
        return sum(len(q.fifo) for q in self.queues)

    def pending_requests(self) -> list:
        return [r for q in self.queues for r in q.fifo]

    def adopt(self, partition: QueuePartition, meta: MetaParams) -> None:
        """Switch to a new partition, re-routing every pending request.

        Bubble queues survive when they do not overlap the new partition.
        """
        pending = sorted(
            ((r.arrival_time, n, r) for n, r in enumerate(self.pending_requests())),
            key=lambda t: (t[0], t[1]),
        )
        fresh = [LiveQueue(replace(q, empty_count=0), weights_for_queue(meta, q.mean_len)) for q in partition]
        starts = [q.spec.min_len for q in fresh]
        for old in self.queues:
            if not old.spec.is_bubble:
                continue
            pos = bisect.bisect_right(starts, old.spec.min_len)
            lo_ok = pos == 0 or fresh[pos - 1].spec.max_len <= old.spec.min_len
            hi_ok = pos == len(fresh) or old.spec.max_len <= fresh[pos].spec.min_len
            if lo_ok and hi_ok:
                fresh.insert(pos, LiveQueue(replace(old.spec, empty_count=0), old.weights))
                starts.insert(pos, old.spec.min_len)
        self.queues = fresh
        self._reindex()
        for _, _, r in pending:
            route(r, self, meta)


def weights_for_queue(meta: MetaParams, mean_len: float) -> ScoringWeights:
    if mean_len < 0:
        raise ValueError("mean_len must be >= 0")
    return ScoringWeights(
        w_base=max(0.0, meta.a_b * mean_len + meta.b_b),
        w_urg=max(0.0, meta.a_u * mean_len + meta.b_u),
        w_fair=max(0.0, meta.a_f * mean_len + meta.b_f),
    )


def create_bubble_queue(length: int, state: SchedulerState, meta: MetaParams) -> LiveQueue:
    """Queue for a length that no existing interval covers.

    Near misses (within 10% above the lower neighbour's upper bound, or 10%
    below the upper neighbour's lower bound) join that neighbour without
    widening it. Otherwise a bubble queue of ``bubble_width`` tokens centred
    on the length and clipped to the gap is inserted.
    """
    if state.find(length) is not None:
        raise ContractViolation(f"length {length} is already covered")
    left_pos, right_pos = state.neighbours(length)
    left = state.queues[left_pos] if left_pos is not None else None
    right = state.queues[right_pos] if right_pos is not None else None
    if left is not None and length * NEAR_ABOVE[1] <= left.spec.max_len * NEAR_ABOVE[0]:
        return left
    if right is not None and length * NEAR_BELOW[1] >= right.spec.min_len * NEAR_BELOW[0]:
        return right
    floor_len = left.spec.max_len if left is not None else 1
    ceil_len = right.spec.min_len if right is not None else math.inf
    available = ceil_len - floor_len
    span = min(meta.bubble_width, available)
    new_min = math.floor(max(length - span / 2, floor_len))
    new_max = math.ceil(min(length + span / 2, ceil_len))
    spec = QueueSpec(
        id=queue_id(new_min, new_max, bubble=True),
        index=0,
        min_len=new_min,
        max_len=new_max,
        mean_len=float(length),
        is_bubble=True,
    )
    queue = LiveQueue(spec, weights_for_queue(meta, float(length)))
    state.insert(0 if left_pos is None else left_pos + 1, queue)
    state.bubbles_created += 1
    return queue


def route(request, state: SchedulerState, meta: MetaParams) -> str:
    pos = state.find(request.prompt_len)
    queue = state.queues[pos] if pos is not None else create_bubble_queue(request.prompt_len, state, meta)
    queue.fifo.append(request)
    request.assigned_queue = queue.id
    return queue.id


def score_queue(head, queue: QueueSpec, weights: ScoringWeights, now: float, cost: CostModelParams) -> float:
    wait = now - head.arrival_time
    if wait < 0:
        raise ContractViolation(f"now={now} precedes arrival {head.arrival_time} of {head.id}")
    b = head.prompt_len
    cs = wait / prefill_cost(cost, b)
    qf = queue.index / (b + 1)
    return qf * (weights.w_base + weights.w_urg * cs + weights.w_fair * math.log(b + 1))


def _drain(queue: LiveQueue, batch: _Batch) -> None:
    fifo = queue.fifo
    while fifo and not batch.full and batch.admits(fifo[0]):
        batch.add(fifo.popleft())


def tactical_step(state: SchedulerState, meta: MetaParams, budget: BatchBudget, cost: CostModelParams) -> list:
    """One scheduling decision; returns the (possibly empty) batch."""
    now = state.clock
    best_pos, best_score = None, -math.inf
    survivors = []
    removed = False
    for q in state.queues:
        if q.fifo:
            q.spec.empty_count = 0
            s = score_queue(q.fifo[0], q.spec, q.weights, now, cost)
            state.score_evals += 1
            if s > best_score:
                best_pos, best_score = len(survivors), s
            survivors.append(q)
        else:
            q.spec.empty_count += 1
            if q.spec.empty_count > meta.empty_threshold:
                removed = True
                state.queues_removed += 1
            else:
                survivors.append(q)
    if removed:
        state.queues = survivors
        state._reindex()

    batch = _Batch(budget)
    if best_pos is None:
        return batch.requests
    queues = state.queues
    _drain(queues[best_pos], batch)
    for dist in range(1, len(queues)):
        if batch.full:
            break
        lo, hi = best_pos - dist, best_pos + dist
        if lo < 0 and hi >= len(queues):
            break
        if lo >= 0:
            _drain(queues[lo], batch)
        if hi < len(queues) and not batch.full:
            _drain(queues[hi], batch)
    return batch.requests


def fcfs_step(pending: deque, budget: BatchBudget) -> list:
    batch = _Batch(budget)
    while pending and not batch.full and batch.admits(pending[0]):
        batch.add(pending.popleft())
    return batch.requests


def sjf_step(pending: list, budget: BatchBudget) -> list:
    """Pull from a heap of ``(prompt_len, arrival_time, seq, request)`` entries."""
    batch = _Batch(budget)
    while pending and not batch.full and batch.admits(pending[0][3]):
        batch.add(heapq.heappop(pending)[3])
    return batch.requests


class FCFSPolicy:
    name = "fcfs"

    def __init__(self):
        self.queue = deque()

    def submit(self, request, now: float) -> None:
        request.assigned_queue = "fifo"
        self.queue.append(request)

    def step(self, now: float, budget: BatchBudget) -> list:
        return fcfs_step(self.queue, budget)

    @property
    def pending(self) -> int:
        return len(self.queue)


class SJFPolicy:
    name = "sjf"

    def __init__(self):
        self.heap = []
        self._seq = itertools.count()

    def submit(self, request, now: float) -> None:
        request.assigned_queue = "sjf"
        heapq.heappush(self.heap, (request.prompt_len, request.arrival_time, next(self._seq), request))

    def step(self, now: float, budget: BatchBudget) -> list:
        return sjf_step(self.heap, budget)

    @property
    def pending(self) -> int:
        return len(self.heap)


class EWSJFPolicy:
    """Multi-queue policy driven by a partition and meta-parameters."""

    name = "ewsjf"

    def __init__(self, partition: QueuePartition, meta: MetaParams, cost: CostModelParams):
        self.meta = meta
        self.cost = cost
        self.state = SchedulerState.from_partition(partition, meta)

    def submit(self, request, now: float) -> None:
        route(request, self.state, self.meta)

    def step(self, now: float, budget: BatchBudget) -> list:
        self.state.clock = now
        return tactical_step(self.state, self.meta, budget, self.cost)

    def adopt(self, partition: QueuePartition) -> None:
        self.state.adopt(partition, self.meta)

    @property
    def pending(self) -> int:
        return self.state.pending

    @property
    def n_queues(self) -> int:
        return len(self.state.queues)


def make_policy(kind: str, partition: Optional[QueuePartition] = None, meta: Optional[MetaParams] = None,
                cost: Optional[CostModelParams] = None):
    if kind == "fcfs":
        return FCFSPolicy()
    if kind == "sjf":
        return SJFPolicy()
    if kind == "ewsjf":
        return EWSJFPolicy(partition or QueuePartition(), meta or MetaParams(), cost or CostModelParams())
    raise ConfigError(f"unknown scheduler {kind!r}; expected ewsjf, fcfs or sjf")
