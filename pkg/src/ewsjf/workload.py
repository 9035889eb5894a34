"""Synthetic mixed-length request traces and JSONL trace I/O.

Arrivals follow a Poisson process: inter-arrival gaps are i.i.d. exponential
with the configured rate. Each request is independently short with
probability ``short_fraction``; prompt and output lengths are uniform
integers within the class ranges.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from ewsjf.exceptions import ConfigError, EmptyInputError, TraceParseError

logger = logging.getLogger(__name__)

TRACE_FIELDS = ("id", "prompt_len", "output_len", "arrival_time")


@dataclass
class Request:
    """One inference request and its lifecycle timestamps (seconds)."""

    id: str
    prompt_len: int
    output_len: int
    arrival_time: float
    start_time: Optional[float] = None
    first_token_time: Optional[float] = None
    completion_time: Optional[float] = None
    assigned_queue: Optional[str] = None

    def __post_init__(self):
        if self.prompt_len < 1:
            raise ValueError(f"request {self.id}: prompt_len must be >= 1, got {self.prompt_len}")
        if self.output_len < 1:
            raise ValueError(f"request {self.id}: output_len must be >= 1, got {self.output_len}")
        if not (self.arrival_time >= 0 and math.isfinite(self.arrival_time)):
            raise ValueError(f"request {self.id}: arrival_time must be finite and >= 0")

    @property
    def ttft(self) -> Optional[float]:
        if self.first_token_time is None:
            return None
        return self.first_token_time - self.arrival_time

    @property
    def total_tokens(self) -> int:
        return self.prompt_len + self.output_len

    def fresh(self) -> "Request":
        """Copy without any lifecycle timestamps."""
        return Request(self.id, self.prompt_len, self.output_len, self.arrival_time)


@dataclass(frozen=True)
class WorkloadConfig:
    """Parameters of the bimodal Poisson workload."""

    arrival_rate: float = 20.0
    short_fraction: float = 0.8
    short_len_range: tuple = (32, 256)
    long_len_range: tuple = (1024, 4096)
    short_output_range: tuple = (16, 128)
    long_output_range: tuple = (64, 512)
    total_requests: int = 10000
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("short_len_range", "long_len_range", "short_output_range", "long_output_range"):
            value = getattr(self, name)
            if len(value) != 2:
                raise ConfigError(f"{name} must be a [min, max] pair")
            lo, hi = int(value[0]), int(value[1])
            if lo < 1 or lo > hi:
                raise ConfigError(f"{name}: need 1 <= min <= max, got {list(value)}")
            object.__setattr__(self, name, (lo, hi))
        if not self.arrival_rate > 0:
            raise ConfigError(f"arrival_rate must be > 0, got {self.arrival_rate}")
        if not 0.0 <= self.short_fraction <= 1.0:
            raise ConfigError(f"short_fraction must lie in [0, 1], got {self.short_fraction}")
        if self.short_len_range[1] >= self.long_len_range[0]:
            raise ConfigError("short_len_range must end below the start of long_len_range")
        if self.total_requests < 1:
            raise ConfigError(f"total_requests must be positive, got {self.total_requests}")

    @classmethod
    def from_dict(cls, data: dict) -> "WorkloadConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown workload keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class RequestTrace:
    """Requests ordered by arrival time.

    ``reordered`` counts the arrival-order inversions repaired on load.
    """

    requests: list = field(default_factory=list)
    reordered: int = 0

    def __post_init__(self):
        times = [r.arrival_time for r in self.requests]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("trace requests must be sorted by arrival_time")

    def __len__(self) -> int:
        return len(self.requests)

    def __iter__(self) -> Iterator[Request]:
        return iter(self.requests)

    def __getitem__(self, i):
        return self.requests[i]

    def __eq__(self, other):
        if not isinstance(other, RequestTrace):
            return NotImplemented
        return [_record(r) for r in self.requests] == [_record(r) for r in other.requests]

    @property
    def prompt_lens(self) -> np.ndarray:
        return np.fromiter((r.prompt_len for r in self.requests), dtype=np.int64, count=len(self.requests))

    def fresh_copy(self) -> "RequestTrace":
        return RequestTrace([r.fresh() for r in self.requests])


@dataclass(frozen=True)
class WorkloadStats:
    count: int
    mean_prompt_len: float
    min_prompt_len: int
    max_prompt_len: int
    hist_counts: tuple
    hist_edges: tuple


def generate_mixed_workload(config: WorkloadConfig) -> RequestTrace:
    rng = np.random.default_rng(config.rng_seed)
    n = config.total_requests
    gaps = rng.exponential(1.0 / config.arrival_rate, size=n)
    arrivals = np.cumsum(gaps)
    is_short = rng.random(n) < config.short_fraction
    (s_lo, s_hi), (l_lo, l_hi) = config.short_len_range, config.long_len_range
    prompt = np.where(is_short, rng.integers(s_lo, s_hi + 1, size=n), rng.integers(l_lo, l_hi + 1, size=n))
    (so_lo, so_hi), (lo_lo, lo_hi) = config.short_output_range, config.long_output_range
    output = np.where(is_short, rng.integers(so_lo, so_hi + 1, size=n), rng.integers(lo_lo, lo_hi + 1, size=n))
    width = len(str(n - 1))
    requests = [
        Request(f"r{i:0{width}d}", int(prompt[i]), int(output[i]), float(arrivals[i]))
        for i in range(n)
    ]
    return RequestTrace(requests)


def _record(r: Request) -> dict:
    return {"id": r.id, "prompt_len": r.prompt_len, "output_len": r.output_len, "arrival_time": r.arrival_time}


def save_trace(trace: RequestTrace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in trace:
            fh.write(json.dumps(_record(r)) + "\n")


def count_inversions(values: Sequence[float]) -> int:
    """Number of pairs i < j with values[i] > values[j] (merge sort)."""

    def sort_count(seq):
        if len(seq) <= 1:
            return list(seq), 0
        mid = len(seq) // 2
        left, a = sort_count(seq[:mid])
        right, b = sort_count(seq[mid:])
        merged, inv, i, j = [], a + b, 0, 0
        while i < len(left) and j < len(right):
            if right[j] < left[i]:
                merged.append(right[j])
                inv += len(left) - i
                j += 1
            else:
                merged.append(left[i])
                i += 1
        merged.extend(left[i:])
        merged.extend(right[j:])
        return merged, inv

    return sort_count(list(values))[1]


def _parse_line(lineno: int, line: str) -> Request:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceParseError(lineno, f"invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise TraceParseError(lineno, "expected a JSON object")
    missing = [k for k in TRACE_FIELDS if k not in obj]
    if missing:
        raise TraceParseError(lineno, f"missing keys {missing}")
    for key in ("prompt_len", "output_len"):
        if not isinstance(obj[key], int) or isinstance(obj[key], bool):
            raise TraceParseError(lineno, f"{key} must be an integer")
    if not isinstance(obj["arrival_time"], (int, float)) or isinstance(obj["arrival_time"], bool):
        raise TraceParseError(lineno, "arrival_time must be a number")
    try:
        return Request(str(obj["id"]), obj["prompt_len"], obj["output_len"], float(obj["arrival_time"]))
    except ValueError as exc:
        raise TraceParseError(lineno, str(exc)) from None


def load_trace(path) -> RequestTrace:
    """Read a JSONL trace; out-of-order arrivals are stably re-sorted."""
    requests = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            requests.append(_parse_line(lineno, line))
    inversions = count_inversions([r.arrival_time for r in requests])
    if inversions:
        logger.warning("%s: repaired %d arrival-order inversions", Path(path).name, inversions)
        requests.sort(key=lambda r: r.arrival_time)
    return RequestTrace(requests, reordered=inversions)


def trace_stats(trace: RequestTrace, bin_width: int = 32) -> WorkloadStats:
    if len(trace) == 0:
        raise EmptyInputError("trace_stats needs at least one request")
    lens = trace.prompt_lens
    top = int(lens.max())
    edges = np.arange(0, top + bin_width + 1, bin_width)
    counts, edges = np.histogram(lens, bins=edges)
    return WorkloadStats(
        count=len(lens),
        mean_prompt_len=float(lens.mean()),
        min_prompt_len=int(lens.min()),
        max_prompt_len=top,
        hist_counts=tuple(int(c) for c in counts),
        hist_edges=tuple(int(e) for e in edges),
    )
