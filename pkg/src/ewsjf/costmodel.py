"""Prefill and batch execution cost estimates for the simulated engine."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

from ewsjf.exceptions import ConfigError


@dataclass(frozen=True)
class CostModelParams:
    """Cost coefficients.

    Prefill cost is ``prefill_c0 + prefill_c1*b + prefill_c2*b**2`` seconds for
    a prompt of ``b`` tokens. ``decode_per_token`` is the per-step decode time
    of a batch of one; each extra request in a batch adds ``batch_efficiency``
    of that step time, and the k-th prefill in a batch (0-based) is discounted
    by ``batch_efficiency**k``.
    """

    prefill_c0: float = 0.005
    prefill_c1: float = 0.0002
    prefill_c2: float = 1e-8
    decode_per_token: float = 0.001
    batch_efficiency: float = 0.3

    def __post_init__(self):
        for name in ("prefill_c0", "prefill_c1", "prefill_c2", "decode_per_token"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 < self.batch_efficiency <= 1.0:
            raise ConfigError("batch_efficiency must lie in (0, 1]")
        if self.prefill_c0 + self.prefill_c1 + self.prefill_c2 <= 0:
            raise ConfigError("prefill cost must be strictly positive for b >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "CostModelParams":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown cost_model keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def prefill_cost(params: CostModelParams, b: int) -> float:
    if b < 1:
        raise ValueError(f"prompt length must be >= 1, got {b}")
    return params.prefill_c0 + params.prefill_c1 * b + params.prefill_c2 * b * b


def prefill_shares(params: CostModelParams, batch: Sequence) -> list:
    """Discounted prefill time of each request, in batch order."""
    eff = params.batch_efficiency
    return [prefill_cost(params, r.prompt_len) * eff**rank for rank, r in enumerate(batch)]


def batch_execution_time(params: CostModelParams, batch: Sequence) -> float:
    if not batch:
        raise ValueError("batch_execution_time needs a non-empty batch")
    prefill = sum(prefill_shares(params, batch))
    longest = max(r.output_len for r in batch)
    decode = longest * params.decode_per_token * (1.0 + params.batch_efficiency * (len(batch) - 1))
    return prefill + decode
