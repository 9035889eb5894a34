"""Reward scalarization and Bayesian search over meta-policy parameters.

A trial replays a fixed trace under one candidate parameter set and scores it
with::

    R = l1 * compactness + l2 * balance - l3 * proliferation - l4 * latency

The search starts with a Latin hypercube design and then proposes the
expected-improvement maximizer of a Gaussian-process surrogate fitted to the
unit-cube-scaled parameters.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm, qmc
from sklearn.base import BaseEstimator
from sklearn.exceptions import ConvergenceWarning
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import ConstantKernel, Matern, WhiteKernel

from ewsjf.engine import EngineConfig, MetricsReport, run_simulation
from ewsjf.exceptions import ConfigError
from ewsjf.partitioner import PartitionParams, QueuePartition, refine_and_prune
from ewsjf.scheduler import MetaParams
from ewsjf.workload import RequestTrace

INTEGER_PARAMS = ("bubble_width", "empty_threshold", "max_queues")

DEFAULT_BOUNDS = {
    "a_u": (-0.01, 0.01),
    "b_u": (0.0, 5.0),
    "a_f": (-0.01, 0.01),
    "b_f": (0.0, 5.0),
    "a_b": (-0.01, 0.01),
    "b_b": (0.0, 5.0),
    "alpha": (1.01, 5.0),
    "bubble_width": (16, 512),
    "empty_threshold": (5, 200),
    "max_queues": (32, 32),
}


@dataclass(frozen=True)
class RewardConfig:
    """Reward weights and normalization constants.

    ``u_norm`` (seconds) scales the short-class p95 TTFT; ``max_queues``
    normalizes the queue count.
    """

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.5
    lambda4: float = 2.0
    u_norm: float = 1.0
    max_queues: int = 32

    def __post_init__(self):
        lams = (self.lambda1, self.lambda2, self.lambda3, self.lambda4)
        if min(lams) < 0 or max(lams) <= 0:
            raise ConfigError("reward weights must be >= 0 with at least one > 0")
        if not self.u_norm > 0 or self.max_queues < 1:
            raise ConfigError("u_norm and max_queues must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "RewardConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown reward keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrialRecord:
    theta: MetaParams
    reward: float
    metrics: Optional[MetricsReport]
    trial_index: int


@dataclass
class MetaResult:
    best: MetaParams
    best_reward: float
    convergence: List[float]
    history: List[TrialRecord]


def _clamp01(x):
    return min(1.0, max(0.0, x))


def reward_terms(metrics: MetricsReport, partition: Optional[QueuePartition], cfg: RewardConfig) -> Dict[str, float]:
    queues = list(partition) if partition is not None else []
    counts = np.array([q.count for q in queues], dtype=float)
    n = counts.sum()
    if n > 0:
        means = np.array([q.mean_len for q in queues])
        within = float((counts * np.array([q.variance for q in queues])).sum() / n)
        grand = float((counts * means).sum() / n)
        total = within + float((counts * (means - grand) ** 2).sum() / n)
        compact = 1.0 if total == 0 else _clamp01(1.0 - within / total)
    else:
        compact = 0.0
    loads = np.array(list(metrics.per_queue_load.values()), dtype=float)
    if loads.size and loads.mean() > 0:
        balance = _clamp01(1.0 - loads.std() / loads.mean())
    else:
        balance = 0.0
    return {
        "compactness": compact,
        "balance": balance,
        "proliferation": len(queues) / cfg.max_queues,
        "latency": metrics.ttft_p95_short / cfg.u_norm,
    }


def combine(terms: Dict[str, float], cfg: RewardConfig) -> float:
    return (
        cfg.lambda1 * terms["compactness"]
        + cfg.lambda2 * terms["balance"]
        - cfg.lambda3 * terms["proliferation"]
        - cfg.lambda4 * terms["latency"]
    )


def compute_reward(metrics: MetricsReport, partition: Optional[QueuePartition], cfg: RewardConfig = RewardConfig()) -> float:
    return combine(reward_terms(metrics, partition, cfg), cfg)


# -- parameter space -------------------------------------------------------------


def _check_bounds(bounds: Dict[str, Tuple[float, float]]) -> List[str]:
    names = [f.name for f in fields(MetaParams)]
    for key, (lo, hi) in bounds.items():
        if key not in names:
            raise ConfigError(f"unknown parameter in bounds: {key}")
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
            raise ConfigError(f"bad bounds for {key}: [{lo}, {hi}]")
    return [k for k in names if k in bounds]


def _to_params(unit: np.ndarray, keys: Sequence[str], bounds, base: MetaParams) -> MetaParams:
    values = {}
    for u, key in zip(unit, keys):
        lo, hi = bounds[key]
        v = lo + float(np.clip(u, 0.0, 1.0)) * (hi - lo)
        values[key] = int(round(v)) if key in INTEGER_PARAMS else v
    return replace(base, **values)


def _to_unit(theta: MetaParams, keys: Sequence[str], bounds) -> np.ndarray:
    out = []
    for key in keys:
        lo, hi = bounds[key]
        out.append((getattr(theta, key) - lo) / (hi - lo))
    return np.array(out)


def expected_improvement(mu, sigma, best, xi=0.01):
    sigma = np.maximum(sigma, 1e-12)
    z = (mu - best - xi) / sigma
    return (mu - best - xi) * norm.cdf(z) + sigma * norm.pdf(z)


def propose_next(
    history: Sequence[TrialRecord],
    bounds: Dict[str, Tuple[float, float]] = DEFAULT_BOUNDS,
    seed: int = 0,
    n_init: int = 4,
    surrogate: str = "gp",
    base: MetaParams = MetaParams(),
    n_candidates: int = 2048,
    xi: float = 0.01,
    local_scale: float = 0.1,
) -> MetaParams:
    """Next parameter set to try.

    The first ``n_init`` proposals walk a seeded Latin hypercube; later ones
    maximize expected improvement under the GP surrogate (or draw uniformly
    when ``surrogate="random"``). Deterministic in ``(history, seed)``.
    """
    keys = _check_bounds(bounds)
    fixed = {k: bounds[k][0] for k in keys if bounds[k][0] == bounds[k][1]}
    base = replace(base, **{k: (int(v) if k in INTEGER_PARAMS else v) for k, v in fixed.items()})
    active = [k for k in keys if k not in fixed]
    if not active:
        return base
    t = len(history)
    if t < n_init:
        design = qmc.LatinHypercube(d=len(active), seed=seed).random(n_init)
        return _to_params(design[t], active, bounds, base)
    rng = np.random.default_rng([seed, t])
    if surrogate == "random":
        return _to_params(rng.random(len(active)), active, bounds, base)
    if surrogate != "gp":
        raise ConfigError(f"unknown surrogate {surrogate!r}")

    X = np.array([_to_unit(rec.theta, active, bounds) for rec in history])
    y = np.array([rec.reward for rec in history], dtype=float)
    if np.ptp(y) == 0:
        return _to_params(rng.random(len(active)), active, bounds, base)
    # monotone log warp tames heavy-tailed latency penalties; argmax is unchanged
    w = -np.log1p(y.max() - y)
    z = (w - w.mean()) / w.std()
    kernel = ConstantKernel(1.0, (1e-2, 1e2)) * Matern(
        length_scale=np.full(len(active), 0.5), length_scale_bounds=(5e-2, 2e1), nu=2.5
    ) + WhiteKernel(1e-3, (1e-6, 1e-1))
    gp = GaussianProcessRegressor(kernel=kernel, normalize_y=False, n_restarts_optimizer=2, random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        gp.fit(X, z)
    best = z.max()

    def ei(u):
        mu, sd = gp.predict(np.atleast_2d(u), return_std=True)
        return expected_improvement(mu, sd, best, xi)

    incumbent = X[int(np.argmax(z))]
    cand = np.vstack([
        rng.random((n_candidates, len(active))),
        np.clip(incumbent + local_scale * rng.standard_normal((n_candidates // 2, len(active))), 0, 1),
    ])
    scores = ei(cand)
    order = np.argsort(-scores, kind="stable")
    best_u, best_val = cand[order[0]], float(scores[order[0]])
    for start in cand[order[:3]]:
        res = minimize(lambda u: -float(ei(u)[0]), start, method="L-BFGS-B", bounds=[(0.0, 1.0)] * len(active))
        if -res.fun > best_val:
            best_u, best_val = res.x, -float(res.fun)
    return _to_params(best_u, active, bounds, base)


def trial_partition(lengths: Sequence[int], theta: MetaParams, params: PartitionParams = PartitionParams()) -> QueuePartition:
    return refine_and_prune(
        lengths,
        PartitionParams(
            alpha=theta.alpha,
            min_width=params.min_width,
            max_queues=theta.max_queues,
            epsilon=params.epsilon,
            coarse_k=params.coarse_k,
        ),
    )


def run_meta_loop(
    trace: Optional[RequestTrace],
    engine: EngineConfig = EngineConfig(),
    bounds: Dict[str, Tuple[float, float]] = DEFAULT_BOUNDS,
    trials: int = 12,
    cfg: RewardConfig = RewardConfig(),
    seed: int = 0,
    n_init: int = 4,
    surrogate: str = "gp",
    history_lengths: Optional[Sequence[int]] = None,
    base: MetaParams = MetaParams(),
    evaluate: Optional[Callable[[MetaParams], Tuple[float, Optional[MetricsReport]]]] = None,
) -> MetaResult:
    """Sequential propose / simulate / score loop.

    Each trial builds the offline partition from ``history_lengths`` (the
    trace's own prompt lengths by default) and replays the whole trace under
    the multi-queue policy. ``evaluate`` replaces the simulation with a
    direct reward function, in which case ``trace`` may be None.
    """
    if trials < n_init:
        raise ConfigError(f"trials ({trials}) must be >= n_init ({n_init})")
    if engine.scheduler != "ewsjf":
        engine = replace(engine, scheduler="ewsjf")
    if evaluate is None and trace is None:
        raise ValueError("run_meta_loop needs a trace unless evaluate is given")
    if history_lengths is not None:
        lengths = list(history_lengths)
    else:
        lengths = [r.prompt_len for r in trace] if trace is not None else []

    def simulate(theta):
        partition = trial_partition(lengths, theta, engine.partition_params)
        metrics = run_simulation(trace, engine, theta, partition)
        return compute_reward(metrics, metrics.partition, cfg), metrics

    evaluate = evaluate or simulate
    history: List[TrialRecord] = []
    curve: List[float] = []
    for k in range(trials):
        theta = propose_next(history, bounds, seed=seed, n_init=n_init, surrogate=surrogate, base=base)
        reward, metrics = evaluate(theta)
        history.append(TrialRecord(theta, float(reward), metrics, k))
        curve.append(max(curve[-1], reward) if curve else float(reward))
    best = max(history, key=lambda rec: rec.reward)
    return MetaResult(best.theta, best.reward, curve, history)


def write_trials_csv(history: Sequence[TrialRecord], path) -> None:
    names = [f.name for f in fields(MetaParams)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trial_index", *names, "reward"])
        for rec in history:
            writer.writerow([rec.trial_index, *(repr(getattr(rec.theta, k)) for k in names), repr(rec.reward)])


def write_convergence_csv(curve: Sequence[float], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trial_index", "best_so_far"])
        for k, v in enumerate(curve):
            writer.writerow([k, repr(float(v))])


class MetaOptimizer(BaseEstimator):
    """Estimator-style front end to :func:`run_meta_loop`.

    ``fit(trace)`` sets ``best_params_``, ``best_reward_``, ``convergence_``
    and ``history_``.
    """

    def __init__(self, trials=12, n_init=4, seed=0, bounds=None, reward=None, engine=None, surrogate="gp"):
        self.trials = trials
        self.n_init = n_init
        self.seed = seed
        self.bounds = bounds
        self.reward = reward
        self.engine = engine
        self.surrogate = surrogate

    def fit(self, trace: RequestTrace, y=None, history_lengths=None):
        result = run_meta_loop(
            trace,
            engine=self.engine or EngineConfig(),
            bounds=self.bounds or DEFAULT_BOUNDS,
            trials=self.trials,
            cfg=self.reward or RewardConfig(),
            seed=self.seed,
            n_init=self.n_init,
            surrogate=self.surrogate,
            history_lengths=history_lengths,
        )
        self.best_params_ = result.best
        self.best_reward_ = result.best_reward
        self.convergence_ = result.convergence
        self.history_ = result.history
        return self
