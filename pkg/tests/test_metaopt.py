import csv

import numpy as np
import pytest

from ewsjf.engine import EngineConfig, MetricsReport
from ewsjf.exceptions import ConfigError
from ewsjf.metaopt import (
    DEFAULT_BOUNDS,
    MetaOptimizer,
    RewardConfig,
    TrialRecord,
    combine,
    compute_reward,
    expected_improvement,
    propose_next,
    reward_terms,
    run_meta_loop,
    write_convergence_csv,
    write_trials_csv,
)
from ewsjf.partitioner import QueuePartition, QueueSpec
from ewsjf.scheduler import MetaParams
from ewsjf.workload import WorkloadConfig, generate_mixed_workload


def test_combine_examples():
    terms = {"compactness": 0.5, "balance": 0.2, "proliferation": 0.1, "latency": 0.1}
    assert combine(terms, RewardConfig(1, 1, 1, 1)) == pytest.approx(0.5)
    only_latency = dict(terms, latency=0.3)
    assert combine(only_latency, RewardConfig(0, 0, 0, 1)) == pytest.approx(-0.3)


def test_ideal_single_queue_reward():
    part = QueuePartition((QueueSpec("q1-2", 1, 1, 2, 1.0, 1.0, 10, 0.0),))
    metrics = MetricsReport(per_queue_load={"q1-2": 10}, ttft_p95_short=0.0)
    cfg = RewardConfig()
    assert compute_reward(metrics, part, cfg) == pytest.approx(cfg.lambda1 + cfg.lambda2 - cfg.lambda3 / 32)


def test_reward_terms_ranges():
    part = QueuePartition((QueueSpec("a", 1, 1, 10, 5.0, 1, 5, 4.0), QueueSpec("b", 2, 10, 20, 15.0, 1, 5, 4.0)))
    metrics = MetricsReport(per_queue_load={"a": 5, "b": 15}, ttft_p95_short=0.5)
    t = reward_terms(metrics, part, RewardConfig())
    assert t["compactness"] == pytest.approx(1 - 4 / (4 + 25))
    assert t["balance"] == pytest.approx(0.5)
    assert t["proliferation"] == pytest.approx(2 / 32)
    assert t["latency"] == pytest.approx(0.5)


def test_reward_config_validation():
    with pytest.raises(ConfigError):
        RewardConfig(0, 0, 0, 0)
    with pytest.raises(ConfigError):
        RewardConfig(u_norm=0)


def test_expected_improvement_basics():
    ei = expected_improvement(np.array([0.0, 1.0]), np.array([1.0, 1.0]), 0.5, xi=0.0)
    assert ei[1] > ei[0] > 0
    assert expected_improvement(np.array([2.0]), np.array([0.0]), 0.0, xi=0.0)[0] == pytest.approx(2.0)


def test_initial_design_deterministic():
    a = propose_next([], DEFAULT_BOUNDS, seed=3)
    assert a == propose_next([], DEFAULT_BOUNDS, seed=3)
    assert a != propose_next([], DEFAULT_BOUNDS, seed=4)
    for k, (lo, hi) in DEFAULT_BOUNDS.items():
        assert lo <= getattr(a, k) <= hi
    assert isinstance(a.bubble_width, int) and a.max_queues == 32


def _history(bounds, rewarder, n, seed=0):
    hist = []
    for k in range(n):
        theta = propose_next(hist, bounds, seed=seed, n_init=n)
        hist.append(TrialRecord(theta, rewarder(theta), None, k))
    return hist


def test_monotone_dimension_pushes_proposal_up():
    bounds = {"b_u": (0.0, 5.0), "b_f": (0.0, 5.0)}
    hist = _history(bounds, lambda th: th.b_u, 6, seed=1)
    nxt = propose_next(hist, bounds, seed=1, n_init=6)
    assert nxt.b_u >= np.median([h.theta.b_u for h in hist])
    # grid oracle: the best point on the synthetic reward has b_u at its upper bound
    grid = np.linspace(0, 5, 51)
    assert grid[np.argmax(grid)] == 5.0


def test_quadratic_converges_near_peak():
    bounds = {"b_u": (0.0, 1.0)}
    res = run_meta_loop(None, bounds=bounds, trials=10, seed=0,
                        evaluate=lambda th: (-(th.b_u - 0.5) ** 2, None))
    assert abs(res.best.b_u - 0.5) < 0.1
    assert all(b >= a for a, b in zip(res.convergence, res.convergence[1:]))


def test_trials_equal_n_init_is_best_initial():
    bounds = {"b_u": (0.0, 1.0), "b_f": (0.0, 1.0)}
    res = run_meta_loop(None, bounds=bounds, trials=4, n_init=4, seed=2,
                        evaluate=lambda th: (th.b_u - th.b_f, None))
    rewards = [h.reward for h in res.history]
    assert res.best_reward == max(rewards)
    assert res.convergence == list(np.maximum.accumulate(rewards))


def test_constant_reward_flat_curve():
    res = run_meta_loop(None, bounds={"b_u": (0.0, 1.0)}, trials=7, seed=0, evaluate=lambda th: (1.0, None))
    assert res.convergence == [1.0] * 7


def test_bad_bounds_and_trials():
    with pytest.raises(ConfigError):
        propose_next([], {"nope": (0, 1)})
    with pytest.raises(ConfigError):
        propose_next([], {"b_u": (2, 1)})
    with pytest.raises(ConfigError):
        run_meta_loop(None, trials=2, n_init=4, evaluate=lambda th: (0.0, None))
    hist = _history({"b_u": (0.0, 1.0)}, lambda th: th.b_u, 4)
    with pytest.raises(ConfigError):
        propose_next(hist, {"b_u": (0.0, 1.0)}, surrogate="tree")


def test_random_surrogate_within_bounds():
    bounds = {"b_u": (0.0, 1.0), "bubble_width": (16, 32)}
    hist = _history(bounds, lambda th: th.b_u, 4)
    th = propose_next(hist, bounds, surrogate="random", seed=5)
    assert 0 <= th.b_u <= 1 and 16 <= th.bubble_width <= 32 and isinstance(th.bubble_width, int)


def test_simulated_loop_deterministic(tmp_path):
    tr = generate_mixed_workload(WorkloadConfig(total_requests=600, arrival_rate=8, rng_seed=1))
    a = run_meta_loop(tr, EngineConfig(), trials=5, seed=7)
    b = run_meta_loop(tr, EngineConfig(), trials=5, seed=7)
    assert [h.reward for h in a.history] == [h.reward for h in b.history]
    write_trials_csv(a.history, tmp_path / "t.csv")
    write_convergence_csv(a.convergence, tmp_path / "c.csv")
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert len(rows) == 5 and list(rows[0])[0] == "trial_index" and list(rows[0])[-1] == "reward"
    conv = [float(r["best_so_far"]) for r in csv.DictReader(open(tmp_path / "c.csv"))]
    assert conv == a.convergence


def test_estimator_fit():
    tr = generate_mixed_workload(WorkloadConfig(total_requests=400, arrival_rate=8, rng_seed=2))
    est = MetaOptimizer(trials=4, n_init=4, seed=0).fit(tr)
    assert isinstance(est.best_params_, MetaParams)
    assert len(est.convergence_) == 4 and est.best_reward_ == max(h.reward for h in est.history_)


def test_reward_scale_covariance():
    rng = np.random.default_rng(0)
    terms = [dict(zip(("compactness", "balance", "proliferation", "latency"), rng.uniform(0, 1, 4))) for _ in range(20)]
    base, scaled = RewardConfig(1, 1, 0.5, 2), RewardConfig(3, 3, 1.5, 6)
    r1 = [combine(t, base) for t in terms]
    r3 = [combine(t, scaled) for t in terms]
    assert r3 == pytest.approx([3 * r for r in r1])
    assert int(np.argmax(r1)) == int(np.argmax(r3))


def test_proposals_stay_in_bounds():
    bounds = dict(DEFAULT_BOUNDS)
    rng = np.random.default_rng(3)
    hist = []
    for k in range(8):
        th = propose_next(hist, bounds, seed=9)
        for key, (lo, hi) in bounds.items():
            assert lo <= getattr(th, key) <= hi
        hist.append(TrialRecord(th, float(rng.normal()), None, k))
