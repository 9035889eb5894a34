import heapq
import math
from collections import deque
from types import SimpleNamespace

import pytest

from ewsjf.costmodel import CostModelParams, prefill_cost
from ewsjf.exceptions import ConfigError, ContractViolation
from ewsjf.partitioner import QueuePartition, QueueSpec
from ewsjf.scheduler import (
    BatchBudget,
    EWSJFPolicy,
    FCFSPolicy,
    MetaParams,
    SchedulerState,
    SJFPolicy,
    ScoringWeights,
    create_bubble_queue,
    fcfs_step,
    make_policy,
    route,
    score_queue,
    sjf_step,
    tactical_step,
    weights_for_queue,
)
from ewsjf.workload import Request

from oracles import bubble_assignment


def partition(*bounds, mean=None):
    qs = []
    for pos, (lo, hi) in enumerate(bounds):
        qs.append(QueueSpec(f"q{lo}-{hi}", pos + 1, lo, hi, (lo + hi) / 2 if mean is None else mean))
    return QueuePartition(tuple(qs))


def state_for(*bounds, meta=MetaParams()):
    return SchedulerState.from_partition(partition(*bounds), meta)


# -- routing and bubbles -----------------------------------------------------------


def test_route_half_open(make_request):
    st = state_for((1, 100), (100, 500))
    assert route(make_request(50), st, MetaParams()) == "q1-100"
    assert route(make_request(100), st, MetaParams()) == "q100-500"


def test_route_gap_creates_bubble(make_request):
    st = state_for((1, 100), (200, 500))
    qid = route(make_request(150), st, MetaParams(bubble_width=40))
    assert qid == "b130-170"
    assert [q.id for q in st.queues] == ["q1-100", "b130-170", "q200-500"]
    assert [q.spec.index for q in st.queues] == [1, 2, 3]
    assert st.bubbles_created == 1
    # a later length inside the bubble reuses it
    assert route(make_request(160), st, MetaParams(bubble_width=40)) == "b130-170"


@pytest.mark.parametrize("L,expected", [(105, "q1-100"), (185, "q200-500")])
def test_near_miss_joins_neighbour(make_request, L, expected):
    st = state_for((1, 100), (200, 500))
    assert route(make_request(L), st, MetaParams(bubble_width=40)) == expected
    assert st.bubbles_created == 0
    # the neighbour's interval is not widened
    assert st.by_id(expected).spec.max_len - st.by_id(expected).spec.min_len in (99, 300)


def test_bubble_oracle_small_sweep():
    for L in range(100, 200):
        st = state_for((1, 100), (200, 500))
        q = create_bubble_queue(L, st, MetaParams(bubble_width=40))
        want = bubble_assignment(L, 100, 200, 40)
        if want[0] == "left":
            assert q.id == "q1-100"
        elif want[0] == "right":
            assert q.id == "q200-500"
        else:
            assert (q.spec.min_len, q.spec.max_len) == want[1:]


def test_bubble_outside_range():
    st = state_for((100, 200))
    q = create_bubble_queue(1000, st, MetaParams(bubble_width=64))
    assert (q.spec.min_len, q.spec.max_len) == (968, 1032)
    q = create_bubble_queue(10, st, MetaParams(bubble_width=64))
    assert (q.spec.min_len, q.spec.max_len) == (1, 42)
    assert [x.spec.min_len for x in st.queues] == [1, 100, 968]


def test_bubble_on_covered_length_is_contract_violation():
    with pytest.raises(ContractViolation):
        create_bubble_queue(50, state_for((1, 100)), MetaParams())


def test_route_into_empty_partition(make_request):
    st = SchedulerState()
    assert route(make_request(300), st, MetaParams(bubble_width=64)) == "b268-332"


# -- weights and scoring ---------------------------------------------------------------


def test_weights_examples():
    assert weights_for_queue(MetaParams(a_u=0, b_u=1), 1234).w_urg == 1
    assert weights_for_queue(MetaParams(a_u=0.001, b_u=0.5), 500).w_urg == pytest.approx(1.0)
    assert weights_for_queue(MetaParams(a_f=-0.01, b_f=0.5), 100).w_fair == 0


def test_score_examples():
    cost = CostModelParams(5.0, 0.0, 0.0)
    q2 = QueueSpec("q", 2, 1, 10, 5)
    head = SimpleNamespace(prompt_len=1, arrival_time=0.0)
    assert score_queue(head, q2, ScoringWeights(1, 0, 0), 0.0, cost) == pytest.approx(1.0)
    head = SimpleNamespace(prompt_len=9, arrival_time=0.0)
    assert score_queue(head, q2, ScoringWeights(0, 1, 0), 10.0, cost) == pytest.approx(0.4)
    head = SimpleNamespace(prompt_len=math.e - 1, arrival_time=0.0)
    q1 = QueueSpec("q", 1, 1, 10, 5)
    assert score_queue(head, q1, ScoringWeights(0, 0, 1), 0.0, cost) == pytest.approx(1 / math.e)


def test_score_rejects_time_travel(make_request):
    with pytest.raises(ContractViolation):
        score_queue(make_request(5, arrival=3.0), QueueSpec("q", 1, 1, 10, 5), ScoringWeights(), 1.0, CostModelParams())


def test_weights_validation():
    with pytest.raises(ConfigError):
        ScoringWeights(w_fair=-1)
    with pytest.raises(ConfigError):
        MetaParams(alpha=1.0)
    with pytest.raises(ConfigError):
        BatchBudget(max_tokens=0)


# -- tactical step ---------------------------------------------------------------------


COST = CostModelParams()


def test_all_empty():
    st = state_for((1, 100), (100, 200))
    assert tactical_step(st, MetaParams(), BatchBudget(), COST) == []
    assert [q.spec.empty_count for q in st.queues] == [1, 1]


def test_single_queue_fifo(make_request):
    st = state_for((1, 100), (100, 200))
    reqs = [make_request(10 + i, arrival=i) for i in range(3)]
    for r in reqs:
        route(r, st, MetaParams())
    st.clock = 5.0
    assert tactical_step(st, MetaParams(), BatchBudget(), COST) == reqs


def test_backfill_from_neighbour(make_request):
    meta = MetaParams(b_u=1, b_f=0, b_b=0)
    st = state_for((1, 100), (100, 1000), meta=meta)
    primary = make_request(500, arrival=0.0)
    n1, n2 = make_request(20, arrival=99.8), make_request(30, arrival=99.9)
    for r in (primary, n1, n2):
        route(r, st, meta)
    # the long head has waited far longer, so its queue wins
    st.clock = 100.0
    batch = tactical_step(st, meta, BatchBudget(max_requests=8, max_tokens=1000), COST)
    assert batch == [primary, n1, n2]


def test_backfill_alternates_left_first(make_request):
    meta = MetaParams()
    st = state_for((1, 10), (10, 20), (20, 30), meta=meta)
    mid, left, right = make_request(15, arrival=0.0), make_request(5, arrival=1.0), make_request(25, arrival=1.0)
    for r in (mid, left, right):
        route(r, st, meta)
    st.clock = 1.0
    batch = tactical_step(st, meta, BatchBudget(max_requests=2), COST)
    assert batch == [mid, left]


def test_empty_queue_removed_after_threshold(make_request):
    meta = MetaParams(empty_threshold=3)
    st = state_for((1, 10), (10, 20), meta=meta)
    for k in range(5):
        route(make_request(15, arrival=float(k)), st, meta)
        st.clock = float(k)
        tactical_step(st, meta, BatchBudget(), COST)
    assert [q.id for q in st.queues] == ["q10-20"]
    assert st.queues_removed == 1 and st.queues[0].spec.index == 1


def test_oversized_request_always_admitted(make_request):
    big = make_request(5000)
    assert fcfs_step(deque([big, make_request(1)]), BatchBudget(max_tokens=100)) == [big]


def test_fcfs_examples(make_request):
    a, b, c = make_request(1), make_request(2), make_request(3)
    assert fcfs_step(deque([a, b, c]), BatchBudget(max_requests=2)) == [a, b]
    assert fcfs_step(deque(), BatchBudget()) == []


def test_sjf_examples(make_request):
    def heap(reqs):
        h = [(r.prompt_len, r.arrival_time, n, r) for n, r in enumerate(reqs)]
        heapq.heapify(h)
        return h

    reqs = [make_request(500), make_request(10), make_request(300)]
    assert [r.prompt_len for r in sjf_step(heap(reqs), BatchBudget(max_requests=2))] == [10, 300]
    same = [make_request(7, arrival=t) for t in (0.0, 1.0, 2.0)]
    assert sjf_step(heap(same), BatchBudget(max_requests=3)) == same


def test_sjf_never_picks_long_under_stream(make_request):
    pol = SJFPolicy()
    long_req = make_request(4000, arrival=0.0)
    pol.submit(long_req, 0.0)
    for t in range(1, 200):
        for _ in range(2):
            pol.submit(make_request(50, arrival=float(t)), float(t))
        assert long_req not in pol.step(float(t), BatchBudget(max_requests=2))


def test_single_queue_matches_fcfs(make_request):
    reqs = [make_request(b, arrival=0.1 * i) for i, b in enumerate([5, 900, 30, 4000, 1, 70, 70, 2])]
    ew = EWSJFPolicy(QueuePartition.single(), MetaParams(), COST)
    fc = FCFSPolicy()
    for r in reqs:
        ew.submit(r, r.arrival_time)
        fc.submit(r, r.arrival_time)
    budget = BatchBudget(max_requests=3, max_tokens=1000)
    while fc.pending:
        assert ew.step(1.0, budget) == fc.step(1.0, budget)
    assert ew.pending == 0


def test_adopt_reroutes_pending(make_request):
    pol = EWSJFPolicy(partition((1, 100), (100, 200)), MetaParams(), COST)
    reqs = [make_request(50, arrival=0.0), make_request(150, arrival=1.0), make_request(60, arrival=2.0)]
    for r in reqs:
        pol.submit(r, r.arrival_time)
    pol.adopt(partition((1, 55), (55, 200)))
    assert pol.pending == 3
    assert [list(q.fifo) for q in pol.state.queues] == [[reqs[0]], [reqs[1], reqs[2]]]


def test_make_policy():
    assert make_policy("fcfs").name == "fcfs"
    assert make_policy("ewsjf").n_queues == 0
    with pytest.raises(ConfigError):
        make_policy("lifo")


def test_scale_covariance_and_argmax(make_request):
    import numpy as np

    rng = np.random.default_rng(1)
    for _ in range(200):
        specs = [QueueSpec("q", i + 1, 1, 10, 5) for i in range(4)]
        heads = [make_request(int(rng.integers(1, 4000)), arrival=float(rng.uniform(0, 50))) for _ in specs]
        w = ScoringWeights(*rng.uniform(0.01, 3, size=3))
        c = float(rng.uniform(0.1, 10))
        wc = ScoringWeights(w.w_base * c, w.w_urg * c, w.w_fair * c)
        s = [score_queue(h, q, w, 60.0, COST) for h, q in zip(heads, specs)]
        sc = [score_queue(h, q, wc, 60.0, COST) for h, q in zip(heads, specs)]
        assert sc == pytest.approx([c * x for x in s])
        assert int(np.argmax(s)) == int(np.argmax(sc))


def test_score_evaluations_are_linear(make_request):
    meta = MetaParams()
    st = state_for(*[(10 * i + 1, 10 * i + 11) for i in range(20)], meta=meta)
    for i in range(0, 20, 2):
        route(make_request(10 * i + 5), st, meta)
    st.clock = 1.0
    tactical_step(st, meta, BatchBudget(max_requests=1), COST)
    assert st.score_evals == 10
