"""Prompt-length queue partitioning (Refine-and-Prune) and online boundary tuning.

The pipeline turns a window of observed prompt lengths into a bounded set of
contiguous, half-open ``[min_len, max_len)`` intervals:

1. exact 1-D k-means (``coarse_k`` clusters, dynamic programming),
2. recursive gap splitting of each coarse cluster: a split happens wherever a
   consecutive gap exceeds ``alpha`` times the cluster's mean gap,
3. boundary finalization (inter-cluster gaps closed at their midpoint), then
   greedy merging of the adjacent pair with the lowest scheduling utility
   ``(density_l + density_r) / (|mean_r - mean_l| + epsilon)`` until at most
   ``max_queues`` remain.
"""

from __future__ import annotations

import bisect
import heapq
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ewsjf.exceptions import ConfigError, ContractViolation

logger = logging.getLogger(__name__)


@dataclass
class QueueSpec:
    """A prompt-length interval ``[min_len, max_len)`` and its profile."""

    id: str
    index: int
    min_len: int
    max_len: int
    mean_len: float
    density: float = 0.0
    count: int = 0
    variance: float = 0.0
    empty_count: int = 0
    is_bubble: bool = False

    def __post_init__(self):
        if not self.min_len < self.max_len:
            raise ValueError(f"queue {self.id}: min_len {self.min_len} must be < max_len {self.max_len}")

    @property
    def width(self):
        return self.max_len - self.min_len

    def contains(self, length) -> bool:
        return self.min_len <= length < self.max_len


def queue_id(min_len, max_len, bubble=False) -> str:
    return f"{'b' if bubble else 'q'}{min_len}-{max_len}"


@dataclass(frozen=True)
class QueuePartition:
    """Ordered, non-overlapping queue intervals."""

    queues: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "queues", tuple(self.queues))

    def __len__(self):
        return len(self.queues)

    def __iter__(self):
        return iter(self.queues)

    @property
    def covers(self):
        if not self.queues:
            return None
        return (self.queues[0].min_len, self.queues[-1].max_len)

    @property
    def boundaries(self) -> list:
        return [q.min_len for q in self.queues] + ([self.queues[-1].max_len] if self.queues else [])

    def locate(self, length) -> Optional[int]:
        """Position of the queue containing ``length``, or None."""
        starts = [q.min_len for q in self.queues]
        pos = bisect.bisect_right(starts, length) - 1
        if pos >= 0 and self.queues[pos].contains(length):
            return pos
        return None

    def check(self, max_queues: Optional[int] = None, contiguous: bool = True) -> None:
        """Raise ContractViolation if any partition invariant fails."""
        for pos, q in enumerate(self.queues):
            if q.index != pos + 1:
                raise ContractViolation(f"queue {q.id} has index {q.index}, expected {pos + 1}")
            if not q.min_len < q.max_len:
                raise ContractViolation(f"queue {q.id} is empty")
        for a, b in zip(self.queues, self.queues[1:]):
            if a.max_len > b.min_len:
                raise ContractViolation(f"queues {a.id} and {b.id} overlap")
            if contiguous and a.max_len != b.min_len:
                raise ContractViolation(f"gap between {a.id} and {b.id}")
        if max_queues is not None and len(self.queues) > max_queues:
            raise ContractViolation(f"{len(self.queues)} queues exceed the budget of {max_queues}")

    def to_json(self) -> str:
        fields = ("id", "min_len", "max_len", "mean_len", "density", "count", "variance")
        return json.dumps({"queues": [{k: getattr(q, k) for k in fields} for q in self.queues]}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "QueuePartition":
        doc = json.loads(text)
        queues = []
        for pos, item in enumerate(sorted(doc["queues"], key=lambda d: d["min_len"])):
            lo, hi = int(item["min_len"]), int(item["max_len"])
            queues.append(
                QueueSpec(
                    id=str(item.get("id", queue_id(lo, hi))),
                    index=pos + 1,
                    min_len=lo,
                    max_len=hi,
                    mean_len=float(item.get("mean_len", (lo + hi) / 2)),
                    density=float(item.get("density", 0.0)),
                    count=int(item.get("count", 0)),
                    variance=float(item.get("variance", 0.0)),
                )
            )
        part = cls(tuple(queues))
        part.check(contiguous=False)
        return part

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "QueuePartition":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    @classmethod
    def single(cls, min_len=1, max_len=1 << 20, mean_len=None) -> "QueuePartition":
        mean = (min_len + max_len) / 2 if mean_len is None else mean_len
        return cls((QueueSpec(queue_id(min_len, max_len), 1, min_len, max_len, mean),))


@dataclass(frozen=True)
class PartitionParams:
    alpha: float = 2.0
    min_width: int = 1
    max_queues: int = 32
    epsilon: float = 1.0
    coarse_k: int = 3

    def __post_init__(self):
        if not self.alpha > 1:
            raise ConfigError(f"alpha must be > 1, got {self.alpha}")
        if self.min_width < 1:
            raise ConfigError("min_width must be >= 1")
        if self.max_queues < 1:
            raise ConfigError("max_queues must be >= 1")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if self.coarse_k < 1:
            raise ConfigError("coarse_k must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "PartitionParams":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown partition_params keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


# -- Stage 1 -----------------------------------------------------------------


def kmeans_1d(lengths: Sequence, k: int) -> List[list]:
    """Optimal 1-D k-means on sorted data.

    Minimizes the within-cluster sum of squares over all partitions of the
    sorted input into ``k`` contiguous runs. Equal values never straddle a
    cluster boundary. O(k * m^2) in the number of distinct values ``m``.
    """
    values = list(lengths)
    if not values:
        raise ValueError("kmeans_1d needs at least one value")
    if any(b < a for a, b in zip(values, values[1:])):
        raise ValueError("kmeans_1d expects sorted input")
    distinct, counts = np.unique(np.asarray(values, dtype=float), return_counts=True)
    m = len(distinct)
    if k < 1 or k > m:
        raise ValueError(f"k={k} must lie in [1, {m}] (distinct values)")

    x = distinct - distinct.mean()
    w = counts.astype(float)
    cw = np.concatenate(([0.0], np.cumsum(w)))
    c1 = np.concatenate(([0.0], np.cumsum(w * x)))
    c2 = np.concatenate(([0.0], np.cumsum(w * x * x)))

    def sse(i, j):
        # distinct[i..j] inclusive; i may be an array
        n = cw[j + 1] - cw[i]
        s = c1[j + 1] - c1[i]
        return np.maximum(c2[j + 1] - c2[i] - s * s / n, 0.0)

    cost = sse(np.zeros(m, dtype=int), np.arange(m))
    back = np.zeros((k, m), dtype=int)
    for c in range(1, k):
        nxt = np.full(m, np.inf)
        for j in range(c, m):
            starts = np.arange(c, j + 1)
            cand = cost[starts - 1] + sse(starts, j)
            best = int(np.argmin(cand))
            nxt[j] = cand[best]
            back[c, j] = starts[best]
        cost = nxt

    cuts = []
    j = m - 1
    for c in range(k - 1, 0, -1):
        i = back[c, j]
        cuts.append(i)
        j = i - 1
    cuts.reverse()

    clusters, pos = [], 0
    for b in (distinct[i] for i in cuts):
        nxt_pos = bisect.bisect_left(values, b, lo=pos)
        clusters.append(values[pos:nxt_pos])
        pos = nxt_pos
    clusters.append(values[pos:])
    return clusters


# -- Stage 2 -----------------------------------------------------------------


def refine_cluster(cluster: Sequence, alpha: float, min_width: float, record: Optional[list] = None) -> List[list]:
    """Recursively split a sorted cluster at significant gaps.

    Gaps are taken between consecutive distinct lengths; repeated lengths
    contribute no zero gaps to the mean.

    ``record``, when given, receives one ``(node, split_positions)`` tuple per
    recursion node, where a split position ``j`` cuts between ``node[j-1]``
    and ``node[j]``.
    """
    values = list(cluster)
    n = len(values)
    if n < 2:
        if record is not None:
            record.append((tuple(values), ()))
        return [values] if values else []
    span = values[-1] - values[0]
    splits = ()
    if span >= min_width and span > 0:
        # mean gap over distinct consecutive lengths: span / (distinct - 1);
        # the test gap > alpha * mean is kept in exact-friendly form
        steps = sum(1 for j in range(1, n) if values[j] != values[j - 1])
        bar = alpha * span
        splits = tuple(j for j in range(1, n) if (values[j] - values[j - 1]) * steps > bar)
    if record is not None:
        record.append((tuple(values), splits))
    if not splits:
        return [values]
    out = []
    edges = (0,) + splits + (n,)
    for lo, hi in zip(edges, edges[1:]):
        out.extend(refine_cluster(values[lo:hi], alpha, min_width, record))
    return out


def _profile(members: Sequence, lo: int, hi: int, pos: int) -> QueueSpec:
    arr = np.asarray(members, dtype=float)
    return QueueSpec(
        id=queue_id(lo, hi),
        index=pos + 1,
        min_len=lo,
        max_len=hi,
        mean_len=float(arr.mean()),
        density=len(arr) / (hi - lo),
        count=len(arr),
        variance=float(arr.var()),
    )


def finalize_boundaries(clusters: Sequence[Sequence]) -> List[QueueSpec]:
    """Turn ordered value clusters into contiguous profiled intervals.

    Between a cluster ending at ``a`` and the next starting at ``c`` the shared
    boundary is ``(a + 1 + c) // 2``, the rounded-down midpoint of the
    uncovered integer lengths ``a+1 .. c``.
    """
    clusters = [list(c) for c in clusters if len(c)]
    specs = []
    lo = int(clusters[0][0])
    for pos, members in enumerate(clusters):
        if pos + 1 < len(clusters):
            a, c = int(members[-1]), int(clusters[pos + 1][0])
            if c <= a:
                raise ContractViolation("clusters must be strictly ordered")
            hi = (a + 1 + c) // 2
        else:
            hi = int(members[-1]) + 1
        specs.append(_profile(members, lo, hi, pos))
        lo = hi
    return specs


# -- Stage 3 -----------------------------------------------------------------


def scheduling_utility(q_left: QueueSpec, q_right: QueueSpec, epsilon: float) -> float:
    if q_left.index + 1 != q_right.index:
        raise ContractViolation(f"queues {q_left.index} and {q_right.index} are not adjacent")
    return (q_left.density + q_right.density) / (abs(q_right.mean_len - q_left.mean_len) + epsilon)


def merge_queues(left: QueueSpec, right: QueueSpec) -> QueueSpec:
    """Combine two adjacent intervals; the profile is recomputed from both members."""
    n = left.count + right.count
    if n:
        mean = (left.count * left.mean_len + right.count * right.mean_len) / n
        var = (
            left.count * (left.variance + (left.mean_len - mean) ** 2)
            + right.count * (right.variance + (right.mean_len - mean) ** 2)
        ) / n
    else:
        mean, var = (left.mean_len + right.mean_len) / 2, 0.0
    lo, hi = left.min_len, right.max_len
    return QueueSpec(
        id=queue_id(lo, hi),
        index=left.index,
        min_len=lo,
        max_len=hi,
        mean_len=mean,
        density=n / (hi - lo),
        count=n,
        variance=var,
    )


def _renumber(queues) -> QueuePartition:
    out = []
    for pos, q in enumerate(queues):
        out.append(replace(q, index=pos + 1, id=queue_id(q.min_len, q.max_len, q.is_bubble)))
    return QueuePartition(tuple(out))


def prune_partition(
    queues: Sequence[QueueSpec], max_queues: int, epsilon: float, anchors: Optional[Sequence] = None
) -> QueuePartition:
    """Merge lowest-utility neighbours until at most ``max_queues`` remain.

    ``anchors`` labels each candidate with the coarse cluster it came from;
    pairs straddling two anchors are merged only once no same-anchor pair is
    left. Ties in utility go to the leftmost pair. A lazy-deletion heap over a
    linked list keeps pruning at O(n log n).
    """
    if max_queues < 1:
        raise ConfigError("max_queues must be >= 1")
    nodes = [replace(q, index=pos + 1) for pos, q in enumerate(queues)]
    n = len(nodes)
    if n <= max_queues:
        return _renumber(nodes)
    first = list(anchors) if anchors is not None else [0] * n
    last = list(first)
    if len(first) != n:
        raise ValueError("anchors must label every candidate queue")

    def key(i, j):
        a, b = nodes[i], nodes[j]
        u = (a.density + b.density) / (abs(b.mean_len - a.mean_len) + epsilon)
        return (0 if last[i] == first[j] else 1, u, i, stamp[i], stamp[j])

    nxt = list(range(1, n)) + [-1]
    prv = [-1] + list(range(n - 1))
    alive = [True] * n
    stamp = [0] * n
    heap = [key(i, i + 1) for i in range(n - 1)]
    heapq.heapify(heap)
    remaining = n
    while remaining > max_queues:
        _, _, i, si, sj = heapq.heappop(heap)
        j = nxt[i]
        if not alive[i] or j < 0 or stamp[i] != si or stamp[j] != sj:
            continue
        nodes[i] = merge_queues(nodes[i], nodes[j])
        last[i] = last[j]
        alive[j] = False
        stamp[i] += 1
        nxt[i] = nxt[j]
        if nxt[j] >= 0:
            prv[nxt[j]] = i
        remaining -= 1
        p, r = prv[i], nxt[i]
        if p >= 0:
            heapq.heappush(heap, key(p, i))
        if r >= 0:
            heapq.heappush(heap, key(i, r))
    return _renumber([nodes[i] for i in range(n) if alive[i]])


# -- Full pipeline -------------------------------------------------------------


def refine_and_prune(lengths: Sequence, params: PartitionParams = PartitionParams(), record: Optional[list] = None) -> QueuePartition:
    """Full offline pipeline; ``record`` collects every gap-splitting node."""
    values = sorted(int(v) for v in lengths)
    if not values:
        raise ValueError("refine_and_prune needs at least one length")
    if values[0] < 1:
        raise ValueError("prompt lengths must be >= 1")
    distinct = len(set(values))
    k = params.coarse_k
    if distinct < k:
        logger.warning("only %d distinct lengths; using k=%d instead of %d", distinct, distinct, k)
        k = distinct
    subclusters, anchors = [], []
    for label, cluster in enumerate(kmeans_1d(values, k)):
        pieces = refine_cluster(cluster, params.alpha, params.min_width, record)
        subclusters.extend(pieces)
        anchors.extend([label] * len(pieces))
    candidates = finalize_boundaries(subclusters)
    return prune_partition(candidates, params.max_queues, params.epsilon, anchors)


def online_adjust(partition: QueuePartition, recent: Sequence, max_shift: float = 0.25, min_samples: int = 2) -> QueuePartition:
    """Nudge interior boundaries toward the recent window's local quantiles.

    For each pair of neighbours, the recent lengths falling inside their union
    are split at the quantile matching the pair's profiled member ratio. The
    shared boundary moves toward that point by at most ``max_shift`` of the
    width of the queue it moves into. Profiles are carried over unchanged.
    """
    if not 0 <= max_shift < 0.5:
        raise ConfigError("max_shift must lie in [0, 0.5)")
    queues = list(partition.queues)
    if len(queues) < 2 or len(recent) == 0:
        return partition
    data = sorted(recent)
    lows = [q.min_len for q in queues]
    highs = [q.max_len for q in queues]
    for i in range(len(queues) - 1):
        left, right = queues[i], queues[i + 1]
        if left.max_len != right.min_len:
            continue
        lo = bisect.bisect_left(data, left.min_len)
        hi = bisect.bisect_left(data, right.max_len)
        m = hi - lo
        if m < min_samples:
            continue
        total = left.count + right.count
        share = left.count / total if total else left.width / (left.width + right.width)
        j = min(max(int(round(share * m)), 1), m - 1)
        a, c = data[lo + j - 1], data[lo + j]
        target = (a + 1 + c) // 2 if c > a else c
        step = target - left.max_len
        if step < 0:
            step = max(step, -int(max_shift * left.width))
        else:
            step = min(step, int(max_shift * right.width))
        highs[i] = lows[i + 1] = left.max_len + step
    out = [replace(q, min_len=lows[i], max_len=highs[i]) for i, q in enumerate(queues)]
    return _renumber(out)


class QueuePartitioner(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`refine_and_prune`.

    ``fit`` learns the partition from 1-D prompt lengths; ``predict`` maps
    lengths to their 1-based queue index (0 when a length is not covered).

    Attributes
    ----------
    partition_ : QueuePartition
    n_queues_ : int
    labels_ : ndarray of queue indices for the training lengths
    """

    def __init__(self, alpha=2.0, min_width=1, max_queues=32, epsilon=1.0, coarse_k=3):
        self.alpha = alpha
        self.min_width = min_width
        self.max_queues = max_queues
        self.epsilon = epsilon
        self.coarse_k = coarse_k

    def _lengths(self, X):
        X = check_array(X, ensure_2d=False, dtype=np.int64)
        if X.ndim == 2:
            if X.shape[1] != 1:
                raise ValueError(f"expected a single feature (prompt length), got {X.shape[1]}")
            X = X[:, 0]
        return X

    def fit(self, X, y=None):
        lengths = self._lengths(X)
        params = PartitionParams(self.alpha, self.min_width, self.max_queues, self.epsilon, self.coarse_k)
        self.partition_ = refine_and_prune(lengths, params)
        self.n_queues_ = len(self.partition_)
        self.labels_ = self._assign(lengths)
        return self

    def _assign(self, lengths):
        pos = [self.partition_.locate(int(v)) for v in lengths]
        return np.array([0 if p is None else p + 1 for p in pos], dtype=np.int64)

    def predict(self, X):
        check_is_fitted(self, "partition_")
        return self._assign(self._lengths(X))

    def partial_fit(self, X, y=None, max_shift=0.25):
        """Online boundary adjustment from a recent window."""
        check_is_fitted(self, "partition_")
        self.partition_ = online_adjust(self.partition_, list(self._lengths(X)), max_shift=max_shift)
        self.n_queues_ = len(self.partition_)
        return self
