"""Draft token pruner and data allocation unit.

The pruner grows a token tree greedily by path probability and asks a
hardware estimator whether each extra node still pays for itself.  The
allocation unit keeps the DRAM/PIM weight split matched to the current
speculation length, with 2-bit counters so a single outlier never triggers a
data migration.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import AllocationError, ConfigurationError, ContractViolation, InvariantViolation
from .hwmodel import SystemConfig, iteration_cost, pass_factor
from .workload import ModelSpec, OpKind, OpTable, decode_table

_TOL = 1e-12


@dataclass
class HeadStats:
    """``p[i, k-1]``: probability that draft head ``i`` has the true token at rank ``k``."""

    p: np.ndarray
    ewma_decay: float = 0.05
    observations: np.ndarray = None

    def __post_init__(self):
        self.p = np.array(self.p, dtype=float, ndmin=2, copy=True)
        if self.p.size == 0:
            raise ConfigurationError("head statistics are empty")
        if self.observations is None:
            self.observations = np.zeros(self.n_heads, dtype=int)
        if not 0.0 <= self.ewma_decay <= 1.0:
            raise ConfigurationError(f"ewma_decay must be in [0, 1], got {self.ewma_decay}")
        self.validate()

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]], **kw) -> "HeadStats":
        """Ragged rows are padded with zeros to a common rank depth."""
        rows = [list(r) for r in rows]
        if not rows or not any(rows):
            raise ConfigurationError("head statistics are empty")
        width = max(len(r) for r in rows)
        return cls(np.array([r + [0.0] * (width - len(r)) for r in rows]), **kw)

    @classmethod
    def prior(cls, n_heads: int, k_max: int, scale: float = 0.6, **kw) -> "HeadStats":
        """Decaying heuristic start point; the LM head counts as head 0 so draft head j uses j + 2."""
        j = np.arange(n_heads)[:, None]
        k = np.arange(1, k_max + 1)[None, :]
        return cls(scale / (k * (j + 2)), **kw)

    @property
    def n_heads(self) -> int:
        return self.p.shape[0]

    @property
    def k_max(self) -> int:
        return self.p.shape[1]

    def prob(self, head: int, rank: int) -> float:
        if rank < 1 or rank > self.k_max or head >= self.n_heads:
            return 0.0
        return float(self.p[head, rank - 1])

    def validate(self) -> None:
        p = self.p
        if np.any(p < -_TOL) or np.any(p > 1 + _TOL) or not np.all(np.isfinite(p)):
            raise InvariantViolation("head probabilities must lie in [0, 1]")
        if np.any(np.diff(p, axis=1) > _TOL):
            raise InvariantViolation("head probabilities must be nonincreasing in rank")
        sums = p.sum(axis=1)
        if np.any(sums > 1 + 1e-9):
            bad = int(np.argmax(sums))
            raise InvariantViolation(f"head {bad} rank probabilities sum to {sums[bad]:.6f} > 1")

    def copy(self) -> "HeadStats":
        return HeadStats(self.p.copy(), self.ewma_decay, self.observations.copy())


@dataclass(frozen=True)
class Node:
    id: int
    parent: int | None
    head: int
    rank: int


class TokenTree:
    """Draft tree.  Node 0 is the verified LM-head token; a node at depth d was drafted by head d-1."""

    def __init__(self):
        self.nodes: list[Node] = [Node(0, None, -1, 0)]
        self._children: dict[int, dict[int, int]] = {0: {}}

    @classmethod
    def from_paths(cls, paths) -> "TokenTree":
        """Build from rank tuples, e.g. ``[(1,), (1, 1), (2,)]``; missing prefixes are added."""
        tree = cls()
        for path in paths:
            node = 0
            for rank in path:
                node = tree._children[node].get(rank) or tree.add(node, rank)
        return tree

    def add(self, parent: int, rank: int) -> int:
        if not 0 <= parent < len(self.nodes):
            raise ContractViolation(f"unknown parent node {parent}")
        if rank < 1:
            raise ContractViolation("ranks start at 1")
        if rank in self._children[parent]:
            raise InvariantViolation(f"node {parent} already has a rank-{rank} child")
        node = Node(len(self.nodes), parent, self.nodes[parent].head + 1, rank)
        self.nodes.append(node)
        self._children[parent][rank] = node.id
        self._children[node.id] = {}
        return node.id

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def l_spec(self) -> int:
        """Tokens verified in one pass: every node including the root."""
        return len(self.nodes)

    def child(self, node: int, rank: int) -> int | None:
        return self._children[node].get(rank)

    def children(self, node: int) -> list[int]:
        return [self._children[node][r] for r in sorted(self._children[node])]

    def depth(self, node: int) -> int:
        return self.nodes[node].head + 1

    @property
    def max_depth(self) -> int:
        return max(n.head for n in self.nodes) + 1

    def path(self, node: int) -> list[Node]:
        """Root-to-node chain, excluding the root."""
        out = []
        while node:
            out.append(self.nodes[node])
            node = self.nodes[node].parent
        return out[::-1]

    def ranks(self, node: int) -> tuple[int, ...]:
        return tuple(n.rank for n in self.path(node))

    def validate(self) -> None:
        seen = set()
        for n in self.nodes[1:]:
            if n.parent is None or n.parent >= n.id:
                raise InvariantViolation(f"node {n.id} does not follow its parent")
            if n.head != self.nodes[n.parent].head + 1:
                raise InvariantViolation(f"node {n.id} breaks head ordering")
            key = (n.parent, n.rank)
            if key in seen:
                raise InvariantViolation(f"duplicate (parent, rank) {key}")
            seen.add(key)


def path_acceptance(tree: TokenTree, node: int, stats: HeadStats) -> float:
    prob = 1.0
    for n in tree.path(node):
        prob *= stats.prob(n.head, n.rank)
    return prob


def expected_accept_length(tree: TokenTree, stats: HeadStats) -> float:
    return float(sum(path_acceptance(tree, n.id, stats) for n in tree.nodes[1:]))


OBJECTIVE_MODES = ("accuracy", "throughput", "energy", "edp")

# (latency seconds, energy joules) of one verification pass over l_spec tokens
Estimator = Callable[[int], tuple[float, float]]


@dataclass(frozen=True)
class Objective:
    """``budget`` caps the draft nodes (the root is free)."""

    mode: str = "throughput"
    budget: int = 15

    def __post_init__(self):
        if self.mode not in OBJECTIVE_MODES:
            raise ConfigurationError(f"objective mode must be one of {OBJECTIVE_MODES}, got {self.mode!r}")
        if self.budget < 0:
            raise ConfigurationError("node budget must be >= 0")

    def score(self, expected: float, l_spec: int, estimator: Estimator | None) -> float:
        """Higher is better.  Expected tokens per pass is ``1 + expected``."""
        if self.mode == "accuracy":
            return expected
        if estimator is None:
            raise ContractViolation(f"objective {self.mode!r} needs a hardware estimator")
        latency, energy = estimator(l_spec)
        tokens = 1.0 + expected
        if self.mode == "throughput":
            return tokens / latency
        if self.mode == "energy":
            return tokens / energy
        return tokens * tokens / (latency * energy)


def explore_tree(stats: HeadStats, estimator: Estimator | None, obj: Objective) -> TokenTree:
    """Grow the tree from the root, always taking the most probable frontier node.

    Stops at the budget, at a zero-probability frontier, or as soon as a new
    node fails to improve the objective (that node is not kept).  Ties go to
    the shallower node, then the lower head, then the lower rank.
    """
    if stats.p.size == 0:
        raise ConfigurationError("head statistics are empty")
    tree = TokenTree()
    expected = 0.0
    best = obj.score(expected, tree.l_spec, estimator)
    # Frontier holds, per tree node, its best untaken child (rank 1 of the next head)
    # and, per taken node, its next sibling; ranks are monotone so nothing better is missed.
    frontier: list = []

    def push(parent: int, rank: int):
        head = tree.nodes[parent].head + 1
        prob = path_acceptance(tree, parent, stats) * stats.prob(head, rank)
        if prob > 0.0:
            heapq.heappush(frontier, (-prob, head + 1, head, rank, parent))

    push(0, 1)
    while frontier and len(tree) - 1 < obj.budget:
        neg_prob, _, _, rank, parent = frontier[0]
        score = obj.score(expected - neg_prob, tree.l_spec + 1, estimator)
        if score <= best:
            break
        heapq.heappop(frontier)
        node = tree.add(parent, rank)
        expected -= neg_prob
        best = score
        push(node, 1)
        push(parent, rank + 1)
    return tree


def best_expected_length(stats: HeadStats, budget: int) -> float:
    """Exact optimum of ``expected_accept_length`` over all rooted trees with ``budget`` draft nodes.

    Tree knapsack over the full (head, rank) candidate tree; independent of the
    greedy argument and used as its oracle.
    """
    H, K = stats.n_heads, stats.k_max

    @lru_cache(maxsize=None)
    def subtree(head: int, prob_key: float, b: int) -> float:
        # Best value of a forest hanging under a node whose own path probability is prob_key,
        # drawing children from ``head``; b = nodes available for the forest.
        if b == 0 or head >= H:
            return 0.0
        # Combine K child slots one by one (knapsack over children).
        best = [0.0] * (b + 1)
        for r in range(1, K + 1):
            q = prob_key * float(stats.p[head, r - 1])
            new = best[:]
            for used in range(b + 1):
                for take in range(1, b - used + 1):
                    val = best[used] + q + subtree(head + 1, q, take - 1)
                    if val > new[used + take]:
                        new[used + take] = val
            best = new
        return max(best)

    return subtree(0, 1.0, budget)


def update_stats(stats: HeadStats, outcome) -> HeadStats:
    """EWMA step toward the observed rank of every head whose truth was revealed.

    ``outcome`` is a :class:`~pimspec.simloop.VerificationOutcome` or any
    sequence of per-head observations, each a rank (1-based), 0/None for a
    miss beyond the tracked ranks.  Rows stay sorted by probability.
    """
    observed = getattr(outcome, "observed_ranks", outcome)
    lam = stats.ewma_decay
    for head, rank in enumerate(observed):
        if head >= stats.n_heads:
            break
        target = np.zeros(stats.k_max)
        if rank and rank <= stats.k_max:
            target[rank - 1] = 1.0
        stats.p[head] = (1.0 - lam) * stats.p[head] + lam * target
        stats.p[head] = np.sort(stats.p[head])[::-1]
        stats.observations[head] += 1
    np.clip(stats.p, 0.0, 1.0, out=stats.p)
    return stats


def optimal_ratio(l_spec: int, sys: SystemConfig) -> float:
    """Fraction of eligible weight bytes to hold in PIM so both devices finish together."""
    b_eff = sys.pim.bw_total / pass_factor(l_spec, sys.pim.n_alu)
    return b_eff / (b_eff + sys.dram.offchip_bw)


def group_of(l_spec: int, sys: SystemConfig, cap: int = 8) -> int:
    return min(pass_factor(l_spec, sys.pim.n_alu), cap)


def eligible_weight_bytes(model: ModelSpec) -> float:
    """Weight bytes the partition applies to: every FC and decode head (KV excluded)."""
    tab = decode_table(model, 0, 1)
    mask = (tab.kind == int(OpKind.FC)) | (tab.kind == int(OpKind.DECODE_HEAD))
    return float(np.dot(tab.weight_bytes[mask], tab.count[mask]))


def capacity_limit(model: ModelSpec, sys: SystemConfig) -> float:
    """Largest PIM fraction whose weights fit the PIM ranks."""
    return min(1.0, sys.pim.capacity / eligible_weight_bytes(model))


@dataclass(frozen=True)
class PartitionTable:
    """One PIM fraction per group id, clamped to what fits the PIM ranks."""

    ratios: dict

    @classmethod
    def build(cls, sys: SystemConfig, model: ModelSpec | None = None, cap: int = 8) -> "PartitionTable":
        limit = capacity_limit(model, sys) if model is not None else 1.0
        return cls({g: min(optimal_ratio(g * sys.pim.n_alu, sys), limit) for g in range(1, cap + 1)})

    @property
    def cap(self) -> int:
        return max(self.ratios)

    def __getitem__(self, group: int) -> float:
        return self.ratios[group]


@dataclass
class PartitionState:
    ratio_on_pim: float
    group_id: int = 1
    counters: dict = field(default_factory=dict)
    l_spec: int = 1
    n_token: int = 0

    def validate(self, sys: SystemConfig | None = None, eligible_bytes: float | None = None) -> None:
        if not 0.0 <= self.ratio_on_pim <= 1.0:
            raise InvariantViolation(f"ratio_on_pim {self.ratio_on_pim} outside [0, 1]")
        if any(c not in (0, 1, 2, 3) for c in self.counters.values()):
            raise InvariantViolation("saturating counters must stay in 0..3")
        if sys is not None and eligible_bytes is not None:
            if self.ratio_on_pim * eligible_bytes > sys.pim.capacity + 1e-6:
                raise AllocationError("PIM-resident weights exceed PIM capacity")


@dataclass(frozen=True)
class Tile:
    op: str
    bytes: float


@dataclass(frozen=True)
class ReallocationPlan:
    from_ratio: float
    to_ratio: float
    from_group: int
    to_group: int
    bytes: float
    tiles: tuple = ()

    @property
    def direction(self) -> str:
        return "dram->pim" if self.to_ratio > self.from_ratio else "pim->dram"


def plan_tiles(model: ModelSpec, delta: float, units: int) -> tuple[Tile, ...]:
    """Split ``delta`` of every eligible weight matrix into per-layer, per-MPU column tiles."""
    tab = decode_table(model, 0, 1)
    tiles = []
    for i, name in enumerate(tab.names):
        if tab.kind[i] not in (int(OpKind.FC), int(OpKind.DECODE_HEAD)):
            continue
        per_unit = delta * tab.weight_bytes[i] / units
        layers = int(tab.count[i])
        for layer in range(layers):
            label = f"L{layer}.{name.split('.', 1)[-1]}" if layers > 1 else name
            tiles.extend(Tile(f"{label}#u{u}", per_unit) for u in range(units))
    return tuple(tiles)


def dau_step(state: PartitionState, l_spec: int, sys: SystemConfig, table: PartitionTable,
             eligible_bytes: float = 0.0, model: ModelSpec | None = None) -> ReallocationPlan | None:
    """Feed one observed speculation length to the allocation unit.

    Only two consecutive observations of the same foreign group switch the
    partition; any other observation clears the pending counters.
    """
    g = group_of(l_spec, sys, table.cap)
    state.l_spec = state.n_token = l_spec
    pending = state.counters.get(g, 0)
    state.counters = {}
    if g == state.group_id:
        return None
    pending = min(pending + 1, 3)
    if pending < 2:
        state.counters[g] = pending
        return None
    new = table[g]
    if new * eligible_bytes > sys.pim.capacity + 1e-6:
        raise AllocationError(
            f"group {g} wants {new * eligible_bytes / 1e9:.2f} GB in PIM, capacity is "
            f"{sys.pim.capacity / 1e9:.2f} GB")
    delta = abs(new - state.ratio_on_pim)
    tiles = plan_tiles(model, delta, sys.pim.total_units) if model is not None else ()
    plan = ReallocationPlan(state.ratio_on_pim, new, state.group_id, g, delta * eligible_bytes, tiles)
    state.ratio_on_pim, state.group_id = new, g
    return plan


@dataclass(frozen=True)
class IterationTimeline:
    """Coarse DQ view of one iteration, enough to place copy-write bursts."""

    duration: float  # seconds
    dq_busy: float  # seconds the NPU and PIM traffic hold the DQ lines
    ride_bytes: float = 0.0  # migrating bytes the NPU fetches anyway this pass

    def idle_bytes(self, bw: float) -> float:
        return max(self.duration - self.dq_busy, 0.0) * bw


@dataclass(frozen=True)
class CopySchedule:
    copied: float
    residue: float
    added_latency: float


def realloc_plan_schedule(plan_bytes: float, timeline: IterationTimeline, bw: float,
                          overlap: bool = True) -> CopySchedule:
    """Place copy-writes for ``plan_bytes`` into one iteration.

    Bytes the NPU is already reading are copied on the same DQ beat; the rest
    use idle DQ slots and whatever does not fit spills to the next iteration.
    Without overlap the whole plan runs back to back with compute.
    """
    if plan_bytes <= 0:
        raise ContractViolation("reallocation plan is empty")
    if not overlap:
        return CopySchedule(plan_bytes, 0.0, plan_bytes / bw)
    capacity = timeline.ride_bytes + timeline.idle_bytes(bw)
    copied = min(plan_bytes, capacity)
    return CopySchedule(copied, plan_bytes - copied, 0.0)


@dataclass(frozen=True)
class SchedulerConfig:
    objective: str = "throughput"
    ewma_decay: float = 0.05
    prior_scale: float = 0.6
    k_max: int = 4
    group_cap: int = 8
    estimator_ratio: str = "optimal"  # or "current"
    overlap_realloc: bool = True

    def validate(self) -> list[str]:
        problems = []
        if self.objective not in OBJECTIVE_MODES:
            problems.append(f"scheduler.objective must be one of {OBJECTIVE_MODES}")
        if not 0.0 <= self.ewma_decay <= 1.0:
            problems.append("scheduler.ewma_decay must be in [0, 1]")
        if self.k_max < 1 or self.group_cap < 1:
            problems.append("scheduler.k_max and scheduler.group_cap must be >= 1")
        if self.estimator_ratio not in ("optimal", "current"):
            problems.append("scheduler.estimator_ratio must be 'optimal' or 'current'")
        if not 0.0 < self.prior_scale <= 1.0:
            problems.append("scheduler.prior_scale must be in (0, 1]")
        return problems


class HardwareEstimator:
    """Closed-form cost of a verification pass as seen by the pruner.

    ``ratio_for(l_spec)`` picks the PIM fraction assumed for each candidate
    size; KV length is bucketed so repeated queries hit the cache.
    """

    def __init__(self, model: ModelSpec, sys: SystemConfig, ratio_for: Callable[[int], float],
                 overlap: bool = True, seq_bucket: int = 64):
        self.model, self.sys, self.ratio_for, self.overlap = model, sys, ratio_for, overlap
        self.seq_bucket = seq_bucket
        self.seq_len = 0
        self._cache: dict = {}

    def __call__(self, l_spec: int) -> tuple[float, float]:
        seq = (self.seq_len // self.seq_bucket) * self.seq_bucket
        ratio = self.ratio_for(l_spec)
        key = (l_spec, seq, ratio)
        hit = self._cache.get(key)
        if hit is None:
            cost = iteration_cost(decode_table(self.model, seq, l_spec), self.sys, l_spec, ratio, self.overlap)
            hit = self._cache[key] = (cost.latency.t_total, cost.energy.e_total)
        return hit
