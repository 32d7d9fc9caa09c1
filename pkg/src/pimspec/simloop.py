"""End-to-end speculative decoding: prefill, draft/verify iterations, metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation, InvariantViolation
from .hwmodel import EnergyEstimate, PIMConfig, SystemConfig, iteration_cost, kv_write_energy
from .scheduler import (
    HardwareEstimator, HeadStats, IterationTimeline, Objective, PartitionState, PartitionTable,
    SchedulerConfig, TokenTree, capacity_limit, dau_step, eligible_weight_bytes, explore_tree,
    optimal_ratio, realloc_plan_schedule, update_stats,
)
from .workload import ModelSpec, decode_table, prefill_table, total_weight_bytes

MODES = ("npu-si", "pim-si", "lp-spec", "lp-spec+coproc", "lp-spec+coproc+sched")
FIXED_TREE_MODES = MODES[:4]


@dataclass(frozen=True)
class RunConfig:
    mode: str
    l_in: int = 128
    l_out: int = 256
    fixed_l_spec: int | None = None
    seed: int = 0
    trials: int = 1
    oracle: str = "independent"  # or "correlated"
    bonus_token: bool = True
    max_iterations: int = 100_000

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.l_out < 1 or self.l_in < 1:
            raise ConfigurationError("l_in and l_out must be >= 1")
        if self.mode in FIXED_TREE_MODES and self.fixed_l_spec is None:
            raise ConfigurationError(f"mode {self.mode} needs fixed_l_spec")
        if self.fixed_l_spec is not None and self.fixed_l_spec < 1:
            raise ConfigurationError("fixed_l_spec must be >= 1")
        if self.oracle not in ("independent", "correlated"):
            raise ConfigurationError("oracle must be 'independent' or 'correlated'")
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1")


def sample_truth(stats: HeadStats, rng: np.random.Generator, correlated: bool = False) -> tuple[int, ...]:
    """True rank per head (0 = outside the tracked ranks)."""
    sums = stats.p.sum(axis=1)
    if np.any(sums > 1 + 1e-9):
        raise InvariantViolation("rank probabilities of a head sum to more than 1")
    cum = np.cumsum(stats.p, axis=1)
    u = np.full(stats.n_heads, rng.random()) if correlated else rng.random(stats.n_heads)
    ranks = (cum <= u[:, None]).sum(axis=1) + 1
    ranks[u >= sums] = 0
    return tuple(int(r) for r in ranks)


def sample_truth_batch(stats: HeadStats, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` independent truth vectors as an ``(n, n_heads)`` array; 0 marks a miss."""
    cum = np.cumsum(stats.p, axis=1)
    u = rng.random((n, stats.n_heads))
    ranks = (cum[None, :, :] <= u[:, :, None]).sum(axis=2) + 1
    ranks[u >= cum[:, -1][None, :]] = 0
    return ranks


@dataclass(frozen=True)
class VerificationOutcome:
    accepted_depth: int
    accepted_nodes: tuple
    observed_ranks: tuple  # truth for heads 0..accepted_depth, the ones the verified tokens reveal
    tokens_generated: int


def verify(tree: TokenTree, truth, bonus_token: bool = True) -> VerificationOutcome:
    """Accept the longest root chain whose ranks match the truth head by head."""
    node, path = 0, []
    for rank in truth:
        nxt = tree.child(node, rank) if rank else None
        if nxt is None:
            break
        path.append(nxt)
        node = nxt
    depth = len(path)
    observed = tuple(truth[: depth + 1])
    return VerificationOutcome(depth, tuple(path), observed, depth + 1 if bonus_token else max(depth, 1))


def accepted_counts(tree: TokenTree, truth: np.ndarray) -> np.ndarray:
    """Vectorized accepted depth for a batch of truth vectors."""
    count = np.zeros(len(truth), dtype=int)
    for n in tree.nodes[1:]:
        ranks = tree.ranks(n.id)
        count += np.all(truth[:, : len(ranks)] == np.array(ranks), axis=1)
    return count


def fixed_tree(stats: HeadStats, l_spec: int) -> TokenTree:
    """Static tree of ``l_spec`` nodes: the most probable paths for the given stats."""
    return explore_tree(stats, None, Objective("accuracy", budget=l_spec - 1))


RECORD_FIELDS = (
    "iteration", "l_spec", "tree_depth", "accepted", "tokens", "seq_len", "group", "ratio_on_pim",
    "t_npu", "t_pim", "latency", "e_compute", "e_offchip", "e_internal", "e_onchip", "energy",
    "realloc_bytes", "realloc_residue",
)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    l_spec: int
    tree_depth: int
    accepted: int
    tokens: int
    seq_len: int
    group: int
    ratio_on_pim: float
    t_npu: float
    t_pim: float
    latency: float
    e_compute: float
    e_offchip: float
    e_internal: float
    e_onchip: float
    energy: float
    realloc_bytes: float
    realloc_residue: float


SUMMARY_FIELDS = (
    "model", "mode", "l_in", "l_out", "l_spec", "seed", "trial", "iterations", "tokens", "mean_l_spec",
    "mean_tokens_per_iter", "prefill_latency", "prefill_energy", "total_latency", "total_energy",
    "tokens_per_s", "tokens_per_j", "edp", "edp_per_token",
)


@dataclass
class RunReport:
    model: str
    cfg: RunConfig
    records: list
    prefill_latency: float
    prefill_energy: float
    trial: int = 0

    @property
    def tokens(self) -> int:
        return sum(r.tokens for r in self.records)

    @property
    def decode_latency(self) -> float:
        return math.fsum(r.latency for r in self.records)

    @property
    def total_latency(self) -> float:
        return self.prefill_latency + self.decode_latency

    @property
    def total_energy(self) -> float:
        return self.prefill_energy + math.fsum(r.energy for r in self.records)

    @property
    def tokens_per_s(self) -> float:
        return self.tokens / self.total_latency

    @property
    def tokens_per_j(self) -> float:
        return self.tokens / self.total_energy

    @property
    def edp(self) -> float:
        """Whole-run energy-delay product in J*s."""
        return self.total_latency * self.total_energy

    @property
    def edp_per_token(self) -> float:
        """Per-token latency times per-token energy, in s*J."""
        return self.edp / self.tokens ** 2

    def summary(self) -> dict:
        n = len(self.records)
        return dict(
            model=self.model, mode=self.cfg.mode, l_in=self.cfg.l_in, l_out=self.cfg.l_out,
            l_spec=self.cfg.fixed_l_spec or 0, seed=self.cfg.seed, trial=self.trial, iterations=n, tokens=self.tokens,
            mean_l_spec=sum(r.l_spec for r in self.records) / n,
            mean_tokens_per_iter=self.tokens / n,
            prefill_latency=self.prefill_latency, prefill_energy=self.prefill_energy,
            total_latency=self.total_latency, total_energy=self.total_energy,
            tokens_per_s=self.tokens_per_s, tokens_per_j=self.tokens_per_j,
            edp=self.edp, edp_per_token=self.edp_per_token,
        )

    def records_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in self.records:
            w.writerow(_fmt(getattr(r, f)) for f in RECORD_FIELDS)
        return buf.getvalue()

    def summary_csv(self) -> str:
        return summaries_csv([self.summary()])

    def one_line(self) -> str:
        return (f"{self.model} {self.cfg.mode}: {self.tokens_per_s:.2f} tokens/s, "
                f"{self.tokens_per_j:.2f} tokens/J, EDP {self.edp_per_token * 1e3:.4f} s*mJ per token")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summaries_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for row in rows:
        w.writerow(_fmt(row[f]) for f in SUMMARY_FIELDS)
    return buf.getvalue()


@dataclass(frozen=True)
class OracleConfig:
    """True per-head rank probabilities the verification oracle samples from."""

    rows: tuple = (
        (0.60, 0.10, 0.05, 0.03),
        (0.45, 0.09, 0.05, 0.03),
        (0.36, 0.08, 0.04, 0.03),
        (0.30, 0.07, 0.04, 0.02),
    )

    def stats(self, n_heads: int | None = None) -> HeadStats:
        rows = self.rows if n_heads is None else self.rows[:n_heads]
        return HeadStats.from_rows(rows)


def _mode_system(mode: str, sys: SystemConfig) -> SystemConfig:
    if mode == "pim-si":
        return sys.with_pim(PIMConfig.samsung(sys.pim.total_dies))
    return sys


def check_capacity(model: ModelSpec, sys: SystemConfig, max_seq: int) -> None:
    need = total_weight_bytes(model) + max_seq * model.kv_bytes_per_token()
    if need > sys.total_capacity:
        raise ConfigurationError(
            f"{model.name} needs {need / 1e9:.2f} GB at {max_seq} tokens but memory holds "
            f"{sys.total_capacity / 1e9:.2f} GB")


def run_decode(cfg: RunConfig, model: ModelSpec, sys: SystemConfig,
               sched: SchedulerConfig | None = None, oracle: OracleConfig | None = None,
               trial: int = 0) -> RunReport:
    """Prefill then draft/verify until ``cfg.l_out`` tokens exist.

    Trial ``t`` draws its oracle samples from the stream ``(seed, t)``; trial 0
    uses ``seed`` directly.
    """
    sched = sched or SchedulerConfig()
    oracle = oracle or OracleConfig()
    check_capacity(model, sys, cfg.l_in + cfg.l_out)
    mode_sys = _mode_system(cfg.mode, sys)
    truth_stats = oracle.stats(model.n_decode_heads)
    seed = cfg.seed if trial == 0 else np.random.SeedSequence([cfg.seed, trial])
    rng = np.random.Generator(np.random.PCG64(seed))

    pre = iteration_cost(prefill_table(model, cfg.l_in), mode_sys, cfg.l_in, 0.0)
    eligible = eligible_weight_bytes(model)
    limit = capacity_limit(model, mode_sys)
    kv_per_token = model.kv_bytes_per_token()

    dynamic = cfg.mode == "lp-spec+coproc+sched"
    overlap = cfg.mode in ("lp-spec+coproc", "lp-spec+coproc+sched")
    tracked = tree = None
    if dynamic:
        tracked = HeadStats.prior(model.n_decode_heads, sched.k_max, sched.prior_scale,
                                  ewma_decay=sched.ewma_decay)
        table = PartitionTable.build(mode_sys, model, sched.group_cap)
        state = PartitionState(table[1])
        resident = state.ratio_on_pim
        budget = (cfg.fixed_l_spec or 16) - 1
        objective = Objective(sched.objective, budget)
        if sched.estimator_ratio == "optimal":
            ratio_for = lambda l: table[min(-(-l // mode_sys.pim.n_alu), table.cap)]
        else:
            ratio_for = lambda l: state.ratio_on_pim
        estimator = HardwareEstimator(model, mode_sys, ratio_for, overlap=True)
    else:
        tree = fixed_tree(truth_stats, cfg.fixed_l_spec)
        if cfg.mode == "npu-si":
            fixed_ratio = 0.0
        elif cfg.mode == "lp-spec+coproc":
            fixed_ratio = min(optimal_ratio(tree.l_spec, mode_sys), limit)
        else:
            fixed_ratio = limit

    records = []
    seq, generated, pending = cfg.l_in, 0, 0.0
    while generated < cfg.l_out:
        if len(records) >= cfg.max_iterations:
            raise ContractViolation(f"run did not finish within {cfg.max_iterations} iterations")
        group = 0
        if dynamic:
            estimator.seq_len = seq
            tree = explore_tree(tracked, estimator, objective)
            # While weights migrate, the NPU covers the moving slice and feeds the copy-writes.
            ratio = min(resident, state.ratio_on_pim)
            group = state.group_id
        else:
            ratio = fixed_ratio
        l_spec = tree.l_spec
        cost = iteration_cost(decode_table(model, seq, l_spec), mode_sys, l_spec, ratio, overlap)
        latency = cost.latency.t_total
        energy = cost.energy

        copied = 0.0
        if dynamic and pending > 0:
            timeline = IterationTimeline(latency, cost.bus_bytes / mode_sys.dram.offchip_bw,
                                         ride_bytes=pending)
            plan = realloc_plan_schedule(pending, timeline, mode_sys.dram.offchip_bw, sched.overlap_realloc)
            copied, pending = plan.copied, plan.residue
            latency += plan.added_latency
            energy += EnergyEstimate(e_internal=copied * mode_sys.energy.e_internal_per_byte)
            if pending <= 0:
                resident = state.ratio_on_pim

        truth = sample_truth(truth_stats, rng, cfg.oracle == "correlated")
        outcome = verify(tree, truth, cfg.bonus_token)
        tokens = min(outcome.tokens_generated, cfg.l_out - generated)
        energy += kv_write_energy(tokens * kv_per_token, ratio, mode_sys.energy)

        if dynamic:
            update_stats(tracked, outcome)
            plan = dau_step(state, l_spec, mode_sys, table, eligible)
            if plan is not None:
                pending = abs(state.ratio_on_pim - resident) * eligible
                if pending <= 0:
                    resident = state.ratio_on_pim

        records.append(IterationRecord(
            len(records), l_spec, tree.max_depth, outcome.accepted_depth, tokens, seq, group, ratio,
            cost.latency.t_npu, cost.latency.t_pim, latency,
            energy.e_compute, energy.e_offchip, energy.e_internal, energy.e_onchip, energy.e_total,
            copied, pending,
        ))
        seq += tokens
        generated += tokens
    return RunReport(model.name, cfg, records, pre.latency.t_total, pre.energy.e_total, trial)


def run_trials(cfg: RunConfig, model: ModelSpec, sys: SystemConfig,
               sched: SchedulerConfig | None = None, oracle: OracleConfig | None = None) -> list[RunReport]:
    return [run_decode(cfg, model, sys, sched, oracle, t) for t in range(cfg.trials)]


def geomean(values) -> float:
    values = np.asarray(list(values), dtype=float)
    if values.size == 0:
        raise ContractViolation("geomean of nothing")
    if np.any(values <= 0):
        raise ContractViolation("geomean needs positive values")
    return float(np.exp(np.mean(np.log(values))))


@dataclass(frozen=True)
class Summary:
    speedup: dict  # mode -> geomean speedup over the baseline
    energy_gain: dict
    edp_gain: dict
    cells: list  # (key, mode, speedup, energy gain, edp gain)


def aggregate(reports, baseline: str = "npu-si") -> Summary:
    """Geometric-mean ratios of every mode against ``baseline`` at matching sweep points."""
    reports = list(reports)
    if not reports:
        raise ContractViolation("aggregate needs at least one report")
    key = lambda r: (r.model, r.cfg.l_in, r.cfg.l_out, r.cfg.fixed_l_spec, r.cfg.seed, r.trial)
    base = {key(r): r for r in reports if r.cfg.mode == baseline}
    cells = []
    for r in reports:
        b = base.get(key(r), r if len(reports) == 1 else None)
        if b is None:
            continue
        cells.append((key(r), r.cfg.mode, b.total_latency / r.total_latency,
                      r.tokens_per_j / b.tokens_per_j, b.edp_per_token / r.edp_per_token))
    modes = sorted({c[1] for c in cells}, key=lambda m: MODES.index(m) if m in MODES else len(MODES))
    pick = lambda i, m: geomean(c[i] for c in cells if c[1] == m)
    return Summary({m: pick(2, m) for m in modes}, {m: pick(3, m) for m in modes},
                   {m: pick(4, m) for m in modes}, cells)
