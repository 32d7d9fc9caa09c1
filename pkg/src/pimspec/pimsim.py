"""LPDDR5-PIM die model: MPU resources, column-wise mapping, communication, GEMM timing, modes."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

from .errors import ContractViolation, ProtocolError
from .hwmodel import PIMConfig
from .nmc import TimingParams
from .workload import OpDescriptor


@dataclass(frozen=True)
class MPUResources:
    n_simd_alus: int = 4
    lanes: int = 32
    crf_entries: int = 32
    crf_bits: int = 32
    grf_entries: int = 16
    grf_bits: int = 4 * 256
    srf_entries: int = 16
    srf_bits: int = 4 * 8
    arf_entries: int = 8
    arf_bits: int = 4 * 1024
    acc_bits: int = 32

    @classmethod
    def from_pim(cls, pim: PIMConfig) -> "MPUResources":
        return cls(n_simd_alus=pim.alus_per_mpu, lanes=pim.lanes_per_alu)

    @property
    def grf_bytes(self) -> int:
        return self.grf_entries * self.grf_bits // 8

    @property
    def arf_bytes(self) -> int:
        return self.arf_entries * self.arf_bits // 8

    def accumulators(self) -> int:
        """INT32 partial sums the ARF can hold at once."""
        return self.arf_entries * self.arf_bits // self.acc_bits

    def tile_fits(self, tile_cols: int, tokens: int) -> bool:
        """A tile keeps one INT32 accumulator per (column, token) and one 256-bit beat per ALU."""
        tokens = min(tokens, self.n_simd_alus)
        return tile_cols * tokens <= self.accumulators() and self.lanes * self.n_simd_alus <= self.grf_bytes

    def peak_ops(self, mac_freq: float) -> float:
        return self.n_simd_alus * self.lanes * 2 * mac_freq


@dataclass(frozen=True)
class ColumnMapping:
    """``assignments[u]`` lists the ``(op_id, start, stop)`` column ranges of unit ``u``."""

    n_columns: int
    assignments: tuple
    tile_cols: int = 1
    broadcast_inputs: bool = True

    @property
    def n_units(self) -> int:
        return len(self.assignments)

    def columns_per_unit(self) -> list[int]:
        return [sum(b - a for _, a, b in unit) for unit in self.assignments]

    def check(self) -> None:
        spans = sorted((a, b) for unit in self.assignments for _, a, b in unit)
        cursor = 0
        for a, b in spans:
            if a != cursor or b <= a:
                raise ContractViolation(f"column ranges are not a disjoint cover at column {cursor}")
            cursor = b
        if cursor != self.n_columns:
            raise ContractViolation(f"column ranges cover [0, {cursor}) instead of [0, {self.n_columns})")
        cols = self.columns_per_unit()
        if max(cols) - min(cols) > self.tile_cols:
            raise ContractViolation("column mapping is unbalanced by more than one tile")


def map_gemm_columnwise(op: OpDescriptor, pim: PIMConfig, op_id: int = 0) -> ColumnMapping:
    """Split an op's output columns evenly across every MPU; remainders go one per unit."""
    if op.n <= 0:
        raise ContractViolation("cannot map an op with no output columns")
    if not op.pim_eligible:
        raise ContractViolation(f"op {op.name or op.kind!r} is not PIM-eligible")
    units = pim.total_units
    base, extra = divmod(int(op.n), units)
    out, start = [], 0
    for u in range(units):
        width = base + (1 if u < extra else 0)
        out.append(((op_id, start, start + width),) if width else ())
        start += width
    return ColumnMapping(int(op.n), tuple(out))


class CommScheme(str, enum.Enum):
    BROADCAST = "broadcast"
    ALLREDUCE = "allreduce"


@dataclass(frozen=True)
class CommCost:
    bytes_moved: float
    scheme: CommScheme


def comm_cost(n_bytes: float, scheme, pim: PIMConfig) -> CommCost:
    """Broadcast sends once to every unit (all chip selects asserted); all-reduce gathers from each."""
    if n_bytes <= 0:
        raise ContractViolation("communication volume must be positive")
    scheme = CommScheme(scheme)
    moved = n_bytes if scheme is CommScheme.BROADCAST else n_bytes * pim.total_units
    return CommCost(float(moved), scheme)


def mpu_gemm_time(cols: int, k: int, l_spec: int, pim: PIMConfig, timing: TimingParams) -> float:
    """One MPU streams ``cols x k`` INT8 weights, one 32-byte beat per t_CCD, 4 tokens per pass."""
    if min(cols, k, l_spec) < 1:
        raise ContractViolation("cols, k and l_spec must all be >= 1")
    beats = cols * k / pim.lanes_per_alu
    return beats * timing.t_ccd * timing.clock_period * math.ceil(l_spec / pim.alus_per_mpu)


def mapped_op_time(op: OpDescriptor, pim: PIMConfig, timing: TimingParams, l_spec: int) -> float:
    """Wall time of one op on the whole PIM system: the slowest unit sets the pace."""
    mapping = map_gemm_columnwise(op, pim)
    cols = max(mapping.columns_per_unit())
    k = op.weight_bytes / op.n  # bytes per output column; equals k for INT8 weights
    return mpu_gemm_time(cols, max(1, round(k)), l_spec, pim, timing)


class Mode(str, enum.Enum):
    NORMAL = "normal"
    ALL_BANK = "all-bank"
    ALL_BANK_PIM = "all-bank-PIM"


_LEGAL = {
    (Mode.NORMAL, Mode.ALL_BANK), (Mode.ALL_BANK, Mode.NORMAL),
    (Mode.ALL_BANK, Mode.ALL_BANK_PIM), (Mode.ALL_BANK_PIM, Mode.ALL_BANK),
}


def mode_switch(src, dst, pim: PIMConfig | None = None) -> float:
    """Latency of one mode-register write; PIM execution is only reachable via all-bank mode."""
    src, dst = Mode(src), Mode(dst)
    if src == dst:
        raise ProtocolError(f"no-op mode transition {src.value} -> {dst.value}", "mode")
    if (src, dst) not in _LEGAL:
        raise ProtocolError(f"illegal mode transition {src.value} -> {dst.value}", "mode")
    return (pim or PIMConfig()).mode_switch_latency


class ModeTracker:
    """Follows one die's mode and accumulates switch cost over kernel launches."""

    def __init__(self, pim: PIMConfig | None = None):
        self.pim = pim or PIMConfig()
        self.mode = Mode.NORMAL
        self.switches = 0
        self.elapsed = 0.0

    def to(self, mode) -> float:
        t = mode_switch(self.mode, mode, self.pim)
        self.mode = Mode(mode)
        self.switches += 1
        self.elapsed += t
        return t

    def launch(self) -> float:
        """Enter PIM execution for one kernel and return to all-bank mode."""
        if self.mode is Mode.NORMAL:
            self.to(Mode.ALL_BANK)
        return self.to(Mode.ALL_BANK_PIM) + self.to(Mode.ALL_BANK)
