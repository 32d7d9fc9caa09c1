"""Near-data memory controller: tagged commands, copy-write, global buffer, shared DQ.

DRAM ranks and PIM ranks get independent command/address streams but share
the module's DQ lines.  Everything is counted in memory-clock cycles.

Tag bits on RD/WR/ACT1:

    00  normal read/write
    01  copy-write (WR data fed forward from a concurrent RD)
    1x  PIM global buffer access; x is bit 8 of the 9-bit buffer line address
"""

from __future__ import annotations

import bisect
import enum
from collections import defaultdict
from dataclasses import dataclass, field, fields
from typing import Iterable

from .errors import AddressError, ContractViolation, ProtocolError

OWNERS = ("npu-dram", "npu-pim", "copy", "buffer")


@dataclass(frozen=True)
class TimingParams:
    t_rp: int = 15
    t_rcd: int = 15
    t_ras: int = 34
    t_rrd: int = 4
    t_wr: int = 28
    t_rc: int = 30
    t_ccd: int = 4
    t_faw: int = 16
    t_cl: int = 25
    t_cwl: int = 23
    clock_period: float = 1.25e-9
    burst_bytes: int = 64
    burst_cycles: int = 1  # 64 B per clock on the x64 bus at 800 MHz (51.2 GB/s)
    row_bytes: int = 2048

    def validate(self) -> list[str]:
        problems = [f"timing.{f.name} must be > 0" for f in fields(self) if getattr(self, f.name) <= 0]
        if self.t_cl <= self.t_cwl:
            problems.append(f"timing.t_cl ({self.t_cl}) must exceed timing.t_cwl ({self.t_cwl})")
        return problems

    @property
    def copy_gap(self) -> int:
        """Cycles between the RD and the WR of one copy-write pair."""
        return self.t_cl - self.t_cwl

    def seconds(self, cycles: float) -> float:
        return cycles * self.clock_period

    def cycles(self, seconds: float) -> int:
        return int(round(seconds / self.clock_period))


class TagMode(enum.Enum):
    NORMAL = "normal"
    COPY = "copy"
    BUFFER = "buffer"


def decode_tag(tag: int) -> TagMode:
    if tag not in (0, 1, 2, 3):
        raise ProtocolError(f"tag must be a 2-bit value, got {tag}", "tag")
    if tag & 0b10:
        return TagMode.BUFFER
    return TagMode.COPY if tag == 0b01 else TagMode.NORMAL


class Kind(str, enum.Enum):
    ACT1 = "ACT1"
    RD = "RD"
    WR = "WR"
    MRW = "MRW"
    PRE = "PRE"


GLOBAL_BUFFER_BYTES = 4096
BUFFER_LINE_BYTES = 8
BUFFER_LINES = GLOBAL_BUFFER_BYTES // BUFFER_LINE_BYTES


@dataclass(frozen=True)
class NMCCommand:
    kind: Kind
    tag: int = 0
    rank_target: str = "dram"
    rank: int = 0
    bank_group: int = 0
    bank: int = 0
    row: int = 0
    column: int = 0
    addr8: int = 0  # bank/bank-group field reused as buffer address bits in buffer mode

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        decode_tag(self.tag)
        if self.rank_target not in ("dram", "pim"):
            raise ContractViolation(f"rank_target must be 'dram' or 'pim', got {self.rank_target!r}")
        if not 0 <= self.addr8 < 256:
            raise AddressError(f"addr8 must fit in 8 bits, got {self.addr8}", "buf_addr")

    @classmethod
    def buffer(cls, kind, line: int, rank_target: str = "pim") -> "NMCCommand":
        if not 0 <= line < BUFFER_LINES:
            raise AddressError(f"global buffer line {line} out of range [0, {BUFFER_LINES})", "buf_addr")
        return cls(kind, tag=0b10 | (line >> 8), rank_target=rank_target, addr8=line & 0xFF)

    @property
    def mode(self) -> TagMode:
        return decode_tag(self.tag)

    @property
    def buf_addr(self) -> int | None:
        if self.mode is not TagMode.BUFFER:
            return None
        return ((self.tag & 1) << 8) | self.addr8

    def addr_field(self) -> str:
        if self.mode is TagMode.BUFFER:
            return f"b{self.buf_addr}"
        return f"{self.bank_group}.{self.bank}.{self.row}.{self.column}"


class GlobalBuffer:
    """4 KB register array: 512 lines of 8 bytes."""

    def __init__(self):
        self._data = bytearray(GLOBAL_BUFFER_BYTES)

    def _span(self, line: int) -> slice:
        if not 0 <= line < BUFFER_LINES:
            raise AddressError(f"global buffer line {line} out of range [0, {BUFFER_LINES})", "buf_addr")
        return slice(line * BUFFER_LINE_BYTES, (line + 1) * BUFFER_LINE_BYTES)

    def write(self, line: int, data: bytes) -> None:
        if len(data) != BUFFER_LINE_BYTES:
            raise ContractViolation(f"buffer lines are {BUFFER_LINE_BYTES} bytes, got {len(data)}")
        self._data[self._span(line)] = data

    def read(self, line: int) -> bytes:
        return bytes(self._data[self._span(line)])


@dataclass(frozen=True)
class Occupancy:
    start: int
    duration: int
    owner: str
    requested: int

    @property
    def end(self) -> int:
        return self.start + self.duration


class BusTimeline:
    """Occupancy of the shared DQ lines plus per-rank-group C/A streams."""

    def __init__(self):
        self.dq: list[Occupancy] = []
        self._starts: list[int] = []
        self.ca: dict[str, list[tuple[int, str]]] = defaultdict(list)

    def _index_conflict(self, start: int, duration: int) -> Occupancy | None:
        i = bisect.bisect_right(self._starts, start)
        for j in (i - 1, i):
            if 0 <= j < len(self.dq):
                r = self.dq[j]
                if r.start < start + duration and start < r.end:
                    return r
        return None

    def is_free(self, start: int, duration: int) -> bool:
        return self._index_conflict(start, duration) is None

    def reserve(self, start: int, duration: int, owner: str, requested: int | None = None) -> Occupancy:
        if owner not in OWNERS:
            raise ContractViolation(f"unknown DQ owner {owner!r}")
        if duration <= 0:
            raise ContractViolation("DQ occupancy must have positive duration")
        clash = self._index_conflict(start, duration)
        if clash is not None:
            raise ProtocolError(
                f"DQ conflict: [{start}, {start + duration}) overlaps {clash.owner} "
                f"[{clash.start}, {clash.end})", "DQ")
        rec = Occupancy(start, duration, owner, start if requested is None else requested)
        i = bisect.bisect_left(self._starts, start)
        self._starts.insert(i, start)
        self.dq.insert(i, rec)
        return rec

    def first_fit(self, earliest: int, duration: int) -> int:
        """Earliest start >= ``earliest`` where ``duration`` cycles of DQ are free."""
        t = earliest
        i = max(bisect.bisect_right(self._starts, t) - 1, 0)
        while i < len(self.dq):
            r = self.dq[i]
            if r.end <= t:
                i += 1
                continue
            if r.start >= t + duration:
                return t
            t = r.end
            i += 1
        return t

    def gaps(self, begin: int, end: int) -> Iterable[tuple[int, int]]:
        t = begin
        for r in self.dq:
            if r.end <= t:
                continue
            if r.start >= end:
                break
            if r.start > t:
                yield t, r.start
            t = max(t, r.end)
        if t < end:
            yield t, end

    def busy_cycles(self, owner: str | None = None) -> int:
        return sum(r.duration for r in self.dq if owner is None or r.owner == owner)

    @property
    def horizon(self) -> int:
        return max((r.end for r in self.dq), default=0)

    def overlaps(self) -> list[tuple[Occupancy, Occupancy]]:
        ordered = sorted(self.dq, key=lambda r: r.start)
        return [(a, b) for a, b in zip(ordered, ordered[1:]) if b.start < a.end]


@dataclass
class _Bank:
    open_row: int | None = None
    act: int | None = None
    pre: int | None = None
    last_col: int | None = None
    write_end: int | None = None


@dataclass(frozen=True)
class IssuedCommand:
    cycle: int
    command: NMCCommand
    data: Occupancy | None = None

    def trace_line(self) -> str:
        c = self.command
        return f"{self.cycle} {c.kind.value} {c.tag:02b} {c.rank_target}{c.rank} {c.addr_field()}"


class NMC:
    """Stateful protocol checker and scheduler for one simulation context."""

    def __init__(self, timing: TimingParams | None = None, timeline: BusTimeline | None = None):
        self.timing = timing or TimingParams()
        self.timeline = timeline or BusTimeline()
        self.buffer = GlobalBuffer()
        self.trace: list[IssuedCommand] = []
        self._banks: dict[tuple, _Bank] = defaultdict(_Bank)
        self._acts: dict[tuple, list[int]] = defaultdict(list)
        self._ca_cycles: dict[str, set[int]] = defaultdict(set)
        self._copy_reads: dict[int, Occupancy] = {}

    @staticmethod
    def _bank_key(cmd: NMCCommand):
        return (cmd.rank_target, cmd.rank, cmd.bank_group, cmd.bank)

    def _require(self, ok: bool, parameter: str, message: str):
        if not ok:
            raise ProtocolError(f"{parameter} violated: {message}", parameter)

    def check(self, cmd: NMCCommand, cycle: int) -> None:
        """Raise :class:`ProtocolError` if ``cmd`` cannot be issued at ``cycle``."""
        tp = self.timing
        self._require(cycle not in self._ca_cycles[cmd.rank_target], "C/A",
                      f"{cmd.rank_target} C/A stream already busy at cycle {cycle}")
        if cmd.mode is TagMode.BUFFER:
            self._require(cmd.kind in (Kind.RD, Kind.WR, Kind.ACT1), "tag",
                          f"{cmd.kind.value} cannot address the global buffer")
            return
        bank = self._banks[self._bank_key(cmd)]
        if cmd.kind is Kind.ACT1:
            self._require(bank.open_row is None, "t_RP", "bank already has an open row")
            if bank.pre is not None:
                self._require(cycle - bank.pre >= tp.t_rp, "t_RP", f"ACT1 {cycle - bank.pre} cycles after PRE")
            if bank.act is not None:
                self._require(cycle - bank.act >= tp.t_rc, "t_RC", f"ACT1 {cycle - bank.act} cycles after ACT1")
            acts = self._acts[(cmd.rank_target, cmd.rank)]
            if acts:
                self._require(cycle - acts[-1] >= tp.t_rrd, "t_RRD",
                              f"ACT1 {cycle - acts[-1]} cycles after previous ACT1 in rank")
                recent = [a for a in acts if cycle - a < tp.t_faw]
                self._require(len(recent) < 4, "t_FAW", "more than four ACT1 in the t_FAW window")
        elif cmd.kind in (Kind.RD, Kind.WR):
            self._require(bank.open_row == cmd.row, "t_RCD", f"row {cmd.row} is not open")
            self._require(cycle - bank.act >= tp.t_rcd, "t_RCD", f"column command {cycle - bank.act} cycles after ACT1")
            if bank.last_col is not None:
                self._require(cycle - bank.last_col >= tp.t_ccd, "t_CCD",
                              f"column command {cycle - bank.last_col} cycles after previous one")
            if cmd.mode is TagMode.COPY:
                self._require(cmd.kind is Kind.WR, "tag", "copy tag is only valid on WR")
                self._require(cycle + tp.t_cwl in self._copy_reads, "t_CL-t_CWL",
                              "copy-write WR not aligned with a feeding RD")
        elif cmd.kind is Kind.PRE:
            self._require(bank.open_row is not None, "t_RAS", "no open row to precharge")
            self._require(cycle - bank.act >= tp.t_ras, "t_RAS", f"PRE {cycle - bank.act} cycles after ACT1")
            if bank.write_end is not None:
                self._require(cycle - bank.write_end >= tp.t_wr, "t_WR",
                              f"PRE {cycle - bank.write_end} cycles after write data")

    def _data_window(self, cmd: NMCCommand, cycle: int) -> tuple[int, int] | None:
        tp = self.timing
        if cmd.kind not in (Kind.RD, Kind.WR):
            return None
        latency = tp.t_cl if cmd.kind is Kind.RD else tp.t_cwl
        duration = 1 if cmd.mode is TagMode.BUFFER else tp.burst_cycles
        return cycle + latency, duration

    def issue(self, cmd: NMCCommand, cycle: int, owner: str | None = None,
              copy_read: bool = False, requested: int | None = None) -> IssuedCommand:
        """Issue ``cmd`` at exactly ``cycle`` or raise :class:`ProtocolError`."""
        self.check(cmd, cycle)
        window = self._data_window(cmd, cycle)
        data = None
        if window is not None:
            start, duration = window
            if cmd.mode is TagMode.COPY:
                data = self._copy_reads.pop(start)
            else:
                if owner is None:
                    if cmd.mode is TagMode.BUFFER:
                        owner = "buffer"
                    elif copy_read:
                        owner = "copy"
                    else:
                        owner = f"npu-{cmd.rank_target}"
                wanted = None if requested is None else requested + (start - cycle)
                data = self.timeline.reserve(start, duration, owner, wanted)
                if copy_read:
                    self._copy_reads[start] = data
        self._commit(cmd, cycle)
        issued = IssuedCommand(cycle, cmd, data)
        self.trace.append(issued)
        return issued

    def _commit(self, cmd: NMCCommand, cycle: int) -> None:
        tp = self.timing
        self._ca_cycles[cmd.rank_target].add(cycle)
        self.timeline.ca[cmd.rank_target].append((cycle, cmd.kind.value))
        if cmd.mode is TagMode.BUFFER:
            return
        bank = self._banks[self._bank_key(cmd)]
        if cmd.kind is Kind.ACT1:
            bank.open_row, bank.act, bank.last_col = cmd.row, cycle, None
            self._acts[(cmd.rank_target, cmd.rank)].append(cycle)
        elif cmd.kind in (Kind.RD, Kind.WR):
            bank.last_col = cycle
            if cmd.kind is Kind.WR:
                bank.write_end = cycle + tp.t_cwl + tp.burst_cycles
        elif cmd.kind is Kind.PRE:
            bank.open_row, bank.pre = None, cycle

    def _search(self, cmd: NMCCommand, not_before: int, limit: int) -> tuple[int, int]:
        legal = None
        for cycle in range(not_before, not_before + limit):
            try:
                self.check(cmd, cycle)
            except ProtocolError:
                continue
            if legal is None:
                legal = cycle
            window = self._data_window(cmd, cycle)
            if window is None or cmd.mode is TagMode.COPY or self.timeline.is_free(*window):
                return cycle, legal
        raise ProtocolError(f"no legal slot for {cmd.kind.value} within {limit} cycles")

    def earliest(self, cmd: NMCCommand, not_before: int, limit: int = 1 << 20) -> int:
        """Earliest cycle >= ``not_before`` at which ``cmd`` is legal and its data slot is free."""
        return self._search(cmd, not_before, limit)[0]

    def schedule(self, cmd: NMCCommand, not_before: int = 0, **kw) -> IssuedCommand:
        """Issue at the earliest legal cycle; DQ waits beyond timing limits count as sharing stalls."""
        cycle, legal = self._search(cmd, not_before, 1 << 20)
        return self.issue(cmd, cycle, requested=legal, **kw)


@dataclass(frozen=True)
class Location:
    rank_target: str
    rank: int = 0
    bank_group: int = 0
    bank: int = 0
    row: int = 0
    column: int = 0


def copy_write(nmc: NMC, src: Location, dst: Location, n_bytes: int, start: int = 0) -> list[IssuedCommand]:
    """Move ``n_bytes`` between a DRAM and a PIM rank without leaving the module.

    Each burst is a RD on the source followed exactly ``t_CL - t_CWL`` cycles
    later by a tag-01 WR on the destination, so the write consumes the read
    data straight off the DQ lines.  One pair is in flight at a time.
    """
    if src.rank_target == dst.rank_target:
        raise ContractViolation("copy-write moves data between a DRAM rank and a PIM rank")
    if n_bytes <= 0:
        raise ContractViolation("copy-write needs a positive byte count")
    tp = nmc.timing
    per_row = tp.row_bytes // tp.burst_bytes
    n_bursts = -(-n_bytes // tp.burst_bytes)
    out: list[IssuedCommand] = []
    t = start
    cur_rows: dict[str, int | None] = {"src": None, "dst": None}

    def open_row(which: str, loc: Location, row: int, t: int) -> int:
        base = dict(rank_target=loc.rank_target, rank=loc.rank, bank_group=loc.bank_group, bank=loc.bank)
        if cur_rows[which] is not None:
            out.append(nmc.schedule(NMCCommand(Kind.PRE, row=cur_rows[which], **base), t))
            t = out[-1].cycle + 1
        out.append(nmc.schedule(NMCCommand(Kind.ACT1, row=row, **base), t))
        cur_rows[which] = row
        return out[-1].cycle

    ready = t
    for i in range(n_bursts):
        col_s, col_d = src.column + i, dst.column + i
        row_s, row_d = src.row + col_s // per_row, dst.row + col_d // per_row
        if cur_rows["src"] != row_s:
            ready = max(ready, open_row("src", src, row_s, ready))
        if cur_rows["dst"] != row_d:
            ready = max(ready, open_row("dst", dst, row_d, ready))
        rd = NMCCommand(Kind.RD, 0, src.rank_target, src.rank, src.bank_group, src.bank, row_s, col_s % per_row)
        wr = NMCCommand(Kind.WR, 0b01, dst.rank_target, dst.rank, dst.bank_group, dst.bank, row_d, col_d % per_row)
        cycle = ready
        legal = None
        while True:
            cycle = nmc.earliest(rd, cycle)
            legal = cycle if legal is None else legal
            try:
                _probe_wr(nmc, wr, cycle + tp.copy_gap)
                break
            except ProtocolError:
                cycle += 1
        out.append(nmc.issue(rd, cycle, copy_read=True, requested=legal))
        out.append(nmc.issue(wr, cycle + tp.copy_gap))
        ready = cycle + tp.copy_gap + 1
    return out


def _probe_wr(nmc: NMC, wr: NMCCommand, cycle: int) -> None:
    """Check ``wr`` ignoring the feeding-read requirement (the RD is not issued yet)."""
    probe = NMCCommand(Kind.WR, 0, wr.rank_target, wr.rank, wr.bank_group, wr.bank, wr.row, wr.column)
    nmc.check(probe, cycle)


def buffer_access(nmc: NMC, cmd: NMCCommand, cycle: int, data: bytes | None = None) -> bytes:
    """Read or write one 8-byte global-buffer line; occupies one DQ beat."""
    if cmd.mode is not TagMode.BUFFER:
        raise ContractViolation("buffer_access needs a tag-1x command")
    if cmd.kind is Kind.WR:
        if data is None:
            raise ContractViolation("buffer write needs data")
        nmc.buffer.write(cmd.buf_addr, data)
        nmc.schedule(cmd, cycle)
        return data
    if cmd.kind is Kind.RD:
        nmc.schedule(cmd, cycle)
        return nmc.buffer.read(cmd.buf_addr)
    raise ContractViolation("buffer access is RD or WR")


def contention_report(timeline: BusTimeline, total_cycles: int | None = None) -> dict:
    """Per-owner DQ occupancy fractions and stall cycles caused by sharing."""
    total = total_cycles if total_cycles is not None else timeline.horizon
    fractions = {o: 0.0 for o in OWNERS}
    if total > 0:
        for owner in OWNERS:
            fractions[owner] = timeline.busy_cycles(owner) / total
    stalls = sum(r.start - r.requested for r in timeline.dq if r.start > r.requested)
    return {
        "total_cycles": total,
        "fractions": fractions,
        "stall_cycles": stalls,
        "overlaps": len(timeline.overlaps()),
    }


def dump_trace(trace: Iterable[IssuedCommand], path) -> None:
    """One command per line: ``<cycle> <kind> <tag> <rank> <addr|bufaddr>``."""
    with open(path, "w") as fh:
        for item in trace:
            fh.write(item.trace_line() + "\n")


def stream_reads(nmc: NMC, loc: Location, n_bursts: int, start: int = 0, owner: str | None = None,
                 n_banks: int = 4) -> list[IssuedCommand]:
    """Plain RD bursts spread round-robin over ``n_banks`` banks of one rank."""
    tp = nmc.timing
    per_row = tp.row_bytes // tp.burst_bytes
    out: list[IssuedCommand] = []
    open_rows: dict[int, int] = {}
    ready = start
    for i in range(n_bursts):
        bank = i % n_banks
        col = loc.column + i // n_banks
        row = loc.row + col // per_row
        base = dict(rank_target=loc.rank_target, rank=loc.rank, bank_group=loc.bank_group, bank=loc.bank + bank)
        if open_rows.get(bank) != row:
            if bank in open_rows:
                out.append(nmc.schedule(NMCCommand(Kind.PRE, row=open_rows[bank], **base), ready))
            out.append(nmc.schedule(NMCCommand(Kind.ACT1, row=row, **base), ready))
            open_rows[bank] = row
        rd = NMCCommand(Kind.RD, 0, row=row, column=col % per_row, **base)
        out.append(nmc.schedule(rd, ready, owner=owner))
        ready = out[-1].cycle + 1
    return out


def coprocessing_window(timing: TimingParams | None = None, npu_bursts: int = 64, copy_bytes: int = 2048,
                        buffer_lines: int = 16, seed: int | None = None) -> NMC:
    """Cycle-level slice of a co-processing iteration.

    The NPU streams weights from the DRAM rank, the NMC copy-writes a
    reallocation slice from the DRAM rank into a PIM rank in the DQ slots the
    NPU leaves idle, and activations are written to the PIM global buffer.
    """
    import random

    rng = random.Random(seed)
    nmc = NMC(timing)
    dram = Location("dram", 0, bank_group=0, row=rng.randrange(64))
    src = Location("dram", 0, bank_group=1, row=rng.randrange(64))
    dst = Location("pim", rng.randrange(3), bank_group=rng.randrange(4), row=rng.randrange(64))
    if npu_bursts:
        stream_reads(nmc, dram, npu_bursts, 0, owner="npu-dram", n_banks=2)
    if copy_bytes:
        copy_write(nmc, src, dst, copy_bytes, start=rng.randrange(8))
    line0 = rng.randrange(BUFFER_LINES)
    for i in range(buffer_lines):
        line = (line0 + i) % BUFFER_LINES
        buffer_access(nmc, NMCCommand.buffer(Kind.WR, line), rng.randrange(16), bytes(8))
    return nmc
