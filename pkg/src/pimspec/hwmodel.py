"""Hardware parameters and the analytic latency/energy estimator.

The NPU is a roofline device behind the shared off-chip bus.  A PIM device
streams its resident weights at its internal bandwidth and retires
``alus_per_mpu`` tokens per weight pass, so its latency is

    bytes / BW_PIM * ceil(l_spec / N_ALU)

All functions take either a list of :class:`~pimspec.workload.OpDescriptor`
or an :class:`~pimspec.workload.OpTable`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .nmc import TimingParams
from .workload import OpKind, OpTable, as_table

GiB = 2 ** 30
PJ = 1e-12


@dataclass(frozen=True)
class NPUConfig:
    matrix_tflops: float = 32.8e12
    vector_tflops: float = 8.2e12
    n_cores: int = 16
    freq: float = 1e9
    scratchpad_bytes: int = 8 * 2 ** 20
    local_buffer_bytes: int = 256 * 2 ** 10

    @property
    def peak_ops(self) -> float:
        return self.matrix_tflops + self.vector_tflops


@dataclass(frozen=True)
class PIMConfig:
    """One PIM flavour.  Defaults describe the GEMM-capable MPU die."""

    n_pim_ranks: int = 3
    dies_per_rank: int = 4
    mpus_per_die: int = 8
    alus_per_mpu: int = 4
    lanes_per_alu: int = 32
    mac_freq: float = 200e6
    internal_bw_per_die: float = 51.2e9
    capacity_per_die: int = GiB
    mode_switch_latency: float = 100e-9
    name: str = "mpu-pim"

    @classmethod
    def samsung(cls, n_dies: int = 12) -> "PIMConfig":
        """GEMV-only LPDDR5-PIM baseline: one 32-lane unit per bank pair, 102.4 GOPS/die."""
        if n_dies % 4:
            raise ConfigurationError("Samsung PIM dies come in ranks of 4")
        return cls(n_pim_ranks=n_dies // 4, alus_per_mpu=1, name="gemv-pim")

    @property
    def n_alu(self) -> int:
        return self.alus_per_mpu

    @property
    def total_dies(self) -> int:
        return self.n_pim_ranks * self.dies_per_rank

    @property
    def total_units(self) -> int:
        return self.total_dies * self.mpus_per_die

    @property
    def peak_ops_per_die(self) -> float:
        return self.mpus_per_die * self.alus_per_mpu * self.lanes_per_alu * 2 * self.mac_freq

    @property
    def bw_total(self) -> float:
        return self.total_dies * self.internal_bw_per_die

    @property
    def capacity(self) -> int:
        return self.total_dies * self.capacity_per_die


@dataclass(frozen=True)
class DRAMConfig:
    n_dram_ranks: int = 1
    dies_per_rank: int = 4
    offchip_bw: float = 51.2e9
    capacity_per_die: int = GiB

    @property
    def capacity(self) -> int:
        return self.n_dram_ranks * self.dies_per_rank * self.capacity_per_die


# Produced by calibrate_energy() with the default priors below; see
# tests/test_hwmodel.py::test_default_energy_is_calibrated.
_CALIBRATED = dict(
    e_offchip_per_byte=49.047e-12,
    e_internal_per_byte=2.8787e-12,
    e_npu_mac=0.18931e-12,
    e_pim_mac=0.18931e-12,
)


@dataclass(frozen=True)
class EnergyParams:
    e_offchip_per_byte: float = _CALIBRATED["e_offchip_per_byte"]
    e_internal_per_byte: float = _CALIBRATED["e_internal_per_byte"]
    e_npu_mac: float = _CALIBRATED["e_npu_mac"]
    e_pim_mac: float = _CALIBRATED["e_pim_mac"]
    e_onchip_per_byte: float = 1.0e-12

    INTERNAL_FRACTION = 0.15

    @classmethod
    def from_offchip(cls, e_offchip_per_byte: float = 30e-12, *, e_mac: float = 0.2e-12,
                     e_onchip_per_byte: float = 1.0e-12) -> "EnergyParams":
        """Uncalibrated prior: in-DRAM transfers cost 15% of an off-chip transfer."""
        return cls(e_offchip_per_byte, cls.INTERNAL_FRACTION * e_offchip_per_byte,
                   e_mac, e_mac, e_onchip_per_byte)

    def validate(self) -> list[str]:
        return [f"energy.{k} must be >= 0" for k, v in vars(self).items() if v < 0]


@dataclass(frozen=True)
class SystemConfig:
    npu: NPUConfig = field(default_factory=NPUConfig)
    pim: PIMConfig = field(default_factory=PIMConfig)
    dram: DRAMConfig = field(default_factory=DRAMConfig)
    timing: TimingParams = field(default_factory=TimingParams)
    energy: EnergyParams = field(default_factory=EnergyParams)
    latency_combine: str = "max"

    @property
    def total_capacity(self) -> int:
        return self.pim.capacity + self.dram.capacity

    def with_pim(self, pim: PIMConfig) -> "SystemConfig":
        return replace(self, pim=pim)

    def validate(self) -> list[str]:
        """Every violated invariant, as human-readable strings."""
        problems = []
        for block in ("npu", "pim", "dram"):
            for key, value in vars(getattr(self, block)).items():
                if isinstance(value, (int, float)) and not isinstance(value, bool) and value <= 0:
                    problems.append(f"{block}.{key} must be > 0, got {value}")
        problems += self.timing.validate()
        problems += self.energy.validate()
        if self.latency_combine not in ("max", "min"):
            problems.append(f"latency_combine must be 'max' or 'min', got {self.latency_combine!r}")
        return problems


@dataclass(frozen=True)
class LatencyEstimate:
    t_npu: float
    t_pim: float
    t_total: float


@dataclass(frozen=True)
class EnergyEstimate:
    e_compute: float = 0.0
    e_offchip: float = 0.0
    e_internal: float = 0.0
    e_onchip: float = 0.0

    @property
    def e_total(self) -> float:
        return self.e_compute + self.e_offchip + self.e_internal + self.e_onchip

    def __add__(self, other: "EnergyEstimate") -> "EnergyEstimate":
        return EnergyEstimate(
            self.e_compute + other.e_compute, self.e_offchip + other.e_offchip,
            self.e_internal + other.e_internal, self.e_onchip + other.e_onchip,
        )


def _check_rates(npu: NPUConfig, dram: DRAMConfig):
    if dram.offchip_bw <= 0 or npu.matrix_tflops <= 0 or npu.vector_tflops <= 0:
        raise ConfigurationError("NPU throughput and off-chip bandwidth must be positive")


def npu_row_times(tab: OpTable, npu: NPUConfig, dram: DRAMConfig, extra_bus_bytes=0.0) -> np.ndarray:
    """Per-row roofline time; ``extra_bus_bytes`` is other traffic sharing the DQ bus."""
    _check_rates(npu, dram)
    peak = np.where(tab.is_matrix, npu.matrix_tflops, npu.vector_tflops)
    t_compute = tab.flops / peak
    t_memory = (tab.weight_bytes + tab.activation_bytes + extra_bus_bytes) / dram.offchip_bw
    return np.maximum(t_compute, t_memory)


def npu_latency(ops, npu: NPUConfig, dram: DRAMConfig) -> float:
    """Sum of per-op roofline times on the NPU."""
    tab = as_table(ops)
    if len(tab) == 0:
        raise ContractViolation("npu_latency needs at least one op")
    return float(np.dot(npu_row_times(tab, npu, dram), tab.count))


def pass_factor(l_spec: int, n_alu: int) -> int:
    if l_spec < 1:
        raise ContractViolation(f"l_spec must be >= 1, got {l_spec}")
    return math.ceil(l_spec / n_alu)


def pim_row_times(tab: OpTable, pim: PIMConfig, l_spec: int) -> np.ndarray:
    if pim.bw_total <= 0:
        raise ConfigurationError("PIM bandwidth must be positive")
    return tab.weight_bytes / pim.bw_total * pass_factor(l_spec, pim.n_alu)


def pim_latency(ops, pim: PIMConfig, l_spec: int) -> float:
    """Weight-streaming time of PIM-resident ops: bytes / BW_PIM * ceil(L / N_ALU)."""
    tab = as_table(ops)
    if not bool(np.all(tab.pim_eligible)):
        raise ContractViolation("pim_latency received an op that is not PIM-eligible")
    return float(np.dot(pim_row_times(tab, pim, l_spec), tab.count))


def parallel_latency(t_npu, t_pim, combine: str = "max"):
    """Completion time of a synchronized NPU/PIM split (``min`` only for fidelity experiments)."""
    if np.any(np.asarray(t_npu) < 0) or np.any(np.asarray(t_pim) < 0):
        raise ContractViolation("latencies must be >= 0")
    if combine == "max":
        return np.maximum(t_npu, t_pim)
    if combine == "min":
        return np.minimum(t_npu, t_pim)
    raise ConfigurationError(f"unknown latency_combine {combine!r}")


def iteration_energy(ops_npu, ops_pim, ep: EnergyParams, l_spec: int, n_alu: int = 4) -> EnergyEstimate:
    """Energy of one iteration given the NPU-side and PIM-side op lists.

    PIM weights are re-read from the banks once per ``n_alu``-token pass;
    PIM activations cross the shared bus at off-chip cost.
    """
    tn = as_table(ops_npu) if len(ops_npu) else None
    tp = as_table(ops_pim) if len(ops_pim) else None
    est = EnergyEstimate()
    if tn is not None:
        moved = tn.total("weight_bytes") + tn.total("activation_bytes")
        est += EnergyEstimate(
            e_compute=tn.total("flops") * ep.e_npu_mac,
            e_offchip=moved * ep.e_offchip_per_byte,
            e_onchip=moved * ep.e_onchip_per_byte,
        )
    if tp is not None:
        est += EnergyEstimate(
            e_compute=tp.total("flops") * ep.e_pim_mac,
            e_offchip=tp.total("activation_bytes") * ep.e_offchip_per_byte,
            e_internal=tp.total("weight_bytes") * pass_factor(l_spec, n_alu) * ep.e_internal_per_byte,
        )
    return est


def split_table(tab: OpTable, ratio: float) -> tuple[OpTable, OpTable]:
    """Column-split every PIM-eligible row: ``ratio`` of it to PIM, the rest to the NPU."""
    if not 0.0 <= ratio <= 1.0:
        raise ContractViolation(f"partition ratio must be in [0, 1], got {ratio}")
    f = np.where(tab.pim_eligible & (tab.weight_bytes > 0), ratio, 0.0)

    def scaled(s, mask):
        return OpTable(tab.kind[mask], tab.m[mask], tab.n[mask] * s[mask], tab.k[mask],
                       tab.weight_bytes[mask] * s[mask], tab.activation_bytes[mask] * s[mask],
                       tab.flops[mask] * s[mask], tab.pim_eligible[mask], tab.count[mask])

    npu_mask = f < 1.0
    pim_mask = f > 0.0
    return scaled(1.0 - f, npu_mask), scaled(f, pim_mask)


@dataclass(frozen=True)
class IterationCost:
    latency: LatencyEstimate
    energy: EnergyEstimate
    bus_bytes: float  # bytes crossing the shared DQ lines
    pim_launches: float


def iteration_cost(tab: OpTable, sys: SystemConfig, l_spec: int, ratio: float,
                   overlap: bool = True) -> IterationCost:
    """Latency and energy of one pass with eligible ops split by ``ratio``.

    Each split op synchronizes both devices before the next op starts
    (tensor parallelism).  With ``overlap=False`` the two halves run back to
    back, which is how PIM-only systems spill ops that do not fit.
    """
    pim = sys.pim
    # Rows without resident bytes (attention over an empty cache) never launch a PIM kernel.
    f = np.where(tab.pim_eligible & (tab.weight_bytes > 0), ratio, 0.0)
    on_pim = f > 0
    pim_act = tab.activation_bytes * f
    npu_tab, _ = split_table(tab, ratio)
    # NPU-side times aligned to the full table (rows fully on PIM get zero NPU time).
    t_npu_rows = np.zeros(len(tab))
    npu_mask = f < 1.0
    t_npu_rows[npu_mask] = npu_row_times(npu_tab, sys.npu, sys.dram, pim_act[npu_mask])
    bus_only = (~npu_mask) & on_pim
    t_npu_rows[bus_only] = pim_act[bus_only] / sys.dram.offchip_bw

    switches = 2 * pim.mode_switch_latency * on_pim
    t_pim_rows = tab.weight_bytes * f / pim.bw_total * pass_factor(l_spec, pim.n_alu) + switches

    if overlap:
        rows = parallel_latency(t_npu_rows, t_pim_rows, sys.latency_combine)
        rows = np.where(on_pim, rows, t_npu_rows)
    else:
        rows = t_npu_rows + t_pim_rows
    c = tab.count
    latency = LatencyEstimate(
        t_npu=float(np.dot(t_npu_rows, c)),
        t_pim=float(np.dot(t_pim_rows, c)),
        t_total=float(np.dot(rows, c)),
    )
    ep = sys.energy
    npu_moved = (tab.weight_bytes + tab.activation_bytes) * (1.0 - f)
    energy = EnergyEstimate(
        e_compute=float(np.dot(tab.flops * ((1.0 - f) * ep.e_npu_mac + f * ep.e_pim_mac), c)),
        e_offchip=float(np.dot(npu_moved + pim_act, c)) * ep.e_offchip_per_byte,
        e_internal=float(np.dot(tab.weight_bytes * f, c))
        * pass_factor(l_spec, pim.n_alu) * ep.e_internal_per_byte,
        e_onchip=float(np.dot(npu_moved, c)) * ep.e_onchip_per_byte,
    )
    return IterationCost(latency, energy, float(np.dot(npu_moved + pim_act, c)),
                         float(np.dot(on_pim.astype(float), c)))


@dataclass(frozen=True)
class CalibrationResult:
    energy: EnergyParams
    ratios: dict
    targets: dict


def pim_gain(model, sys: SystemConfig, n_dies: int, l_spec: int = 1, seq_len: int = 512) -> tuple[float, float]:
    """(latency, energy) advantage of a GEMV-PIM with ``n_dies`` over the NPU for one pass.

    Every eligible weight sits in PIM; capacity is not checked, this is the
    analytic single-iteration view.
    """
    from .workload import decode_table

    tab = decode_table(model, seq_len, l_spec)
    npu = iteration_cost(tab, sys, l_spec, 0.0, overlap=False)
    pim = iteration_cost(tab, sys.with_pim(PIMConfig.samsung(n_dies)), l_spec, 1.0, overlap=False)
    return npu.latency.t_total / pim.latency.t_total, npu.energy.e_total / pim.energy.e_total


def _energy_ratio(model, sys: SystemConfig, n_dies: int, l_spec: int, seq_len: int) -> float:
    return pim_gain(model, sys, n_dies, l_spec, seq_len)[1]


def calibrate_energy(model, targets=None, *, l_spec: int = 1, seq_len: int = 512,
                     prior: EnergyParams | None = None, prior_weight: float = 0.05,
                     base: SystemConfig | None = None) -> CalibrationResult:
    """Fit off-chip, in-DRAM and MAC energy to NPU/PIM energy ratios.

    Least squares on log-ratios; a weak pull toward ``prior`` (in log space)
    fixes the directions the ratios cannot see, including overall scale.
    """
    from scipy.optimize import least_squares

    targets = dict(targets or {4: 15.4, 8: 15.2})
    prior = prior or EnergyParams.from_offchip()
    base = base or SystemConfig()
    x0 = np.log([prior.e_offchip_per_byte, prior.e_internal_per_byte, prior.e_npu_mac])

    def params(x):
        e_off, e_int, e_mac = (float(v) for v in np.exp(x))
        return EnergyParams(e_off, e_int, e_mac, e_mac, prior.e_onchip_per_byte)

    def residuals(x):
        sys = replace(base, energy=params(x))
        r = [math.log(_energy_ratio(model, sys, d, l_spec, seq_len) / t) for d, t in targets.items()]
        return np.concatenate([r, prior_weight * (x - x0)])

    fit = least_squares(residuals, x0, xtol=1e-12, ftol=1e-12)
    energy = params(fit.x)
    sys = replace(base, energy=energy)
    ratios = {d: float(_energy_ratio(model, sys, d, l_spec, seq_len)) for d in targets}
    return CalibrationResult(energy, ratios, targets)


def kv_write_energy(n_bytes: float, pim_fraction: float, ep: EnergyParams) -> EnergyEstimate:
    return EnergyEstimate(
        e_offchip=n_bytes * (1.0 - pim_fraction) * ep.e_offchip_per_byte,
        e_internal=n_bytes * pim_fraction * ep.e_internal_per_byte,
    )


__all__ = [
    "NPUConfig", "PIMConfig", "DRAMConfig", "EnergyParams", "SystemConfig",
    "LatencyEstimate", "EnergyEstimate", "IterationCost", "CalibrationResult",
    "npu_latency", "pim_latency", "parallel_latency", "iteration_energy", "iteration_cost",
    "split_table", "calibrate_energy", "pim_gain", "kv_write_energy", "pass_factor", "OpKind",
]
