from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pimspec.errors import ConfigurationError, ContractViolation
from pimspec.hwmodel import (
    DRAMConfig, EnergyParams, NPUConfig, PIMConfig, SystemConfig, calibrate_energy,
    iteration_cost, iteration_energy, npu_latency, parallel_latency, pim_latency, split_table,
)
from pimspec.scheduler import optimal_ratio
from pimspec.workload import (
    KVState, OpDescriptor, OpKind, build_model_spec, decode_op_graph, decode_table,
)

M7 = build_model_spec("llama2-7b")
PIM_102 = PIMConfig(internal_bw_per_die=102.4e9)


def weights(nbytes, flops=0, eligible=True):
    return OpDescriptor(OpKind.FC, 1, 1, 1, nbytes, 0, flops, eligible)


def test_npu_memory_bound():
    t = npu_latency([weights(2 * 10 ** 9, flops=10)], NPUConfig(), DRAMConfig())
    assert t == pytest.approx(2e9 / 51.2e9)
    assert t * 1e3 == pytest.approx(39.0625)


def test_npu_zero_flops_is_bandwidth():
    op = OpDescriptor(OpKind.FC, 1, 10, 10, 1000, 24, 0, True)
    assert npu_latency([op], NPUConfig(), DRAMConfig()) == 1024 / 51.2e9


def test_npu_compute_bound_branch():
    ffn = next(o for o in decode_op_graph(M7, KVState(0), 4096) if o.name == "L0.ffn_up")
    t_compute = ffn.flops / 32.8e12
    t_memory = (ffn.weight_bytes + ffn.activation_bytes) / 51.2e9
    assert t_compute > t_memory
    assert npu_latency([ffn], NPUConfig(), DRAMConfig()) == pytest.approx(t_compute)


def test_npu_rejects_bad_rates():
    with pytest.raises(ConfigurationError):
        npu_latency([weights(10)], NPUConfig(), DRAMConfig(offchip_bw=0))
    with pytest.raises(ContractViolation):
        npu_latency([], NPUConfig(), DRAMConfig())


def test_pim_latency_examples():
    op = [weights(4 * 10 ** 9)]
    assert PIM_102.bw_total == pytest.approx(1228.8e9)
    assert pim_latency(op, PIM_102, 4) * 1e3 == pytest.approx(3.255, abs=5e-4)
    assert pim_latency(op, PIM_102, 5) * 1e3 == pytest.approx(6.510, abs=5e-4)
    assert pim_latency(op, PIM_102, 1) == pim_latency(op, PIM_102, 4)


def test_pim_rejects_ineligible():
    with pytest.raises(ContractViolation):
        pim_latency([weights(10, eligible=False)], PIMConfig(), 1)


@settings(max_examples=50, deadline=None)
@given(l=st.integers(1, 64))
def test_pim_plateaus(l):
    op = [weights(10 ** 6)]
    pim = PIMConfig()
    t = pim_latency(op, pim, l)
    assert pim_latency(op, pim, l + 1) >= t
    base = ((l - 1) // pim.n_alu) * pim.n_alu + 1
    assert pim_latency(op, pim, base) == t


def test_parallel_latency():
    assert parallel_latency(3e-3, 5e-3) == 5e-3
    assert parallel_latency(7.0, 0.0) == 7.0
    assert parallel_latency(3e-3, 5e-3, "min") == 3e-3
    with pytest.raises(ContractViolation):
        parallel_latency(-1.0, 1.0)
    with pytest.raises(ConfigurationError):
        parallel_latency(1.0, 1.0, "mean")


def test_npu_latency_flat_in_l_spec_while_memory_bound():
    sys = SystemConfig()
    a, b = decode_table(M7, 512, 1), decode_table(M7, 512, 8)
    t1 = npu_latency(a, sys.npu, sys.dram)
    t8 = npu_latency(b, sys.npu, sys.dram)
    # only the activation traffic grows; weight streaming time is unchanged
    extra = (b.total("activation_bytes") - a.total("activation_bytes")) / sys.dram.offchip_bw
    assert t8 - t1 == pytest.approx(extra, rel=1e-9)
    assert t8 == pytest.approx(t1, rel=0.01)


def test_energy_all_on_pim_has_only_activation_offchip():
    tab = decode_table(M7, 0, 1)
    elig = tab.subset(tab.pim_eligible)
    ep = EnergyParams()
    e = iteration_energy([], elig, ep, 1)
    assert e.e_offchip == pytest.approx(elig.total("activation_bytes") * ep.e_offchip_per_byte)
    assert e.e_internal == pytest.approx(elig.total("weight_bytes") * ep.e_internal_per_byte)


def test_energy_internal_fraction_of_prior():
    ep = EnergyParams.from_offchip()
    op = weights(10 ** 6)
    e_npu = iteration_energy([op], [], ep, 1)
    e_pim = iteration_energy([], [op], ep, 1)
    assert e_pim.e_internal / e_npu.e_offchip == pytest.approx(0.15)


def test_energy_validation():
    assert EnergyParams().validate() == []
    assert EnergyParams(e_npu_mac=-1.0).validate()


def test_iteration_cost_energy_matches_split_lists():
    sys = SystemConfig()
    tab = decode_table(M7, 300, 6)
    f = 0.7
    cost = iteration_cost(tab, sys, 6, f)
    npu_part, pim_part = split_table(tab, f)
    e = iteration_energy(npu_part, pim_part, sys.energy, 6, sys.pim.n_alu)
    for part in ("e_compute", "e_offchip", "e_internal", "e_onchip"):
        assert getattr(cost.energy, part) == pytest.approx(getattr(e, part), rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(cut=st.integers(1, 18), l=st.integers(1, 20))
def test_energy_additive(cut, l):
    ep = EnergyParams()
    tab = decode_table(M7, 64, l)
    idx = np.arange(len(tab))
    a, b = tab.subset(idx < cut), tab.subset(idx >= cut)
    whole = iteration_energy(tab, [], ep, l)
    parts = iteration_energy(a, [], ep, l) + iteration_energy(b, [], ep, l)
    assert parts.e_total == pytest.approx(whole.e_total, rel=1e-12)
    whole = iteration_energy([], tab.subset(tab.pim_eligible), ep, l)
    elig_a, elig_b = a.subset(a.pim_eligible), b.subset(b.pim_eligible)
    parts = iteration_energy([], elig_a, ep, l) + iteration_energy([], elig_b, ep, l)
    assert parts.e_total == pytest.approx(whole.e_total, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(l=st.integers(1, 40), seq=st.integers(0, 4096), model=st.sampled_from(["llama2-7b", "llama2-13b"]))
def test_coprocessing_never_slower_than_one_device(l, seq, model):
    spec = build_model_spec(model)
    sys = SystemConfig()
    tab = decode_table(spec, seq, l)
    f = optimal_ratio(l, sys)
    both = iteration_cost(tab, sys, l, f).latency.t_total
    npu_only = iteration_cost(tab, sys, l, 0.0).latency.t_total
    pim_only = iteration_cost(tab, sys, l, 1.0, overlap=False).latency.t_total
    assert both <= npu_only * (1 + 1e-12)
    assert both <= pim_only * (1 + 1e-12)
    # a disabled device reduces co-processing to the other device
    assert npu_only == pytest.approx(npu_latency(tab, sys.npu, sys.dram))


def test_iteration_cost_total_at_least_each_side():
    sys = SystemConfig()
    cost = iteration_cost(decode_table(M7, 512, 4), sys, 4, 0.8)
    assert cost.latency.t_total >= max(cost.latency.t_npu, cost.latency.t_pim) * (1 - 1e-12)


def test_min_combine_switch():
    sys = replace(SystemConfig(), latency_combine="min")
    tab = decode_table(M7, 512, 4)
    lo = iteration_cost(tab, sys, 4, 0.5).latency.t_total
    hi = iteration_cost(tab, SystemConfig(), 4, 0.5).latency.t_total
    assert lo < hi


def test_peak_identity():
    assert PIMConfig().peak_ops_per_die == 409.6e9
    assert PIMConfig.samsung(8).peak_ops_per_die == 102.4e9
    with pytest.raises(ConfigurationError):
        PIMConfig.samsung(6)


def test_system_validate_reports_everything():
    bad = SystemConfig(
        npu=NPUConfig(matrix_tflops=0),
        timing=replace(SystemConfig().timing, t_cwl=30),
        latency_combine="avg",
    )
    problems = bad.validate()
    assert any("matrix_tflops" in p for p in problems)
    assert any("t_cl" in p for p in problems)
    assert any("latency_combine" in p for p in problems)
    assert SystemConfig().validate() == []


def test_default_energy_is_calibrated():
    result = calibrate_energy(M7)
    default = EnergyParams()
    for name in ("e_offchip_per_byte", "e_internal_per_byte", "e_npu_mac", "e_pim_mac"):
        assert getattr(default, name) == pytest.approx(getattr(result.energy, name), rel=2e-3)
    for dies, target in result.targets.items():
        assert result.ratios[dies] == pytest.approx(target, rel=0.10)
