import csv
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swapsched.model_ir import HardwareSpec, peak_layerwise_memory
from swapsched.perf_model import PerfModel
from swapsched.planner import find_efficiency_optimal_minibatch, fixed_overhead
from swapsched.simulator import (
    SimConfig,
    SimError,
    SimSummary,
    format_ns,
    simulate_iteration,
    stall_report,
    verify_plan,
    write_memory_csv,
    write_trace_csv,
)

from conftest import flat_model, gmap_of, net, random_instance

MS = 1_000_000


def fig3():
    """conv-bn-activation; only the conv output is swapped (8 ms each way)."""
    g = gmap_of(net(("conv", 10**9, 8_000_000), ("bn", 10**8, 0), ("activation", 10**8, 0)))
    return g, flat_model(bandwidth=1e9)


def test_fig3_stall_only_on_conv_backward():
    g, m = fig3()
    events, s = simulate_iteration(g, 8, {"fm2", "fm3"}, m, SimConfig(10**9, "dynamic"))
    assert s.stall_ns == (0, 0, 0, 0, 0, 17 * MS - 1_600_000)
    assert s.iter_ns == 19 * MS
    key = [(e.time_ns, e.stream, e.kind, e.subject) for e in events
           if e.kind in ("xfer_start", "xfer_end") or (e.kind == "kernel_start" and e.subject == "6")]
    assert key == [
        (1 * MS, "swap_out", "xfer_start", "fm1"),
        (9 * MS, "swap_out", "xfer_end", "fm1"),
        (9 * MS, "swap_in", "xfer_start", "fm1"),
        (17 * MS, "swap_in", "xfer_end", "fm1"),
        (17 * MS, "compute", "kernel_start", "6"),
    ]


def test_resident_has_no_stall():
    g, m = fig3()
    _, s = simulate_iteration(g, 8, (), m, SimConfig(10**9, "resident"))
    assert s.total_stall_ns == 0
    assert s.iter_ns == sum(s.compute_ns)


def test_one_layer_oom():
    g = gmap_of(net(("conv", 10**9, 8192)))
    _, s = simulate_iteration(g, 8, (), flat_model(), SimConfig(4096, "naive"))
    assert s.oom
    assert s.wait_graph["swap_in_blocked_on"] == "fm1"
    assert s.wait_graph["needs_bytes"] == 8192
    with pytest.raises(SimError):
        stall_report(s)


def test_config_errors():
    g, m = fig3()
    with pytest.raises(SimError):
        SimConfig(100, "lazy")
    with pytest.raises(SimError):
        SimConfig(100, bandwidth=0)
    with pytest.raises(SimError):
        simulate_iteration(g, 8, {"fm1"}, m, SimConfig(10**9, "naive"))
    with pytest.raises(SimError):
        simulate_iteration(g, 8, {"wsf1"}, m, SimConfig(10**9, "dynamic"))
    with pytest.raises(SimError):
        simulate_iteration(g, 8, {"fm1"}, m, SimConfig(10, "dynamic"))


def test_stall_report_examples():
    g, m = fig3()
    _, s = simulate_iteration(g, 8, (), m, SimConfig(10**9, "resident"))
    assert all(r.stall_s == 0 for r in stall_report(s))
    fake = SimSummary("naive", 8, 100, 14 * MS, (1 * MS,) * 10, (0,) * 10,
                      (0, 0, 0, 0, 4 * MS, 0, 0, 0, 0, 0), 0, [], [], [])
    rows = stall_report(fake)
    assert [r.stall_s for r in rows] == [0, 0, 0, 0, 0.004, 0, 0, 0, 0, 0]
    assert sum(r.stall_s for r in rows) == pytest.approx(fake.iter_time - sum(fake.compute_ns) / 1e9)
    _, s = simulate_iteration(g, 8, (), m, SimConfig(10**9, "naive"))
    assert sum(r.stall_s for r in stall_report(s)) == pytest.approx(s.total_stall)
    assert s.iter_ns - sum(s.compute_ns) == s.total_stall_ns


def test_alloc_cost_slows_things_down():
    g, m = fig3()
    _, a = simulate_iteration(g, 8, (), m, SimConfig(10**9, "resident"))
    _, b = simulate_iteration(g, 8, (), m, SimConfig(10**9, "resident", alloc_cost=1e-3))
    assert b.iter_ns > a.iter_ns


def test_peak_matches_layerwise_at_tight_budget(rng):
    for _ in range(10):
        g, hw, m = random_instance(rng, n_range=(1, 10))
        fixed = fixed_overhead(g, hw)
        for k in (1, g.k_base, 3 * g.k_base):
            a = peak_layerwise_memory(g, k).peak_bytes
            _, s = simulate_iteration(g, k, (), m, SimConfig(fixed + a, "naive", fixed))
            assert not s.oom
            assert s.peak_mem == fixed + a


def _plans(rng, n):
    out = []
    while len(out) < n:
        g, hw, m = random_instance(rng, n_range=(2, 12))
        plan = find_efficiency_optimal_minibatch(g, hw, m)
        if plan.feasible:
            out.append((g, hw, m, plan))
    return out


def test_plan_agreement_and_verdicts(rng):
    for g, hw, m, plan in _plans(rng, 6):
        cfg = SimConfig(hw.memory_budget, "dynamic", plan.fixed_bytes)
        _, s = simulate_iteration(g, plan.k_star, plan, m, cfg)
        assert s.ready_ns == plan.t_ready_ns
        v = verify_plan(plan, s)
        assert v.passed and v.total_stall == 0 and max(map(abs, v.deviations)) == 0
        assert verify_plan(plan, s, tolerance=1.0).passed
        _, naive = simulate_iteration(g, plan.k_star, (), m, SimConfig(hw.memory_budget, "naive", plan.fixed_bytes))
        with pytest.raises(SimError):
            verify_plan(plan, naive)


def test_unpinning_breaks_a_tight_plan():
    rng = random.Random(8)
    for g, hw, m, plan in _plans(rng, 30):
        if plan.pin_set:
            break
    else:
        pytest.skip("no plan with pins")
    victim = max(plan.pin_set, key=lambda o: plan.pinned_sizes[o])
    pins = set(plan.pin_set) - {victim}
    cfg = SimConfig(hw.memory_budget, "dynamic", plan.fixed_bytes)
    _, s = simulate_iteration(g, plan.k_star, pins, m, cfg)
    v = verify_plan(plan, s, tolerance=0.0)
    assert not v.passed
    consumer = 2 * (g.num_phases // 2) + 1 - int(victim[2:])
    assert s.stall_ns[consumer - 1] > 0 or s.oom


def test_determinism_and_conservation(rng):
    g, hw, m = random_instance(rng)
    fixed = fixed_overhead(g, hw)
    a = simulate_iteration(g, g.k_base, (), m, SimConfig(hw.memory_budget, "naive", fixed))
    b = simulate_iteration(g, g.k_base, (), m, SimConfig(hw.memory_budget, "naive", fixed))
    assert a[0] == b[0]
    assert a[1].mem_timeseries[-1][1] == fixed
    assert a[1].alloc_curve[-1][1] == a[1].free_curve[-1][1]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from(["naive", "dynamic", "resident"]), st.floats(0.5, 3))
def test_memory_never_exceeds_budget(seed, mode, slack):
    rng = random.Random(seed)
    g, hw, m = random_instance(rng, n_range=(1, 12))
    fixed = fixed_overhead(g, hw)
    k = rng.randint(1, 3 * g.k_base)
    budget = fixed + int(peak_layerwise_memory(g, k).peak_bytes * slack)
    pins = set(rng.sample(g.featuremaps, rng.randint(0, len(g.featuremaps)))) if mode == "dynamic" else ()
    try:
        events, s = simulate_iteration(g, k, pins, m, SimConfig(budget, mode, fixed))
    except SimError:
        return  # pins alone exceed the budget
    assert all(e.mem_used_after <= budget for e in events)
    assert s.peak_mem <= budget
    keys = [(e.time_ns) for e in events]
    assert keys == sorted(keys)
    if not s.oom:
        assert s.iter_ns >= sum(s.compute_ns)
        assert (s.iter_ns == sum(s.compute_ns)) == (s.total_stall_ns == 0)


def test_monotone_in_bandwidth_and_budget():
    rng = random.Random(2024)
    for _ in range(12):
        g, hw, m = random_instance(rng, n_range=(2, 14))
        fixed = fixed_overhead(g, hw)
        k = g.k_base
        base = fixed + peak_layerwise_memory(g, k).peak_bytes
        times = []
        for bw_factor in (1, 2, 4):
            mm = PerfModel(m.curves, m.bandwidth_avail * bw_factor, m.k_base)
            _, s = simulate_iteration(g, k, (), mm, SimConfig(base, "naive", fixed))
            times.append(s.iter_ns)
        assert times == sorted(times, reverse=True)
        times = []
        for extra in (0, 2**20, 2**24, 2**28):
            _, s = simulate_iteration(g, k, (), m, SimConfig(base + extra, "naive", fixed))
            times.append(s.iter_ns)
        assert times == sorted(times, reverse=True)


def test_exports(tmp_path):
    g, m = fig3()
    events, s = simulate_iteration(g, 8, (), m, SimConfig(10**9, "naive"))
    write_trace_csv(tmp_path / "t.csv", events)
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["time_s", "stream", "kind", "subject", "mem_used_bytes"]
    assert len(rows) == len(events) + 1
    assert rows[1][0] == "0.000000000"
    write_memory_csv(tmp_path / "m.csv", s)
    mem = list(csv.reader(open(tmp_path / "m.csv")))
    assert mem[0] == ["time_s", "mem_used_bytes", "allocated_bytes", "freed_bytes"]
    assert mem[-1][2] == mem[-1][3]
    assert format_ns(1_500_000_001) == "1.500000001"
    assert format_ns(-5) == "-0.000000005"
    assert s.to_dict()["iter_time_s"] == format_ns(s.iter_ns)
