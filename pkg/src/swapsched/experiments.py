"""Canned scenarios shared by the scripts and the acceptance tests."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .model_ir import HardwareSpec, build_gmap, peak_layerwise_memory, unfold_network
from .planner import fixed_overhead, plan_fixed_minibatch
from .simulator import SimConfig, simulate_iteration
from .synthetic import MIB, resnet_like, true_model

BUDGET_FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


@dataclass(frozen=True)
class ModeComparison:
    k: int
    naive_budget: int
    naive_iter: float
    naive_stall: float
    dynamic_budget: int
    dynamic_iter: float
    dynamic_stall: float
    dynamic_pins: int
    resident_footprint: int
    resident_iter: float

    def as_dict(self) -> dict:
        return asdict(self)


def mode_comparison(k: int = 32, bandwidth: float = 8e9, m_others: int = 64 * MIB) -> ModeComparison:
    """naive / dynamic / resident on the ResNet-like network at minibatch ``k``.

    naive runs at the smallest budget that can hold the active area.  dynamic
    gets the active area plus the smallest fraction of the featuremap bytes
    (from ``BUDGET_FRACTIONS``) at which a stall-free pin set exists.
    resident keeps everything on the device and reports its footprint.
    """
    spec = resnet_like()
    gmap = build_gmap(unfold_network(spec), spec)
    model = true_model(gmap, bandwidth, spec.k_base)
    fixed = fixed_overhead(gmap, HardwareSpec(1, m_others))
    active = peak_layerwise_memory(gmap, k).peak_bytes
    fm_total = sum(gmap.size(o, k) for o in gmap.featuremaps)

    _, res = simulate_iteration(gmap, k, (), model, SimConfig(fixed + active + fm_total * 4, "resident", fixed))
    _, naive = simulate_iteration(gmap, k, (), model, SimConfig(fixed + active, "naive", fixed))

    for frac in BUDGET_FRACTIONS:
        budget = fixed + active + int(frac * fm_total)
        plan = plan_fixed_minibatch(gmap, HardwareSpec(budget, m_others), model, k)
        if plan.feasible:
            break
    else:
        raise RuntimeError("no stall-free pin set even with every featuremap budgeted")
    _, dyn = simulate_iteration(gmap, k, plan, model, SimConfig(budget, "dynamic", fixed))
    return ModeComparison(
        k=k,
        naive_budget=fixed + active,
        naive_iter=naive.iter_time,
        naive_stall=naive.total_stall,
        dynamic_budget=budget,
        dynamic_iter=dyn.iter_time,
        dynamic_stall=dyn.total_stall,
        dynamic_pins=len(plan.pin_set),
        resident_footprint=res.peak_mem,
        resident_iter=res.iter_time,
    )
