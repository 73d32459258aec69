"""Ready-time schedule, memory/stall constraints and the minibatch search.

Memory accounting used throughout:

* fixed overhead   = m_others + parameters + gradients (always resident)
* usable bytes     = budget - fixed overhead
* active area A(k) = layer-wise peak of the GMAP with nothing pinned
* residual R(k)    = usable - A(k); pinned featuremaps are reserved here
  for the whole iteration
* swap pool        = usable - pinned bytes; every non-pinned allocation and
  prefetch is served from it

All times inside the schedule are integer nanoseconds (see ``to_ns``).
"""

from __future__ import annotations

import bisect
import heapq
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .model_ir import GMAP, PRE_COMPUTE, HardwareSpec, peak_layerwise_memory, signed_delta
from .perf_model import (
    NS,
    IterationTiming,
    PerfModel,
    TrainingConfig,
    iteration_time,
    iteration_timing,
    whole_training_time,
)
from .lr_tuner import adjust_iterations  # noqa: F401  (re-exported for planner users)

log = logging.getLogger(__name__)


class PlanError(ValueError):
    pass


class Untrainable(PlanError):
    """The budget cannot hold even one phase's working set."""


# ---------------------------------------------------------------------------
# ready-time schedule


@dataclass(frozen=True)
class FreeEvent:
    time: int
    nbytes: int
    object_id: str
    owner_phase: int  # phase whose completion (or whose offload) triggers it


@dataclass
class PhaseDemand:
    """What phase ``j`` takes from the swap pool, and when it gives it back."""

    acquire: list[tuple[str, int]] = field(default_factory=list)
    prefetch: list[tuple[str, int, int]] = field(default_factory=list)  # (object, duration, not_before)
    frees: list[FreeEvent] = field(default_factory=list)

    @property
    def nbytes(self) -> int:
        return sum(b for _, b in self.acquire)


@dataclass(frozen=True)
class PhaseTrace:
    j: int
    branch: str  # "direct" or "blocked"
    start: int
    ready: int
    j_current: int | None = None
    j_satisfied: int | None = None
    awaited: tuple[str, ...] = ()  # objects whose frees unblocked the phase
    gated_by: tuple[str, ...] = ()  # offloads that delayed a prefetch


def ready_times(demands: Sequence[PhaseDemand], cumulative: Sequence[int], budget: int):
    """Ready timestamp of every phase assuming compute never stalls.

    ``cumulative[j]`` is the compute-completion time of phase ``j``
    (``cumulative[0] == 0``).  The swap-in stream serves phases in order:
    if the pool can hold phase ``j``'s allocations at the time phase ``j-1``
    became ready it proceeds directly, otherwise it waits for the earliest
    pending frees that cover the shortfall.  Prefetches of the phase then
    run back to back.  Returns ``(t_ready, traces)``.
    """
    t_ready: list[int] = []
    traces: list[PhaseTrace] = []
    pending: list[tuple[int, int, int, str, int]] = []
    seq = 0
    used = 0
    prev = 0
    for j, d in enumerate(demands, start=1):
        while pending and pending[0][0] <= prev:
            used -= heapq.heappop(pending)[2]
        need = d.nbytes
        if need > budget:
            raise Untrainable(f"phase {j} needs {need} bytes; pool holds {budget}")
        if used + need <= budget:
            start, branch, j_cur, j_sat, awaited = prev, "direct", None, None, ()
        else:
            # phase executing when the stream got blocked
            j_cur = min(bisect.bisect_right(cumulative, prev), len(cumulative) - 1)
            deficit = used + need - budget
            freed, got = 0, []
            t_free = owner = None
            while freed < deficit:
                if not pending:
                    raise Untrainable(f"phase {j}: pending frees cannot cover {deficit} bytes")
                t_free, _, nbytes, oid, owner = heapq.heappop(pending)
                freed += nbytes
                used -= nbytes
                got.append(oid)
            if owner >= j:
                raise Untrainable(f"phase {j} waits on memory released by phase {owner}")
            start, branch, j_sat, awaited = t_free, "blocked", owner, tuple(got)
        used += need
        t = start
        gated = []
        for oid, dur, not_before in d.prefetch:
            if not_before > t:
                gated.append(oid)
                t = not_before
            t += dur
        t_ready.append(t)
        traces.append(PhaseTrace(j, branch, start, t, j_cur, j_sat, awaited, tuple(gated)))
        for ev in d.frees:
            heapq.heappush(pending, (ev.time, seq, ev.nbytes, ev.object_id, ev.owner_phase))
            seq += 1
        prev = t
    return t_ready, traces


def offload_completion(gmap: GMAP, timing: IterationTiming, pins=frozenset()) -> dict[str, int]:
    """Offload end times on the device-to-host channel along the stall-free timeline."""
    cum = timing.cumulative_ns
    done: dict[str, int] = {}
    channel = 0
    for op in gmap.ops:
        if op.kind == "offload" and op.object_id not in pins:
            channel = max(cum[op.phase], channel) + timing.xfer_ns[op.object_id]
            done[op.object_id] = channel
    return done


def phase_demands(gmap: GMAP, timing: IterationTiming, pins=frozenset()) -> list[PhaseDemand]:
    cum = timing.cumulative_ns
    off_done = offload_completion(gmap, timing, pins)
    demands = [PhaseDemand() for _ in range(gmap.num_phases)]
    holder: dict[str, int] = {}
    for op in gmap.ops:
        oid = op.object_id
        if oid in pins:
            continue
        size = timing.size[oid]
        if op.kind in PRE_COMPUTE:
            d = demands[op.phase - 1]
            d.acquire.append((oid, size))
            if op.kind == "prefetch":
                d.prefetch.append((oid, timing.xfer_ns[oid], off_done.get(oid, 0)))
            holder[oid] = op.phase
        else:
            when = off_done[oid] if op.kind == "offload" else cum[op.phase]
            demands[holder.pop(oid) - 1].frees.append(FreeEvent(when, size, oid, op.phase))
    return demands


@dataclass(frozen=True)
class ReadySchedule:
    t_ready_ns: tuple[int, ...]
    cumulative_ns: tuple[int, ...]
    traces: tuple[PhaseTrace, ...]

    @property
    def t_ready(self) -> list[float]:
        return [t / NS for t in self.t_ready_ns]

    @property
    def slack_ns(self) -> list[int]:
        return [self.cumulative_ns[j] - t for j, t in enumerate(self.t_ready_ns)]

    @property
    def violations(self) -> list[int]:
        return check_stall_constraint(self.t_ready_ns, _diffs(self.cumulative_ns))


def _diffs(cum: Sequence[int]) -> list[int]:
    return [b - a for a, b in zip(cum, cum[1:])]


def ready_schedule(gmap: GMAP, timing: IterationTiming, budget: int, pin_set=()) -> ReadySchedule:
    pins = frozenset(pin_set)
    t, traces = ready_times(phase_demands(gmap, timing, pins), timing.cumulative_ns, budget)
    return ReadySchedule(tuple(t), tuple(timing.cumulative_ns), tuple(traces))


def compute_t_ready(gmap: GMAP, k: int, budget: int, pin_set, model: PerfModel) -> list[float]:
    """Per-phase ready timestamps in seconds; ``budget`` is the swap-pool size."""
    return ready_schedule(gmap, iteration_timing(gmap, k, model), budget, pin_set).t_ready


# ---------------------------------------------------------------------------
# constraints


@dataclass(frozen=True)
class MemoryCheck:
    ok: bool
    peak: int
    first_violation: int | None  # sequence_no


def check_memory_constraint(gmap: GMAP, k: int, budget: int, pin_set=()) -> MemoryCheck:
    """Signed running sum over the GMAP must never exceed ``budget``.

    ``budget`` excludes the fixed overhead.  Pinned objects are charged for
    the whole iteration.
    """
    pins = frozenset(pin_set)
    sizes = gmap.sizes(k)
    running = sum(sizes[p] for p in pins)
    peak, first = running, None
    if running > budget:
        first = gmap.ops[0].sequence_no if gmap.ops else -1
    for op in gmap.ops:
        if op.object_id in pins:
            continue
        running += signed_delta(op, sizes[op.object_id])
        peak = max(peak, running)
        if running > budget and first is None:
            first = op.sequence_no
    return MemoryCheck(first is None, peak, first)


def check_stall_constraint(t_ready: Sequence, compute_times: Sequence) -> list[int]:
    """Phases (1-based) whose ready time is after the previous phase finishes."""
    if len(t_ready) != len(compute_times):
        raise PlanError(f"length mismatch: {len(t_ready)} ready times, {len(compute_times)} compute times")
    omega, elapsed = [], 0
    for j, (ready, dur) in enumerate(zip(t_ready, compute_times), start=1):
        if ready > elapsed:
            omega.append(j)
        elapsed += dur
    return omega


@dataclass(frozen=True)
class ConstraintReport:
    memory_ok: bool
    first_memory_violation: int | None
    stall_ok: bool
    omega: tuple[int, ...]
    slack: tuple[float, ...]


def constraint_report(gmap: GMAP, k: int, usable: int, pin_set, model: PerfModel) -> ConstraintReport:
    pins = frozenset(pin_set)
    mem = check_memory_constraint(gmap, k, usable, pins)
    pinned = sum(gmap.size(p, k) for p in pins)
    sched = ready_schedule(gmap, iteration_timing(gmap, k, model), usable - pinned, pins)
    omega = sched.violations
    return ConstraintReport(mem.ok, mem.first_violation, not omega, tuple(omega),
                            tuple(s / NS for s in sched.slack_ns))


# ---------------------------------------------------------------------------
# maximal minibatch


def fixed_overhead(gmap: GMAP, hw: HardwareSpec) -> int:
    return hw.m_others + gmap.resident_bytes


def k_max_formula(budget: int, m_others: int, m_para: int, m_ws: int, m_fm_base: int, k_base: int) -> int:
    """floor(k_base * (budget - others - params - workspace) / featuremap bytes at k_base)."""
    if m_fm_base <= 0:
        raise PlanError("no minibatch-dependent bytes at the peak; k_max is unbounded")
    free = budget - m_others - m_para - m_ws
    if free <= 0:
        raise Untrainable(f"budget {budget} does not exceed fixed overheads {budget - free}")
    return k_base * free // m_fm_base


def max_trainable_minibatch(gmap: GMAP, budget: int, hw: HardwareSpec) -> int:
    """Largest k whose layer-wise peak fits next to the fixed overhead.

    The closed form seeds the search; alignment rounding is then settled by
    direct peak evaluation.  Workspace scales with the minibatch here, so it
    joins the featuremaps in the denominator.
    """
    peak = peak_layerwise_memory(gmap, gmap.k_base)
    scaling = sum(gmap.objects[o].size_base for o in peak.live if gmap.objects[o].scales_with_minibatch)
    fixed_live = sum(gmap.objects[o].size_base for o in peak.live if not gmap.objects[o].scales_with_minibatch)
    k = k_max_formula(budget, hw.m_others, gmap.resident_bytes, fixed_live, scaling, gmap.k_base)
    usable = budget - fixed_overhead(gmap, hw)
    while k >= 1 and peak_layerwise_memory(gmap, k).peak_bytes > usable:
        k -= 1
    if k < 1:
        raise Untrainable(f"layer-wise peak at k=1 exceeds the {usable} usable bytes")
    while peak_layerwise_memory(gmap, k + 1).peak_bytes <= usable:
        k += 1
    return k


# ---------------------------------------------------------------------------
# pinning and the minibatch search


@dataclass(frozen=True)
class Evaluation:
    k: int
    feasible: bool
    pins: tuple[str, ...]
    pinned_bytes: int
    active_area: int
    usable: int
    schedule: ReadySchedule | None
    timing: IterationTiming | None
    reason: str = ""

    @property
    def residual(self) -> int:
        return self.usable - self.active_area

    @property
    def pool(self) -> int:
        return self.usable - self.pinned_bytes


def _involved(j: int, sched: ReadySchedule, demands_fm: Sequence[set]) -> set[str]:
    """Featuremaps that delay phase ``j``: its own, the frees and offloads it
    waited on, and the prefetch chain it inherited its start time from."""
    traces = sched.traces
    out: set[str] = set()
    p = j
    while True:
        tr = traces[p - 1]
        out |= demands_fm[p - 1]
        out.update(tr.awaited)
        out.update(tr.gated_by)
        if tr.branch != "direct" or p == 1 or tr.start != traces[p - 2].ready:
            break
        p -= 1
    return out


def plan_at_minibatch(gmap: GMAP, k: int, usable: int, model: PerfModel) -> Evaluation:
    """Pin featuremaps greedily until no phase stalls, or the residual runs out.

    Candidates are the featuremaps involved in currently violating phases,
    largest transfer time first.
    """
    active = peak_layerwise_memory(gmap, k).peak_bytes
    if active > usable:
        return Evaluation(k, False, (), 0, active, usable, None, None, "active area exceeds budget")
    timing = iteration_timing(gmap, k, model)
    featuremaps = set(gmap.featuremaps)
    own = [set() for _ in range(gmap.num_phases)]
    for op in gmap.ops:
        if op.kind in PRE_COMPUTE and op.object_id in featuremaps:
            own[op.phase - 1].add(op.object_id)
    pins: set[str] = set()
    pinned = 0
    residual = usable - active
    while True:
        sched = ready_schedule(gmap, timing, usable - pinned, pins)
        omega = sched.violations
        if not omega:
            return Evaluation(k, True, tuple(sorted(pins)), pinned, active, usable, sched, timing)
        cands: set[str] = set()
        for j in omega:
            cands |= _involved(j, sched, own)
        cands = (cands & featuremaps) - pins
        order = sorted(cands, key=lambda o: (-timing.xfer_ns[o], o))
        pick = next((o for o in order if pinned + timing.size[o] <= residual), None)
        if pick is None:
            return Evaluation(k, False, tuple(sorted(pins)), pinned, active, usable, sched, timing,
                              f"stall at phases {omega[:8]}{'...' if len(omega) > 8 else ''} with residual exhausted")
        pins.add(pick)
        pinned += timing.size[pick]


@dataclass(frozen=True)
class SwapPlan:
    k_star: int
    k_max: int
    pin_set: tuple[str, ...]
    pinned_sizes: dict
    t_ready: tuple[float, ...]
    t_ready_ns: tuple[int, ...]
    compute_ns: tuple[int, ...]
    slack: tuple[float, ...]
    predicted_iter_time: float
    predicted_whole_time: float
    active_area_bytes: int
    residual_bytes: int
    pinned_bytes: int
    pool_bytes: int
    fixed_bytes: int
    budget: int
    featuremap_bytes: int

    feasible = True

    @property
    def pinned_fraction(self) -> float:
        return self.pinned_bytes / self.featuremap_bytes if self.featuremap_bytes else 0.0

    def to_dict(self) -> dict:
        return {
            "feasible": True,
            "k_star": self.k_star,
            "k_max": self.k_max,
            "pinned_objects": list(self.pin_set),
            "pinned_sizes": dict(sorted(self.pinned_sizes.items())),
            "pinned_bytes": self.pinned_bytes,
            "pinned_fraction": self.pinned_fraction,
            "t_ready": list(self.t_ready),
            "t_ready_ns": list(self.t_ready_ns),
            "compute_ns": list(self.compute_ns),
            "slack_s": list(self.slack),
            "predicted_iter_time_s": self.predicted_iter_time,
            "predicted_whole_time_s": self.predicted_whole_time,
            "active_area_bytes": self.active_area_bytes,
            "residual_bytes": self.residual_bytes,
            "pool_bytes": self.pool_bytes,
            "fixed_bytes": self.fixed_bytes,
            "budget_bytes": self.budget,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SwapPlan":
        if not doc.get("feasible", False):
            raise PlanError("plan document describes an infeasible outcome")
        fm_bytes = doc["pinned_bytes"] / doc["pinned_fraction"] if doc.get("pinned_fraction") else 0
        return cls(
            k_star=doc["k_star"], k_max=doc["k_max"], pin_set=tuple(doc["pinned_objects"]),
            pinned_sizes=dict(doc["pinned_sizes"]), t_ready=tuple(doc["t_ready"]),
            t_ready_ns=tuple(doc["t_ready_ns"]), compute_ns=tuple(doc["compute_ns"]),
            slack=tuple(doc["slack_s"]), predicted_iter_time=doc["predicted_iter_time_s"],
            predicted_whole_time=doc["predicted_whole_time_s"],
            active_area_bytes=doc["active_area_bytes"], residual_bytes=doc["residual_bytes"],
            pinned_bytes=doc["pinned_bytes"], pool_bytes=doc["pool_bytes"], fixed_bytes=doc["fixed_bytes"],
            budget=doc["budget_bytes"], featuremap_bytes=round(fm_bytes),
        )


@dataclass(frozen=True)
class Infeasible:
    reason: str  # "untrainable" | "infeasible"
    detail: str
    k_max: int | None = None

    feasible = False

    def to_dict(self) -> dict:
        return {"feasible": False, "reason": self.reason, "detail": self.detail, "k_max": self.k_max}


def make_plan(gmap: GMAP, ev: Evaluation, k_max: int, hw_fixed: int, budget: int,
              model: PerfModel, cfg: TrainingConfig) -> SwapPlan:
    t_iter = iteration_time(gmap.phases, ev.k, model)
    sched = ev.schedule
    fm_total = sum(ev.timing.size[o] for o in gmap.featuremaps)
    return SwapPlan(
        k_star=ev.k,
        k_max=k_max,
        pin_set=ev.pins,
        pinned_sizes={p: ev.timing.size[p] for p in ev.pins},
        t_ready=tuple(sched.t_ready),
        t_ready_ns=sched.t_ready_ns,
        compute_ns=ev.timing.compute_ns,
        slack=tuple(s / NS for s in sched.slack_ns),
        predicted_iter_time=t_iter,
        predicted_whole_time=whole_training_time(gmap.phases, ev.k, model, cfg, t_iter=t_iter),
        active_area_bytes=ev.active_area,
        residual_bytes=ev.residual,
        pinned_bytes=ev.pinned_bytes,
        pool_bytes=ev.pool,
        fixed_bytes=hw_fixed,
        budget=budget,
        featuremap_bytes=fm_total,
    )


def _search_order(k_max: int, step: int):
    """Yield candidate k values: coarse descending pass, then a fine pass."""
    if step <= 1:
        yield from range(k_max, 0, -1)
        return
    coarse = list(range(k_max, 0, -step))
    if coarse[-1] != 1:
        coarse.append(1)
    yield from coarse


def find_efficiency_optimal_minibatch(gmap: GMAP, hw: HardwareSpec, model: PerfModel,
                                      cfg: TrainingConfig | None = None, budget: int | None = None,
                                      step: int = 1):
    """Linear search downward from k_max for the first stall-free minibatch.

    Returns a ``SwapPlan`` or an ``Infeasible`` value.  With ``step > 1`` a
    coarse pass locates the first feasible coarse point and a fine pass then
    scans the gap above it, which reproduces the unit-step result whenever
    feasibility does not flip inside a gap.
    """
    cfg = cfg or TrainingConfig(delta_sync=hw.delta_sync)
    budget = hw.memory_budget if budget is None else budget
    fixed = fixed_overhead(gmap, hw)
    usable = budget - fixed
    try:
        k_max = max_trainable_minibatch(gmap, budget, hw)
    except Untrainable as exc:
        return Infeasible("untrainable", str(exc))
    cache: dict[int, Evaluation] = {}

    def evaluate(k: int) -> Evaluation:
        if k not in cache:
            cache[k] = plan_at_minibatch(gmap, k, usable, model)
            log.debug("k=%d feasible=%s pins=%d", k, cache[k].feasible, len(cache[k].pins))
        return cache[k]

    found = None
    prev = None
    for k in _search_order(k_max, step):
        if evaluate(k).feasible:
            found = k
            break
        prev = k
    if found is not None and step > 1 and prev is not None:
        for k in range(prev - 1, found, -1):
            if evaluate(k).feasible:
                found = k
                break
    if found is None and step > 1:
        for k in range(k_max, 0, -1):
            if evaluate(k).feasible:
                found = k
                break
    if found is None:
        last = cache.get(1)
        return Infeasible("infeasible", f"no minibatch in [1, {k_max}] is stall-free"
                          + (f" ({last.reason})" if last else ""), k_max)
    return make_plan(gmap, cache[found], k_max, fixed, budget, model, cfg)


def plan_fixed_minibatch(gmap: GMAP, hw: HardwareSpec, model: PerfModel, k: int,
                         cfg: TrainingConfig | None = None, budget: int | None = None):
    """Pinning plan at a given minibatch (no search)."""
    cfg = cfg or TrainingConfig(delta_sync=hw.delta_sync)
    budget = hw.memory_budget if budget is None else budget
    fixed = fixed_overhead(gmap, hw)
    ev = plan_at_minibatch(gmap, k, budget - fixed, model)
    if not ev.feasible:
        reason = "untrainable" if ev.schedule is None else "infeasible"
        return Infeasible(reason, f"k={k}: {ev.reason}")
    return make_plan(gmap, ev, k, fixed, budget, model, cfg)
