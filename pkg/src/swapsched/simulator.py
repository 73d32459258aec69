"""Discrete-event replay of one training iteration.

Three logical streams share a bounded memory pool:

* compute runs phases in order; phase j starts once phase j-1 has ended
  and the swap-in stream has finished phase j's allocations and prefetches
* swap-in walks the GMAP's allocate/prefetch ops in order, blocking when
  the pool is short; prefetches occupy the host-to-device channel and may
  not start before the object's offload has landed on the host
* swap-out offloads each featuremap after its producing kernel (FIFO on the
  device-to-host channel) and frees released objects at kernel end

Event order: time, then stream (compute < swap_out < swap_in), then a
monotone sequence number.  Times are integer nanoseconds.
"""

from __future__ import annotations

import csv
import heapq
import json
from dataclasses import dataclass, field
from typing import Sequence

from .model_ir import GMAP, PRE_COMPUTE
from .perf_model import NS, PerfModel, iteration_timing, to_ns

MODES = ("naive", "dynamic", "resident")
STREAMS = ("compute", "swap_out", "swap_in")
_PRIORITY = {s: i for i, s in enumerate(STREAMS)}
TRACE_HEADER = ("time_s", "stream", "kind", "subject", "mem_used_bytes")


class SimError(ValueError):
    pass


def format_ns(ns: int) -> str:
    """Exact decimal seconds for an integer nanosecond count."""
    sign = "-" if ns < 0 else ""
    ns = abs(ns)
    return f"{sign}{ns // NS}.{ns % NS:09d}"


@dataclass(frozen=True)
class SimConfig:
    budget: int
    mode: str = "dynamic"
    fixed_bytes: int = 0
    bandwidth: float | None = None  # bytes/s per direction; None uses the model's
    alloc_cost: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise SimError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise SimError("bandwidth must be positive")
        if self.alloc_cost < 0:
            raise SimError("alloc_cost must be nonnegative")


@dataclass(frozen=True)
class SimEvent:
    time_ns: int
    stream: str
    kind: str
    subject: str
    mem_used_after: int

    @property
    def time(self) -> float:
        return self.time_ns / NS

    def row(self) -> tuple:
        return (format_ns(self.time_ns), self.stream, self.kind, self.subject, self.mem_used_after)


@dataclass
class SimSummary:
    mode: str
    k: int
    budget: int
    iter_ns: int
    compute_ns: tuple[int, ...]
    ready_ns: tuple[int, ...]
    stall_ns: tuple[int, ...]
    peak_mem: int
    mem_timeseries: list[tuple[int, int]]
    alloc_curve: list[tuple[int, int]]
    free_curve: list[tuple[int, int]]
    oom: bool = False
    wait_graph: dict = field(default_factory=dict)
    pin_set: tuple[str, ...] = ()

    @property
    def iter_time(self) -> float:
        return self.iter_ns / NS

    @property
    def total_stall_ns(self) -> int:
        return sum(self.stall_ns)

    @property
    def total_stall(self) -> float:
        return self.total_stall_ns / NS

    @property
    def per_phase_stall(self) -> list[float]:
        return [s / NS for s in self.stall_ns]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "k": self.k,
            "budget_bytes": self.budget,
            "oom": self.oom,
            "wait_graph": self.wait_graph,
            "iter_time_s": format_ns(self.iter_ns),
            "compute_time_s": format_ns(sum(self.compute_ns)),
            "total_stall_s": format_ns(self.total_stall_ns),
            "per_phase_stall_s": [format_ns(s) for s in self.stall_ns],
            "ready_s": [format_ns(t) for t in self.ready_ns],
            "peak_mem_bytes": self.peak_mem,
            "pinned_objects": list(self.pin_set),
        }


class _Sim:
    def __init__(self, gmap: GMAP, k: int, model: PerfModel, cfg: SimConfig, pins: frozenset):
        self.gmap, self.k, self.cfg = gmap, k, cfg
        timing = iteration_timing(gmap, k, model)
        bw = cfg.bandwidth or model.bandwidth_avail
        self.size = timing.size
        self.compute = timing.compute_ns
        self.xfer = {o: to_ns(self.size[o] / bw) for o in gmap.featuremaps}
        self.alloc_ns = to_ns(cfg.alloc_cost)
        self.n = gmap.num_phases
        self.lifetime = cfg.mode == "resident"
        self.pins = pins
        reserved = 0 if self.lifetime else sum(self.size[p] for p in pins)
        self.base = cfg.fixed_bytes + reserved
        self.pool = cfg.budget - self.base
        self.used = 0

        # per-phase op lists
        self.pre: list[list] = [[] for _ in range(self.n + 1)]
        self.post: list[list] = [[] for _ in range(self.n + 1)]
        for op in gmap.ops:
            if op.object_id in pins and (not self.lifetime or op.kind in ("offload", "prefetch")):
                continue
            (self.pre if op.kind in PRE_COMPUTE else self.post)[op.phase].append(op)

        self.heap: list = []
        self.seq = 0
        self.events: list[SimEvent] = []
        self.mem_series: list[tuple[int, int]] = [(0, self.base)]
        self.alloc_curve: list[tuple[int, int]] = [(0, 0)]
        self.free_curve: list[tuple[int, int]] = [(0, 0)]
        self.peak = self.base

        # swap-in stream state
        self.si_phase = 1
        self.si_idx = 0
        self.si_busy = False
        self.si_reserved = False  # bytes of the current op already taken
        self.ready = [None] * (self.n + 1)
        self.ready[0] = 0
        # swap-out channel
        self.d2h: list[str] = []
        self.d2h_busy = False
        self.on_host: set[str] = set()
        # compute stream
        self.next_phase = 1
        self.running = False
        self.end = [None] * (self.n + 1)
        self.end[0] = 0
        self.blocked_since: int | None = None

    # -- bookkeeping
    def log(self, t: int, stream: str, kind: str, subject: str) -> None:
        total = self.base + self.used
        self.events.append(SimEvent(t, stream, kind, subject, total))

    def change(self, t: int, delta: int) -> None:
        self.used += delta
        total = self.base + self.used
        if self.used > self.pool:
            raise AssertionError(f"pool over-committed at t={t}: {self.used} > {self.pool}")
        self.peak = max(self.peak, total)
        if self.mem_series[-1][0] == t:
            self.mem_series[-1] = (t, total)
        else:
            self.mem_series.append((t, total))
        curve = self.alloc_curve if delta > 0 else self.free_curve
        curve.append((t, curve[-1][1] + abs(delta)))

    def push(self, t: int, stream: str, kind: str, payload) -> None:
        heapq.heappush(self.heap, (t, _PRIORITY[stream], self.seq, stream, kind, payload))
        self.seq += 1

    # -- streams
    def step_swap_in(self, t: int) -> None:
        while not self.si_busy and self.si_phase <= self.n:
            ops = self.pre[self.si_phase]
            if self.si_idx == len(ops):
                self.ready[self.si_phase] = t
                self.si_phase += 1
                self.si_idx = 0
                continue
            op = ops[self.si_idx]
            nbytes = self.size[op.object_id]
            if not self.si_reserved:
                if self.used + nbytes > self.pool:
                    if self.blocked_since is None:
                        self.blocked_since = t
                        self.log(t, "swap_in", "block", op.object_id)
                    return
                if self.blocked_since is not None:
                    self.blocked_since = None
                    self.log(t, "swap_in", "unblock", op.object_id)
                self.change(t, nbytes)
                self.si_reserved = True
                if op.kind == "allocate":
                    self.log(t, "swap_in", "alloc", op.object_id)
            if op.kind == "prefetch":
                if op.object_id not in self.on_host:
                    return  # wait for the offload to land
                self.si_busy = True
                self.log(t, "swap_in", "xfer_start", op.object_id)
                self.push(t + self.xfer[op.object_id], "swap_in", "xfer_end", op.object_id)
            elif self.alloc_ns:
                self.si_busy = True
                self.push(t + self.alloc_ns, "swap_in", "alloc_done", op.object_id)
            else:
                self.si_advance()

    def si_advance(self) -> None:
        self.si_idx += 1
        self.si_reserved = False

    def step_compute(self, t: int) -> None:
        j = self.next_phase
        if self.running or j > self.n or self.ready[j] is None:
            return
        self.running = True
        self.log(t, "compute", "kernel_start", str(j))
        self.push(t + self.compute[j - 1], "compute", "kernel_end", j)

    def step_swap_out(self, t: int) -> None:
        if self.d2h_busy or not self.d2h:
            return
        oid = self.d2h.pop(0)
        self.d2h_busy = True
        self.log(t, "swap_out", "xfer_start", oid)
        self.push(t + self.xfer[oid], "swap_out", "xfer_end", oid)

    def handle(self, t: int, stream: str, kind: str, payload) -> None:
        if kind == "kernel_end":
            j = payload
            self.end[j] = t
            self.running = False
            self.next_phase = j + 1
            self.log(t, "compute", "kernel_end", str(j))
            for op in self.post[j]:
                if op.kind == "offload":
                    self.d2h.append(op.object_id)
                else:
                    self.change(t, -self.size[op.object_id])
                    self.log(t, "swap_out", "free", op.object_id)
        elif stream == "swap_out":  # offload landed
            self.d2h_busy = False
            self.on_host.add(payload)
            self.change(t, -self.size[payload])
            self.log(t, "swap_out", "xfer_end", payload)
            self.log(t, "swap_out", "free", payload)
        else:  # swap-in transfer or allocation finished
            self.si_busy = False
            self.log(t, "swap_in", "xfer_end" if kind == "xfer_end" else "alloc", payload)
            self.si_advance()

    def run(self) -> SimSummary:
        self.step_swap_in(0)
        self.step_compute(0)
        while self.heap:
            t, _, _, stream, kind, payload = heapq.heappop(self.heap)
            self.handle(t, stream, kind, payload)
            self.step_swap_out(t)
            self.step_swap_in(t)
            self.step_compute(t)
        done = self.end[self.n] is not None
        ready = tuple(r if r is not None else -1 for r in self.ready[1:])
        stall = []
        for j in range(1, self.n + 1):
            if self.ready[j] is None or self.end[j - 1] is None:
                break
            stall.append(max(0, self.ready[j] - self.end[j - 1]))
        wait = {} if done else self.wait_graph()
        return SimSummary(
            mode=self.cfg.mode, k=self.k, budget=self.cfg.budget,
            iter_ns=self.end[self.n] if done else -1,
            compute_ns=tuple(self.compute), ready_ns=ready, stall_ns=tuple(stall),
            peak_mem=self.peak, mem_timeseries=self.mem_series,
            alloc_curve=self.alloc_curve, free_curve=self.free_curve,
            oom=not done, wait_graph=wait, pin_set=tuple(sorted(self.pins)),
        )

    def wait_graph(self) -> dict:
        ops = self.pre[self.si_phase] if self.si_phase <= self.n else []
        op = ops[self.si_idx] if self.si_idx < len(ops) else None
        holders = sorted(
            {o.object_id for p in range(1, self.si_phase + 1) for o in self.pre[p]}
            - {o.object_id for p in range(1, self.next_phase) for o in self.post[p]}
            - ({op.object_id} if op is not None and not self.si_reserved else set())
        )
        return {
            "compute_waits_on_phase": self.next_phase,
            "swap_in_blocked_on": op.object_id if op is not None else None,
            "needs_bytes": self.size[op.object_id] if op is not None else 0,
            "pool_free_bytes": self.pool - self.used,
            "frees_pending_on_phase": self.next_phase,
            "held_by": holders,
        }


def simulate_iteration(gmap: GMAP, k: int, pin_set, model: PerfModel, cfg: SimConfig):
    """Run one iteration; returns ``(events, summary)``.

    ``pin_set`` may be a collection of object ids or anything with a
    ``pin_set`` attribute (a plan).  In resident mode every featuremap is
    kept on the device for its lifetime, whatever ``pin_set`` says.
    """
    pins = frozenset(getattr(pin_set, "pin_set", pin_set) or ())
    fms = frozenset(gmap.featuremaps)
    if cfg.mode == "naive" and pins:
        raise SimError("naive mode takes no pinned objects")
    if cfg.mode == "resident":
        pins = fms
    unknown = pins - fms
    if unknown:
        raise SimError(f"only featuremaps can be pinned: {sorted(unknown)[:5]}")
    sim = _Sim(gmap, k, model, cfg, pins)
    if sim.pool < 0:
        raise SimError(f"budget {cfg.budget} below fixed and pinned bytes {sim.base}")
    summary = sim.run()
    return sim.events, summary


@dataclass(frozen=True)
class StallRow:
    phase: int
    ready_s: float
    prev_end_s: float
    stall_s: float


def stall_report(summary: SimSummary) -> list[StallRow]:
    if summary.oom:
        raise SimError("no stall table for an out-of-memory run")
    rows, prev_end = [], 0
    for j, (ready, stall, dur) in enumerate(zip(summary.ready_ns, summary.stall_ns, summary.compute_ns), start=1):
        rows.append(StallRow(j, ready / NS, prev_end / NS, stall / NS))
        prev_end = max(prev_end, ready) + dur
    return rows


@dataclass(frozen=True)
class Verdict:
    passed: bool
    stall_ok: bool
    memory_ok: bool
    total_stall: float
    iter_time: float
    deviations: tuple[float, ...]  # simulated ready minus planned ready, per phase


def verify_plan(plan, summary: SimSummary, tolerance: float = 0.02) -> Verdict:
    if summary.mode != "dynamic":
        raise SimError(f"verify_plan needs a dynamic-mode run, got {summary.mode}")
    if summary.k != plan.k_star:
        raise SimError(f"simulated k={summary.k} but the plan chose k={plan.k_star}")
    if summary.oom:
        return Verdict(False, False, False, float("inf"), float("inf"), ())
    stall_ok = summary.total_stall_ns <= tolerance * summary.iter_ns
    mem_ok = summary.peak_mem <= summary.budget
    dev = tuple((s - p) / NS for s, p in zip(summary.ready_ns, plan.t_ready_ns))
    return Verdict(stall_ok and mem_ok, stall_ok, mem_ok, summary.total_stall, summary.iter_time, dev)


# -- export


def write_trace_csv(path, events: Sequence[SimEvent]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        w.writerows(e.row() for e in events)


def write_memory_csv(path, summary: SimSummary) -> None:
    """Memory in use plus cumulative allocated/freed bytes over time."""
    points = sorted({t for t, _ in summary.mem_timeseries} | {t for t, _ in summary.alloc_curve}
                    | {t for t, _ in summary.free_curve})

    def stepper(series):
        i, last = 0, series[0][1]
        for t in points:
            while i < len(series) and series[i][0] <= t:
                last = series[i][1]
                i += 1
            yield last

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("time_s", "mem_used_bytes", "allocated_bytes", "freed_bytes"))
        for row in zip(points, stepper(summary.mem_timeseries), stepper(summary.alloc_curve),
                       stepper(summary.free_curve)):
            w.writerow((format_ns(row[0]), *row[1:]))


def write_stall_csv(path, summary: SimSummary) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("phase", "stall_s"))
        for j, s in enumerate(summary.stall_ns, start=1):
            w.writerow((j, format_ns(s)))


def summary_json(summary: SimSummary) -> str:
    return json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n"
