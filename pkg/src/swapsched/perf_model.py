"""Per-layer-type throughput curves and the timing queries built on them."""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .model_ir import FORMAT_VERSION, GMAP, MemOp, PhaseLayer
from .profiles import ComputeSample, ProfileSet, effective_bandwidth, scale_flops

DEFAULT_ETA = 0.95
NS = 1_000_000_000


class ModelError(ValueError):
    pass


def to_ns(seconds: float) -> int:
    """Fixed-point event time; shared by the planner and the simulator."""
    return int(round(seconds * NS))


def pool_adjacent_violators(values: Sequence[float], weights: Sequence[float] | None = None) -> list[float]:
    """Weighted isotonic (nondecreasing) least-squares fit."""
    if weights is None:
        weights = [1.0] * len(values)
    blocks: list[list[float]] = []  # [weighted mean, weight, count]
    for v, w in zip(values, weights):
        blocks.append([float(v), float(w), 1])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            m2, w2, c2 = blocks.pop()
            m1, w1, c1 = blocks.pop()
            wt = w1 + w2
            blocks.append([(m1 * w1 + m2 * w2) / wt, wt, c1 + c2])
    out: list[float] = []
    for mean, _, count in blocks:
        out.extend([mean] * count)
    return out


@dataclass(frozen=True)
class ThroughputCurve:
    layer_type: str
    knots: tuple[tuple[float, float], ...]  # (flops, flops per second), before eta
    eta: float = DEFAULT_ETA

    def __post_init__(self):
        if not self.knots:
            raise ModelError(f"{self.layer_type}: curve needs at least one knot")
        if not 0 < self.eta <= 1:
            raise ModelError(f"{self.layer_type}: eta must lie in (0, 1]")
        xs = [x for x, _ in self.knots]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ModelError(f"{self.layer_type}: knot FLOPs must be strictly increasing")
        ys = [y for _, y in self.knots]
        if any(y <= 0 for y in ys) or any(b < a for a, b in zip(ys, ys[1:])):
            raise ModelError(f"{self.layer_type}: knot rates must be positive and nondecreasing")

    @classmethod
    def constant(cls, layer_type: str, rate: float, eta: float = 1.0) -> "ThroughputCurve":
        return cls(layer_type, ((1.0, float(rate)),), eta)

    @property
    def plateau(self) -> float:
        return self.knots[-1][1]

    def raw_rate(self, flops: float) -> float:
        xs = [x for x, _ in self.knots]
        if flops <= xs[0]:
            return self.knots[0][1]
        if flops >= xs[-1]:
            return self.knots[-1][1]
        i = bisect.bisect_right(xs, flops)
        (x0, y0), (x1, y1) = self.knots[i - 1], self.knots[i]
        return y0 + (y1 - y0) * (flops - x0) / (x1 - x0)

    def rate(self, flops: float) -> float:
        """Effective FLOP/s at a kernel of ``flops``, eta applied."""
        return self.raw_rate(flops) * self.eta

    def to_dict(self) -> dict:
        return {"knots": [list(k) for k in self.knots], "plateau": self.plateau, "eta": self.eta}


def fit_throughput_curve(samples: Sequence[ComputeSample], eta: float = DEFAULT_ETA,
                         layer_type: str | None = None) -> ThroughputCurve:
    """Isotonic regression of observed rates over FLOPs.

    Samples sharing a FLOPs value are pooled first (mean rate, weighted by
    count), so knots are strictly increasing in FLOPs.
    """
    if layer_type is None:
        layer_type = samples[0].layer_type if samples else "?"
    groups: dict[int, list[float]] = {}
    for s in samples:
        if s.flops <= 0 or not s.time > 0:
            raise ModelError(f"{layer_type}: nonpositive sample rate")
        groups.setdefault(s.flops, []).append(s.rate)
    if len(groups) < 2:
        raise ModelError(f"{layer_type}: need samples at >= 2 distinct FLOPs values, got {len(groups)}")
    xs = sorted(groups)
    means = [sum(groups[x]) / len(groups[x]) for x in xs]
    weights = [len(groups[x]) for x in xs]
    fitted = pool_adjacent_violators(means, weights)
    return ThroughputCurve(layer_type, tuple((float(x), y) for x, y in zip(xs, fitted)), eta)


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 90
    dataset_size: int = 1_281_167
    delta_sync: float = 0.0


@dataclass(frozen=True)
class PerfModel:
    curves: Mapping[str, ThroughputCurve]
    bandwidth_avail: float
    k_base: int

    def __post_init__(self):
        if not self.bandwidth_avail > 0:
            raise ModelError("bandwidth_avail must be positive")

    def curve(self, layer_type: str) -> ThroughputCurve:
        try:
            return self.curves[layer_type]
        except KeyError:
            raise ModelError(f"no throughput curve for layer type {layer_type!r}") from None

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "k_base": self.k_base,
            "bandwidth_avail": self.bandwidth_avail,
            "curves": {t: c.to_dict() for t, c in sorted(self.curves.items())},
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "PerfModel":
        if doc.get("format_version") != FORMAT_VERSION:
            raise ModelError(f"unsupported model format_version {doc.get('format_version')!r}")
        try:
            curves = {
                t: ThroughputCurve(t, tuple((float(x), float(y)) for x, y in c["knots"]), float(c["eta"]))
                for t, c in doc["curves"].items()
            }
            return cls(curves, float(doc["bandwidth_avail"]), int(doc["k_base"]))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ModelError):
                raise
            raise ModelError(f"malformed model document: {exc!r}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PerfModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_perf_model(profiles: ProfileSet, k_base: int, fallback_bandwidth: float,
                   eta: float = DEFAULT_ETA) -> PerfModel:
    curves = {t: fit_throughput_curve(s, eta, t) for t, s in profiles.by_layer_type().items()}
    bw = effective_bandwidth(profiles.transfer_samples, fallback_bandwidth)
    return PerfModel(curves, bw, k_base)


def layer_compute_time(phase: PhaseLayer, k: int, model: PerfModel) -> float:
    flops = scale_flops(phase, k, model.k_base)
    return flops / model.curve(phase.layer_type).rate(flops)


def iteration_time(phases: Iterable[PhaseLayer], k: int, model: PerfModel) -> float:
    """Stall-free iteration time: the sum of per-phase compute times."""
    return sum(layer_compute_time(ph, k, model) for ph in phases)


def iterations_per_training(k: int, cfg: TrainingConfig) -> int:
    if k <= 0:
        raise ValueError(f"minibatch must be positive, got {k}")
    return -(-cfg.epochs * cfg.dataset_size // k)


def whole_training_time(phases: Iterable[PhaseLayer], k: int, model: PerfModel, cfg: TrainingConfig,
                        t_iter: float | None = None) -> float:
    """ceil(E*m/k) iterations, each costing compute plus the sync gap."""
    if t_iter is None:
        t_iter = iteration_time(phases, k, model)
    return iterations_per_training(k, cfg) * (t_iter + cfg.delta_sync)


def transfer_time(op: MemOp, gmap: GMAP, k: int, model: PerfModel, pin_set=()) -> float:
    if op.kind not in ("offload", "prefetch"):
        raise ModelError(f"transfer_time needs an offload or prefetch, got {op.kind}")
    if op.object_id in pin_set:
        return 0.0
    return gmap.size(op.object_id, k) / model.bandwidth_avail


@dataclass(frozen=True)
class IterationTiming:
    """Quantized per-phase compute durations and per-object sizes/transfer times."""

    k: int
    compute_ns: tuple[int, ...]
    size: Mapping[str, int]
    xfer_ns: Mapping[str, int]

    @property
    def cumulative_ns(self) -> list[int]:
        out, acc = [0], 0
        for d in self.compute_ns:
            acc += d
            out.append(acc)
        return out


def iteration_timing(gmap: GMAP, k: int, model: PerfModel) -> IterationTiming:
    compute = tuple(to_ns(layer_compute_time(ph, k, model)) for ph in gmap.phases)
    size = gmap.sizes(k)
    xfer = {oid: to_ns(size[oid] / model.bandwidth_avail) for oid in gmap.featuremaps}
    return IterationTiming(k, compute, size, xfer)
