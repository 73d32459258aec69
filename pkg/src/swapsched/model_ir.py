"""Network, hardware and memory-access-pattern data model.

A network of N layers is unfolded into 2N propagation phases (forward
layers 1..N, then backward layers N..1).  The global memory-object access
pattern (GMAP) is the ordered list of allocate / release / offload /
prefetch operations one iteration performs.  Its structure does not depend
on the minibatch size; only object sizes do.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping

FORMAT_VERSION = 1

# Device allocator granule; every scaled size is rounded up to it.
ALIGNMENT = 512

LAYER_TYPES = ("conv", "bn", "activation", "pooling", "fc", "other")

# Tie-break inside a phase: allocate < prefetch < (compute) < offload < release.
_KIND_RANK = {"allocate": 0, "prefetch": 1, "offload": 2, "release": 3}
PRE_COMPUTE = frozenset({"allocate", "prefetch"})
POST_COMPUTE = frozenset({"offload", "release"})


class SpecError(ValueError):
    """Malformed or inconsistent network / hardware description."""


@dataclass(frozen=True)
class LayerDecl:
    index: int
    layer_type: str
    flops_fwd_base: int
    featuremap_bytes_base: int
    param_bytes: int = 0
    grad_bytes: int = 0
    workspace_bytes_base: int = 0
    flops_bwd_base: int | None = None
    tag: str | None = None

    @property
    def type_key(self) -> str:
        """Curve lookup key; tagged ``other`` layers get their own curve."""
        if self.layer_type == "other" and self.tag:
            return f"other:{self.tag}"
        return self.layer_type


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    k_base: int
    layers: tuple[LayerDecl, ...]
    backward_flops_factor: float = 2.0

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def __post_init__(self):
        if self.k_base < 1:
            raise SpecError(f"k_base must be >= 1, got {self.k_base}")
        if not self.layers:
            raise SpecError("network has no layers")
        if self.backward_flops_factor <= 0:
            raise SpecError("backward_flops_factor must be positive")
        seen = [layer.index for layer in self.layers]
        dupes = sorted({i for i in seen if seen.count(i) > 1})
        if dupes:
            raise SpecError(f"duplicate layer indices: {dupes}")
        if sorted(seen) != list(range(1, len(seen) + 1)):
            raise SpecError(f"layer indices must be 1..{len(seen)}, got {sorted(seen)}")
        for layer in self.layers:
            _check_layer(layer)
        # keep layers in index order regardless of input order
        object.__setattr__(self, "layers", tuple(sorted(self.layers, key=lambda l: l.index)))

    def layer(self, index: int) -> LayerDecl:
        return self.layers[index - 1]

    @property
    def resident_bytes(self) -> int:
        """Parameters plus gradients; permanently on the device."""
        return sum(l.param_bytes + l.grad_bytes for l in self.layers)

    def to_dict(self) -> dict:
        layers = []
        for l in self.layers:
            d = {
                "index": l.index,
                "layer_type": l.layer_type,
                "flops_fwd_base": l.flops_fwd_base,
                "flops_bwd_base": l.flops_bwd_base,
                "featuremap_bytes_base": l.featuremap_bytes_base,
                "param_bytes": l.param_bytes,
                "grad_bytes": l.grad_bytes,
                "workspace_bytes_base": l.workspace_bytes_base,
            }
            if l.tag is not None:
                d["tag"] = l.tag
            layers.append(d)
        return {
            "format_version": FORMAT_VERSION,
            "name": self.name,
            "num_layers": self.num_layers,
            "k_base": self.k_base,
            "backward_flops_factor": self.backward_flops_factor,
            "layers": layers,
        }


def _check_layer(layer: LayerDecl) -> None:
    if layer.layer_type not in LAYER_TYPES:
        raise SpecError(f"layer {layer.index}: unknown layer_type {layer.layer_type!r}")
    if layer.layer_type == "other" and not layer.tag:
        raise SpecError(f"layer {layer.index}: layer_type 'other' needs a tag")
    if layer.flops_fwd_base <= 0:
        raise SpecError(f"layer {layer.index}: forward FLOPs must be positive")
    if layer.flops_bwd_base is not None and layer.flops_bwd_base <= 0:
        raise SpecError(f"layer {layer.index}: backward FLOPs must be positive")
    for name in ("featuremap_bytes_base", "param_bytes", "grad_bytes", "workspace_bytes_base"):
        if getattr(layer, name) < 0:
            raise SpecError(f"layer {layer.index}: {name} must be nonnegative")


@dataclass(frozen=True)
class HardwareSpec:
    memory_budget: int
    m_others: int = 0
    delta_sync: float = 0.0
    pcie_nominal: float = 12e9

    def __post_init__(self):
        if self.memory_budget <= 0:
            raise SpecError("memory_budget must be positive")
        if self.m_others < 0 or self.delta_sync < 0:
            raise SpecError("m_others and delta_sync must be nonnegative")
        if self.pcie_nominal <= 0:
            raise SpecError("pcie_nominal must be positive")

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "memory_budget": self.memory_budget,
            "m_others": self.m_others,
            "delta_sync": self.delta_sync,
            "pcie_nominal": self.pcie_nominal,
        }


def _int_field(d: Mapping, key: str, where: str, default=None) -> int:
    if key not in d:
        if default is not None:
            return default
        raise SpecError(f"{where}: missing field {key!r}")
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or v != int(v):
        raise SpecError(f"{where}: field {key!r} must be an integer, got {v!r}")
    return int(v)


def _check_version(doc: Mapping, what: str) -> None:
    if not isinstance(doc, Mapping):
        raise SpecError(f"{what}: top level must be an object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise SpecError(f"{what}: unsupported format_version {doc.get('format_version')!r}")


def network_from_dict(doc: Mapping) -> NetworkSpec:
    _check_version(doc, "network spec")
    raw_layers = doc.get("layers")
    if not isinstance(raw_layers, list):
        raise SpecError("network spec: 'layers' must be a list")
    layers = []
    for pos, raw in enumerate(raw_layers):
        where = f"layer #{pos}"
        if not isinstance(raw, Mapping):
            raise SpecError(f"{where}: must be an object")
        ltype = raw.get("layer_type")
        if not isinstance(ltype, str):
            raise SpecError(f"{where}: missing layer_type")
        bwd = raw.get("flops_bwd_base")
        layers.append(
            LayerDecl(
                index=_int_field(raw, "index", where),
                layer_type=ltype,
                flops_fwd_base=_int_field(raw, "flops_fwd_base", where),
                flops_bwd_base=None if bwd is None else _int_field(raw, "flops_bwd_base", where),
                featuremap_bytes_base=_int_field(raw, "featuremap_bytes_base", where),
                param_bytes=_int_field(raw, "param_bytes", where, 0),
                grad_bytes=_int_field(raw, "grad_bytes", where, 0),
                workspace_bytes_base=_int_field(raw, "workspace_bytes_base", where, 0),
                tag=raw.get("tag"),
            )
        )
    factor = doc.get("backward_flops_factor", 2.0)
    if isinstance(factor, bool) or not isinstance(factor, (int, float)):
        raise SpecError("network spec: backward_flops_factor must be a number")
    spec = NetworkSpec(
        name=str(doc.get("name", "network")),
        k_base=_int_field(doc, "k_base", "network spec"),
        layers=tuple(layers),
        backward_flops_factor=float(factor),
    )
    if "num_layers" in doc and _int_field(doc, "num_layers", "network spec") != spec.num_layers:
        raise SpecError("network spec: num_layers does not match the layer list")
    return fill_backward_flops(spec)


def fill_backward_flops(spec: NetworkSpec) -> NetworkSpec:
    """Fill missing backward FLOPs as ``backward_flops_factor * forward``."""
    filled = []
    for l in spec.layers:
        if l.flops_bwd_base is None:
            bwd = math.ceil(Fraction(spec.backward_flops_factor) * l.flops_fwd_base)
            l = LayerDecl(**{**l.__dict__, "flops_bwd_base": bwd})
        filled.append(l)
    return NetworkSpec(spec.name, spec.k_base, tuple(filled), spec.backward_flops_factor)


def _load_json(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: malformed JSON ({exc})") from exc


def parse_network_spec(path) -> NetworkSpec:
    return network_from_dict(_load_json(path))


def hardware_from_dict(doc: Mapping) -> HardwareSpec:
    _check_version(doc, "hardware spec")
    try:
        return HardwareSpec(
            memory_budget=_int_field(doc, "memory_budget", "hardware spec"),
            m_others=_int_field(doc, "m_others", "hardware spec", 0),
            delta_sync=float(doc.get("delta_sync", 0.0)),
            pcie_nominal=float(doc.get("pcie_nominal", 12e9)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, SpecError):
            raise
        raise SpecError(f"hardware spec: {exc}") from exc


def parse_hardware_spec(path) -> HardwareSpec:
    return hardware_from_dict(_load_json(path))


def write_json(path, doc: Mapping) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# phases and memory objects


@dataclass(frozen=True)
class PhaseLayer:
    j: int
    source_layer: int
    direction: str  # "forward" | "backward"
    flops_base: int
    layer_type: str


def unfold_network(spec: NetworkSpec) -> list[PhaseLayer]:
    n = spec.num_layers
    phases = []
    for j in range(1, 2 * n + 1):
        if j <= n:
            layer, direction = spec.layer(j), "forward"
            flops = layer.flops_fwd_base
        else:
            layer, direction = spec.layer(2 * n + 1 - j), "backward"
            flops = layer.flops_bwd_base
            if flops is None:
                flops = math.ceil(Fraction(spec.backward_flops_factor) * layer.flops_fwd_base)
        phases.append(PhaseLayer(j, layer.index, direction, flops, layer.type_key))
    return phases


@dataclass(frozen=True)
class MemObject:
    object_id: str
    kind: str  # featuremap | workspace | param | grad
    size_base: int
    scales_with_minibatch: bool
    producer_phase: int
    last_use_phase: int


@dataclass(frozen=True)
class MemOp:
    kind: str  # allocate | release | offload | prefetch
    object_id: str
    phase: int
    sequence_no: int


def scale_size(obj: MemObject, k: int, k_base: int, granule: int = ALIGNMENT) -> int:
    """Bytes occupied by ``obj`` at minibatch ``k``, rounded up to the granule."""
    if k <= 0:
        raise ValueError(f"minibatch must be positive, got {k}")
    return math.ceil(scaled_bytes_exact(obj, k, k_base) / granule) * granule


def scaled_bytes_exact(obj: MemObject, k: int, k_base: int) -> Fraction:
    if k <= 0:
        raise ValueError(f"minibatch must be positive, got {k}")
    if obj.scales_with_minibatch:
        return Fraction(k, k_base) * obj.size_base
    return Fraction(obj.size_base)


@dataclass(frozen=True)
class GMAP:
    ops: tuple[MemOp, ...]
    objects: Mapping[str, MemObject]
    phases: tuple[PhaseLayer, ...]
    k_base: int
    resident_bytes: int = 0
    granule: int = ALIGNMENT

    @property
    def num_phases(self) -> int:
        return len(self.phases)

    def size(self, object_id: str, k: int) -> int:
        return scale_size(self.objects[object_id], k, self.k_base, self.granule)

    def sizes(self, k: int) -> dict[str, int]:
        return {oid: self.size(oid, k) for oid in self.objects}

    def phase_ops(self, j: int) -> list[MemOp]:
        return [op for op in self.ops if op.phase == j]

    def seq_allocate(self, j: int) -> list[MemOp]:
        return [op for op in self.ops if op.phase == j and op.kind in PRE_COMPUTE]

    def seq_release(self, j: int) -> list[MemOp]:
        return [op for op in self.ops if op.phase == j and op.kind in POST_COMPUTE]

    @property
    def featuremaps(self) -> list[str]:
        return [oid for oid, o in self.objects.items() if o.kind == "featuremap"]

    def structure(self) -> tuple:
        """Minibatch-independent skeleton (kinds, objects, phases, order)."""
        return tuple((op.kind, op.object_id, op.phase, op.sequence_no) for op in self.ops)


def build_gmap(phases: Iterable[PhaseLayer], spec: NetworkSpec) -> GMAP:
    phases = tuple(phases)
    n = spec.num_layers
    if len(phases) != 2 * n:
        raise SpecError(f"expected {2 * n} phases, got {len(phases)}")
    objects: dict[str, MemObject] = {}
    raw: list[tuple[int, int, str, str]] = []  # (phase, kind rank, object, kind)

    def add(kind: str, oid: str, j: int) -> None:
        raw.append((j, _KIND_RANK[kind], oid, kind))

    for ph in phases:
        layer = spec.layer(ph.source_layer)
        i = layer.index
        if ph.direction == "forward":
            fm, ws = f"fm{i}", f"wsf{i}"
            consumer = 2 * n + 1 - i
            objects[fm] = MemObject(fm, "featuremap", layer.featuremap_bytes_base, True, ph.j, consumer)
            objects[ws] = MemObject(ws, "workspace", layer.workspace_bytes_base, True, ph.j, ph.j)
            add("allocate", fm, ph.j)
            add("allocate", ws, ph.j)
            add("offload", fm, ph.j)
            add("release", ws, ph.j)
        else:
            fm, ws = f"fm{i}", f"wsb{i}"
            objects[ws] = MemObject(ws, "workspace", layer.workspace_bytes_base, True, ph.j, ph.j)
            add("allocate", ws, ph.j)
            add("prefetch", fm, ph.j)
            add("release", fm, ph.j)
            add("release", ws, ph.j)
    for layer in spec.layers:
        if layer.param_bytes:
            oid = f"param{layer.index}"
            objects[oid] = MemObject(oid, "param", layer.param_bytes, False, 1, 2 * n)
        if layer.grad_bytes:
            oid = f"grad{layer.index}"
            objects[oid] = MemObject(oid, "grad", layer.grad_bytes, False, 1, 2 * n)
    for o in objects.values():
        if o.producer_phase > o.last_use_phase:
            raise SpecError(f"{o.object_id}: produced after its last use")
    raw.sort()
    ops = tuple(MemOp(kind, oid, j, seq) for seq, (j, _, oid, kind) in enumerate(raw))
    return GMAP(ops, objects, phases, spec.k_base, spec.resident_bytes)


def signed_delta(op: MemOp, size: int) -> int:
    return size if op.kind in PRE_COMPUTE else -size


@dataclass(frozen=True)
class PeakInfo:
    peak_bytes: int
    op_index: int  # index into gmap.ops where the peak is first reached (-1 if empty)
    seq_peak: range  # ops of the peak's phase up to and including the peak op
    live: frozenset[str]  # objects resident at the peak

    def __iter__(self):
        # allows ``peak, seq = peak_layerwise_memory(...)``
        return iter((self.peak_bytes, self.seq_peak))


def peak_layerwise_memory(gmap: GMAP, k: int, pin_set: Iterable[str] = ()) -> PeakInfo:
    """Maximum running sum of live bytes walking the GMAP at minibatch ``k``.

    Non-pinned featuremaps leave the device at their offload and return at
    their prefetch; pinned ones stay from allocate to release.  Parameters
    and gradients are excluded (fixed overhead).
    """
    pins = frozenset(pin_set)
    sizes = gmap.sizes(k)
    running, peak, peak_at = 0, 0, -1
    live: set[str] = set()
    peak_live: frozenset[str] = frozenset()
    for idx, op in enumerate(gmap.ops):
        if op.object_id in pins and op.kind in ("offload", "prefetch"):
            continue
        running += signed_delta(op, sizes[op.object_id])
        if op.kind in PRE_COMPUTE:
            live.add(op.object_id)
        else:
            live.discard(op.object_id)
        if running > peak:
            peak, peak_at, peak_live = running, idx, frozenset(live)
    if peak_at < 0:
        return PeakInfo(0, -1, range(0), frozenset())
    phase = gmap.ops[peak_at].phase
    start = peak_at
    while start > 0 and gmap.ops[start - 1].phase == phase:
        start -= 1
    return PeakInfo(peak, peak_at, range(start, peak_at + 1), peak_live)


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    seq_nos: tuple[int, ...] = ()

    def __str__(self) -> str:
        where = f" (ops {', '.join(map(str, self.seq_nos))})" if self.seq_nos else ""
        return f"[{self.code}] {self.message}{where}"


_ORDER = ("allocate", "offload", "prefetch", "release")


def validate_gmap(gmap: GMAP) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    nphase = gmap.num_phases
    by_obj: dict[str, list[MemOp]] = {}
    prev_seq = None
    for op in gmap.ops:
        if op.kind not in _KIND_RANK:
            diags.append(Diagnostic("kind", f"unknown op kind {op.kind!r}", (op.sequence_no,)))
            continue
        if not 1 <= op.phase <= nphase:
            diags.append(Diagnostic("phase", f"{op.object_id}: phase {op.phase} outside 1..{nphase}", (op.sequence_no,)))
        if prev_seq is not None and op.sequence_no <= prev_seq:
            diags.append(Diagnostic("sequence", "sequence numbers not strictly increasing", (prev_seq, op.sequence_no)))
        prev_seq = op.sequence_no
        if op.object_id not in gmap.objects:
            diags.append(Diagnostic("object", f"unknown object {op.object_id!r}", (op.sequence_no,)))
            continue
        by_obj.setdefault(op.object_id, []).append(op)

    for oid, obj in gmap.objects.items():
        ops = by_obj.get(oid, [])
        if obj.kind in ("param", "grad"):
            if ops:
                diags.append(Diagnostic("resident", f"{oid}: resident {obj.kind} must not appear in the GMAP",
                                        tuple(o.sequence_no for o in ops)))
            continue
        counts = {kind: [o for o in ops if o.kind == kind] for kind in _ORDER}
        for kind in ("allocate", "release"):
            if len(counts[kind]) != 1:
                diags.append(Diagnostic("multiplicity", f"{oid}: expected exactly one {kind}, found {len(counts[kind])}",
                                        tuple(o.sequence_no for o in counts[kind])))
        swaps = counts["offload"] + counts["prefetch"]
        if obj.kind != "featuremap" and swaps:
            diags.append(Diagnostic("swap-kind", f"{oid}: only featuremaps may be offloaded/prefetched",
                                    tuple(o.sequence_no for o in swaps)))
        if obj.kind == "featuremap" and (len(counts["offload"]) > 1 or len(counts["prefetch"]) > 1
                                         or len(counts["offload"]) != len(counts["prefetch"])):
            diags.append(Diagnostic("multiplicity", f"{oid}: offload/prefetch must come as one pair",
                                    tuple(o.sequence_no for o in swaps)))
        seqs = [o.sequence_no for kind in _ORDER for o in counts[kind]]
        if seqs != sorted(seqs):
            diags.append(Diagnostic("ordering", f"{oid}: ops must run allocate < offload < prefetch < release",
                                    tuple(sorted(seqs))))
        if obj.producer_phase > obj.last_use_phase:
            diags.append(Diagnostic("lifetime", f"{oid}: producer phase after last use"))
        if counts["allocate"] and counts["allocate"][0].phase != obj.producer_phase:
            diags.append(Diagnostic("lifetime", f"{oid}: allocated outside its producer phase",
                                    (counts["allocate"][0].sequence_no,)))
        if counts["release"] and counts["release"][0].phase != obj.last_use_phase:
            diags.append(Diagnostic("lifetime", f"{oid}: released outside its last-use phase",
                                    (counts["release"][0].sequence_no,)))
    return diags


def net_delta(gmap: GMAP, k: int) -> int:
    sizes = gmap.sizes(k)
    return sum(signed_delta(op, sizes[op.object_id]) for op in gmap.ops)


def gmap_to_dict(gmap: GMAP) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "k_base": gmap.k_base,
        "resident_bytes": gmap.resident_bytes,
        "granule": gmap.granule,
        "phases": [[p.j, p.source_layer, p.direction, p.flops_base, p.layer_type] for p in gmap.phases],
        "objects": {
            o.object_id: [o.kind, o.size_base, o.scales_with_minibatch, o.producer_phase, o.last_use_phase]
            for o in gmap.objects.values()
        },
        "ops": [[op.sequence_no, op.kind, op.object_id, op.phase] for op in gmap.ops],
    }


def gmap_from_dict(doc: Mapping) -> GMAP:
    """Inverse of ``gmap_to_dict``; no validation beyond shape."""
    _check_version(doc, "gmap")
    try:
        phases = tuple(PhaseLayer(int(j), int(s), d, int(f), t) for j, s, d, f, t in doc["phases"])
        objects = {oid: MemObject(oid, kind, int(size), bool(sc), int(p), int(l))
                   for oid, (kind, size, sc, p, l) in doc["objects"].items()}
        ops = tuple(MemOp(kind, oid, int(j), int(seq)) for seq, kind, oid, j in doc["ops"])
        return GMAP(ops, objects, phases, int(doc["k_base"]), int(doc.get("resident_bytes", 0)),
                    int(doc.get("granule", ALIGNMENT)))
    except (KeyError, TypeError, ValueError) as exc:
        raise SpecError(f"gmap: malformed document ({exc!r})") from exc
