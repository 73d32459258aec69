"""Synthetic networks, ground-truth throughput and generated profiles.

Ground truth for a layer type is a saturating rate curve
``rate(f) = peak * f / (f + half)``: small kernels underuse the device and
large ones approach ``peak``.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path

from .model_ir import (
    GMAP,
    HardwareSpec,
    LayerDecl,
    NetworkSpec,
    build_gmap,
    fill_backward_flops,
    unfold_network,
    write_json,
)
from .perf_model import PerfModel, ThroughputCurve
from .profiles import (
    ComputeSample,
    ProfileSet,
    TransferSample,
    profile_grid,
    scale_flops,
    write_compute_csv,
    write_transfer_csv,
)

KIB = 1024
MIB = 1024 * KIB
GIB = 1024 * MIB


@dataclass(frozen=True)
class TrueCurve:
    peak: float  # FLOP/s
    half: float  # FLOPs at which half the peak is reached

    def rate(self, flops: float) -> float:
        return self.peak * flops / (flops + self.half)

    def time(self, flops: float) -> float:
        return (flops + self.half) / self.peak


DEFAULT_CURVES = {
    "conv": TrueCurve(6e12, 4e9),
    "fc": TrueCurve(4e12, 2e9),
    "bn": TrueCurve(3e11, 2e8),
    "activation": TrueCurve(3e11, 2e8),
    "pooling": TrueCurve(3e11, 2e8),
}


def random_network(rng: random.Random, num_layers: int, k_base: int = 8, name: str = "random") -> NetworkSpec:
    layers = []
    for i in range(1, num_layers + 1):
        ltype = rng.choice(("conv", "bn", "activation", "pooling", "fc", "other"))
        heavy = ltype in ("conv", "fc")
        flops = rng.randint(10**6, 10**9) * (50 if heavy else 1)
        fm = rng.randint(KIB, 4 * MIB)
        layers.append(LayerDecl(
            index=i,
            layer_type=ltype,
            flops_fwd_base=flops,
            featuremap_bytes_base=fm,
            param_bytes=rng.randint(0, 2 * MIB) if heavy else 0,
            grad_bytes=rng.randint(0, 2 * MIB) if heavy else 0,
            workspace_bytes_base=rng.choice((0, rng.randint(KIB, MIB))) if heavy else 0,
            tag=f"t{rng.randint(0, 2)}" if ltype == "other" else None,
        ))
    return fill_backward_flops(NetworkSpec(name, k_base, tuple(layers)))


def resnet_like(stages=(3, 4, 6, 3), k_base: int = 8, name: str = "resnet-like") -> NetworkSpec:
    """conv/bn/activation blocks, a pooling layer between stages, fc head.

    Spatial size halves per stage while channels double, so per-image
    featuremaps shrink by 2x per stage and conv FLOPs stay roughly level.
    """
    layers: list[LayerDecl] = []

    def add(ltype, flops, fm, params=0, ws=0):
        layers.append(LayerDecl(len(layers) + 1, ltype, flops * k_base, fm * k_base,
                                params, params, ws * k_base))

    fm = 3 * MIB  # per image, first stage
    for s, blocks in enumerate(stages):
        channels = 64 << s
        for _ in range(blocks):
            add("conv", 900_000_000, fm, params=channels * channels * 36, ws=fm // 4)
            add("bn", 4_000_000, fm, params=channels * 8)
            add("activation", 2_000_000, fm)
        if s + 1 < len(stages):
            add("pooling", 2_000_000, fm // 2)
            fm //= 2
    add("fc", 4_000_000, 4 * KIB, params=2048 * 1000 * 4)
    return fill_backward_flops(NetworkSpec(name, k_base, tuple(layers)))


def true_model(gmap_or_types, bandwidth: float, k_base: int, curves=None, eta: float = 1.0,
               points: int = 48) -> PerfModel:
    """A PerfModel sampling the ground-truth curves on a log grid of FLOPs."""
    curves = curves or DEFAULT_CURVES
    if isinstance(gmap_or_types, GMAP):
        types = {ph.layer_type for ph in gmap_or_types.phases}
    else:
        types = set(gmap_or_types)
    fitted = {}
    for t in sorted(types):
        truth = curves.get(t.split(":")[0], curves["bn"])
        xs = [10 ** (4 + 10 * i / (points - 1)) for i in range(points)]
        fitted[t] = ThroughputCurve(t, tuple((x, truth.rate(x)) for x in xs), eta)
    return PerfModel(fitted, bandwidth, k_base)


def synthetic_profiles(spec: NetworkSpec, ks, bandwidth: float, rng: random.Random,
                       curves=None, noise: float = 0.02) -> ProfileSet:
    """Noisy compute and transfer samples at each minibatch in ``ks``."""
    curves = curves or DEFAULT_CURVES
    phases = unfold_network(spec)
    gmap = build_gmap(phases, spec)
    compute, transfer = [], []
    for k in ks:
        for ph in phases:
            flops = scale_flops(ph, k, spec.k_base)
            truth = curves.get(ph.layer_type.split(":")[0], curves["bn"])
            t = truth.time(flops) * (1 + noise * rng.uniform(-1, 1))
            compute.append(ComputeSample(k, ph.j, ph.layer_type, flops, t))
        for op in gmap.ops:
            if op.kind in ("offload", "prefetch"):
                nbytes = gmap.size(op.object_id, k)
                if nbytes:
                    t = nbytes / bandwidth * (1 + noise * rng.uniform(-1, 1))
                    transfer.append(TransferSample(k, op.sequence_no, nbytes, t))
    return ProfileSet(tuple(compute), tuple(transfer))


def write_fixture(out_dir, seed: int, num_layers: int | None = None, resnet: bool = False,
                  bandwidth: float = 8e9, budget: int = 2 * GIB, delta_sync: float = 0.05) -> dict:
    """Write network.json, hardware.json and profile CSVs; returns their paths."""
    rng = random.Random(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resnet:
        spec = resnet_like()
    else:
        spec = random_network(rng, num_layers or rng.randint(4, 24))
    hw = HardwareSpec(budget, m_others=64 * MIB, delta_sync=delta_sync, pcie_nominal=12e9)
    ks = profile_grid(4 * spec.k_base)
    prof = synthetic_profiles(spec, ks, bandwidth, rng)
    paths = {
        "network": out / "network.json",
        "hardware": out / "hardware.json",
        "compute": out / "compute.csv",
        "transfer": out / "transfer.csv",
    }
    write_json(paths["network"], spec.to_dict())
    write_json(paths["hardware"], hw.to_dict())
    write_compute_csv(paths["compute"], prof.compute_samples)
    write_transfer_csv(paths["transfer"], prof.transfer_samples)
    return paths
