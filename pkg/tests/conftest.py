import random

import pytest

from swapsched.model_ir import GMAP, LayerDecl, MemObject, MemOp, NetworkSpec, PhaseLayer, build_gmap, unfold_network
from swapsched.perf_model import PerfModel, ThroughputCurve


def net(*layers, k_base=8, name="toy", factor=2.0):
    """layers: (type, flops, fm_bytes[, ws_bytes[, params]])"""
    decls = []
    for i, spec in enumerate(layers, start=1):
        ltype, flops, fm, ws, params = (*spec, 0, 0)[:5]
        decls.append(LayerDecl(i, ltype, flops, fm, params, params, ws,
                               tag="x" if ltype == "other" else None))
    return NetworkSpec(name, k_base, tuple(decls), factor)


def gmap_of(spec):
    return build_gmap(unfold_network(spec), spec)


def flat_model(types=("conv", "bn", "activation", "pooling", "fc", "other:x"), rate=1e12,
               bandwidth=1e9, k_base=8):
    return PerfModel({t: ThroughputCurve.constant(t, rate) for t in types}, bandwidth, k_base)


def hand_gmap(op_specs, sizes, num_phases, granule=1, kinds=None):
    """GMAP from (kind, object, phase) triples; sizes at k_base=1."""
    kinds = kinds or {}
    objects = {o: MemObject(o, kinds.get(o, "featuremap"), s, True, 1, num_phases) for o, s in sizes.items()}
    phases = tuple(PhaseLayer(j, 1, "forward", 1, "conv") for j in range(1, num_phases + 1))
    ops = tuple(MemOp(kind, o, j, seq) for seq, (kind, o, j) in enumerate(op_specs))
    return GMAP(ops, objects, phases, 1, 0, granule)


@pytest.fixture
def rng():
    return random.Random(1234)


def random_instance(rng, n_range=(2, 20), factor_range=(1.5, 8.0), bw_range=(1e9, 6e10)):
    """A random (gmap, hardware, model) triple whose k_max is modest."""
    from swapsched.model_ir import HardwareSpec, peak_layerwise_memory
    from swapsched.synthetic import MIB, random_network, true_model

    spec = random_network(rng, rng.randint(*n_range))
    g = gmap_of(spec)
    bw = bw_range[0] * (bw_range[1] / bw_range[0]) ** rng.random()
    model = true_model(g, bw, spec.k_base)
    m_others = rng.randint(0, 64) * MIB
    fixed = m_others + g.resident_bytes
    active = peak_layerwise_memory(g, spec.k_base).peak_bytes
    budget = fixed + int(active * rng.uniform(*factor_range))
    return g, HardwareSpec(budget, m_others, delta_sync=0.01), model


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
