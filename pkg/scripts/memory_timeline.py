"""Device-memory timelines for one iteration in each mode, as CSV."""

import argparse
from pathlib import Path

from swapsched.experiments import mode_comparison
from swapsched.model_ir import HardwareSpec, build_gmap, unfold_network
from swapsched.planner import fixed_overhead, plan_fixed_minibatch
from swapsched.simulator import SimConfig, simulate_iteration, write_memory_csv
from swapsched.synthetic import MIB, resnet_like, true_model

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--k", type=int, default=32)
ap.add_argument("--bandwidth", type=float, default=8e9)
ap.add_argument("--out-dir", default="timeline")
args = ap.parse_args()

r = mode_comparison(args.k, args.bandwidth)
spec = resnet_like()
gmap = build_gmap(unfold_network(spec), spec)
model = true_model(gmap, args.bandwidth, spec.k_base)
fixed = fixed_overhead(gmap, HardwareSpec(1, 64 * MIB))
plan = plan_fixed_minibatch(gmap, HardwareSpec(r.dynamic_budget, 64 * MIB), model, args.k)

out = Path(args.out_dir)
out.mkdir(parents=True, exist_ok=True)
runs = {
    "naive": ((), SimConfig(r.naive_budget, "naive", fixed)),
    "dynamic": (plan, SimConfig(r.dynamic_budget, "dynamic", fixed)),
    "resident": ((), SimConfig(r.resident_footprint, "resident", fixed)),
}
for mode, (pins, cfg) in runs.items():
    _, summary = simulate_iteration(gmap, args.k, pins, model, cfg)
    write_memory_csv(out / f"memory_{mode}.csv", summary)
    print(f"{mode}: {len(summary.mem_timeseries)} points, peak {summary.peak_mem / MIB:.0f} MiB")
