"""k_max versus the chosen k* across budgets and bandwidths."""

import argparse

from swapsched.model_ir import HardwareSpec, build_gmap, unfold_network
from swapsched.perf_model import TrainingConfig, whole_training_time
from swapsched.planner import find_efficiency_optimal_minibatch
from swapsched.synthetic import GIB, MIB, resnet_like, true_model

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--budgets-gib", default="2,3,4")
ap.add_argument("--bandwidths", default="4e9,8e9,16e9")
ap.add_argument("--delta-sync", type=float, default=0.05)
ap.add_argument("--step", type=int, default=1)
args = ap.parse_args()

spec = resnet_like()
gmap = build_gmap(unfold_network(spec), spec)
cfg = TrainingConfig(delta_sync=args.delta_sync)
print(f"{'budget':>7} {'bw GB/s':>8} {'k_max':>6} {'k*':>6} {'pins':>5} {'whole h (k*)':>13} {'whole h (k_base)':>17}")
for b in args.budgets_gib.split(","):
    for bw in args.bandwidths.split(","):
        model = true_model(gmap, float(bw), spec.k_base)
        hw = HardwareSpec(int(float(b) * GIB), 64 * MIB, args.delta_sync)
        plan = find_efficiency_optimal_minibatch(gmap, hw, model, cfg, step=args.step)
        base = whole_training_time(gmap.phases, spec.k_base, model, cfg) / 3600
        if not plan.feasible:
            print(f"{b:>7} {float(bw) / 1e9:>8.0f} {'-':>6} {'-':>6} {'-':>5} {'infeasible':>13} {base:>17.1f}")
            continue
        print(f"{b:>7} {float(bw) / 1e9:>8.0f} {plan.k_max:>6} {plan.k_star:>6} {len(plan.pin_set):>5} "
              f"{plan.predicted_whole_time / 3600:>13.1f} {base:>17.1f}")
