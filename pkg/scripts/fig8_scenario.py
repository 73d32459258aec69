"""naive vs dynamic vs resident on the ResNet-like network."""

import argparse

from swapsched.experiments import mode_comparison

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--k", type=int, default=32)
ap.add_argument("--bandwidth", type=float, default=8e9)
args = ap.parse_args()

r = mode_comparison(args.k, args.bandwidth)
mib = 1 << 20
print(f"{'mode':<9} {'budget MiB':>11} {'iter s':>10} {'stall s':>10}")
print(f"{'naive':<9} {r.naive_budget / mib:>11.0f} {r.naive_iter:>10.4f} {r.naive_stall:>10.4f}")
print(f"{'dynamic':<9} {r.dynamic_budget / mib:>11.0f} {r.dynamic_iter:>10.4f} {r.dynamic_stall:>10.4f}"
      f"   ({r.dynamic_pins} pinned)")
print(f"{'resident':<9} {r.resident_footprint / mib:>11.0f} {r.resident_iter:>10.4f} {0:>10.4f}")
