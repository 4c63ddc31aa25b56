#!/usr/bin/env python3
"""How the sketch dimension buys down noise at a fixed privacy budget.

At fixed (eps, delta, q, T, tau), calibrates sigma_g for a geometric grid of
sketch dimensions b and prints the required noise next to the compression
factor d/b.  sigma_g falls monotonically as b grows; the unsketched baseline
noise at the same budget is printed last for comparison.
"""

import argparse

from fedsgm.accountant import DpPoint, calibrate_baseline_sigma, calibrate_sgm_sigma


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--eps", type=float, default=1.60)
    ap.add_argument("--delta", type=float, default=1e-5)
    ap.add_argument("--q", type=float, default=4 / 625)
    ap.add_argument("--T", type=int, default=500)
    ap.add_argument("--tau", type=float, default=1.0)
    ap.add_argument("--d", type=int, default=400_000, help="ambient dimension, for the compression column")
    ap.add_argument("--b", type=int, nargs="+", default=[4_000, 40_000, 400_000, 4_000_000])
    args = ap.parse_args()

    target = DpPoint(args.eps, args.delta)
    print(f"eps = {args.eps:g}, delta = {args.delta:g}, q = {args.q:g}, T = {args.T}, tau = {args.tau:g}")
    print(f"{'b':>10}  {'d/b':>8}  {'sigma_g':>9}")
    for b in args.b:
        sigma = calibrate_sgm_sigma(target, q=args.q, T=args.T, tau=args.tau, b=b)
        print(f"{b:>10}  {args.d / b:>8.1f}  {sigma:>9.4f}")
    baseline = calibrate_baseline_sigma(target, q=args.q, T=args.T) * args.tau
    print(f"{'baseline':>10}  {'1.0':>8}  {baseline:>9.4f}   (unsketched Gaussian)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
