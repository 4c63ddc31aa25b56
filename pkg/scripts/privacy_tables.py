#!/usr/bin/env python3
"""Calibrated noise across privacy budgets, sketched vs unsketched.

For each target epsilon, calibrates the sketched mechanism's sigma_g and
the classical subsampled-Gaussian noise multiplier at the same (eps, delta),
then prints both and their ratio.  Defaults match the image-workload
schedule (q = 4/625, T = 500, b = 4e5); pass --T/--b for other schedules.
"""

import argparse

from fedsgm.accountant import DpPoint, calibrate_baseline_sigma, calibrate_sgm_sigma


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--eps", type=float, nargs="+", default=[2.75, 1.60, 0.42, 0.18])
    ap.add_argument("--delta", type=float, default=1e-5)
    ap.add_argument("--q", type=float, default=4 / 625)
    ap.add_argument("--T", type=int, default=500)
    ap.add_argument("--tau", type=float, default=1.0)
    ap.add_argument("--b", type=int, default=400_000)
    args = ap.parse_args()

    print(f"q = {args.q:g}, T = {args.T}, tau = {args.tau:g}, b = {args.b}, delta = {args.delta:g}")
    print(f"{'eps':>8}  {'sigma_g (sketched)':>20}  {'noise std (baseline)':>21}  {'ratio':>7}")
    for eps in args.eps:
        target = DpPoint(eps, args.delta)
        sigma = calibrate_sgm_sigma(target, q=args.q, T=args.T, tau=args.tau, b=args.b)
        baseline = calibrate_baseline_sigma(target, q=args.q, T=args.T) * args.tau
        print(f"{eps:>8.2f}  {sigma:>20.4f}  {baseline:>21.4f}  {sigma / baseline:>7.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
