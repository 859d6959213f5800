"""Compare the platoon error recursion with twin simulations on random linear-law platoons."""

import argparse
import time

from cfcal.experiments import twin_equivalence


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-vehicles", type=int, default=5)
    ap.add_argument("--max-steps", type=int, default=200)
    args = ap.parse_args()
    t = time.perf_counter()
    worst = twin_equivalence(args.trials, args.seed, args.max_vehicles, args.max_steps)
    print(f"trials={args.trials} worst_deviation={worst:.3e} seconds={time.perf_counter() - t:.2f}")


if __name__ == "__main__":
    main()
