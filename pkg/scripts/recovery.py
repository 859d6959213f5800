"""Generate noiseless platoons from a reference parameter set and recover it by MiC calibration."""

import argparse

from cfcal.experiments import recovery


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("kinds", nargs="*", default=["IDM", "FVD", "Linear"])
    ap.add_argument("--method", default="BiC", help="reference parameter block (MiC, MaC or BiC)")
    ap.add_argument("--budget", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data-seed", type=int, default=1)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    for kind in args.kinds:
        out = recovery(kind, args.method, args.budget, args.seed, args.data_seed, args.threads)
        print(f"{kind}: max_rel_error={out.max_rel_error:.2e} objective={out.objective:.2e} "
              f"evaluations={out.evaluations} seconds={out.seconds:.1f}")
        print(f"  truth    {out.truth}")
        print(f"  estimate {out.estimate}")


if __name__ == "__main__":
    main()
