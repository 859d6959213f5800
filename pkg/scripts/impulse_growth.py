"""Peak position error per follower after an impulse on the first follower, for every reference linear set."""

import argparse
import csv
import sys

import numpy as np

from cfcal.cf_models import load_param_file
from cfcal.experiments import impulse_peaks


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--vehicles", type=int, nargs="+", default=[3, 5, 8])
    ap.add_argument("--size", type=float, default=5.0)
    args = ap.parse_args()
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["method", "class", "vehicles", "strictly_increasing", "peaks"])
    for method, models in load_param_file().items():
        for vclass, k in models["Linear"].items():
            for n in args.vehicles:
                peaks = impulse_peaks(k, n, args.steps, args.size)
                w.writerow([method, vclass, n, bool(np.all(np.diff(peaks) > 0)),
                            " ".join(f"{p:.4g}" for p in peaks)])


if __name__ == "__main__":
    main()
