"""Write the small synthetic data files referenced by the example configs in configs/."""

import argparse
from pathlib import Path

import numpy as np

from cfcal.cf_models import table4_spec
from cfcal.synthetic import staggered_noisy_platoons
from cfcal.trajectory_data import write_trajectories


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "configs" / "data"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)

    platoons = staggered_noisy_platoons(table4_spec("BiC", "IDM"), rng, n_platoons=3, noise_sigma=0.3)
    write_trajectories(out / "observed.csv", [t for p in platoons for t in [p.head, *p.followers]])
    write_trajectories(out / "lead.csv", [platoons[0].head])

    # raw positions with a lateral coordinate and one GPS-style spike
    n = 60
    lines = ["id,t_sec,position,y_utm"]
    for vid, x0, speed in (("A", 40.0, 9.0), ("B", 10.0, 8.5)):
        for i in range(n):
            x, y = x0 + speed * 0.1 * i + rng.normal(0, 0.02), 1.5 + rng.normal(0, 0.02)
            if vid == "A" and i == 30:
                y += 8.0
            lines.append(f"{vid},{0.1 * i:.1f},{x:.4f},{y:.4f}")
    (out / "raw.csv").write_text("\n".join(lines) + "\n")
    (out / "residuals.csv").write_text("n,t,r\n1,1,5.0\n2,10,-1.5\n")
    print(f"wrote demo data to {out}")


if __name__ == "__main__":
    main()
