"""Stationarity residuals of both players under step refinement on a preset.

    python3 scripts/refinement_study.py --preset scalar-smoke --paths 1000 --seeds 0 1
"""

import argparse

from slqgame.equilibrium import build_equilibrium
from slqgame.paths import generate_noise, simulate_closed_loop
from slqgame.scenario import preset
from slqgame.verify import follower_stationarity, leader_stationarity


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="scalar-smoke")
    ap.add_argument("--paths", type=int, default=1000)
    ap.add_argument("--steps", type=int, nargs="+", default=[125, 250, 500, 1000, 2000])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    a = ap.parse_args()
    print("seed,n_steps,dt,follower_rms,leader_rms")
    for seed in a.seeds:
        for N in a.steps:
            spec, grid = preset(a.preset, N)
            eq = build_equilibrium(spec, grid)
            traj = simulate_closed_loop(eq, generate_noise(seed, a.paths, grid))
            f = follower_stationarity(traj, eq).normalized_rms
            lead = leader_stationarity(traj, eq).normalized_rms
            print(f"{seed},{N},{grid.dt:.3g},{f:.4e},{lead:.4e}")


if __name__ == "__main__":
    main()
