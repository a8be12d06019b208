"""Brute-force follower oracle: paired cost gap of the best piecewise-linear law against u1*
as the grid is refined.

    python3 scripts/oracle_gap.py --steps 50 100 200
"""

import argparse

from slqgame.equilibrium import build_equilibrium
from slqgame.scenario import preset
from slqgame.verify import brute_force_follower_oracle


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="scalar-smoke")
    ap.add_argument("--steps", type=int, nargs="+", default=[50, 100, 200])
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    print("n_steps,J_star,J_opt,gap,paired_se,gap_in_se,evals,stalled")
    for N in a.steps:
        spec, grid = preset(a.preset, N)
        res = brute_force_follower_oracle(build_equilibrium(spec, grid), seed=a.seed)
        print(f"{N},{res.J_star.mean:.6g},{res.J_opt.mean:.6g},{res.gap_mean:.3e},{res.gap_se:.2e},"
              f"{res.gap_mean / res.gap_se:.2f},{res.n_evals},{res.stalled}")


if __name__ == "__main__":
    main()
