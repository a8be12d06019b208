"""Largest entrywise gap between rederived and verbatim gains on a random scalar instance,
with subsets of the coefficients set to zero.

    python3 scripts/mode_agreement.py --seed 3
"""

import argparse

import numpy as np

from slqgame import coefficients as co
from slqgame.model import TimeGrid, constant_spec
from slqgame.riccati import solve_leader_riccati

ZEROINGS = [(), ("C",), ("D1",), ("C", "D1"), ("C", "D1", "B2"), ("C", "D1", "B2", "D2"),
            ("B1",), ("C", "D1", "B2", "B1"), ("C", "D1", "B2", "D2", "B1")]


def gains(spec, grid, mode):
    lead = solve_leader_riccati(spec, grid, mode)
    t = grid.times
    v = co.spec_values(spec, t)
    fd = co.follower_blocks(v, lead.P1, t)
    aug = co.augmented_blocks(v, fd, spec.G2, spec.x0, mode)
    return lead, co.build_gains(co.bar_blocks(aug, v["N2"]), aug, lead.P1c, lead.P2c, mode)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--steps", type=int, default=50)
    a = ap.parse_args()
    r = np.random.default_rng(a.seed)
    base = dict(A=r.uniform(-.5, .5), B1=r.uniform(.5, 1), B2=r.uniform(.2, .8), C=r.uniform(.1, .4),
                D1=r.uniform(.1, .3), D2=r.uniform(.1, .4), Q1=1.0, G1=0.5, Q2=0.7, G2=0.3, N1=1.0, N2=1.2, x0=[1.0])
    grid = TimeGrid(1.0, a.steps)
    print("zeroed,P1c_gap," + ",".join(f"Sigma{k}" for k in range(1, 13)))
    for zero in ZEROINGS:
        kw = dict(base)
        kw.update({k: 0.0 for k in zero})
        spec = constant_spec(n=1, m1=1, m2=1, **kw)
        (la, ga), (lb, gb) = gains(spec, grid, "rederived"), gains(spec, grid, "verbatim")
        gaps = [np.abs(getattr(ga, f"Sigma{k}") - getattr(gb, f"Sigma{k}")).max() for k in range(1, 13)]
        print("+".join(zero) or "none", f"{np.abs(la.P1c - lb.P1c).max():.2e}",
              *(f"{g:.2e}" for g in gaps), sep=",")


if __name__ == "__main__":
    main()
