"""Compare both gain modes with the independent complete-information solve.

Run from the repository root (the oracle lives under tests/oracles):

    python3 scripts/complete_info_check.py
"""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from oracles import complete_info as ci  # noqa: E402
from slqgame.equilibrium import build_equilibrium  # noqa: E402
from slqgame.scenario import preset  # noqa: E402


def variants(spec):
    n = spec.n
    yield "base", spec
    yield "C=0", spec.with_(C=np.zeros((n, n)))
    yield "D2=0", spec.with_(D2=np.zeros((n, spec.m2)))
    yield "C=D2=0", spec.with_(C=np.zeros((n, n)), D2=np.zeros((n, spec.m2)))


def main():
    spec, grid = preset("complete-info", 500)
    print("variant,mode,max_u1_error,max_u2_error")
    for name, s in variants(spec):
        sol = ci.solve(s, grid.times)
        Xb, u1, u2 = ci.mean_path(sol, augmented=True)
        z = np.zeros(2 * s.n)
        for mode in ("rederived", "verbatim"):
            eq = build_equilibrium(s, grid, mode)
            U1 = np.array([eq.u1_law.at_step(i, Xh=Xb[i], P3h=z, Q3=z) for i in range(len(grid.times))])
            U2 = np.array([eq.u2hat_law.at_step(i, Xh=Xb[i], P3h=z) for i in range(len(grid.times))])
            print(f"{name},{mode},{np.abs(U1 - u1).max():.3e},{np.abs(U2 - u2).max():.3e}")


if __name__ == "__main__":
    main()
