"""Leader/follower residuals of the rederived and verbatim gain modes on every preset.

    python3 scripts/gain_mode_report.py --out out/gain_modes.csv
"""

import argparse
import os

from slqgame.scenario import preset, preset_names
from slqgame.verify import gain_mode_comparison, rederived_not_worse, write_rows_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--paths", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out/gain_modes.csv")
    a = ap.parse_args()
    rows = []
    for name in preset_names():
        spec, grid = preset(name, a.steps)
        r = gain_mode_comparison(spec, grid, a.paths, a.seed)
        print(f"{name}: rederived not worse = {rederived_not_worse(r)}")
        rows += r
    os.makedirs(os.path.dirname(a.out) or ".", exist_ok=True)
    write_rows_csv(rows, a.out)
    print(f"wrote {a.out}")


if __name__ == "__main__":
    main()
