"""Command-line front end: scenario management and the validate -> solve -> simulate -> verify pipeline."""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import scenario as sc
from .equilibrium import build_equilibrium, estimate_cost
from .errors import EXIT_CONFIG, EXIT_OK, EXIT_VERIFY, SLQError
from .model import TimeGrid, validate_spec
from .paths import export_binary, export_csv, generate_noise, simulate_closed_loop
from .riccati import riccati_residual, solve_follower_riccati, solve_leader_riccati
from . import verify as vf

STATIONARITY_TOL = 1e-2
CSV_SAMPLE_PATHS = 10


def positive_int(s):
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def positive_float(s):
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {s!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {v}")
    return v


GLOBAL_DEFAULTS = {"scenario": None, "seed": 0, "paths": 1000, "dt": None, "out": "out",
                   "gain_mode": "rederived", "dtilde1": "zero"}


def _add_globals(p, suppress):
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--scenario", help="scenario JSON file", **kw)
    p.add_argument("--seed", type=int, help="master seed (default 0)", **kw)
    p.add_argument("--paths", type=positive_int, help="number of Monte Carlo paths (default 1000)", **kw)
    p.add_argument("--dt", type=positive_float, help="override the scenario's time step", **kw)
    p.add_argument("--out", help="output directory (default ./out)", **kw)
    p.add_argument("--gain-mode", dest="gain_mode", choices=("rederived", "verbatim"), **kw)
    p.add_argument("--dtilde1", choices=("zero", "minus_D1_scaled"), **kw)


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1), not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="slqgame", description="Partially observed LQ leader-follower game solver.")
    p.add_argument("--version", action="version", version=f"slqgame {__version__}")
    _add_globals(p, True)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    _add_globals(common, True)
    sub.add_parser("validate", parents=[common], help="check dimensions and standing assumptions")
    dump = _Parser(add_help=False)
    dump.add_argument("--dump-coefficients", dest="dump_coefficients", metavar="DIR",
                      help="also write every derived coefficient family as CSV into DIR")
    sub.add_parser("solve-riccati", parents=[common, dump], help="solve and export the Riccati systems")
    s = sub.add_parser("simulate", parents=[common], help="simulate closed-loop equilibrium paths")
    s.add_argument("--format", choices=("csv", "binary", "both"), default="both")
    sub.add_parser("equilibrium", parents=[common], help="estimate both players' equilibrium costs")
    v = sub.add_parser("verify", parents=[common], help="certify the equilibrium numerically")
    v.add_argument("--suite", choices=("stationarity", "deviations", "oracle", "all"), default="stationarity")
    sub.add_parser("pipeline", parents=[common, dump], help="validate, solve, simulate, estimate and verify")
    s = sub.add_parser("scenario", help="list or emit built-in presets")
    s.add_argument("action", nargs="?", choices=("list",), default="list")
    s.add_argument("--emit", metavar="NAME", help="write the named preset as JSON")
    s.add_argument("--out", help="file to write (default: stdout)")
    return p


# ---------------------------------------------------------------- manifest

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    scenario_path: str
    scenario_sha256: str
    seed: int
    n_paths: int
    grid: dict
    gain_mode: str
    dtilde1: str
    versions: dict
    started: str
    finished: str = ""
    exit_code: int = 0
    artifacts: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"


def module_versions():
    from importlib.metadata import version
    return {"slqgame": __version__, "numpy": np.__version__, "scipy": version("scipy"),
            "jsonschema": version("jsonschema"), "python": sys.version.split()[0]}


def check_manifest(directory):
    """Recompute recorded hashes; returns a list of mismatching entries (empty when intact)."""
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
        m = json.load(fh)
    bad = []
    if m.get("scenario_path") and os.path.exists(m["scenario_path"]):
        if sha256_file(m["scenario_path"]) != m["scenario_sha256"]:
            bad.append("scenario")
    for rel, digest in m["artifacts"].items():
        p = os.path.join(directory, rel)
        if not os.path.exists(p) or sha256_file(p) != digest:
            bad.append(rel)
    return bad


class Run:
    """Output directory bookkeeping: every written file is hashed into the manifest."""

    def __init__(self, args, command, scenario_hash, grid):
        self.out = args.out
        os.makedirs(self.out, exist_ok=True)
        self.manifest = RunManifest(
            command=command, scenario_path=os.path.abspath(args.scenario) if args.scenario else "",
            scenario_sha256=scenario_hash, seed=args.seed, n_paths=args.paths,
            grid={"T": grid.horizon_T, "n_steps": grid.n_steps, "dt": grid.dt} if grid else {},
            gain_mode=args.gain_mode, dtilde1=args.dtilde1, versions=module_versions(),
            started=_dt.datetime.now(_dt.timezone.utc).isoformat())
        self.summary = []

    def path(self, rel):
        p = os.path.join(self.out, rel)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def register(self, rel):
        self.manifest.artifacts[rel] = sha256_file(os.path.join(self.out, rel))

    def write_text(self, rel, text):
        with open(self.path(rel), "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        self.register(rel)

    def note(self, line):
        self.summary.append(line)
        print(line)

    def close(self, code):
        self.manifest.exit_code = code
        self.write_text("summary.txt", "\n".join(self.summary) + "\n")
        self.manifest.finished = _dt.datetime.now(_dt.timezone.utc).isoformat()
        with open(os.path.join(self.out, "manifest.json"), "w", encoding="utf-8") as fh:
            fh.write(self.manifest.to_json())
        return code


def fmt(x):
    return f"{x:.17g}"


def matrix_csv(times, arr):
    lines = ["t,row,col,value"]
    for k, t in enumerate(times):
        for r in range(arr.shape[1]):
            for c in range(arr.shape[2]):
                lines.append(f"{fmt(t)},{r},{c},{fmt(arr[k, r, c])}")
    return "\n".join(lines) + "\n"


def rows_csv(columns, rows):
    out = [",".join(columns)]
    for r in rows:
        out.append(",".join(fmt(v) if isinstance(v, (float, np.floating)) else str(v) for v in r))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- stages

def load(args):
    if not args.scenario:
        raise SLQError("--scenario is required")
    spec, grid, _, digest = sc.load_scenario(args.scenario)
    if args.dt is not None:
        grid = TimeGrid.from_dt(spec.horizon_T, args.dt)
    return spec, grid, digest


def stage_riccati(run, spec, grid, mode):
    fol = solve_follower_riccati(spec, grid)
    lead = solve_leader_riccati(spec, grid, mode)
    run.write_text("riccati/P1.csv", matrix_csv(grid.times, fol.P1))
    run.write_text("riccati/P1c.csv", matrix_csv(grid.times, lead.P1c))
    run.write_text("riccati/P2c.csv", matrix_csv(grid.times, lead.P2c))
    rf = riccati_residual(fol, spec)
    rows = [("follower", k, v) for k, v in rf["max"].items()]
    if lead.solved:
        rl = riccati_residual(lead, spec)
        rows += [("leader", k, v) for k, v in rl["max"].items()]
    run.write_text("riccati/residuals.csv", rows_csv(("system", "equation", "max_residual"), rows))
    run.note(f"riccati: follower solved on {grid.n_steps} steps; leader "
             + ("solved" if lead.solved else f"blew up at t={lead.blowup_at:.6g}"))
    return fol, lead


def stage_dump(run, eq, directory):
    from .coefficients import dump_families
    written = []
    for prefix, obj in (("follower_", eq.fd), ("augmented_", eq.aug), ("closed_loop_", eq.bars), ("gain_", eq.gains)):
        written += dump_families(obj, directory, prefix)
    out = os.path.abspath(run.out)
    for p in written:
        rel = os.path.relpath(os.path.abspath(p), out)
        if not rel.startswith(".."):
            run.register(rel)
    run.note(f"dumped {len(written)} coefficient families to {directory}")


def stage_costs(run, eq, traj, args, digest):
    rows = []
    for player in ("follower", "leader"):
        c = estimate_cost(traj, eq.spec, player)
        rows.append((player, c.mean, c.std_err, c.n_paths, args.seed, digest))
        run.note(f"cost {player}: {c.mean:.6g} +/- {c.std_err:.3g} ({c.n_paths} paths)")
    run.write_text("costs.csv", rows_csv(("player", "mean", "std_err", "n_paths", "seed", "scenario_hash"), rows))


def stage_stationarity(run, eq, traj, tol=STATIONARITY_TOL):
    fr = vf.follower_stationarity(traj, eq)
    lr = vf.leader_stationarity(traj, eq)
    rows = [(fmt(t), fr.rms[i], fr.max[i], lr.rms[i], lr.max[i]) for i, t in enumerate(eq.times)]
    run.write_text("stationarity.csv", rows_csv(("t", "follower_rms", "follower_max", "leader_rms", "leader_max"), rows))
    ok = True
    for rep in (fr, lr):
        passed = rep.normalized_rms <= tol
        ok &= passed
        run.note(f"verdict {rep.condition}: {'PASS' if passed else 'FAIL'} "
                 f"(normalized RMS residual {rep.normalized_rms:.3g}, tolerance {tol:g})")
    return ok


def stage_deviations(run, eq, traj, fp):
    rows, ok = [], True
    for fam in vf.FOLLOWER_FAMILIES:
        rep = vf.follower_deviation_test(eq, traj, fp, fam)
        rows += [r + (rep.c, rep.r2, rep.verdict) for r in rep.rows()]
        ok &= rep.verdict == "consistent"
        run.note(f"verdict follower deviation ({fam}): {rep.verdict} (c={rep.c:.3g}, R2={rep.r2:.3f})")
    for fam in vf.LEADER_FAMILIES:
        rep = vf.leader_deviation_test(eq, traj, fp, fam)
        rows += [r + (rep.c, rep.r2, rep.verdict) for r in rep.rows()]
        ok &= rep.verdict == "consistent"
        run.note(f"verdict leader deviation ({fam}): {rep.verdict} (c={rep.c:.3g}, R2={rep.r2:.3f})")
    run.write_text("deviations.csv", rows_csv(("player", "family", "epsilon", "delta_J", "std_err", "c", "r2", "verdict"), rows))
    return ok


def stage_oracle(run, eq, args):
    res = vf.brute_force_follower_oracle(eq, n_train=min(args.paths, 2000), n_test=args.paths, seed=args.seed)
    beat = res.gap_mean < -3 * res.gap_se
    tight = res.J_opt.mean <= res.J_star.mean * 1.05
    rows = [("optimized", res.J_opt.mean, res.J_opt.std_err), ("equilibrium", res.J_star.mean, res.J_star.std_err),
            ("paired_gap", res.gap_mean, res.gap_se)]
    run.write_text("oracle.csv", rows_csv(("law", "J1", "std_err"), rows))
    run.note(f"verdict oracle inequality: {'FAIL' if beat else 'PASS'} (gap {res.gap_mean:.3g} +/- {res.gap_se:.3g})")
    run.note(f"verdict oracle tightness: {'PASS' if tight else 'FAIL'}"
             + (" (optimizer stopped at its evaluation budget)" if res.stalled else ""))
    return not beat and tight


def stage_gain_modes(run, spec, grid, args):
    rows = vf.gain_mode_comparison(spec, grid, n_paths=min(args.paths, 200), seed=args.seed)
    cols = ("scenario", "mode", "n_steps", "n_paths", "leader_residual", "follower_residual", "phi_bsde_residual", "status")
    run.write_text("gain_mode_comparison.csv", rows_csv(cols, [tuple(r[c] for c in cols) for r in rows]))
    ok = vf.rederived_not_worse(rows)
    run.note(f"gain-mode comparison: rederived leader residual "
             f"{'<=' if ok else '>'} verbatim ({rows[0]['leader_residual']:.3g} vs {rows[1]['leader_residual']:.3g})")
    return ok


# ---------------------------------------------------------------- commands

def _resolve(args):
    for k, v in GLOBAL_DEFAULTS.items():
        if not hasattr(args, k):
            setattr(args, k, v)
    return args


def cmd_scenario(args):
    if args.emit:
        text = sc.dumps(sc.preset_document(args.emit))
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text)
            print(f"wrote {args.out} sha256={sc.sha256_text(text)}")
        else:
            sys.stdout.write(text)
        return EXIT_OK
    for name in sc.preset_names():
        print(f"{name}: {sc.preset_document(name)['description']}")
    return EXIT_OK


def cmd_validate(args):
    spec, grid, digest = load(args)
    rep = validate_spec(spec, grid)
    print(f"scenario {spec.name}: n={spec.n} m1={spec.m1} m2={spec.m2} T={grid.horizon_T:g} steps={grid.n_steps}")
    for w in rep.warnings:
        print(f"warning: {w}")
    for k, v in rep.worst_margin.items():
        print(f"margin {k}: {v:.6g}")
    build = build_equilibrium(spec, grid, args.gain_mode, args.dtilde1)
    print("assumptions: " + ", ".join(f"{lab} ok" for lab in ("A3.1", "A3.2", "A3.3", "A3.4", "A3.5", "A3.6")))
    del build
    return EXIT_OK


def _guarded(command, args, body):
    """Run ``body(run, spec, grid, digest)`` with manifest bookkeeping and exit-code mapping."""
    run = None
    try:
        spec, grid, digest = load(args)
        run = Run(args, command, digest, grid)
        code = body(run, spec, grid, digest)
    except SLQError as e:
        label = getattr(e, "label", None)
        msg = f"error ({type(e).__name__}{', assumption ' + label if label else ''}): {e}"
        print(msg, file=sys.stderr)
        if run is None and getattr(args, "out", None):
            run = Run(args, command, "", None)
        if run is not None:
            run.summary.append(msg)
            return run.close(e.exit_code)
        return e.exit_code
    return run.close(code)


def cmd_solve_riccati(args):
    def body(run, spec, grid, digest):
        stage_riccati(run, spec, grid, args.gain_mode)
        if args.dump_coefficients:
            stage_dump(run, build_equilibrium(spec, grid, args.gain_mode, args.dtilde1), args.dump_coefficients)
        return EXIT_OK
    return _guarded("solve-riccati", args, body)


def cmd_simulate(args):
    def body(run, spec, grid, digest):
        eq = build_equilibrium(spec, grid, args.gain_mode, args.dtilde1)
        traj = simulate_closed_loop(eq, generate_noise(args.seed, args.paths, grid))
        if args.format in ("csv", "both"):
            export_csv(traj, run.path("trajectories.csv"), max_paths=CSV_SAMPLE_PATHS)
            run.register("trajectories.csv")
        if args.format in ("binary", "both"):
            export_binary(traj, run.path("trajectories.slq"))
            run.register("trajectories.slq")
        run.note(f"simulated {args.paths} paths on {grid.n_steps} steps")
        return EXIT_OK
    return _guarded("simulate", args, body)


def cmd_equilibrium(args):
    def body(run, spec, grid, digest):
        eq = build_equilibrium(spec, grid, args.gain_mode, args.dtilde1)
        traj = simulate_closed_loop(eq, generate_noise(args.seed, args.paths, grid))
        stage_costs(run, eq, traj, args, digest)
        return EXIT_OK
    return _guarded("equilibrium", args, body)


def cmd_verify(args):
    from .paths import simulate_xtilde_and_filter

    def body(run, spec, grid, digest):
        eq = build_equilibrium(spec, grid, args.gain_mode, args.dtilde1)
        noise = generate_noise(args.seed, args.paths, grid)
        fp = simulate_xtilde_and_filter(spec, grid, noise)
        traj = simulate_closed_loop(eq, noise, fp=fp)
        ok = True
        if args.suite in ("stationarity", "all"):
            ok &= stage_stationarity(run, eq, traj)
        if args.suite in ("deviations", "all"):
            ok &= stage_deviations(run, eq, traj, fp)
        if args.suite in ("oracle", "all"):
            ok &= stage_oracle(run, eq, args)
        run.note(f"overall: {'PASS' if ok else 'FAIL'}")
        return EXIT_OK if ok else EXIT_VERIFY
    return _guarded("verify", args, body)


def cmd_pipeline(args):
    def body(run, spec, grid, digest):
        rep = validate_spec(spec, grid)
        run.note(f"scenario {spec.name} ({digest[:12]}): n={spec.n} m1={spec.m1} m2={spec.m2}, "
                 f"{grid.n_steps} steps, {args.paths} paths, seed {args.seed}, gain mode {args.gain_mode}")
        for w in rep.warnings:
            run.note(f"warning: {w}")
        eq = build_equilibrium(spec, grid, args.gain_mode, args.dtilde1)
        run.note("assumptions A3.1-A3.6: ok")
        stage_riccati(run, spec, grid, args.gain_mode)
        if args.dump_coefficients:
            stage_dump(run, eq, args.dump_coefficients)
        noise = generate_noise(args.seed, args.paths, grid)
        traj = simulate_closed_loop(eq, noise)
        export_csv(traj, run.path("trajectories.csv"), max_paths=CSV_SAMPLE_PATHS)
        run.register("trajectories.csv")
        stage_costs(run, eq, traj, args, digest)
        ok = stage_stationarity(run, eq, traj)
        ok &= stage_gain_modes(run, spec, grid, args)
        run.note(f"overall: {'PASS' if ok else 'FAIL'}")
        return EXIT_OK if ok else EXIT_VERIFY
    return _guarded("pipeline", args, body)


COMMANDS = {"scenario": cmd_scenario, "validate": cmd_validate, "solve-riccati": cmd_solve_riccati,
            "simulate": cmd_simulate, "equilibrium": cmd_equilibrium, "verify": cmd_verify,
            "pipeline": cmd_pipeline}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command != "scenario":
        _resolve(args)
    try:
        return COMMANDS[args.command](args)
    except SLQError as e:
        print(f"error ({type(e).__name__}): {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
