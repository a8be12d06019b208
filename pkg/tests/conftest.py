import functools
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from slqgame.equilibrium import build_equilibrium  # noqa: E402
from slqgame.paths import generate_noise, simulate_closed_loop, simulate_xtilde_and_filter  # noqa: E402
from slqgame.scenario import preset  # noqa: E402


@functools.lru_cache(maxsize=None)
def equilibrium(name="scalar-smoke", n_steps=200, mode="rederived"):
    spec, grid = preset(name, n_steps)
    return build_equilibrium(spec, grid, mode)


@functools.lru_cache(maxsize=None)
def closed_loop(name="scalar-smoke", n_steps=200, n_paths=300, seed=0, mode="rederived"):
    eq = equilibrium(name, n_steps, mode)
    noise = generate_noise(seed, n_paths, eq.grid)
    fp = simulate_xtilde_and_filter(eq.spec, eq.grid, noise)
    return eq, fp, simulate_closed_loop(eq, noise, fp=fp)


def random_spd(rng, n, scale=1.0):
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T / n + 0.1 * np.eye(n))


def random_sym(rng, n, scale=0.3):
    a = rng.standard_normal((n, n)) * scale
    return 0.5 * (a + a.T)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    lines = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            name = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in name or rep.when not in ("call", "setup"):
                continue
            n = int(name.split("test_criterion_")[1][:2])
            got = [v for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
            if got:
                lines[n] = got[0]
            elif rep.failed:
                lines.setdefault(n, f"criterion {n}: FAIL (raised before a verdict: {rep.longrepr.reprcrash.message if hasattr(rep.longrepr, 'reprcrash') else 'error'})")
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
