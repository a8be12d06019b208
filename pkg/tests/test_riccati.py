import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import equilibrium, random_spd, random_sym
from slqgame import coefficients as co
from slqgame.errors import AssumptionA35Violated, AssumptionA36Violated
from slqgame.model import TimeGrid, constant_spec
from slqgame.riccati import (
    follower_rhs, min_eig, riccati_residual, solve_follower_riccati, solve_leader_riccati, standalone_p1c, symmetry_defect,
)
from slqgame.scenario import preset


def linear_case():
    return constant_spec(n=1, m1=1, m2=1, A=0.5, Q1=1.0, G1=1.0, T=1.0)


def logistic_case(G1=0.5):
    return constant_spec(n=1, m1=1, m2=1, A=0.0, C=1.0, B1=1.0, N1=1.0, Q1=0.0, G1=G1, T=1.0)


def logistic_exact(t, G1=0.5, T=1.0):
    return 1.0 / (1.0 + (1.0 / G1 - 1.0) * np.exp(t - T))


def test_linear_closed_form():
    t0 = time.perf_counter()
    sol = solve_follower_riccati(linear_case(), TimeGrid.from_dt(1.0, 1e-3))
    assert time.perf_counter() - t0 < 1.0
    exact = 2.0 * np.exp(1.0) - 1.0
    assert abs(sol.P1[0, 0, 0] - exact) / exact <= 1e-6
    np.testing.assert_allclose(sol.P1[:, 0, 0], 2.0 * np.exp(1.0 - sol.times) - 1.0, rtol=1e-6)


def test_logistic_closed_form():
    t0 = time.perf_counter()
    sol = solve_follower_riccati(logistic_case(), TimeGrid.from_dt(1.0, 1e-3))
    assert time.perf_counter() - t0 < 1.0
    np.testing.assert_allclose(sol.P1[:, 0, 0], logistic_exact(sol.times), rtol=1e-6)


def test_trivial_dynamics_keep_terminal_value():
    G1 = np.array([[2.0, 0.5], [0.5, 1.0]])
    spec = constant_spec(n=2, m1=1, m2=1, Q1=np.zeros((2, 2)), G1=G1)
    sol = solve_follower_riccati(spec, TimeGrid(1.0, 17))
    assert np.array_equal(sol.P1, np.broadcast_to(G1, sol.P1.shape))


@pytest.mark.parametrize("case,exact", [(linear_case(), lambda t: 2 * np.exp(1 - t) - 1), (logistic_case(), logistic_exact)])
def test_rk4_order(case, exact):
    errs = [abs(solve_follower_riccati(case, TimeGrid(1.0, N)).P1[0, 0, 0] - exact(0.0)) for N in (10, 20, 40)]
    for a, b in zip(errs, errs[1:]):
        assert 8.0 <= a / b <= 32.0, errs


def test_leader_rk4_refinement_ratio():
    spec, _ = preset("scalar-smoke", 10)
    sols = [solve_leader_riccati(spec, TimeGrid(spec.horizon_T, N)) for N in (10, 20, 40)]
    d1 = np.abs(sols[0].P1c[0] - sols[1].P1c[0]).max()
    d2 = np.abs(sols[1].P1c[0] - sols[2].P1c[0]).max()
    assert 8.0 <= d1 / d2 <= 32.0, (d1, d2)


def _random_spec(seed, n):
    r = np.random.default_rng(seed)
    return constant_spec(n=n, m1=1, m2=1, A=random_sym(r, n), B1=r.standard_normal((n, 1)),
                         B2=r.standard_normal((n, 1)), C=random_sym(r, n), D1=0.3 * r.standard_normal((n, 1)),
                         D2=0.3 * r.standard_normal((n, 1)), Q1=random_spd(r, n), G1=random_spd(r, n, 0.5),
                         Q2=random_spd(r, n), G2=random_spd(r, n, 0.5), x0=r.standard_normal(n))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2 ** 31 - 1))
def test_follower_solution_symmetric_psd(n, seed):
    sol = solve_follower_riccati(_random_spec(seed, n), TimeGrid(1.0, 50))
    norms = np.linalg.norm(sol.P1, axis=(1, 2))
    assert np.all(symmetry_defect(sol.P1) <= 1e-10 * (1 + norms))
    assert np.all(min_eig(sol.P1) >= -1e-8)
    assert np.all(sol.ntilde1_min_eig > 0)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 2), st.integers(0, 2 ** 31 - 1))
def test_leader_terminal_values_and_symmetry(n, seed):
    spec = _random_spec(seed, n)
    sol = solve_leader_riccati(spec, TimeGrid(1.0, 30))
    assert sol.solved
    G2c = np.zeros((2 * n, 2 * n))
    G2c[:n, :n] = spec.G2
    assert np.array_equal(sol.P1c[-1], G2c)
    assert np.array_equal(sol.P2c[-1], np.zeros_like(G2c))
    for P in (sol.P1c, sol.P2c):
        assert np.all(symmetry_defect(P) <= 1e-10 * (1 + np.linalg.norm(P, axis=(1, 2))))


def test_leader_carries_follower_block_exactly():
    spec = _random_spec(11, 2)
    grid = TimeGrid(1.0, 40)
    assert np.array_equal(solve_leader_riccati(spec, grid).P1, solve_follower_riccati(spec, grid).P1)


@pytest.mark.parametrize("name", ["scalar-smoke", "advertising-lq", "complete-info"])
def test_coupled_matches_standalone(name):
    spec, grid = preset(name, 200)
    coupled = solve_leader_riccati(spec, grid).P1c
    alone = standalone_p1c(spec, grid)
    rel = np.abs(coupled - alone).max() / (1 + np.abs(alone).max())
    assert rel <= 1e-6


def test_n3_runtime_and_standalone_agreement():
    spec = _random_spec(5, 3)
    grid = TimeGrid(1.0, 1000)
    t0 = time.perf_counter()
    sol = solve_leader_riccati(spec, grid)
    assert time.perf_counter() - t0 < 10.0
    assert sol.solved
    alone = standalone_p1c(spec, grid)
    assert np.abs(sol.P1c - alone).max() / (1 + np.abs(alone).max()) <= 1e-6


def test_finite_difference_residual_decays_quadratically():
    spec, _ = preset("scalar-smoke", 10)
    res = [riccati_residual(solve_leader_riccati(spec, TimeGrid(spec.horizon_T, N)), spec)["max"] for N in (50, 100, 200)]
    for key in ("first", "second", "first_standalone"):
        for a, b in zip(res, res[1:]):
            assert 3.0 <= a[key] / b[key] <= 5.5, (key, a[key], b[key])
    fres = [riccati_residual(solve_follower_riccati(logistic_case(), TimeGrid(1.0, N)), logistic_case())["max"]
            for N in (50, 100)]
    assert 3.0 <= fres[0]["full"] / fres[1]["full"] <= 5.5


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2 ** 31 - 1))
def test_compact_and_full_follower_forms_agree(n, seed):
    r = np.random.default_rng(seed)
    spec = _random_spec(seed, n)
    v = co.spec_values(spec, [0.3])
    P = random_spd(r, n)[None]
    fd = co.follower_blocks(v, P, np.array([0.3]))
    compact = -P @ v["A"] - co.T(v["A"]) @ P - co.T(v["C"]) @ P @ v["C"] - v["Q1"] + fd.StildeStilde1
    assert np.abs(compact - follower_rhs(v, P)).max() <= 1e-9 * (1 + np.abs(compact).max())


def test_follower_monotone_in_terminal_cost():
    base = _random_spec(2, 2)
    grid = TimeGrid(1.0, 60)
    lo = solve_follower_riccati(base, grid).P1
    hi = solve_follower_riccati(base.with_(G1=np.asarray(base.G1) + np.eye(2)), grid).P1
    assert np.all(min_eig(hi - lo) >= -1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_sum_of_leader_equations_is_closed_in_pi(seed):
    # The coupled right-hand sides add up to a Riccati equation in Pi = P1c + P2c alone.
    r = np.random.default_rng(seed)
    eq = equilibrium("advertising-lq", 20)
    aug, bars = eq.aug.at(7), eq.bars.at(7)
    d = aug.A1c.shape[1]
    P1c, P2c = random_sym(r, d)[None], random_sym(r, d)[None]
    try:
        d1, d2 = co.leader_rhs(aug, bars, P1c, P2c)
    except (AssumptionA35Violated, AssumptionA36Violated):
        return
    b = co._loop_blocks(aug, bars)
    Pi = P1c + P2c
    hinv, _ = co._z_solves(b, P1c, aug.times)
    GhX = hinv @ P1c @ (b["s1"] + b["s2"] + (b["s3"] + b["s4"]) @ Pi)
    a, bb, c = b["a1"] + b["a2"], b["b1"] + b["b2"], b["c1"] + b["c2"]
    closed = -(Pi @ a + co.T(a) @ Pi + Pi @ bb @ Pi + b["q1"] + b["q2"] + (Pi @ c + b["e1"] + b["e2"]) @ GhX)
    closed = 0.5 * (closed + co.T(closed))
    assert np.abs(d1 + d2 - closed).max() <= 1e-10 * (1 + np.abs(closed).max())
