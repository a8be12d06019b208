import dataclasses

import numpy as np
import pytest

from conftest import closed_loop, equilibrium
from slqgame.equilibrium import build_equilibrium, path_costs
from slqgame.errors import NotObservationAdapted, OptimizerStalled
from slqgame.model import TimeGrid, constant_spec
from slqgame.paths import generate_noise, simulate_closed_loop, simulate_xtilde_and_filter
from slqgame.scenario import preset
from slqgame.verify import (
    brute_force_follower_oracle, follower_best_response, follower_deviation_test, follower_stationarity,
    gain_mode_comparison, leader_deviation_test, leader_stationarity, quadratic_verdict, rederived_not_worse,
    u2_deterministic, u2_equilibrium, u2_perturbed, u2_realized, write_rows_csv,
)


def test_quadratic_verdict_examples():
    eps = np.array([-0.2, -0.1, 0.1, 0.2, 0.3])
    c, r2, v = quadratic_verdict(eps, 2.0 * eps ** 2, np.full(5, 1e-3))
    assert c == pytest.approx(2.0) and r2 == pytest.approx(1.0) and v == "consistent"
    assert quadratic_verdict(eps, -eps ** 2, np.full(5, 1e-4))[2] == "violated"
    assert quadratic_verdict(eps, 0.01 * eps, np.full(5, 1.0))[2] == "inconclusive"


def test_residual_vanishes_without_follower_control_channel():
    spec, grid = preset("scalar-smoke", 100)
    eq = build_equilibrium(spec.with_(B1=np.zeros((1, 1)), D1=np.zeros((1, 1))), grid)
    traj = simulate_closed_loop(eq, generate_noise(0, 100, grid))
    assert np.abs(traj.u1).max() == 0.0
    assert follower_stationarity(traj, eq).normalized_rms <= 1e-12


def test_stationarity_fault_is_detected():
    eq, _, traj = closed_loop("scalar-smoke", 250, 300)
    clean = follower_stationarity(traj, eq).normalized_rms
    faulty = follower_stationarity(traj, eq, u1=traj.u1 + 0.1).normalized_rms
    assert faulty >= 10 * clean
    assert faulty >= 0.05
    lclean = leader_stationarity(traj, eq).normalized_rms
    assert leader_stationarity(traj, eq, u2=traj.u2 + 0.1).normalized_rms >= 10 * lclean


def test_leader_residual_decays_with_dt():
    r = [leader_stationarity(closed_loop("scalar-smoke", N, 200)[2], equilibrium("scalar-smoke", N)).normalized_rms
         for N in (125, 250, 500)]
    assert r[0] > r[1] > r[2]
    assert 1.5 <= r[0] / r[2] / 2 <= 3.0


def test_filtered_control_must_be_observation_adapted():
    eq, fp, traj = closed_loop("scalar-smoke", 50, 20)
    with pytest.raises(NotObservationAdapted):
        follower_best_response(eq, fp, u2_realized(traj.u2, traj.u2_hat, {"t", "Y", "W"}))


def test_equilibrium_route_needs_trajectory():
    eq, fp, traj = closed_loop("scalar-smoke", 50, 20)
    with pytest.raises(ValueError):
        follower_best_response(eq, fp, u2_equilibrium(traj))


@pytest.mark.parametrize("name", ["scalar-smoke", "advertising-lq"])
def test_best_response_reproduces_equilibrium_control(name):
    eq, fp, traj = closed_loop(name, 200, 300)
    br = follower_best_response(eq, fp, u2_equilibrium(traj), eq_traj=traj)
    assert np.sqrt(np.mean((br.run.u1 - traj.u1) ** 2)) <= 1e-3
    assert np.sqrt(np.mean((br.run.x - traj.x) ** 2)) <= 1e-3


def test_best_response_regression_route_reproduces_equilibrium_control():
    eq, fp, traj = closed_loop("scalar-smoke", 200, 2000)
    br = follower_best_response(eq, fp, u2_realized(traj.u2, traj.u2_hat, {"t", "Y"}))
    assert np.sqrt(np.mean((br.run.u1 - traj.u1) ** 2)) <= 1e-2


def test_ode_and_regression_routes_agree_for_deterministic_leader():
    eq, fp, traj = closed_loop("scalar-smoke", 200, 1000)
    u2 = traj.u2_hat.mean(axis=0)
    det = u2_deterministic(u2, fp.n_paths)
    a = follower_best_response(eq, fp, det)
    b = follower_best_response(eq, fp, u2_realized(det.u2, det.u2_hat, {"t"}))
    d = a.costs - b.costs
    assert abs(d.mean()) <= 3 * max(d.std(ddof=1) / np.sqrt(d.size), 1e-12) + 1e-9


def test_zero_perturbation_is_bit_exact():
    eq, fp, traj = closed_loop("scalar-smoke", 100, 50)
    base = u2_equilibrium(traj)
    p0 = u2_perturbed(base, eq, fp, "signal", 0.0)
    assert np.array_equal(p0.u2, base.u2) and np.array_equal(p0.u2_hat, base.u2_hat)
    a = follower_best_response(eq, fp, p0, eq_traj=traj)
    b = follower_best_response(eq, fp, base, eq_traj=traj)
    assert np.array_equal(a.costs, b.costs)
    rep = follower_deviation_test(eq, traj, fp, "constant", epsilons=(0.0,))
    assert rep.delta_J == [0.0]


@pytest.fixture(scope="module")
def fine_run():
    return closed_loop("scalar-smoke", 1000, 1000)


@pytest.mark.parametrize("family", ["constant", "ramp", "feedback"])
def test_follower_deviation_symmetric_and_quadratic(fine_run, family):
    eq, fp, traj = fine_run
    rep = follower_deviation_test(eq, traj, fp, family)
    assert rep.verdict == "consistent", rep
    d = dict(zip(rep.epsilons, zip(rep.delta_J, rep.std_err)))
    for e in (0.1, 0.2):
        (a, sa), (b, sb) = d[e], d[-e]
        assert abs(a - b) <= 6 * max(sa, sb), (e, a, b)


@pytest.mark.parametrize("family", ["constant", "ramp", "signal"])
def test_leader_deviation_quadratic(fine_run, family):
    eq, fp, traj = fine_run
    rep = leader_deviation_test(eq, traj, fp, family)
    assert rep.verdict == "consistent", rep


def test_sign_flipped_follower_law_is_caught():
    eq, fp, traj = closed_loop("scalar-smoke", 250, 1000)
    bad = dataclasses.replace(traj, u1=-traj.u1)
    rep = follower_deviation_test(eq, bad, fp, "feedback", epsilons=(-0.2, -0.1, 0.1, 0.2))
    assert rep.verdict == "violated"
    assert min(d / s for d, s in zip(rep.delta_J, rep.std_err)) <= -10


def test_null_channel_leader_pays_only_its_control_cost():
    spec = constant_spec(n=1, m1=1, m2=1, A=0.2, B1=1.0, C=0.3, Ctilde=0.5, C1=-0.5, C3=0.8, h=1.0,
                         Q1=1.0, G1=1.0, Q2=1.0, G2=0.5, N2=2.0, x0=[1.0], xtilde0=[0.5])
    grid = TimeGrid(1.0, 100)
    eq = build_equilibrium(spec, grid)
    noise = generate_noise(0, 200, grid)
    fp = simulate_xtilde_and_filter(spec, grid, noise)
    traj = simulate_closed_loop(eq, noise, fp=fp)
    assert np.abs(traj.u2).max() == 0.0
    rep = leader_deviation_test(eq, traj, fp, "constant")
    # with u2* = 0 and a constant unit direction the cost moves by N2 eps^2 / 2 on every path
    np.testing.assert_allclose(rep.delta_J, np.array(rep.epsilons) ** 2, rtol=1e-9)
    assert max(rep.std_err) <= 1e-10


def test_brute_force_oracle_runs_and_respects_strict():
    eq = equilibrium("scalar-smoke", 20)
    res = brute_force_follower_oracle(eq, n_train=200, n_test=400, knots=4, restarts=1, maxfev=300)
    assert res.n_evals <= 300 + 10
    assert res.K0.shape == (4, 1) and res.K1.shape == (4, 1, 1)
    assert np.isfinite(res.gap_mean) and res.gap_se > 0
    with pytest.raises(OptimizerStalled):
        brute_force_follower_oracle(eq, n_train=50, n_test=50, knots=4, restarts=1, maxfev=5, strict=True)


def test_gain_mode_arbitration(tmp_path):
    spec, grid = preset("scalar-smoke", 200)
    rows = gain_mode_comparison(spec, grid, n_paths=200)
    assert {r["mode"] for r in rows} == {"rederived", "verbatim"}
    assert rederived_not_worse(rows)
    write_rows_csv(rows, tmp_path / "modes.csv")
    lines = (tmp_path / "modes.csv").read_text().splitlines()
    assert len(lines) == 3 and "leader_residual" in lines[0]


def test_arbitration_reports_unbuildable_verbatim_mode():
    # m2 != n: the printed lower block of A2c does not conform
    spec = constant_spec(n=2, m1=1, m2=1, A=-0.2 * np.eye(2), B1=np.array([[1.0], [0.3]]), B2=np.array([[0.5], [0.4]]),
                         C=0.1 * np.eye(2), D2=np.array([[0.1], [0.0]]), Ctilde=np.array([[0.2], [0.1]]),
                         C1=-0.5 * np.eye(2), C3=np.array([[0.5], [0.3]]), h=np.array([[1.0], [0.5]]),
                         Q1=np.eye(2), Q2=np.eye(2), G2=0.3 * np.eye(2), x0=[1.0, 0.5])
    grid = TimeGrid(1.0, 50)
    rows = gain_mode_comparison(spec, grid, n_paths=50)
    by = {r["mode"]: r for r in rows}
    assert by["rederived"]["status"] == "ok"
    assert by["verbatim"]["status"] != "ok"
    assert rederived_not_worse(rows)


def test_follower_cost_is_path_cost_of_best_response():
    eq, fp, traj = closed_loop("scalar-smoke", 100, 50)
    br = follower_best_response(eq, fp, u2_equilibrium(traj), eq_traj=traj)
    assert np.array_equal(br.costs, path_costs(br.run, eq.spec, "follower"))
