import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import equilibrium, random_spd
from slqgame import coefficients as co
from slqgame.equilibrium import build_equilibrium
from slqgame.model import TimeGrid, constant_spec
from slqgame.riccati import solve_leader_riccati


def stack(x):
    return np.atleast_2d(np.asarray(x, dtype=float))[None]


def scalar_values(**kw):
    base = dict(A=0.0, B1=0.0, B2=0.0, C=0.0, D1=0.0, D2=0.0, N1=1.0, N2=1.0, Q2=1.0)
    base.update(kw)
    v = {k: stack(x) for k, x in base.items()}
    v["Ctilde"] = np.zeros((1, 1, 1))
    return v


def test_follower_blocks_scalar_example():
    v = scalar_values(B1=1.0, C=0.0, D1=1.0, N1=1.0, D2=3.0, B2=0.0)
    fd = co.follower_blocks(v, stack(2.0), np.zeros(1))
    assert fd.Ntilde1[0, 0, 0] == pytest.approx(3.0)
    assert fd.Stilde1[0, 0, 0] == pytest.approx(2.0)
    assert fd.Stilde[0, 0, 0] == pytest.approx(6.0)
    assert fd.Stilde2[0, 0, 0] == pytest.approx(0.0)
    assert fd.Stilde3[0, 0, 0] == pytest.approx(-4.0)


def test_follower_blocks_without_follower_channels():
    v = scalar_values(A=0.3, B2=0.7, C=0.2, D2=0.5, N1=2.0)
    fd = co.follower_blocks(v, stack(1.5), np.zeros(1))
    assert fd.Ntilde1[0, 0, 0] == 2.0
    for name in ("Stilde1", "Stilde", "StildeStilde1", "Stilde4", "Stilde5", "Stilde6", "Btilde1"):
        assert getattr(fd, name)[0, 0, 0] == 0.0, name
    assert fd.Atilde[0, 0, 0] == pytest.approx(0.3)
    assert fd.Btilde2[0, 0, 0] == pytest.approx(0.7)
    assert fd.Stilde2[0, 0, 0] == pytest.approx(1.5 * 0.7 + 0.2 * 1.5 * 0.5)


def test_augmented_cost_and_initial_blocks():
    v = scalar_values(B1=1.0, Q2=0.4)
    fd = co.follower_blocks(v, stack(np.sqrt(7.0)), np.zeros(1))
    assert fd.StildeStilde1[0, 0, 0] == pytest.approx(7.0)
    aug = co.augmented_blocks(v, fd, np.array([[0.9]]), np.array([1.5]))
    np.testing.assert_allclose(aug.Q2c[0], [[0.4, 7.0], [7.0, 0.0]])
    np.testing.assert_allclose(aug.Q2tc[0], [[0.0, -7.0], [-7.0, 0.0]])
    np.testing.assert_array_equal(aug.G2c, [[0.9, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(aug.X0c, [1.5, 0.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2 ** 31 - 1))
def test_follower_blocks_symmetry_and_sign(n, m1, m2, seed):
    r = np.random.default_rng(seed)
    v = dict(A=r.standard_normal((1, n, n)), B1=r.standard_normal((1, n, m1)), B2=r.standard_normal((1, n, m2)),
             C=r.standard_normal((1, n, n)), D1=r.standard_normal((1, n, m1)), D2=r.standard_normal((1, n, m2)),
             N1=random_spd(r, m1)[None])
    fd = co.follower_blocks(v, random_spd(r, n)[None], np.zeros(1))
    for name in ("Ntilde1", "StildeStilde1", "Stilde4"):
        m = getattr(fd, name)[0]
        assert np.abs(m - m.T).max() <= 1e-12 * (1 + np.abs(m).max()), name
    assert np.linalg.eigvalsh(fd.StildeStilde1[0]).min() >= -1e-10
    assert np.linalg.eigvalsh(fd.Stilde4[0]).max() <= 1e-10


def _bars_by_hand(aug, N2):
    out = {k: [] for k in ("Abar1", "Abar2", "Bbar1", "Bbar2", "Bbar1t", "Bbar2t", "Cbar1",
                           "Dbar2", "Cbar2", "Dbar2t", "Qbar2", "Qbar2t")}
    for i in range(len(aug.times)):
        Ni = np.linalg.inv(N2[i])
        g = {k: getattr(aug, k)[i] for k in ("A1c", "A2c", "B1c", "B1tc", "B2c", "B2tc", "B3c", "B3tc",
                                              "C1c", "C2c", "D2c", "D2tc", "Q2c", "Q2tc")}
        B2, B2t, B3, B3t, D2, D2t = g["B2c"], g["B2tc"], g["B3c"], g["B3tc"], g["D2c"], g["D2tc"]
        out["Abar1"].append(g["A1c"] - B2 @ Ni @ B3.T)
        out["Abar2"].append(g["A2c"] - B2 @ Ni @ B3t.T - B2t @ Ni @ (B3 + B3t).T)
        out["Bbar1"].append(-B2 @ Ni @ B2.T)
        out["Bbar2"].append(-B2 @ Ni @ D2.T)
        out["Bbar1t"].append(g["B1c"] - B2 @ Ni @ B2t.T - B2t @ Ni @ (B2 + B2t).T)
        out["Bbar2t"].append(g["B1tc"] - B2 @ Ni @ D2t.T - B2t @ Ni @ (D2 + D2t).T)
        out["Cbar1"].append(g["C1c"] - D2 @ Ni @ B3.T)
        out["Dbar2"].append(-D2 @ Ni @ D2.T)
        out["Cbar2"].append(g["C2c"] - D2 @ Ni @ B3t.T - D2t @ Ni @ (B3 + B3t).T)
        out["Dbar2t"].append(-D2 @ Ni @ D2t.T - D2t @ Ni @ (D2 + D2t).T)
        out["Qbar2"].append(g["Q2c"] - B3 @ Ni @ B3.T)
        out["Qbar2t"].append(g["Q2tc"] - B3 @ Ni @ B3t.T - B3t @ Ni @ (B3 + B3t).T)
    return {k: np.array(x) for k, x in out.items()}


@pytest.mark.parametrize("name", ["scalar-smoke", "advertising-lq", "newsvendor-lq"])
def test_bars_match_per_time_recomputation(name):
    eq = equilibrium(name, 40)
    ref = _bars_by_hand(eq.aug, co.spec_values(eq.spec, eq.aug.times)["N2"])
    for k, v in ref.items():
        np.testing.assert_allclose(getattr(eq.bars, k), v, rtol=1e-12, atol=1e-13, err_msg=k)


def _leader_pieces(spec, grid, mode):
    lead = solve_leader_riccati(spec, grid, mode)
    t = grid.times
    v = co.spec_values(spec, t)
    fd = co.follower_blocks(v, lead.P1, t)
    aug = co.augmented_blocks(v, fd, spec.G2, spec.x0, mode)
    bars = co.bar_blocks(aug, v["N2"])
    return lead, aug, bars


def test_printed_inverses_identity_without_feedthrough():
    spec = constant_spec(n=2, m1=1, m2=1, A=0.2 * np.eye(2), B1=np.ones((2, 1)), B2=np.ones((2, 1)),
                         C=0.1 * np.eye(2), D1=np.ones((2, 1)), D2=np.zeros((2, 1)),
                         Q1=np.eye(2), Q2=np.eye(2), x0=[1.0, 0.0])
    grid = TimeGrid(1.0, 20)
    lead, aug, bars = _leader_pieces(spec, grid, "rederived")
    g = co.build_gains(bars, aug, lead.P1c, lead.P2c)
    eye = np.broadcast_to(np.eye(4), g.Ntilde2_inv.shape)
    np.testing.assert_array_equal(g.Ntilde2_inv, eye)
    np.testing.assert_array_equal(g.Nbar2_inv, eye)
    g0 = co.build_gains(bars, aug, np.zeros_like(lead.P1c), np.zeros_like(lead.P2c))
    np.testing.assert_array_equal(g0.Ntilde2_inv, eye)
    np.testing.assert_array_equal(g0.Nbar2_inv, eye)


@pytest.mark.parametrize("name", ["scalar-smoke", "advertising-lq", "complete-info"])
def test_ntilde2_inverse_identity(name):
    eq = equilibrium(name, 40)
    P1c = eq.leader.P1c
    Dsum = eq.aug.D2c + eq.aug.D2tc
    M = np.eye(P1c.shape[1]) + P1c @ Dsum @ eq.bars.N2_inv @ co.T(Dsum)
    err = np.abs(eq.gains.Ntilde2_inv @ M - np.eye(P1c.shape[1])).max()
    assert err <= 1e-8


def _random_instance(seed, n=2):
    r = np.random.default_rng(seed)
    return constant_spec(n=n, m1=1, m2=1, A=0.3 * r.standard_normal((n, n)), B1=r.standard_normal((n, 1)),
                         B2=r.standard_normal((n, 1)), C=0.3 * r.standard_normal((n, n)),
                         D1=0.5 * r.standard_normal((n, 1)), D2=0.5 * r.standard_normal((n, 1)),
                         Q1=random_spd(r, n), G1=random_spd(r, n, 0.5), Q2=random_spd(r, n), G2=random_spd(r, n, 0.5),
                         x0=r.standard_normal(n), allow_nonsymmetric_dynamics=True)


def test_zsolve_product_is_symmetric():
    grid = TimeGrid(1.0, 40)
    for seed in range(5):
        lead, aug, bars = _leader_pieces(_random_instance(seed), grid, "rederived")
        g = co.build_gains(bars, aug, lead.P1c, lead.P2c)
        prod = g.zsolve_inv @ lead.P1c
        assert np.abs(prod - co.T(prod)).max() <= 1e-8 * (1 + np.abs(prod).max())


def test_printed_zsolve_product_not_symmetric_when_D1_nonzero():
    # The printed Z-solve inverse uses D2tc'; its product with P1c loses symmetry.
    lead, aug, bars = _leader_pieces(_random_instance(0), TimeGrid(1.0, 40), "rederived")
    g = co.build_gains(bars, aug, lead.P1c, lead.P2c)
    prod = g.Nbar2_inv @ lead.P1c
    assert np.abs(prod - co.T(prod)).max() > 1e-6


def _scalar_instance(r, **zero):
    kw = dict(A=r.uniform(-0.5, 0.5), B1=r.uniform(0.5, 1), B2=r.uniform(0.2, 0.8), C=r.uniform(0.1, 0.4),
              D1=r.uniform(0.1, 0.3), D2=r.uniform(0.1, 0.4), Q1=r.uniform(0.5, 2), G1=r.uniform(0, 1),
              Q2=r.uniform(0.5, 2), G2=r.uniform(0, 1), N1=r.uniform(0.5, 2), N2=r.uniform(0.5, 2),
              x0=[r.uniform(-1, 1)])
    kw.update(zero)
    return constant_spec(n=1, m1=1, m2=1, **kw)


def _both_modes(spec, grid):
    out = {}
    for mode in ("rederived", "verbatim"):
        lead, aug, bars = _leader_pieces(spec, grid, mode)
        out[mode] = (lead, co.build_gains(bars, aug, lead.P1c, lead.P2c, mode))
    return out


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_modes_agree_where_printed_blocks_are_inactive(seed):
    # With B1 = C = D1 = B2 = 0 every block where the two modes differ vanishes.
    spec = _scalar_instance(np.random.default_rng(seed), B1=0.0, C=0.0, D1=0.0, B2=0.0)
    out = _both_modes(spec, TimeGrid(1.0, 50))
    (la, ga), (lb, gb) = out["rederived"], out["verbatim"]
    np.testing.assert_allclose(la.P1c, lb.P1c, rtol=0, atol=1e-10)
    np.testing.assert_allclose(la.P2c, lb.P2c, rtol=0, atol=1e-10)
    for k in range(1, 13):
        a, b = getattr(ga, f"Sigma{k}"), getattr(gb, f"Sigma{k}")
        assert np.abs(a - b).max() <= 1e-10 * (1 + np.abs(a).max()), k


def test_modes_differ_on_generic_instance():
    out = _both_modes(_scalar_instance(np.random.default_rng(3)), TimeGrid(1.0, 50))
    gap = max(np.abs(getattr(out["rederived"][1], f"Sigma{k}") - getattr(out["verbatim"][1], f"Sigma{k}")).max()
              for k in range(1, 13))
    assert gap > 1e-3


def test_uncorrected_first_gain_is_dimension_defect():
    from slqgame.errors import DimensionDefect
    eq = equilibrium("scalar-smoke", 20)
    with pytest.raises(DimensionDefect):
        co.sigma1_uncorrected(eq.aug, eq.leader.P1c, eq.leader.P2c)


def test_gains_bit_identical_on_rebuild():
    spec = _random_instance(4)
    grid = TimeGrid(1.0, 30)
    a, b = build_equilibrium(spec, grid), build_equilibrium(spec, grid)
    for k, v in a.gains.families().items():
        assert np.array_equal(v, getattr(b.gains, k)), k


def test_zero_leader_channels_give_zero_leader_control():
    spec = constant_spec(n=1, m1=1, m2=1, A=-0.2, B1=0.8, C=0.3, D1=0.2, Q1=1.0, G1=0.5,
                         Q2=1.0, G2=0.5, x0=[1.0])
    eq = build_equilibrium(spec, TimeGrid(1.0, 40))
    for k in ("K_u2_X", "K_u2_Xh", "K_u2_P3", "K_u2_P3h"):
        assert np.abs(getattr(eq.gains, k)).max() == 0.0, k
