"""Equilibrium assembly: feedback laws, adjoint recovery and Monte Carlo cost estimates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import coefficients as co
from .errors import (AssumptionA31Violated, AssumptionA33Violated, AssumptionA34Violated,
                     BlowUp, OutOfRange)
from .model import GameSpec, TimeGrid, validate_spec
from .riccati import solve_follower_riccati, solve_leader_riccati

DTILDE1_POLICIES = ("zero", "minus_D1_scaled")


@dataclass(frozen=True)
class FeedbackLaw:
    """An affine map tabulated on the grid: out = sum_k terms[k][i] @ state[k] + offset[i].

    ``kind`` is "follower", "leader" or "leader_hat" (the filtered leader control).
    """

    kind: str
    times: np.ndarray
    terms: dict
    offset: np.ndarray
    dtilde1: str | None = None

    def index(self, t):
        dt = self.times[1] - self.times[0]
        i = int(round(t / dt))
        if i < 0 or i >= len(self.times) or abs(self.times[i] - t) > 1e-9 * dt:
            raise OutOfRange(f"t={t} is not a grid time of this law")
        return i

    def at_step(self, i, **state):
        out = None
        for k, K in self.terms.items():
            v = np.asarray(state[k]) @ K[i].T
            out = v if out is None else out + v
        return out + self.offset[i]

    def __call__(self, t, **state):
        return self.at_step(self.index(t), **state)

    def linear_part(self, i, **state):
        return self.at_step(i, **state) - self.offset[i]


@dataclass(frozen=True)
class Equilibrium:
    spec: GameSpec
    grid: TimeGrid
    mode: str
    dtilde1: str
    report: object
    follower: object
    leader: object
    values: dict
    fd: co.FollowerDerived
    aug: co.AugmentedCoefficients
    bars: co.ClosedLoopCoefficients
    gains: co.GainSet
    Pi: np.ndarray
    u1_law: FeedbackLaw
    u2_law: FeedbackLaw
    u2hat_law: FeedbackLaw
    Ctc: np.ndarray = field(repr=False, default=None)

    @property
    def times(self):
        return self.grid.times

    @property
    def n(self):
        return self.spec.n


def _raise_static(report):
    for ok, exc, lab in ((report.a31_ok, AssumptionA31Violated, "A3.1"),
                         (report.a33_ok, AssumptionA33Violated, "A3.3"),
                         (report.a34_ok, AssumptionA34Violated, "A3.4")):
        if not ok:
            raise exc(f"assumption {lab} fails (worst margin {report.worst_margin.get(lab)})",
                      margin=report.worst_margin.get(lab))
    if not report.symmetric_ok:
        from .errors import ConfigError
        raise ConfigError(f"non-symmetric coefficients: {report.symmetry_defects}")


def follower_law_terms(fd, gains, Pi, Ctc, dtilde1="zero"):
    """Gain stacks of the nonanticipating follower law in terms of (Xh, P3h, Q3)."""
    if dtilde1 not in DTILDE1_POLICIES:
        raise ValueError(f"unknown dtilde1 policy {dtilde1!r}")
    K, d, _ = Pi.shape
    n = d // 2
    Ni = fd.Ntilde1_inv
    Ex = np.zeros((n, d))
    Ex[:, :n] = np.eye(n)
    Ep = np.zeros((n, d))
    Ep[:, n:] = np.eye(n)
    KhX = gains.K_u2_X + gains.K_u2_Xh
    KhP = gains.K_u2_P3 + gains.K_u2_P3h
    B1t = co.T(fd.B1)
    LX = -Ni @ (co.T(fd.Stilde1) @ Ex + fd.Stilde @ KhX + B1t @ Ep @ Pi)
    LP = -Ni @ (fd.Stilde @ KhP + B1t @ Ep)
    if dtilde1 == "zero":
        Dt = np.zeros_like(fd.D1)
    else:
        Dt = -fd.D1 @ Ni
    LQ = -Ni @ co.T(Dt) @ Ep
    l0 = (-Ni @ co.T(Dt) @ Ep @ Pi @ Ctc)[..., 0]
    return {"Xh": LX, "P3h": LP, "Q3": LQ}, l0


def build_equilibrium(spec: GameSpec, grid: TimeGrid, mode: str = "rederived", dtilde1: str = "zero") -> Equilibrium:
    """Validate, solve both Riccati systems and tabulate every coefficient and law on the grid."""
    report = validate_spec(spec, grid)
    _raise_static(report)
    fol = solve_follower_riccati(spec, grid)
    report = report.updated(a32=type(report.a32)("ok"))
    lead = solve_leader_riccati(spec, grid, mode)
    if not lead.solved:
        raise BlowUp(f"leader Riccati system blew up at t={lead.blowup_at:.6g}", t=lead.blowup_at, partial=lead)
    t = grid.times
    values = co.spec_values(spec, t)
    fd = co.follower_blocks(values, fol.P1, t)
    aug = co.augmented_blocks(values, fd, spec.G2, spec.x0, mode)
    bars = co.bar_blocks(aug, values["N2"])
    gains = co.build_gains(bars, aug, lead.P1c, lead.P2c, mode)
    report = report.updated(a35=type(report.a35)("ok"), a36=type(report.a36)("ok"))
    Pi = lead.P1c + lead.P2c
    Ctc = aug.Ctc
    zero_m2 = np.zeros((len(t), spec.m2))
    u2 = FeedbackLaw("leader", t, {"X": gains.K_u2_X, "Xh": gains.K_u2_Xh, "P3": gains.K_u2_P3,
                                    "P3h": gains.K_u2_P3h}, zero_m2)
    u2h = FeedbackLaw("leader_hat", t, {"Xh": gains.K_u2_X + gains.K_u2_Xh,
                                         "P3h": gains.K_u2_P3 + gains.K_u2_P3h}, zero_m2)
    terms, l0 = follower_law_terms(fd, gains, Pi, Ctc, dtilde1)
    u1 = FeedbackLaw("follower", t, terms, l0, dtilde1)
    return Equilibrium(spec, grid, mode, dtilde1, report, fol, lead, values, fd, aug, bars, gains, Pi,
                       u1, u2, u2h, Ctc)


def _gain_index(gains, t):
    times = gains.times
    dt = times[1] - times[0] if len(times) > 1 else 1.0
    i = int(np.argmin(np.abs(times - t)))
    if abs(times[i] - t) > 1e-9 * dt:
        raise OutOfRange(f"gains are not tabulated at t={t}")
    return i


def eval_u2_star(t, X, Xh, P3, P3h, gains: co.GainSet):
    """Leader's equilibrium control at grid time t; state arguments may carry a leading path axis."""
    i = _gain_index(gains, t)
    return (np.asarray(X) @ gains.K_u2_X[i].T + np.asarray(Xh) @ gains.K_u2_Xh[i].T
            + np.asarray(P3) @ gains.K_u2_P3[i].T + np.asarray(P3h) @ gains.K_u2_P3h[i].T)


def eval_u1_star(t, Xh, P3h, Q3, eq: Equilibrium):
    """Follower's nonanticipating equilibrium control at grid time t."""
    return eq.u1_law(t, Xh=Xh, P3h=P3h, Q3=Q3)


@dataclass(frozen=True)
class Adjoints:
    Phi: np.ndarray
    Phi_hat: np.ndarray
    Zaug: np.ndarray
    Ztaug: np.ndarray
    phi: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    q: np.ndarray
    k: np.ndarray
    ktilde: np.ndarray


def _mv(M, v):
    """Batched (K, r, c) @ (P, K, c) -> (P, K, r)."""
    return np.einsum("krc,pkc->pkr", M, v)


def recover_adjoints(traj, eq: Equilibrium) -> Adjoints:
    """Representation formulas for every adjoint process along simulated paths.

    Needs ``traj`` to carry X, Xh, P3, P3h, Q3, x, u1, u2, Zinv and kappa on the grid.
    """
    g, n, lead = eq.gains, eq.n, eq.leader
    P1c, P2c, Pi = lead.P1c, lead.P2c, eq.Pi
    X, Xh, P3, P3h, Q3 = traj.X, traj.Xh, traj.P3, traj.P3h, traj.Q3
    Phi = _mv(P1c, X) + _mv(P2c, Xh) + P3
    Phi_hat = _mv(Pi, Xh) + P3h
    sigma = _mv(g.Sigma7, X) + _mv(g.Sigma8, Xh) + _mv(g.Sigma9, P3) + _mv(g.Sigma10, P3h)
    Zaug = _mv(P1c, sigma)
    Ztaug = (Pi @ eq.Ctc)[None, :, :, 0] + Q3
    phi, beta, gamma = Phi[..., n:], Ztaug[..., n:], Zaug[..., n:]
    v = eq.values
    P1 = eq.follower.P1
    x, u1, u2 = traj.x, traj.u1, traj.u2
    zi = traj.Zinv[..., None]
    kap = traj.kappa[..., None]
    P1x = _mv(P1, x)
    q = -zi * (P1x + phi)
    drift = _mv(v["C"], x) + _mv(v["D1"], u1) + _mv(v["D2"], u2)
    k = -zi * (_mv(P1, drift) + gamma)
    P1Ct = (P1 @ v["Ctilde"])[None, :, :, 0]
    ktilde = -zi * (P1Ct + kap * P1x + kap * phi + beta)
    return Adjoints(Phi, Phi_hat, Zaug, Ztaug, phi, beta, gamma, q, k, ktilde)


def q_bsde_residual(traj, eq: Equilibrium):
    """Accumulated one-step residual of the follower adjoint equation in observation form.

    Per step: q(i+1) - q(i) + [A'q + C'k - Zinv Q1 x] dt - k dW - ktilde dY, divided by
    Zinv at the start of the step so that paths with large density weights do not dominate.
    Returns the running sum (P, N+1, n); its RMS at T shrinks like sqrt(dt).
    """
    v, dt = eq.values, eq.grid.dt
    q, k, kt = traj.q, traj.k, traj.ktilde
    A, C, Q1 = v["A"][:-1], v["C"][:-1], v["Q1"][:-1]
    drv = (_mv(co.T(A), q[:, :-1]) + _mv(co.T(C), k[:, :-1])
           - traj.Zinv[:, :-1, None] * _mv(Q1, traj.x[:, :-1]))
    r = (q[:, 1:] - q[:, :-1] + drv * dt - k[:, :-1] * traj.dW[..., None] - kt[:, :-1] * traj.dY[..., None])
    r = r / traj.Zinv[:, :-1, None]
    out = np.zeros_like(q)
    out[:, 1:] = np.cumsum(r, axis=1)
    return out


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    std_err: float
    n_paths: int
    player: str

    def __post_init__(self):
        if not np.isfinite(self.mean) or not self.std_err >= 0:
            raise ValueError("cost estimate must be finite with nonnegative standard error")


def _quad(Q, x):
    return np.einsum("pki,kij,pkj->pk", x, Q, x)


def path_costs(run, spec: GameSpec, player: str, weights=None, Q_scale=1.0):
    """Per-path cost: trapezoid of the running cost plus the terminal cost.

    ``weights`` (P, N+1), when given, multiplies the integrand pointwise and the terminal
    term at T (the density-weighted representation).
    """
    times = run.times
    if player == "follower":
        Q, N, G, u = spec.Q1.at(times), spec.N1.at(times), spec.G1, run.u1
    elif player == "leader":
        Q, N, G, u = spec.Q2.at(times), spec.N2.at(times), spec.G2, run.u2
    else:
        raise ValueError(f"unknown player {player!r}")
    x = run.x
    running = Q_scale * _quad(Q, x) + _quad(N, u)
    term = np.einsum("pi,ij,pj->p", x[:, -1], G, x[:, -1])
    if weights is not None:
        running = running * weights
        term = term * weights[:, -1]
    w = np.full(len(times), times[1] - times[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    return 0.5 * (running @ w + term)


def summarize(values, player) -> CostEstimate:
    values = np.asarray(values, dtype=float)
    P = values.size
    se = float(np.std(values, ddof=1) / np.sqrt(P)) if P > 1 else 0.0
    return CostEstimate(float(np.mean(values)), se, P, player)


def estimate_cost(run, spec: GameSpec, player: str, weights=None) -> CostEstimate:
    return summarize(path_costs(run, spec, player, weights), player)
