"""Backward Riccati integration for the follower and the leader's coupled 2n-dimensional system."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from . import coefficients as co
from .errors import AssumptionA32Violated, BlowUp, SingularNtilde1
from .model import GameSpec, TimeGrid, sym

BLOWUP_NORM = 1e12


def follower_rhs(v, P):
    """dP1/dt for a batch of coefficient values ``v`` (dict of (K, r, c) stacks)."""
    A, B1, C, D1, N1, Q1 = (v[k] for k in ("A", "B1", "C", "D1", "N1", "Q1"))
    S1 = P @ B1 + co.T(C) @ P @ D1
    Nt = sym(N1 + co.T(D1) @ P @ D1)
    return sym(-P @ A - co.T(A) @ P - co.T(C) @ P @ C - Q1 + S1 @ np.linalg.solve(Nt, co.T(S1)))


def _ntilde1_min_eig(v, P):
    Nt = sym(v["N1"] + co.T(v["D1"]) @ P @ v["D1"])
    return np.linalg.eigvalsh(Nt).min(axis=-1)


def _stage_values(spec, grid):
    """Coefficient stacks at grid points and at step midpoints."""
    t = grid.times
    mid = 0.5 * (t[:-1] + t[1:])
    return co.spec_values(spec, t), co.spec_values(spec, mid)


def _take(vals, i):
    return {k: v[i:i + 1] for k, v in vals.items()}


@dataclass(frozen=True)
class FollowerRiccatiSolution:
    times: np.ndarray
    P1: np.ndarray
    ntilde1_min_eig: np.ndarray
    solved: bool = True

    @property
    def grid(self):
        return TimeGrid(float(self.times[-1]), len(self.times) - 1)


def solve_follower_riccati(spec: GameSpec, grid: TimeGrid) -> FollowerRiccatiSolution:
    """Classical RK4 backward from P1(T) = G1 with symmetrization after every step."""
    vg, vm = _stage_values(spec, grid)
    N, dt, times = grid.n_steps, grid.dt, grid.times
    P = np.empty((N + 1, spec.n, spec.n))
    eig = np.empty(N + 1)
    P[N] = spec.G1
    eig[N] = _ntilde1_min_eig(_take(vg, N), P[N:N + 1])[0]
    for i in range(N - 1, -1, -1):
        y = P[i + 1][None]
        a, m, b = _take(vg, i + 1), _take(vm, i), _take(vg, i)
        stage_eigs = []

        def f(v, Y):
            stage_eigs.append(_ntilde1_min_eig(v, Y)[0])
            if stage_eigs[-1] <= co.INV_MARGIN:
                raise AssumptionA32Violated(
                    f"N1 + D1'P1D1 lost positive definiteness near t={times[i]:.6g} (min eig {stage_eigs[-1]:.3g})",
                    t=float(times[i]), margin=float(stage_eigs[-1]))
            return f_raw(v, Y)

        f_raw = follower_rhs
        k1 = f(a, y)
        k2 = f(m, y - 0.5 * dt * k1)
        k3 = f(m, y - 0.5 * dt * k2)
        k4 = f(b, y - dt * k3)
        y = sym(y - dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
        if not np.all(np.isfinite(y)) or np.linalg.norm(y[0], 2) > BLOWUP_NORM:
            raise BlowUp(f"follower Riccati exceeded {BLOWUP_NORM:g} at t={times[i]:.6g}", t=float(times[i]))
        P[i] = y[0]
        e = _ntilde1_min_eig(_take(vg, i), y)[0]
        eig[i] = min(e, min(stage_eigs))
        if eig[i] <= co.INV_MARGIN:
            raise AssumptionA32Violated(f"N1 + D1'P1D1 not positive definite at t={times[i]:.6g}",
                                        t=float(times[i]), margin=float(eig[i]))
    P.setflags(write=False)
    return FollowerRiccatiSolution(times, P, eig, True)


@dataclass(frozen=True)
class LeaderRiccatiSolution:
    times: np.ndarray
    mode: str
    P1: np.ndarray
    P1c: np.ndarray
    P2c: np.ndarray
    cond_Ntilde2: np.ndarray
    cond_Nbar2: np.ndarray
    blowup_at: float | None = None

    @property
    def solved(self):
        return self.blowup_at is None


def _leader_stage(spec, v, P1f, P1c, P2c, t, mode):
    try:
        fd = co.follower_blocks(v, P1f, np.array([t]))
    except SingularNtilde1 as e:
        raise AssumptionA32Violated(str(e), t=e.t, margin=e.margin) from None
    aug = co.augmented_blocks(v, fd, spec.G2, spec.x0, mode)
    bars = co.bar_blocks(aug, v["N2"])
    d1, d2 = co.leader_rhs(aug, bars, P1c, P2c, mode)
    _, c1, _, c2 = co.printed_inverses(aug, bars, P1c, strict=(mode == "verbatim"))
    return follower_rhs(v, P1f), d1, d2, c1[0], c2[0]


def solve_leader_riccati(spec: GameSpec, grid: TimeGrid, mode: str = "rederived") -> LeaderRiccatiSolution:
    """Integrate (P1, P1c, P2c) jointly backward by RK4 from (G1, G2c, 0).

    The follower block is carried along so that the augmented coefficients are available at
    every stage time; its values coincide with ``solve_follower_riccati`` on the same grid.
    On blow-up the partially filled solution is returned with ``blowup_at`` set.
    """
    vg, vm = _stage_values(spec, grid)
    n, N, dt, times = spec.n, grid.n_steps, grid.dt, grid.times
    d = 2 * n
    P1 = np.full((N + 1, n, n), np.nan)
    P1c = np.full((N + 1, d, d), np.nan)
    P2c = np.full((N + 1, d, d), np.nan)
    c_t = np.full(N + 1, np.nan)
    c_b = np.full(N + 1, np.nan)
    P1[N] = spec.G1
    P1c[N] = 0.0
    P1c[N, :n, :n] = spec.G2
    P2c[N] = 0.0
    blowup = None
    for i in range(N - 1, -1, -1):
        y = (P1[i + 1][None], P1c[i + 1][None], P2c[i + 1][None])
        a, m, b = _take(vg, i + 1), _take(vm, i), _take(vg, i)
        tm = times[i + 1] - 0.5 * dt
        conds = []

        def f(v, t, Y):
            r = _leader_stage(spec, v, *Y, t, mode)
            conds.append(r[3:])
            return r[:3]

        def axpy(Y, K, s):
            return tuple(yy - s * kk for yy, kk in zip(Y, K))

        k1 = f(a, times[i + 1], y)
        k2 = f(m, tm, axpy(y, k1, 0.5 * dt))
        k3 = f(m, tm, axpy(y, k2, 0.5 * dt))
        k4 = f(b, times[i], axpy(y, k3, dt))
        y = tuple(sym(yy - dt / 6.0 * (q1 + 2 * q2 + 2 * q3 + q4)) for yy, q1, q2, q3, q4 in zip(y, k1, k2, k3, k4))
        if i + 1 == N:
            c_t[N], c_b[N] = conds[0]
        c_t[i] = max(c[0] for c in conds)
        c_b[i] = max(c[1] for c in conds)
        if not all(np.all(np.isfinite(yy)) for yy in y) or max(np.linalg.norm(yy[0], 2) for yy in y) > BLOWUP_NORM:
            blowup = float(times[i])
            break
        P1[i], P1c[i], P2c[i] = y[0][0], y[1][0], y[2][0]
    for a_ in (P1, P1c, P2c, c_t, c_b):
        a_.setflags(write=False)
    return LeaderRiccatiSolution(times, mode, P1, P1c, P2c, c_t, c_b, blowup)


def standalone_p1c(spec: GameSpec, grid: TimeGrid, mode: str = "rederived", rtol=1e-11, atol=1e-12):
    """Independent integration of the rewritten first leader equation (adaptive DOP853).

    Returns P1c on the grid times.
    """
    n = spec.n
    d = 2 * n

    def rhs(t, yv):
        P1f = yv[: n * n].reshape(1, n, n)
        P1c = yv[n * n:].reshape(1, d, d)
        v = co.spec_values(spec, [min(max(t, 0.0), spec.horizon_T)])
        fd = co.follower_blocks(v, P1f, np.array([t]))
        aug = co.augmented_blocks(v, fd, spec.G2, spec.x0, mode)
        bars = co.bar_blocks(aug, v["N2"])
        dp = co.standalone_p1_rhs(aug, bars, P1c, mode)
        return np.concatenate([follower_rhs(v, P1f).ravel(), dp.ravel()])

    y0 = np.zeros(n * n + d * d)
    y0[: n * n] = spec.G1.ravel()
    G2c = np.zeros((d, d))
    G2c[:n, :n] = spec.G2
    y0[n * n:] = G2c.ravel()
    t = grid.times
    sol = solve_ivp(rhs, (t[-1], t[0]), y0, method="DOP853", t_eval=t[::-1], rtol=rtol, atol=atol)
    if not sol.success:
        raise BlowUp(f"stand-alone integration failed: {sol.message}")
    out = sol.y[n * n:, ::-1].T.reshape(-1, d, d)
    return sym(out)


def _centered(P, dt):
    return (P[2:] - P[:-2]) / (2 * dt)


def riccati_residual(solution, spec: GameSpec, grid: TimeGrid | None = None) -> dict:
    """Centered finite-difference derivative versus the right-hand side at interior grid points.

    Follower solutions report the compact form (with the tilde blocks) and the expanded full
    form; leader solutions report both coupled equations and the stand-alone rewrite of the
    first one.  Values are per-interior-point Frobenius norms plus their maxima.
    """
    times = solution.times
    dt = times[1] - times[0]
    v = co.spec_values(spec, times[1:-1])
    out = {}
    if isinstance(solution, FollowerRiccatiSolution):
        P = solution.P1
        fd_ = _centered(P, dt)
        Pi = P[1:-1]
        full = follower_rhs(v, Pi)
        fdb = co.follower_blocks(v, Pi, times[1:-1])
        compact = sym(-Pi @ v["A"] - co.T(v["A"]) @ Pi - co.T(v["C"]) @ Pi @ v["C"] - v["Q1"] + fdb.StildeStilde1)
        out["compact"] = np.linalg.norm(fd_ - compact, axis=(1, 2))
        out["full"] = np.linalg.norm(fd_ - full, axis=(1, 2))
    else:
        fdb = co.follower_blocks(v, solution.P1[1:-1], times[1:-1])
        aug = co.augmented_blocks(v, fdb, spec.G2, spec.x0, solution.mode)
        bars = co.bar_blocks(aug, v["N2"])
        P1c, P2c = solution.P1c[1:-1], solution.P2c[1:-1]
        d1, d2 = co.leader_rhs(aug, bars, P1c, P2c, solution.mode)
        ds = co.standalone_p1_rhs(aug, bars, P1c, solution.mode)
        g1, g2 = _centered(solution.P1c, dt), _centered(solution.P2c, dt)
        out["first"] = np.linalg.norm(g1 - d1, axis=(1, 2))
        out["second"] = np.linalg.norm(g2 - d2, axis=(1, 2))
        out["first_standalone"] = np.linalg.norm(g1 - ds, axis=(1, 2))
    out["max"] = {k: float(np.nanmax(a)) for k, a in out.items()}
    return out


def symmetry_defect(P):
    P = np.asarray(P)
    return np.max(np.abs(P - np.swapaxes(P, -1, -2)), axis=(-1, -2))


def min_eig(P):
    return np.linalg.eigvalsh(sym(np.asarray(P))).min(axis=-1)
