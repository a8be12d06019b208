"""Sample paths: Brownian increments, observation and filter recursions, densities, the third
costate by regression Monte Carlo, and the closed-loop equilibrium dynamics."""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from itertools import combinations_with_replacement

import numpy as np

from . import coefficients as co
from .equilibrium import Equilibrium, estimate_cost, recover_adjoints
from .errors import ConfigError, RegressionIllConditioned
from .model import GameSpec, TimeGrid

RIDGE = 1e-8
GRAM_COND_MAX = 1e10
MEASURES = ("P", "Ptilde")


def worker_count():
    try:
        return max(1, int(os.environ.get("SLQ_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------- noise

@dataclass(frozen=True)
class NoiseBundle:
    """Increments of the two scalar Brownian motions, shape (n_paths, n_steps) each.

    ``dWt`` holds the increments of the second motion: the observation noise under the
    physical measure, or the observation itself under the reference measure.
    """

    seed: int
    dt: float
    dW: np.ndarray
    dWt: np.ndarray

    @property
    def n_paths(self):
        return self.dW.shape[0]

    @property
    def n_steps(self):
        return self.dW.shape[1]

    def path_seed(self, i):
        return np.random.SeedSequence(entropy=self.seed, spawn_key=(i,))

    def coarsened(self, factor: int) -> "NoiseBundle":
        """Sum consecutive increments; the same Brownian paths on a grid ``factor`` times coarser."""
        if self.n_steps % factor:
            raise ConfigError(f"cannot coarsen {self.n_steps} steps by {factor}")
        s = (self.n_paths, self.n_steps // factor, factor)
        return NoiseBundle(self.seed, self.dt * factor, self.dW.reshape(s).sum(-1), self.dWt.reshape(s).sum(-1))

    def subset(self, idx) -> "NoiseBundle":
        return NoiseBundle(self.seed, self.dt, self.dW[idx], self.dWt[idx])


def _path_increments(seed, i, n_steps, sdt):
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
    return rng.standard_normal((2, n_steps)) * sdt


def generate_noise(seed: int, n_paths: int, grid: TimeGrid) -> NoiseBundle:
    """Per-path substreams keyed by (seed, path index); the result does not depend on threading."""
    if n_paths < 1:
        raise ConfigError("n_paths must be >= 1")
    N, sdt = grid.n_steps, np.sqrt(grid.dt)
    out = np.empty((2, n_paths, N))

    def fill(lo, hi):
        for i in range(lo, hi):
            out[:, i] = _path_increments(seed, i, N, sdt)

    w = worker_count()
    if w == 1 or n_paths < 256:
        fill(0, n_paths)
    else:
        edges = np.linspace(0, n_paths, w + 1).astype(int)
        with ThreadPoolExecutor(w) as ex:
            list(ex.map(lambda ab: fill(*ab), zip(edges[:-1], edges[1:])))
    return NoiseBundle(int(seed), grid.dt, out[0], out[1])


# ---------------------------------------------------------------- observation, filter, densities

@dataclass(frozen=True)
class FilterPaths:
    """Signal, observation, their filters and the densities on the grid.

    Per-step arrays have shape (P, N); per-point arrays (P, N+1) or (P, N+1, n).
    """

    times: np.ndarray
    measure: str
    xtilde: np.ndarray
    xtilde_hat: np.ndarray
    Y: np.ndarray
    dW: np.ndarray
    dWt: np.ndarray
    dY: np.ndarray
    dWhat: np.ndarray
    kappa: np.ndarray
    kappa_hat: np.ndarray
    logZ: np.ndarray
    logZhat: np.ndarray

    @property
    def Z(self):
        return np.exp(self.logZ)

    @property
    def Zinv(self):
        return np.exp(-self.logZ)

    @property
    def Zhat(self):
        return np.exp(self.logZhat)

    @property
    def n_paths(self):
        return self.xtilde.shape[0]


def simulate_xtilde_and_filter(spec: GameSpec, grid: TimeGrid, noise: NoiseBundle, measure: str = "P") -> FilterPaths:
    """Euler scheme for the signal and its filter, both driven by the same observation increment.

    Under "P" the second noise column is the observation noise and dY = h'xtilde dt + dWt.
    Under "Ptilde" the second column is dY itself and the observation noise is recovered as
    dY - h'xtilde dt.  Because the signal and its filter use the identical update formula,
    xtilde_hat equals xtilde bit for bit whenever C2 = 0.
    """
    if measure not in MEASURES:
        raise ConfigError(f"unknown measure {measure!r}")
    if abs(noise.dt - grid.dt) > 1e-12 * grid.dt or noise.n_steps != grid.n_steps:
        raise ConfigError("noise bundle does not match the grid")
    t = grid.times
    P, N, n, dt = noise.n_paths, grid.n_steps, spec.n, grid.dt
    C1, C2, C3, h = (spec.path(k).at(t) for k in ("C1", "C2", "C3", "h"))
    M = C1 - C3 @ co.T(h)
    xt = np.empty((P, N + 1, n))
    xh = np.empty((P, N + 1, n))
    kap = np.empty((P, N + 1))
    kaph = np.empty((P, N + 1))
    dY = np.empty((P, N))
    dWt = np.empty((P, N))
    xt[:, 0] = spec.xtilde0
    xh[:, 0] = spec.xtilde0
    for i in range(N):
        hv = h[i, :, 0]
        kap[:, i] = xt[:, i] @ hv
        kaph[:, i] = xh[:, i] @ hv
        if measure == "P":
            dWt[:, i] = noise.dWt[:, i]
            dY[:, i] = kap[:, i] * dt + dWt[:, i]
        else:
            dY[:, i] = noise.dWt[:, i]
            dWt[:, i] = dY[:, i] - kap[:, i] * dt
        obs = dY[:, i, None] * C3[i, :, 0]
        xt[:, i + 1] = xt[:, i] + (xt[:, i] @ M[i].T) * dt + (noise.dW[:, i, None] * C2[i, :, 0] + obs)
        xh[:, i + 1] = xh[:, i] + (xh[:, i] @ M[i].T) * dt + obs
    hN = h[N, :, 0]
    kap[:, N] = xt[:, N] @ hN
    kaph[:, N] = xh[:, N] @ hN
    dWhat = dY - kaph[:, :-1] * dt
    logZ = np.zeros((P, N + 1))
    logZ[:, 1:] = np.cumsum(-kap[:, :-1] * dWt - 0.5 * kap[:, :-1] ** 2 * dt, axis=1)
    logZh = np.zeros((P, N + 1))
    logZh[:, 1:] = np.cumsum(-kaph[:, :-1] * dWhat - 0.5 * kaph[:, :-1] ** 2 * dt, axis=1)
    Y = np.zeros((P, N + 1))
    Y[:, 1:] = np.cumsum(dY, axis=1)
    return FilterPaths(t, measure, xt, xh, Y, noise.dW.copy(), dWt, dY, dWhat, kap, kaph, logZ, logZh)


def girsanov_density(spec: GameSpec, grid: TimeGrid, fp: FilterPaths):
    """(Z, Zinv) from their own exponential formulas, accumulated in log space.

    Z = exp(-int kappa dWt - 1/2 int kappa^2 dt), Zinv = exp(int kappa dY - 1/2 int kappa^2 dt).
    """
    dt = grid.dt
    k = fp.kappa[:, :-1]
    P = fp.n_paths
    lz = np.zeros((P, grid.n_steps + 1))
    lzi = np.zeros_like(lz)
    lz[:, 1:] = np.cumsum(-k * fp.dWt - 0.5 * k ** 2 * dt, axis=1)
    lzi[:, 1:] = np.cumsum(k * fp.dY - 0.5 * k ** 2 * dt, axis=1)
    return np.exp(lz), np.exp(lzi), lz, lzi


# ---------------------------------------------------------------- regression Monte Carlo

def _whiten(V, rel=1e-6):
    """Affine map of the columns of V to uncorrelated unit-variance coordinates, dropping
    directions whose spread is negligible relative to the largest one."""
    if V.shape[1] == 0:
        return V
    c = V - V.mean(axis=0)
    scale = np.sqrt(V.shape[0])
    _, s, vt = np.linalg.svd(c / scale, full_matrices=False)
    if s.size == 0 or s[0] <= 1e-14 * (1.0 + np.abs(V).max()):
        return V[:, :0]
    keep = s > rel * s[0]
    return c @ vt[keep].T / s[keep]


def regression_basis(V, degree=2):
    """Polynomials up to ``degree`` in the whitened columns of V, constant first."""
    Z = _whiten(np.asarray(V, dtype=float))
    cols = [np.ones(Z.shape[0])]
    for d in range(1, degree + 1):
        for combo in combinations_with_replacement(range(Z.shape[1]), d):
            cols.append(np.prod(Z[:, combo], axis=1))
    return np.stack(cols, axis=1)


def conditional_expectation(B, targets, step=None):
    """Ridge least-squares projection of ``targets`` (P, k) onto the basis B (P, m)."""
    P = B.shape[0]
    G = B.T @ B / P
    G[np.diag_indices_from(G)] += RIDGE
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > GRAM_COND_MAX:
        raise RegressionIllConditioned(f"regression Gram matrix condition {cond:.3g} at step {step}", step=step, cond=cond)
    coef = np.linalg.solve(G, B.T @ targets / P)
    return B @ coef


@dataclass(frozen=True)
class ThirdCostate:
    P3: np.ndarray
    P3h: np.ndarray
    Q3: np.ndarray
    exact_zero: bool


def solve_p3_bsde(eq: Equilibrium, fp: FilterPaths, degree: int = 2) -> ThirdCostate:
    """Backward regression scheme for the third costate and its filtered version.

    The filtered process is regressed on polynomials in xtilde_hat, the unfiltered one on
    polynomials in (xtilde_hat, xtilde - xtilde_hat).  When h vanishes identically the
    equations have zero driver and terminal value and the exact zero solution is returned.
    """
    g, lead = eq.gains, eq.leader
    P, N1 = fp.kappa.shape
    N, dt, d = N1 - 1, eq.grid.dt, 2 * eq.n
    zeros = np.zeros((P, N1, d))
    h = eq.values["h"]
    gap = fp.kappa - fp.kappa_hat
    if not np.any(h) or not np.any(gap):
        # zero terminal value and a driver that vanishes at zero: the solution is exactly zero
        return ThirdCostate(zeros, zeros.copy(), zeros.copy(), True)
    src = np.einsum("ij,kj->ki", g.source_proj, (lead.P2c @ eq.Ctc)[..., 0])
    kp = g.kappa_proj
    P3 = zeros.copy()
    P3h = zeros.copy()
    Q3 = zeros.copy()
    for i in range(N - 1, -1, -1):
        Bh = regression_basis(fp.xtilde_hat[:, i], degree)
        Bf = regression_basis(np.concatenate([fp.xtilde_hat[:, i], fp.xtilde[:, i] - fp.xtilde_hat[:, i]], axis=1), degree)
        nxt_h = P3h[:, i + 1]
        Q3[:, i] = conditional_expectation(Bh, nxt_h * fp.dWhat[:, i, None], i) / dt
        drv_h = nxt_h @ g.Lhat[i].T + gap[:, i, None] * src[i] - fp.kappa_hat[:, i, None] * (Q3[:, i] @ kp.T)
        P3h[:, i] = conditional_expectation(Bh, nxt_h + dt * drv_h, i)
        nxt = P3[:, i + 1]
        drv = (nxt @ g.L3[i].T + nxt_h @ g.L3h[i].T + gap[:, i, None] * src[i]
               - fp.kappa[:, i, None] * (Q3[:, i] @ kp.T))
        P3[:, i] = conditional_expectation(Bf, nxt + dt * drv, i)
    return ThirdCostate(P3, P3h, Q3, False)


# ---------------------------------------------------------------- closed loop

@dataclass(frozen=True)
class TrajectorySet:
    times: np.ndarray
    seed: int
    measure: str
    X: np.ndarray
    Xh: np.ndarray
    x: np.ndarray
    xhat: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    u2_hat: np.ndarray
    P3: np.ndarray
    P3h: np.ndarray
    Q3: np.ndarray
    xtilde: np.ndarray
    xtilde_hat: np.ndarray
    Y: np.ndarray
    dW: np.ndarray
    dWt: np.ndarray
    dY: np.ndarray
    dWhat: np.ndarray
    kappa: np.ndarray
    kappa_hat: np.ndarray
    Z: np.ndarray
    Zinv: np.ndarray
    Zhat: np.ndarray
    adjoints: object = None

    def __getattr__(self, name):
        adj = object.__getattribute__(self, "adjoints")
        if adj is not None and hasattr(adj, name):
            return getattr(adj, name)
        raise AttributeError(name)

    @property
    def n_paths(self):
        return self.X.shape[0]


def _step_mv(M, v):
    return v @ M.T


def simulate_closed_loop(eq: Equilibrium, noise: NoiseBundle, measure: str = "P",
                         costate: ThirdCostate | None = None, fp: FilterPaths | None = None) -> TrajectorySet:
    """Euler scheme for the augmented state and its filter under one noise bundle.

    The filter is driven by the innovation increment dY - h'xtilde_hat dt.  Controls are
    evaluated from the feedback laws at every grid point and adjoints are recovered at the end.
    """
    spec, grid, g = eq.spec, eq.grid, eq.gains
    if fp is None:
        fp = simulate_xtilde_and_filter(spec, grid, noise, measure)
    if costate is None:
        costate = solve_p3_bsde(eq, fp)
    P, N, n, dt = noise.n_paths, grid.n_steps, spec.n, grid.dt
    d = 2 * n
    X = np.empty((P, N + 1, d))
    Xh = np.empty((P, N + 1, d))
    u1 = np.empty((P, N + 1, spec.m1))
    u2 = np.empty((P, N + 1, spec.m2))
    u2h = np.empty((P, N + 1, spec.m2))
    X[:, 0] = eq.aug.X0c
    Xh[:, 0] = eq.aug.X0c
    ct = eq.Ctc[:, :, 0]
    P3, P3h, Q3 = costate.P3, costate.P3h, costate.Q3
    for i in range(N + 1):
        xi, xhi, p3, p3h = X[:, i], Xh[:, i], P3[:, i], P3h[:, i]
        u2[:, i] = eq.u2_law.at_step(i, X=xi, Xh=xhi, P3=p3, P3h=p3h)
        u2h[:, i] = eq.u2hat_law.at_step(i, Xh=xhi, P3h=p3h)
        u1[:, i] = eq.u1_law.at_step(i, Xh=xhi, P3h=p3h, Q3=Q3[:, i])
        if i == N:
            break
        drift = xi @ g.Sigma3[i].T + xhi @ g.Sigma4[i].T + p3 @ g.Sigma5[i].T + p3h @ g.Sigma6[i].T
        diff = xi @ g.Sigma7[i].T + xhi @ g.Sigma8[i].T + p3 @ g.Sigma9[i].T + p3h @ g.Sigma10[i].T
        X[:, i + 1] = xi + drift * dt + diff * fp.dW[:, i, None] + fp.dWt[:, i, None] * ct[i]
        Xh[:, i + 1] = xhi + (xhi @ g.Sigma11[i].T + p3h @ g.Sigma12[i].T) * dt + fp.dWhat[:, i, None] * ct[i]
    traj = TrajectorySet(
        times=grid.times, seed=noise.seed, measure=fp.measure, X=X, Xh=Xh, x=X[..., :n], xhat=Xh[..., :n],
        u1=u1, u2=u2, u2_hat=u2h, P3=P3, P3h=P3h, Q3=Q3,
        xtilde=fp.xtilde, xtilde_hat=fp.xtilde_hat, Y=fp.Y, dW=fp.dW, dWt=fp.dWt, dY=fp.dY, dWhat=fp.dWhat,
        kappa=fp.kappa, kappa_hat=fp.kappa_hat, Z=fp.Z, Zinv=fp.Zinv, Zhat=fp.Zhat,
    )
    return replace(traj, adjoints=recover_adjoints(traj, eq))


# ---------------------------------------------------------------- physical engine

@dataclass(frozen=True)
class ControlledRun:
    """States and controls of the original (non-augmented) system under given controls."""

    times: np.ndarray
    x: np.ndarray
    xhat: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    u2_hat: np.ndarray


def simulate_controlled(spec: GameSpec, grid: TimeGrid, fp: FilterPaths, u1_policy, u2, u2_hat) -> ControlledRun:
    """Euler scheme for x and its filter x_hat with realized leader controls.

    ``u1_policy(i, xhat_i)`` returns the follower control at step i from the current filter
    value (it may ignore it); ``u2``/``u2_hat`` are realized (P, N+1, m2) processes.
    """
    t = grid.times
    v = co.spec_values(spec, t)
    P, N, n, dt = fp.n_paths, grid.n_steps, spec.n, grid.dt
    x = np.empty((P, N + 1, n))
    xh = np.empty((P, N + 1, n))
    u1 = np.empty((P, N + 1, spec.m1))
    x[:, 0] = spec.x0
    xh[:, 0] = spec.x0
    A, B1, B2, C, D1, D2, Ct = (v[k] for k in ("A", "B1", "B2", "C", "D1", "D2", "Ctilde"))
    for i in range(N + 1):
        u1[:, i] = u1_policy(i, xh[:, i])
        if i == N:
            break
        xi, ui, wi = x[:, i], u1[:, i], u2[:, i]
        drift = xi @ A[i].T + ui @ B1[i].T + wi @ B2[i].T
        diff = xi @ C[i].T + ui @ D1[i].T + wi @ D2[i].T
        x[:, i + 1] = xi + drift * dt + diff * fp.dW[:, i, None] + fp.dWt[:, i, None] * Ct[i, :, 0]
        dh = xh[:, i] @ A[i].T + ui @ B1[i].T + u2_hat[:, i] @ B2[i].T
        xh[:, i + 1] = xh[:, i] + dh * dt + fp.dWhat[:, i, None] * Ct[i, :, 0]
    return ControlledRun(t, x, xh, u1, np.asarray(u2), np.asarray(u2_hat))


def replay_policy(u1_archive, perturbation=None, eps=0.0):
    """Follower policy replaying an archived control plus eps times a perturbation v(i, xhat)."""
    def policy(i, xh):
        u = u1_archive[:, i]
        if eps != 0.0 and perturbation is not None:
            u = u + eps * perturbation(i, xh)
        return u
    return policy


# ---------------------------------------------------------------- measure change

def measure_transform_check(eq: Equilibrium, n_paths: int, seed: int):
    """Follower cost estimated under the physical measure and, separately, under the reference
    measure with density weights; independent noise for the two estimates.

    Returns (direct, weighted) CostEstimates.
    """
    grid = eq.grid
    noise = generate_noise(seed, n_paths, grid)
    direct = simulate_closed_loop(eq, noise, "P")
    est_p = estimate_cost(direct, eq.spec, "follower")
    noise2 = generate_noise(seed + 1, n_paths, grid)
    ref = simulate_closed_loop(eq, noise2, "Ptilde")
    est_q = estimate_cost(ref, eq.spec, "follower", weights=ref.Zinv)
    return est_p, est_q


# ---------------------------------------------------------------- export

EXPORT_VARIABLES = ("x", "xtilde", "Y", "Z", "Zinv", "xtilde_hat", "Zhat", "dWhat", "X", "Xh", "u1", "u2",
                    "u2_hat", "P3", "P3h", "Q3", "Phi", "Zaug", "Ztaug", "phi", "beta", "q", "k", "ktilde")


def _as3(a, N1):
    a = np.asarray(a)
    if a.ndim == 2:
        if a.shape[1] == N1 - 1:
            a = np.concatenate([a, np.full((a.shape[0], 1), np.nan)], axis=1)
        a = a[..., None]
    return a


def export_csv(traj: TrajectorySet, path, variables=EXPORT_VARIABLES, max_paths=None):
    """Long-format CSV: path, step, variable, component, value (17 significant digits)."""
    N1 = len(traj.times)
    P = traj.n_paths if max_paths is None else min(max_paths, traj.n_paths)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("path,step,variable,component,value\n")
        for name in variables:
            a = _as3(getattr(traj, name), N1)[:P]
            p, s, c = np.meshgrid(np.arange(P), np.arange(N1), np.arange(a.shape[2]), indexing="ij")
            for pp, ss, cc, val in zip(p.ravel(), s.ravel(), c.ravel(), a.ravel()):
                fh.write(f"{pp},{ss},{name},{cc},{val:.17g}\n")


MAGIC = b"SLQ1"


def export_binary(traj: TrajectorySet, path, variables=EXPORT_VARIABLES):
    """Binary dump: magic, u32 variable count, u32 paths, u32 points; then per variable a
    u16 name length, the UTF-8 name, u32 components and little-endian float64 data in
    (path, point, component) order."""
    N1 = len(traj.times)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", len(variables), traj.n_paths, N1))
        for name in variables:
            a = _as3(getattr(traj, name), N1)
            b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(b)))
            fh.write(b)
            fh.write(struct.pack("<I", a.shape[2]))
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_binary(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ConfigError("not an SLQ1 trajectory dump")
    nv, P, N1 = struct.unpack_from("<III", data, 4)
    off = 16
    out = {}
    for _ in range(nv):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + ln].decode("utf-8")
        off += ln
        (c,) = struct.unpack_from("<I", data, off)
        off += 4
        cnt = P * N1 * c
        out[name] = np.frombuffer(data, dtype="<f8", count=cnt, offset=off).reshape(P, N1, c)
        off += 8 * cnt
    return out
