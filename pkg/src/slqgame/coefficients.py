"""Derived matrix families: follower tilde blocks, augmented blocks, bar blocks and feedback gains.

Everything here is batched over a leading time axis: arrays have shape (K, rows, cols) and the
same code serves grid points and Runge-Kutta stage times.

Two gain modes exist.  ``rederived`` composes the gains numerically from the substitution
chain Phi = P1c X + P2c Xhat + P3, the Zhat solve and the Z solve.  ``verbatim`` transcribes
the printed closed forms (with the dimensionally corrected first leader gain).  The two agree
on instances where the printed typography is immaterial and the stationarity residuals in
``verify`` arbitrate elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import (AssumptionA35Violated, AssumptionA36Violated, DimensionDefect,
                     SingularN2, SingularNtilde1)
from .model import INV_MARGIN, PATH_NAMES, GameSpec, sym

MODES = ("rederived", "verbatim")
COND_CAP = 1e12


def T(a):
    return np.swapaxes(a, -1, -2)


def _eye(K, d):
    return np.broadcast_to(np.eye(d), (K, d, d)).copy()


def spec_values(spec: GameSpec, times) -> dict:
    """All coefficient paths evaluated at ``times``, each as a (K, r, c) stack."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    return {k: spec.path(k).at(times) for k in PATH_NAMES}


def checked_inverse(M, times, exc, what):
    """Inverse of a batch of square matrices with a condition-number guard."""
    cond = np.linalg.cond(M)
    bad = ~np.isfinite(cond) | (cond > COND_CAP)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise exc(f"{what} singular at t={times[i]:.6g} (cond={cond[i]:.3g})", t=float(times[i]), margin=float(cond[i]))
    return np.linalg.inv(M), cond


@dataclass(frozen=True)
class Stacked:
    """Base for dataclasses of time-stacked arrays."""

    def at(self, i):
        """Slice every array field at time index i (keeping a length-1 batch axis)."""
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = v[i:i + 1] if isinstance(v, np.ndarray) and v.ndim >= 1 and v.shape[0] == self.times.shape[0] else v
        return type(self)(**kw)

    def families(self):
        return {f.name: getattr(self, f.name) for f in fields(self)
                if isinstance(getattr(self, f.name), np.ndarray) and getattr(self, f.name).ndim == 3}


@dataclass(frozen=True)
class FollowerDerived(Stacked):
    times: np.ndarray
    Ntilde1: np.ndarray
    Ntilde1_inv: np.ndarray
    Stilde1: np.ndarray
    Stilde: np.ndarray
    Stilde2: np.ndarray
    Stilde3: np.ndarray
    StildeStilde1: np.ndarray
    Stilde4: np.ndarray
    Stilde5: np.ndarray
    Stilde6: np.ndarray
    Atilde: np.ndarray
    Btilde1: np.ndarray
    Btilde2: np.ndarray
    ntilde1_min_eig: np.ndarray
    B1: np.ndarray
    D1: np.ndarray


def follower_blocks(v: dict, P1, times) -> FollowerDerived:
    A, B1, B2, C, D1, D2, N1 = (v[k] for k in ("A", "B1", "B2", "C", "D1", "D2", "N1"))
    Nt1 = sym(N1 + T(D1) @ P1 @ D1)
    eig = np.linalg.eigvalsh(Nt1).min(axis=1)
    if np.any(eig <= INV_MARGIN):
        i = int(np.argmin(eig))
        raise SingularNtilde1(f"N1 + D1'P1D1 not positive definite at t={times[i]:.6g} (min eig {eig[i]:.3g})",
                              t=float(times[i]), margin=float(eig[i]))
    Ni = sym(np.linalg.inv(Nt1))
    S1 = P1 @ B1 + T(C) @ P1 @ D1
    S = T(D1) @ P1 @ D2
    S2 = P1 @ B2 + T(C) @ P1 @ D2
    S3 = -S1 @ Ni @ S + S2
    SS1 = sym(S1 @ Ni @ T(S1))
    S4 = sym(-B1 @ Ni @ T(B1))
    S5 = -D1 @ Ni @ T(S1)
    S6 = -D1 @ Ni @ S
    At = A - B1 @ Ni @ T(S1)
    Bt1 = -B1 @ Ni @ T(D1)
    Bt2 = B2 - B1 @ Ni @ S
    return FollowerDerived(times, Nt1, Ni, S1, S, S2, S3, SS1, S4, S5, S6, At, Bt1, Bt2, eig, B1, D1)


def build_follower_derived(spec: GameSpec, P1sol) -> FollowerDerived:
    t = P1sol.times
    return follower_blocks(spec_values(spec, t), P1sol.P1, t)


@dataclass(frozen=True)
class AugmentedCoefficients(Stacked):
    times: np.ndarray
    mode: str
    A1c: np.ndarray
    A2c: np.ndarray
    B1c: np.ndarray
    B1tc: np.ndarray
    B2c: np.ndarray
    B2tc: np.ndarray
    B3c: np.ndarray
    B3tc: np.ndarray
    C1c: np.ndarray
    C2c: np.ndarray
    Ctc: np.ndarray
    D2c: np.ndarray
    D2tc: np.ndarray
    Q2c: np.ndarray
    Q2tc: np.ndarray
    X0c: np.ndarray
    G2c: np.ndarray


def _diag2(a, b):
    K, n, _ = a.shape
    out = np.zeros((K, 2 * n, 2 * n))
    out[:, :n, :n] = a
    out[:, n:, n:] = b
    return out


def _stack2(top, bottom):
    return np.concatenate([top, bottom], axis=1)


def augmented_blocks(v: dict, fd: FollowerDerived, G2, x0, mode="rederived") -> AugmentedCoefficients:
    """Assemble the 2n-block matrices of the leader's augmented state (x, p) and costate (y, phi).

    In ``rederived`` mode the lower-right block of A2c is Atilde - A, which is what the
    follower's filtered backward equation produces.  ``verbatim`` uses the printed
    Btilde2 - B2, which only conforms when m2 == n.

    ``rederived`` also puts C in the lower-right block of C1c.  The follower's adjoint phi
    carries a Brownian component gamma (its driver depends on x - xhat and on the leader's
    control), and C'gamma enters phi's own drift.  By duality the leader's multiplier p then
    picks up the diffusion C p.  With C1c = diag(C, 0) this term is dropped and the laws
    disagree with a direct solve of the complete-information game whenever C != 0.
    The extra -Ntilde1^-1 D1'gamma_hat in the follower law (D1 != 0) is not represented.
    """
    if mode not in MODES:
        raise ValueError(f"unknown gain mode {mode!r}")
    A, C, B2, D2, Q2, Ct = v["A"], v["C"], v["B2"], v["D2"], v["Q2"], v["Ctilde"]
    K, n, _ = A.shape
    m2 = B2.shape[2]
    z = np.zeros((K, n, n))
    dA = fd.Atilde - A
    if mode == "rederived":
        a22 = dA
    else:
        if m2 != n:
            raise DimensionDefect(f"printed A2c lower block Btilde2 - B2 is {n}x{m2}, needs {n}x{n}")
        a22 = fd.Btilde2 - B2
    B1c = np.block([[z, fd.Stilde4], [T(fd.Stilde4), z]])
    B1tc = np.zeros((K, 2 * n, 2 * n))
    B1tc[:, n:, :n] = fd.Btilde1
    zc = np.zeros((K, n, m2))
    SS = fd.StildeStilde1
    Q2c = np.zeros((K, 2 * n, 2 * n))
    Q2c[:, :n, :n] = Q2
    Q2c[:, :n, n:] = SS
    Q2c[:, n:, :n] = SS
    Q2tc = np.zeros((K, 2 * n, 2 * n))
    Q2tc[:, :n, n:] = -SS
    Q2tc[:, n:, :n] = -SS
    G2c = np.zeros((2 * n, 2 * n))
    G2c[:n, :n] = G2
    X0c = np.concatenate([np.ravel(x0), np.zeros(n)])
    return AugmentedCoefficients(
        times=fd.times, mode=mode,
        A1c=_diag2(A, A), A2c=_diag2(dA, a22), B1c=B1c, B1tc=B1tc,
        B2c=_stack2(B2, zc), B2tc=_stack2(fd.Btilde2 - B2, zc),
        B3c=_stack2(zc, fd.Stilde2), B3tc=_stack2(zc, fd.Stilde3 - fd.Stilde2),
        C1c=_diag2(C, C if mode == "rederived" else z), C2c=_diag2(fd.Stilde5, z),
        Ctc=_stack2(Ct, np.zeros((K, n, 1))),
        D2c=_stack2(D2, zc), D2tc=_stack2(fd.Stilde6, zc),
        Q2c=Q2c, Q2tc=Q2tc, X0c=X0c, G2c=G2c,
    )


def build_augmented(spec: GameSpec, fd: FollowerDerived, mode="rederived") -> AugmentedCoefficients:
    return augmented_blocks(spec_values(spec, fd.times), fd, spec.G2, spec.x0, mode)


@dataclass(frozen=True)
class ClosedLoopCoefficients(Stacked):
    times: np.ndarray
    N2_inv: np.ndarray
    Abar1: np.ndarray
    Abar2: np.ndarray
    Bbar1: np.ndarray
    Bbar2: np.ndarray
    Bbar1t: np.ndarray
    Bbar2t: np.ndarray
    Cbar1: np.ndarray
    Dbar2: np.ndarray
    Cbar2: np.ndarray
    Dbar2t: np.ndarray
    Qbar2: np.ndarray
    Qbar2t: np.ndarray


def bar_blocks(aug: AugmentedCoefficients, N2) -> ClosedLoopCoefficients:
    Ni, _ = checked_inverse(N2, aug.times, SingularN2, "N2")
    Ni = sym(Ni)
    B2, B2t, B3, B3t, D2, D2t = aug.B2c, aug.B2tc, aug.B3c, aug.B3tc, aug.D2c, aug.D2tc
    return ClosedLoopCoefficients(
        times=aug.times, N2_inv=Ni,
        Abar1=aug.A1c - B2 @ Ni @ T(B3),
        Abar2=aug.A2c - B2 @ Ni @ T(B3t) - B2t @ Ni @ T(B3 + B3t),
        Bbar1=sym(-B2 @ Ni @ T(B2)),
        Bbar2=-B2 @ Ni @ T(D2),
        Bbar1t=aug.B1c - B2 @ Ni @ T(B2t) - B2t @ Ni @ T(B2 + B2t),
        Bbar2t=aug.B1tc - B2 @ Ni @ T(D2t) - B2t @ Ni @ T(D2 + D2t),
        Cbar1=aug.C1c - D2 @ Ni @ T(B3),
        Dbar2=sym(-D2 @ Ni @ T(D2)),
        Cbar2=aug.C2c - D2 @ Ni @ T(B3t) - D2t @ Ni @ T(B3 + B3t),
        Dbar2t=-D2 @ Ni @ T(D2t) - D2t @ Ni @ T(D2 + D2t),
        Qbar2=sym(aug.Q2c - B3 @ Ni @ T(B3)),
        Qbar2t=sym(aug.Q2tc - B3 @ Ni @ T(B3t) - B3t @ Ni @ T(B3 + B3t)),
    )


def build_bars(aug: AugmentedCoefficients, spec: GameSpec) -> ClosedLoopCoefficients:
    return bar_blocks(aug, spec_values(spec, aug.times)["N2"])


@dataclass(frozen=True)
class GainSet(Stacked):
    """Feedback and closed-loop gains on a set of times.

    Besides the two printed inverses, ``zsolve_inv`` is the inverse actually used to solve for
    Z in the active mode and the ``G*`` arrays express Z and Zhat linearly:
    Z = GX X + GXh Xhat + GP P3 + GPh P3hat and Zhat = GhX Xhat + GhP P3hat.
    ``L3``/``L3h`` are the P3 and P3hat coefficients of the driver of the P3 equation and
    ``Lhat`` the P3hat coefficient of its filtered version.  ``kappa_proj`` and
    ``source_proj`` encode how the observation drift enters those drivers.
    """

    times: np.ndarray
    mode: str
    Ntilde2_inv: np.ndarray
    Nbar2_inv: np.ndarray
    cond_Ntilde2: np.ndarray
    cond_Nbar2: np.ndarray
    zsolve_inv: np.ndarray
    UX: np.ndarray
    U3: np.ndarray
    Sigma1: np.ndarray
    Sigma2: np.ndarray
    Sigma3: np.ndarray
    Sigma4: np.ndarray
    Sigma5: np.ndarray
    Sigma6: np.ndarray
    Sigma7: np.ndarray
    Sigma8: np.ndarray
    Sigma9: np.ndarray
    Sigma10: np.ndarray
    Sigma11: np.ndarray
    Sigma12: np.ndarray
    GX: np.ndarray
    GXh: np.ndarray
    GP: np.ndarray
    GPh: np.ndarray
    GhX: np.ndarray
    GhP: np.ndarray
    L3: np.ndarray
    L3h: np.ndarray
    Lhat: np.ndarray
    N2_inv: np.ndarray
    kappa_proj: np.ndarray
    source_proj: np.ndarray

    @property
    def K_u2_X(self):
        """u2 = K_u2_X X + K_u2_Xh Xhat + K_u2_P3 P3 + K_u2_P3h P3hat."""
        return -self.N2_inv @ self.UX

    @property
    def K_u2_Xh(self):
        return -self.N2_inv @ self.Sigma1

    @property
    def K_u2_P3(self):
        return -self.N2_inv @ self.U3

    @property
    def K_u2_P3h(self):
        return -self.N2_inv @ self.Sigma2


def printed_inverses(aug, bars, P1c, strict=True):
    """The two printed inverses and their condition numbers: (Nt_inv, cond, Nb_inv, cond)."""
    K, d, _ = P1c.shape
    I = _eye(K, d)
    Ni = bars.N2_inv
    Dsum = aug.D2c + aug.D2tc
    Nt2 = I + P1c @ Dsum @ Ni @ T(Dsum)
    Nb2 = I + P1c @ aug.D2c @ Ni @ T(aug.D2tc)
    if not strict:
        return _soft_inverse(Nt2) + _soft_inverse(Nb2)
    Nt2_inv, c1 = checked_inverse(Nt2, aug.times, AssumptionA35Violated, "I + P1c(D2c+D2tc)N2^-1(D2c+D2tc)'")
    Nb2_inv, c2 = checked_inverse(Nb2, aug.times, AssumptionA36Violated, "I + P1c D2c N2^-1 D2tc'")
    return Nt2_inv, c1, Nb2_inv, c2


def _soft_inverse(M):
    cond = np.linalg.cond(M)
    with np.errstate(all="ignore"):
        try:
            inv = np.linalg.inv(M)
        except np.linalg.LinAlgError:
            inv = np.full_like(M, np.nan)
    return inv, cond


def _loop_blocks(aug, bars):
    """Closed-loop coefficient blocks of the leader's Hamiltonian system after substituting u2."""
    return dict(
        a1=bars.Abar1, a2=bars.Abar2, b1=bars.Bbar1, b2=bars.Bbar1t, c1=bars.Bbar2, c2=bars.Bbar2t,
        s1=bars.Cbar1, s2=bars.Cbar2, s3=T(bars.Bbar2), s4=T(bars.Bbar2t), s5=bars.Dbar2, s6=bars.Dbar2t,
        q1=bars.Qbar2, q2=bars.Qbar2t, r1=T(bars.Abar1), r2=T(bars.Abar2), e1=T(bars.Cbar1), e2=T(bars.Cbar2),
    )


def _z_solves(b, P1c, times):
    K, d, _ = P1c.shape
    I = _eye(K, d)
    zhat_mat = I - P1c @ (b["s5"] + b["s6"])
    z_mat = I - P1c @ b["s5"]
    hinv, _ = checked_inverse(zhat_mat, times, AssumptionA35Violated, "Zhat-solve matrix")
    zinv, _ = checked_inverse(z_mat, times, AssumptionA36Violated, "Z-solve matrix")
    return hinv, zinv


def compose_rederived(aug, bars, P1c, P2c):
    """Gains from numerically composing the substitution chain; returns a dict of stacks."""
    b = _loop_blocks(aug, bars)
    Pi = P1c + P2c
    hinv, zinv = _z_solves(b, P1c, aug.times)
    GhX = hinv @ P1c @ (b["s1"] + b["s2"] + (b["s3"] + b["s4"]) @ Pi)
    GhP = hinv @ P1c @ (b["s3"] + b["s4"])
    GX = zinv @ P1c @ (b["s1"] + b["s3"] @ P1c)
    GXh = zinv @ P1c @ (b["s2"] + b["s3"] @ P2c + b["s4"] @ Pi + b["s6"] @ GhX)
    GP = zinv @ P1c @ b["s3"]
    GPh = zinv @ P1c @ (b["s4"] + b["s6"] @ GhP)
    a1, a2, b1, b2, c1, c2 = (b[k] for k in ("a1", "a2", "b1", "b2", "c1", "c2"))
    s1, s2, s3, s4, s5, s6 = (b[k] for k in ("s1", "s2", "s3", "s4", "s5", "s6"))
    out = dict(
        GX=GX, GXh=GXh, GP=GP, GPh=GPh, GhX=GhX, GhP=GhP, zsolve_inv=zinv,
        UX=T(aug.B3c) + T(aug.B2c) @ P1c + T(aug.D2c) @ GX,
        Sigma1=T(aug.B3tc) + T(aug.B2c) @ P2c + T(aug.B2tc) @ Pi + T(aug.D2c) @ GXh + T(aug.D2tc) @ GhX,
        U3=T(aug.B2c) + T(aug.D2c) @ GP,
        Sigma2=T(aug.B2tc) + T(aug.D2c) @ GPh + T(aug.D2tc) @ GhP,
        Sigma3=a1 + b1 @ P1c + c1 @ GX,
        Sigma4=a2 + b1 @ P2c + b2 @ Pi + c1 @ GXh + c2 @ GhX,
        Sigma5=b1 + c1 @ GP,
        Sigma6=b2 + c1 @ GPh + c2 @ GhP,
        Sigma7=s1 + s3 @ P1c + s5 @ GX,
        Sigma8=s2 + s3 @ P2c + s4 @ Pi + s5 @ GXh + s6 @ GhX,
        Sigma9=s3 + s5 @ GP,
        Sigma10=s4 + s5 @ GPh + s6 @ GhP,
        Sigma11=(a1 + a2) + (b1 + b2) @ Pi + (c1 + c2) @ GhX,
        Sigma12=(b1 + b2) + (c1 + c2) @ GhP,
        L3=P1c @ (b1 + c1 @ GP) + b["r1"] + b["e1"] @ GP,
    )
    out["L3h"] = (P1c @ (b2 + c1 @ GPh + c2 @ GhP) + P2c @ ((b1 + b2) + (c1 + c2) @ GhP)
                  + b["r2"] + b["e1"] @ GPh + b["e2"] @ GhP)
    out["Lhat"] = out["L3"] + out["L3h"]
    return out


def sigma1_uncorrected(aug, P1c, P2c):
    """The first leader gain's leading terms exactly as printed: B2c' P2c B2tc' (P1c + P2c).

    Conforms only when 2n == m2; raises DimensionDefect otherwise.
    """
    a = T(aug.B2c) @ P2c
    bmat = T(aug.B2tc) @ (P1c + P2c)
    if a.shape[-1] != bmat.shape[-2]:
        raise DimensionDefect(f"printed product is ({a.shape[-2]}x{a.shape[-1]})({bmat.shape[-2]}x{bmat.shape[-1]})")
    return T(aug.B3tc) + a @ bmat


def compose_verbatim(aug, bars, P1c, P2c, Nt_inv, Nb_inv):
    """Gains transcribed from the printed closed forms."""
    Pi = P1c + P2c
    C1, A1b, A2b = aug.C1c, bars.Abar1, bars.Abar2
    B1b, B2b, B1t, B2t = bars.Bbar1, bars.Bbar2, bars.Bbar1t, bars.Bbar2t
    C2b, D2b, D2t = bars.Cbar2, bars.Dbar2, bars.Dbar2t
    Kk = P1c @ (C1 + C2b) + P1c @ T(B2b + B1t) @ Pi
    W4 = P1c @ C2b + P1c @ T(B2b) @ P2c + P1c @ T(B1t) @ Pi + P1c @ D2t @ Nt_inv @ Kk
    W3 = P1c @ C1 + P1c @ T(B2b) @ P1c
    W6 = P1c @ T(B1t) + P1c @ D2t @ Nt_inv @ P1c @ T(B2b + B1t)
    V6 = Nt_inv @ P1c @ T(B2b + B1t)
    out = dict(
        UX=T(aug.B3c) + T(aug.B2c) @ P1c + T(aug.D2c) @ Nb_inv @ P1c @ (C1 + T(B2b) @ P1c),
        U3=T(aug.B2c) + T(aug.D2c) @ Nb_inv @ P1c @ T(B2b),
        Sigma1=(T(aug.B3tc) + T(aug.B2c) @ P2c + T(aug.B2tc) @ Pi + T(aug.D2c) @ Nt_inv @ W4
                + T(aug.D2tc) @ Nt_inv @ Kk),
        Sigma2=T(aug.B2tc) + T(aug.D2c) @ Nb_inv @ W6 + T(aug.D2tc) @ V6,
        Sigma3=A1b + B1b @ P1c + B2b @ Nb_inv @ W3,
        Sigma4=A2b + B1b @ P2c + B1t @ Pi + B2b @ Nb_inv @ W4 + B2t @ Nt_inv @ Kk,
        Sigma5=B1b + B2b @ Nb_inv @ P1c @ T(B2b),
        Sigma6=B1t + B2b @ Nb_inv @ W6 + B2t @ V6,
        Sigma7=C1 + T(B2b) @ P1c + D2b @ Nb_inv @ W3,
        Sigma8=C2b + T(B2b) @ P2c + T(B1t) @ Pi + D2b @ Nb_inv @ W4 + D2t @ Nt_inv @ Kk,
        Sigma9=T(B2b) + D2b @ Nb_inv @ P1c @ T(B2b),
        Sigma10=T(B1t) + D2b @ Nb_inv @ W6 + D2t @ V6,
        Sigma11=A1b + A2b + (B1b + B1t) @ Pi + B2b @ Nb_inv @ W3 + B2b @ Nb_inv @ W4 + B2t @ Nt_inv @ Kk,
        Sigma12=B1b + B1t + B2b @ Nb_inv @ P1c @ T(B2b) + B2b @ Nb_inv @ W6 + B2t @ V6,
        zsolve_inv=Nb_inv,
    )
    lead = T(C1) + P1c @ B2b
    out["L3"] = T(A1b) + P1c @ B1b + lead @ Nb_inv @ T(B2b)
    out["L3h"] = T(A2b) + P1c @ B1t + P2c @ (B1b + B1t) + lead @ Nb_inv @ W6
    out["Lhat"] = T(A1b) + T(A2b) + Pi @ (B1b + B1t) + lead @ Nb_inv @ (T(B2b) + W6)
    # Z and Zhat as implied by the printed diffusion gains: Z = P1c * (dW-coefficient of X).
    out["GX"] = P1c @ out["Sigma7"]
    out["GXh"] = P1c @ out["Sigma8"]
    out["GP"] = P1c @ out["Sigma9"]
    out["GPh"] = P1c @ out["Sigma10"]
    out["GhX"] = out["GX"] + out["GXh"]
    out["GhP"] = out["GP"] + out["GPh"]
    return out


def build_gains(bars: ClosedLoopCoefficients, aug: AugmentedCoefficients, P1c, P2c, mode="rederived") -> GainSet:
    """Gains at the times of ``aug``; ``P1c``/``P2c`` are stacks on the same times."""
    if mode not in MODES:
        raise ValueError(f"unknown gain mode {mode!r}")
    if mode == "verbatim" and aug.mode != "verbatim":
        raise ValueError("verbatim gains need augmented blocks built in verbatim mode")
    K, d, _ = P1c.shape
    Nt_inv, c1, Nb_inv, c2 = printed_inverses(aug, bars, P1c, strict=(mode == "verbatim"))
    if mode == "rederived":
        g = compose_rederived(aug, bars, P1c, P2c)
        kappa_proj = np.zeros((d, d))
        source_proj = np.eye(d)
    else:
        g = compose_verbatim(aug, bars, P1c, P2c, Nt_inv, Nb_inv)
        n = d // 2
        kappa_proj = np.zeros((d, d))
        kappa_proj[n:, n:] = np.eye(n)
        source_proj = np.zeros((d, d))
        source_proj[:n, :n] = np.eye(n)
    return GainSet(times=aug.times, mode=mode, Ntilde2_inv=Nt_inv, Nbar2_inv=Nb_inv,
                   cond_Ntilde2=c1, cond_Nbar2=c2, N2_inv=bars.N2_inv,
                   kappa_proj=kappa_proj, source_proj=source_proj, **g)


def leader_rhs(aug, bars, P1c, P2c, mode="rederived"):
    """Time derivatives (dP1c/dt, dP2c/dt) of the leader's coupled Riccati system."""
    if mode == "rederived":
        b = _loop_blocks(aug, bars)
        Pi = P1c + P2c
        hinv, zinv = _z_solves(b, P1c, aug.times)
        GhX = hinv @ P1c @ (b["s1"] + b["s2"] + (b["s3"] + b["s4"]) @ Pi)
        GX = zinv @ P1c @ (b["s1"] + b["s3"] @ P1c)
        GXh = zinv @ P1c @ (b["s2"] + b["s3"] @ P2c + b["s4"] @ Pi + b["s6"] @ GhX)
        a1, a2, b1, b2, c1, c2 = (b[k] for k in ("a1", "a2", "b1", "b2", "c1", "c2"))
        d1 = -(P1c @ a1 + b["r1"] @ P1c + P1c @ b1 @ P1c + b["q1"] + (P1c @ c1 + b["e1"]) @ GX)
        d2 = -(P1c @ (a2 + b1 @ P2c + b2 @ Pi + c1 @ GXh + c2 @ GhX)
               + P2c @ ((a1 + a2) + (b1 + b2) @ Pi + (c1 + c2) @ GhX)
               + b["q2"] + b["r1"] @ P2c + b["r2"] @ Pi + b["e1"] @ GXh + b["e2"] @ GhX)
        return sym(d1), sym(d2)
    Nt_inv, _, Nb_inv, _ = printed_inverses(aug, bars, P1c)
    Pi = P1c + P2c
    A1c, C1 = aug.A1c, aug.C1c
    A1b, A2b, B1b, B2b, B1t, B2t = bars.Abar1, bars.Abar2, bars.Bbar1, bars.Bbar2, bars.Bbar1t, bars.Bbar2t
    C2b, D2t = bars.Cbar2, bars.Dbar2t
    lead = T(C1) + P1c @ B2b
    d1 = -(P1c @ A1b + T(A1b) @ P1c + P1c @ B1b @ P1c + aug.Q2c + lead @ Nb_inv @ P1c @ T(lead))
    Kk = P1c @ (C1 + C2b) + P1c @ T(B2b + B1t) @ Pi
    Bs = B1b + B1t
    d2 = -(P2c @ (A1c + A2b) + T(A1c + A2b) @ P2c + P2c @ Bs @ P1c + P1c @ Bs @ P2c + P2c @ Bs @ P2c
           + P1c @ A2b + T(A2b) @ P1c + P1c @ B1t @ P1c + bars.Qbar2t
           + lead @ Nb_inv @ P1c @ (C2b + T(B1t) @ P1c + T(B2b + B1t) @ P2c)
           + (lead @ Nb_inv @ P1c @ D2t + T(C2b) + P1c @ B2t + P2c @ (B2b + B2t)) @ Nt_inv @ Kk)
    return sym(d1), sym(d2)


def standalone_p1_rhs(aug, bars, P1c, mode="rederived"):
    """The first leader Riccati equation rewritten without bar notation."""
    K, d, _ = P1c.shape
    Ni = bars.N2_inv
    B2, B3, D2, D2t = aug.B2c, aug.B3c, aug.D2c, aug.D2tc
    drift = aug.A1c - B2 @ Ni @ T(B3)
    if mode == "rederived":
        C1 = aug.C1c - D2 @ Ni @ T(B3)
        Q = aug.Q2c - B3 @ Ni @ T(B3)
        M = _eye(K, d) + P1c @ D2 @ Ni @ T(D2)
    else:
        C1 = aug.C1c
        Q = aug.Q2c
        M = _eye(K, d) + P1c @ D2 @ Ni @ T(D2t)
    L = T(C1) - P1c @ B2 @ Ni @ T(D2)
    rhs = (P1c @ drift + T(drift) @ P1c - P1c @ B2 @ Ni @ T(B2) @ P1c
           + L @ np.linalg.solve(M, P1c) @ T(L) + Q)
    return -sym(rhs)


def dump_families(obj, directory, prefix=""):
    """Write every (K, r, c) family of a stacked dataclass as t,row,col,value CSV."""
    import csv
    import os

    os.makedirs(directory, exist_ok=True)
    written = []
    for name, arr in obj.families().items():
        path = os.path.join(directory, f"{prefix}{name}.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "row", "col", "value"])
            for k, t in enumerate(obj.times):
                for r in range(arr.shape[1]):
                    for c in range(arr.shape[2]):
                        w.writerow([f"{t:.17g}", r, c, f"{arr[k, r, c]:.17g}"])
        written.append(path)
    return written
