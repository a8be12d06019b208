"""Game data: time grid, coefficient paths, the LQ game and its standing assumptions."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .errors import DimensionMismatch, NonFinite, OutOfRange

PSD_RTOL = 1e-10
INV_MARGIN = 1e-10

Interp = Literal["piecewise-constant", "linear"]


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def psd_tolerance(m):
    return -PSD_RTOL * (1.0 + np.linalg.norm(m, 2))


def sym(m):
    return 0.5 * (m + np.swapaxes(m, -1, -2))


@dataclass(frozen=True)
class TimeGrid:
    horizon_T: float
    n_steps: int

    def __post_init__(self):
        if not (self.horizon_T > 0 and np.isfinite(self.horizon_T)):
            raise DimensionMismatch(f"horizon must be positive, got {self.horizon_T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise DimensionMismatch(f"n_steps must be an integer >= 2, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.horizon_T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.horizon_T
        return t

    def refined(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.horizon_T, self.n_steps * factor)

    @classmethod
    def from_dt(cls, T: float, dt: float) -> "TimeGrid":
        n = int(round(T / dt))
        return cls(T, max(n, 2))


@dataclass(frozen=True)
class CoefficientPath:
    """Matrix-valued function of time given by samples on a uniform grid over [0, T].

    A single sample is a constant path.
    """

    samples: np.ndarray
    horizon_T: float = 1.0
    interpolation: Interp = "linear"

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 2:
            s = s[None]
        if s.ndim != 3:
            raise DimensionMismatch(f"coefficient samples must be 2-d or 3-d, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise NonFinite("coefficient path contains NaN or Inf")
        if self.interpolation not in ("piecewise-constant", "linear"):
            raise DimensionMismatch(f"unknown interpolation {self.interpolation!r}")
        object.__setattr__(self, "samples", _frozen(s))

    @classmethod
    def constant(cls, m, horizon_T=1.0):
        return cls(np.atleast_2d(np.asarray(m, dtype=float)), horizon_T)

    @property
    def rows(self) -> int:
        return self.samples.shape[1]

    @property
    def cols(self) -> int:
        return self.samples.shape[2]

    @property
    def shape(self):
        return self.samples.shape[1:]

    @property
    def is_constant(self) -> bool:
        return self.samples.shape[0] == 1

    def at(self, times) -> np.ndarray:
        """Vectorized evaluation; returns an array of shape (len(times), rows, cols)."""
        t = np.atleast_1d(np.asarray(times, dtype=float))
        K = self.samples.shape[0]
        if K == 1:
            return np.broadcast_to(self.samples[0], (t.size,) + self.shape).copy()
        h = self.horizon_T / (K - 1)
        tol = h * 1e-9
        if np.any(t < -tol) or np.any(t > self.horizon_T + tol):
            raise OutOfRange(f"time outside [0, {self.horizon_T}]")
        u = np.clip(t, 0.0, self.horizon_T) / h
        k = np.minimum(np.floor(u).astype(int), K - 1)
        if self.interpolation == "piecewise-constant":
            return self.samples[k].copy()
        k = np.minimum(k, K - 2)
        w = (u - k)[:, None, None]
        out = (1.0 - w) * self.samples[k] + w * self.samples[k + 1]
        exact = np.isclose(u, np.round(u), rtol=0, atol=1e-12)
        if np.any(exact):
            out[exact] = self.samples[np.round(u[exact]).astype(int)]
        return out


def sample(path: CoefficientPath, t: float, dt: float | None = None) -> np.ndarray:
    """Value of the path at time t; exact at sample points."""
    tol = (dt if dt is not None else path.horizon_T) * 1e-9
    if t < -tol or t > path.horizon_T + tol:
        raise OutOfRange(f"t={t} outside [0, {path.horizon_T}]")
    return path.at([t])[0]


_SHAPES = {
    "A": ("n", "n"), "C": ("n", "n"), "C1": ("n", "n"),
    "Ctilde": ("n", 1), "C2": ("n", 1), "C3": ("n", 1), "h": ("n", 1),
    "B1": ("n", "m1"), "D1": ("n", "m1"), "B2": ("n", "m2"), "D2": ("n", "m2"),
    "Q1": ("n", "n"), "N1": ("m1", "m1"), "Q2": ("n", "n"), "N2": ("m2", "m2"),
}
PATH_NAMES = tuple(_SHAPES)
SYMMETRIC_DYNAMICS = ("A", "C", "C1")
SYMMETRIC_COSTS = ("Q1", "N1", "Q2", "N2")


@dataclass(frozen=True)
class GameSpec:
    n: int
    m1: int
    m2: int
    A: CoefficientPath
    B1: CoefficientPath
    B2: CoefficientPath
    C: CoefficientPath
    D1: CoefficientPath
    D2: CoefficientPath
    Ctilde: CoefficientPath
    C1: CoefficientPath
    C2: CoefficientPath
    C3: CoefficientPath
    h: CoefficientPath
    Q1: CoefficientPath
    N1: CoefficientPath
    Q2: CoefficientPath
    N2: CoefficientPath
    G1: np.ndarray
    G2: np.ndarray
    x0: np.ndarray
    xtilde0: np.ndarray
    horizon_T: float = 1.0
    name: str = "unnamed"
    allow_nonsymmetric_dynamics: bool = False

    def __post_init__(self):
        for k in ("G1", "G2"):
            object.__setattr__(self, k, _frozen(np.atleast_2d(getattr(self, k))))
        for k in ("x0", "xtilde0"):
            object.__setattr__(self, k, _frozen(np.ravel(getattr(self, k))))
        self.check_dimensions()

    def dims(self):
        return {"n": self.n, "m1": self.m1, "m2": self.m2}

    def check_dimensions(self):
        d = self.dims()
        for name, (r, c) in _SHAPES.items():
            want = (d.get(r, r), d.get(c, c))
            got = getattr(self, name).shape
            if tuple(got) != want:
                raise DimensionMismatch(f"{name} has shape {tuple(got)}, expected {want}")
        for name in ("G1", "G2"):
            if getattr(self, name).shape != (self.n, self.n):
                raise DimensionMismatch(f"{name} has shape {getattr(self, name).shape}, expected {(self.n, self.n)}")
        for name in ("x0", "xtilde0"):
            if getattr(self, name).shape != (self.n,):
                raise DimensionMismatch(f"{name} has length {getattr(self, name).size}, expected {self.n}")
        for name in ("G1", "G2", "x0", "xtilde0"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFinite(f"{name} contains NaN or Inf")

    def path(self, name) -> CoefficientPath:
        return getattr(self, name)

    def with_(self, **changes) -> "GameSpec":
        """Copy with some coefficients replaced; plain arrays become constant paths."""
        fixed = {}
        for k, v in changes.items():
            if k in _SHAPES and not isinstance(v, CoefficientPath):
                v = CoefficientPath.constant(v, self.horizon_T)
            fixed[k] = v
        return replace(self, **fixed)


def constant_spec(*, n, m1, m2, T=1.0, name="unnamed", **coeffs) -> GameSpec:
    """Build a GameSpec from constant matrices; missing coefficients are zero (N's identity)."""
    d = {"n": n, "m1": m1, "m2": m2}
    kw = {}
    for k, (r, c) in _SHAPES.items():
        shape = (d.get(r, r), d.get(c, c))
        if k in coeffs:
            v = np.asarray(coeffs.pop(k), dtype=float)
            v = v.reshape(shape) if v.size == shape[0] * shape[1] else v
        elif k in ("N1", "N2"):
            v = np.eye(shape[0])
        else:
            v = np.zeros(shape)
        kw[k] = CoefficientPath.constant(v, T)
    G1 = np.asarray(coeffs.pop("G1", np.zeros((n, n))), dtype=float).reshape(n, n)
    G2 = np.asarray(coeffs.pop("G2", np.zeros((n, n))), dtype=float).reshape(n, n)
    x0 = np.asarray(coeffs.pop("x0", np.zeros(n)), dtype=float)
    xt0 = np.asarray(coeffs.pop("xtilde0", np.zeros(n)), dtype=float)
    allow = coeffs.pop("allow_nonsymmetric_dynamics", False)
    if coeffs:
        raise DimensionMismatch(f"unknown coefficients: {sorted(coeffs)}")
    return GameSpec(n=n, m1=m1, m2=m2, G1=G1, G2=G2, x0=x0, xtilde0=xt0,
                    horizon_T=T, name=name, allow_nonsymmetric_dynamics=allow, **kw)


@dataclass(frozen=True)
class CheckStatus:
    state: Literal["ok", "violated", "not_yet_checked"] = "not_yet_checked"
    t: float | None = None

    @property
    def ok(self):
        return self.state == "ok"


@dataclass(frozen=True)
class AssumptionReport:
    a31_ok: bool
    a33_ok: bool
    a34_ok: bool
    a32: CheckStatus = CheckStatus()
    a35: CheckStatus = CheckStatus()
    a36: CheckStatus = CheckStatus()
    worst_margin: dict = field(default_factory=dict)
    symmetry_defects: dict = field(default_factory=dict)
    symmetric_ok: bool = True
    warnings: tuple = ()

    @property
    def static_ok(self):
        return self.a31_ok and self.a33_ok and self.a34_ok and self.symmetric_ok

    def violations(self):
        out = [lab for lab, ok in (("A3.1", self.a31_ok), ("A3.3", self.a33_ok), ("A3.4", self.a34_ok)) if not ok]
        for lab, st in (("A3.2", self.a32), ("A3.5", self.a35), ("A3.6", self.a36)):
            if st.state == "violated":
                out.append(lab)
        return out

    def updated(self, **kw) -> "AssumptionReport":
        return replace(self, **kw)


def _min_eig_sym(stack):
    return float(np.min(np.linalg.eigvalsh(sym(stack))))


def validate_spec(spec: GameSpec, grid: TimeGrid) -> AssumptionReport:
    """Check dimensions, finiteness, symmetry and the positivity/invertibility assumptions on the grid."""
    spec.check_dimensions()
    if abs(grid.horizon_T - spec.horizon_T) > 1e-12 * max(1.0, spec.horizon_T):
        raise DimensionMismatch(f"grid horizon {grid.horizon_T} differs from spec horizon {spec.horizon_T}")
    t = grid.times
    vals = {k: spec.path(k).at(t) for k in PATH_NAMES}
    for k, v in vals.items():
        if not np.all(np.isfinite(v)):
            raise NonFinite(f"{k} contains NaN or Inf")

    defects = {}
    for k in SYMMETRIC_DYNAMICS + SYMMETRIC_COSTS:
        v = vals[k]
        defects[k] = float(np.max(np.abs(v - np.swapaxes(v, 1, 2))))
    for k in ("G1", "G2"):
        g = getattr(spec, k)
        defects[k] = float(np.max(np.abs(g - g.T)))
    warnings = []
    dyn_bad = [k for k in SYMMETRIC_DYNAMICS if defects[k] > 0]
    cost_bad = [k for k in SYMMETRIC_COSTS + ("G1", "G2") if defects[k] > 0]
    symmetric_ok = not cost_bad
    if dyn_bad:
        if spec.allow_nonsymmetric_dynamics:
            warnings.append(f"non-symmetric dynamics allowed by flag: {dyn_bad}")
        else:
            symmetric_ok = False

    margins = {}

    def psd_margin(stack):
        stack = np.asarray(stack)
        stack = stack[None] if stack.ndim == 2 else stack
        worst, ok = np.inf, True
        for m in stack:
            e = _min_eig_sym(m)
            worst = min(worst, e)
            ok &= e >= psd_tolerance(m)
        return worst, bool(ok)

    q1, q1ok = psd_margin(vals["Q1"])
    g1, g1ok = psd_margin(spec.G1)
    margins["A3.1"] = min(q1, g1)
    q2, q2ok = psd_margin(vals["Q2"])
    g2, g2ok = psd_margin(spec.G2)
    margins["A3.3"] = min(q2, g2)

    sv = np.linalg.svd(vals["N2"], compute_uv=False)
    smin = sv.min(axis=1)
    smax = sv.max(axis=1)
    margins["A3.4"] = float(smin.min())
    a34 = bool(np.all(smin > INV_MARGIN * (1.0 + smax)))

    return AssumptionReport(
        a31_ok=q1ok and g1ok, a33_ok=q2ok and g2ok, a34_ok=a34,
        worst_margin=margins, symmetry_defects=defects,
        symmetric_ok=symmetric_ok, warnings=tuple(warnings),
    )
