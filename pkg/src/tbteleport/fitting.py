"""Damped Gauss-Newton (Levenberg-Marquardt) fitting and the experiment-specific fits.

Models expose ``names``, ``__call__(x, p)`` and ``jacobian(x, p)``.  All
built-in models carry analytic Jacobians; :func:`numerical_jacobian` gives
the central-difference reference used to check them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .analytics import VisibilityParams, visibility_model
from .errors import DomainError

__all__ = [
    "DataSeries",
    "FitResult",
    "Model",
    "LinearModel",
    "VisibilityModel",
    "SaturationModel",
    "HillSaturationModel",
    "PhaseModulatorModel",
    "numerical_jacobian",
    "least_squares",
    "fit_visibility",
    "fit_saturation",
    "fit_phase_modulator",
    "fit_noise_linear",
]


@dataclass
class DataSeries:
    x: np.ndarray
    y: np.ndarray
    sigma: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.sigma is not None:
            self.sigma = np.asarray(self.sigma, dtype=float)
            if self.sigma.shape != self.y.shape:
                raise DomainError("sigma must match y in length")
            if np.any(self.sigma <= 0):
                raise DomainError("sigma must be > 0")
        if len(self.x) != len(self.y):
            raise DomainError(f"x and y differ in length ({len(self.x)} vs {len(self.y)})")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise DomainError("data must be finite")

    def __len__(self) -> int:
        return len(self.y)

    def replicate(self, times: int) -> "DataSeries":
        def tile(a):
            return None if a is None else np.concatenate([a] * times)

        return DataSeries(tile(self.x), tile(self.y), tile(self.sigma))


@dataclass
class FitResult:
    params: dict[str, float]
    covariance: np.ndarray
    residual_norm: float
    converged: bool
    iterations: int
    dof: int = 0
    flags: set[str] = field(default_factory=set)
    message: str = ""
    cost_history: list[float] = field(default_factory=list)
    derived: dict[str, float] = field(default_factory=dict)

    @property
    def stderr(self) -> dict[str, float]:
        return {k: float(math.sqrt(self.covariance[i, i])) for i, k in enumerate(self.params)}

    @property
    def chi2(self) -> float:
        return self.residual_norm**2

    def __getitem__(self, name: str) -> float:
        if name in self.params:
            return self.params[name]
        return self.derived[name]


class Model(Protocol):
    names: tuple[str, ...]

    def __call__(self, x: np.ndarray, p: np.ndarray) -> np.ndarray: ...

    def jacobian(self, x: np.ndarray, p: np.ndarray) -> np.ndarray: ...


def numerical_jacobian(model: Model, x: np.ndarray, p: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    cols = []
    for i in range(len(p)):
        h = rel_step * max(abs(p[i]), 1.0)
        up, dn = p.copy(), p.copy()
        up[i] += h
        dn[i] -= h
        cols.append((model(x, up) - model(x, dn)) / (2 * h))
    return np.column_stack(cols)


class LinearModel:
    names = ("slope", "intercept")

    def __call__(self, x, p):
        return p[0] * x + p[1]

    def jacobian(self, x, p):
        return np.column_stack([x, np.ones_like(x)])


@dataclass
class VisibilityModel:
    """TPQI visibility versus flux ratio x with only the indistinguishability free."""

    g2: float
    p_nv: float
    p_noise: float = 0.0
    names: tuple[str, ...] = ("eta",)

    def shape(self, x: np.ndarray) -> np.ndarray:
        return np.array([visibility_model(VisibilityParams(xi, self.g2, self.p_nv, self.p_noise, 1.0)) for xi in x])

    def __call__(self, x, p):
        return p[0] * self.shape(x)

    def jacobian(self, x, p):
        return self.shape(x)[:, None]


class SaturationModel:
    """Frequency-conversion efficiency ``eta_max * sin^2(pi/2 * sqrt(P / p_opt))``."""

    names = ("eta_max", "p_opt")

    def __call__(self, x, p):
        return p[0] * np.sin(0.5 * np.pi * np.sqrt(x / p[1])) ** 2

    def jacobian(self, x, p):
        u = 0.5 * np.pi * np.sqrt(x / p[1])
        d_eta = np.sin(u) ** 2
        d_popt = p[0] * np.sin(2 * u) * (-u / (2 * p[1]))
        return np.column_stack([d_eta, d_popt])


class HillSaturationModel:
    """Alternative saturation curve ``eta_max * P / (P + p_sat)``."""

    names = ("eta_max", "p_sat")

    def __call__(self, x, p):
        return p[0] * x / (x + p[1])

    def jacobian(self, x, p):
        return np.column_stack([x / (x + p[1]), -p[0] * x / (x + p[1]) ** 2])


class PhaseModulatorModel:
    """Joint interferometer fringes; ``x[:, 0]`` is voltage, ``x[:, 1]`` the detector (0 or 1).

    Detector 0 follows ``A1 sin(s V / 2 + o) + c1``, detector 1
    ``A2 cos(s V / 2 + o) + c2``.
    """

    names = ("s", "o", "A1", "A2", "c1", "c2")

    def __call__(self, x, p):
        s, o, a1, a2, c1, c2 = p
        v, ch = x[:, 0], x[:, 1]
        phi = s * v / 2 + o
        return np.where(ch == 0, a1 * np.sin(phi) + c1, a2 * np.cos(phi) + c2)

    def jacobian(self, x, p):
        s, o, a1, a2, c1, c2 = p
        v, ch = x[:, 0], x[:, 1]
        phi = s * v / 2 + o
        d0 = ch == 0
        sin, cos = np.sin(phi), np.cos(phi)
        dphi = np.where(d0, a1 * cos, -a2 * sin)
        zero = np.zeros_like(v)
        return np.column_stack(
            [
                dphi * v / 2,
                dphi,
                np.where(d0, sin, zero),
                np.where(d0, zero, cos),
                d0.astype(float),
                (~d0).astype(float),
            ]
        )


def least_squares(
    model: Model,
    data: DataSeries,
    init: Mapping[str, float] | Sequence[float],
    *,
    max_iter: int = 200,
    xtol: float = 1e-10,
    ftol: float = 1e-10,
) -> FitResult:
    """Minimize ``sum(((y - model(x; p)) / sigma)^2)`` by Levenberg-Marquardt.

    Converges when both the relative parameter step and the relative change
    of the objective fall below the tolerances (or the objective reaches
    zero to rounding).  Rank-deficient Jacobians are reported as
    non-convergence with the ``singular`` flag.
    """
    names = tuple(model.names)
    if isinstance(init, Mapping):
        p = np.array([float(init[n]) for n in names])
    else:
        p = np.array(init, dtype=float)
    if p.shape != (len(names),) or not np.all(np.isfinite(p)):
        raise DomainError("initial parameters must be finite and match the model")
    w = np.ones_like(data.y) if data.sigma is None else 1.0 / data.sigma
    n, k = len(data), len(names)

    def residuals(q):
        return (data.y - model(data.x, q)) * w

    r = residuals(p)
    cost = float(r @ r)
    history = [cost]
    lam = 1e-3
    converged = False
    flags: set[str] = set()
    message = "maximum iterations reached"
    tiny = np.finfo(float).tiny
    it = 0
    for it in range(1, max_iter + 1):
        J = model.jacobian(data.x, p) * w[:, None]
        A = J.T @ J
        g = J.T @ r
        if np.linalg.matrix_rank(J) < k:
            flags.add("singular")
            message = "normal equations are singular; parameters not identifiable from these data"
            break
        diag = np.diag(A).copy()
        diag[diag <= 0] = 1.0
        stalled = False
        while True:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            trial = p + step
            r_trial = residuals(trial)
            c_trial = float(r_trial @ r_trial)
            if np.isfinite(c_trial) and c_trial <= cost:
                break
            lam *= 10
            if lam > 1e16:
                stalled = True
                break
        if stalled:
            # No descent direction left at working precision.
            converged = True
            message = "objective cannot be decreased further"
            break
        rel_step = np.linalg.norm(step) / (np.linalg.norm(p) + tiny)
        rel_cost = (cost - c_trial) / max(cost, tiny)
        p, r, cost = trial, r_trial, c_trial
        history.append(cost)
        lam = max(lam / 10, 1e-12)
        if rel_step < xtol and (rel_cost < ftol or cost <= 1e-28 * n):
            converged = True
            message = "converged"
            break
        if cost <= 1e-30 * n and rel_step < math.sqrt(xtol):
            converged = True
            message = "converged to zero residual"
            break

    dof = n - k
    J = model.jacobian(data.x, p) * w[:, None]
    A = J.T @ J
    if np.linalg.matrix_rank(J) < k:
        flags.add("singular")
        cov = np.full((k, k), np.inf)
        converged = False
    else:
        cov = np.linalg.inv(A)
        cov = (cov + cov.T) / 2
        if data.sigma is None:
            if dof > 0:
                cov = cov * (cost / dof)
            else:
                cov = np.full((k, k), np.inf)
                flags.add("unbounded_uncertainty")
    return FitResult(
        params={name: float(v) for name, v in zip(names, p)},
        covariance=cov,
        residual_norm=math.sqrt(cost),
        converged=converged,
        iterations=it,
        dof=dof,
        flags=flags,
        message=message,
        cost_history=history,
    )


def fit_visibility(
    points: DataSeries, g2: float, p_nv: float, p_noise: float = 0.0, eta0: float = 0.5
) -> FitResult:
    """Fit the indistinguishability to visibilities measured at several flux ratios."""
    if len(points) < 1:
        raise DomainError("need at least one visibility point")
    model = VisibilityModel(g2, p_nv, p_noise)
    res = least_squares(model, points, [eta0])
    if np.all(points.y == 0):
        res.flags.add("non_identifiable")
    if len(points) < 2:
        res.flags.add("unbounded_uncertainty")
    return res


def fit_saturation(power: DataSeries, model: Model | None = None) -> FitResult:
    """Conversion efficiency versus pump power; default model is the sin^2 saturation curve."""
    if len(power) < 3:
        raise DomainError("need at least 3 points")
    if np.any(power.x < 0):
        raise DomainError("pump powers must be >= 0")
    model = model or SaturationModel()
    i = int(np.argmax(power.y))
    p_peak = float(power.x[i]) if power.x[i] > 0 else float(np.max(power.x))
    if p_peak <= 0:
        raise DomainError("need at least one positive pump power")
    res = least_squares(model, power, [float(power.y[i]), p_peak])
    res.derived["p_opt"] = res.params[model.names[1]]
    return res


def _fringe_seed(v: np.ndarray, y0: np.ndarray, y1: np.ndarray) -> tuple[float, float, float, float, float, float]:
    span = float(v.max() - v.min())
    if span <= 0:
        raise DomainError("voltages must not all be equal")
    # FFT peak of the demeaned, zero-padded fringes (uniform grid assumed for this estimate).
    order = np.argsort(v)
    dv = span / max(len(v) - 1, 1)
    nfft = 1 << 14
    spec = np.abs(np.fft.rfft(y0[order] - y0.mean(), nfft)) + np.abs(np.fft.rfft(y1[order] - y1.mean(), nfft))
    freqs = np.fft.rfftfreq(nfft, d=dv)
    f_fft = float(freqs[1 + np.argmax(spec[1:])])
    f_nyq = 0.5 / dv
    candidates = np.concatenate([np.linspace(1 / (8 * span), f_nyq, 800), [f_fft]])
    best = None
    for f in candidates:
        s = 4 * np.pi * f
        u = s * v / 2
        X = np.column_stack([np.sin(u), np.cos(u), np.ones_like(u)])
        c0, res0, *_ = np.linalg.lstsq(X, y0, rcond=None)
        c1, res1, *_ = np.linalg.lstsq(X, y1, rcond=None)
        sse = float(np.sum((X @ c0 - y0) ** 2) + np.sum((X @ c1 - y1) ** 2))
        if best is None or sse < best[0]:
            best = (sse, s, c0, c1)
    _, s, (b0, cc0, off0), (b1, cc1, off1) = best
    a1, o0 = math.hypot(b0, cc0), math.atan2(cc0, b0)
    a2, o1 = math.hypot(b1, cc1), math.atan2(-b1, cc1)
    o = math.atan2(a1 * math.sin(o0) + a2 * math.sin(o1), a1 * math.cos(o0) + a2 * math.cos(o1))
    return s, o, a1, a2, off0, off1


def fit_phase_modulator(
    voltages: Sequence[float],
    cps_det1: Sequence[float],
    cps_det2: Sequence[float],
    sigma1: Sequence[float] | None = None,
    sigma2: Sequence[float] | None = None,
    s_threshold: float = 1e-3,
) -> FitResult:
    """Joint fringe fit sharing scale ``s`` and offset ``o``; derives ``V_pi = |pi/s|``."""
    v = np.asarray(voltages, dtype=float)
    y0 = np.asarray(cps_det1, dtype=float)
    y1 = np.asarray(cps_det2, dtype=float)
    if not (len(v) == len(y0) == len(y1)):
        raise DomainError(f"length mismatch: {len(v)} voltages, {len(y0)} and {len(y1)} count rates")
    if len(v) < 6:
        raise DomainError("need at least 6 voltage points")
    x = np.column_stack([np.concatenate([v, v]), np.concatenate([np.zeros_like(v), np.ones_like(v)])])
    sigma = None
    if sigma1 is not None or sigma2 is not None:
        if sigma1 is None or sigma2 is None:
            raise DomainError("give sigma for both detectors or neither")
        sigma = np.concatenate([np.asarray(sigma1, float), np.asarray(sigma2, float)])
    data = DataSeries(x, np.concatenate([y0, y1]), sigma)
    res = least_squares(PhaseModulatorModel(), data, list(_fringe_seed(v, y0, y1)))
    s = res.params["s"]
    if abs(s) < s_threshold:
        res.flags.add("non_identifiable")
        res.derived.update(V_pi=math.inf, V_pi_half=math.inf, V_pi_err=math.inf)
        return res
    s_err = math.sqrt(res.covariance[0, 0])
    res.derived["V_pi"] = abs(math.pi / s)
    res.derived["V_pi_half"] = abs(math.pi / (2 * s))
    res.derived["V_pi_err"] = math.pi * s_err / s**2
    res.derived["V_pi_half_err"] = res.derived["V_pi_err"] / 2
    return res


def fit_noise_linear(control: DataSeries) -> FitResult:
    """Weighted straight line through (setting, count rate); the intercept is the photon-independent background."""
    if len(control) < 2:
        raise DomainError("need at least 2 points")
    if np.ptp(control.x) == 0:
        raise DomainError("abscissa is degenerate (all settings equal)")
    return least_squares(LinearModel(), control, [0.0, float(np.mean(control.y))])
