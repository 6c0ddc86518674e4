"""Beat-curve regression and maximum-likelihood displacement estimation.

A channel's mean coincidence count along a displacement scan follows

    C_fit(dx) = N (1 -/+ V sinc^2(dx delta / 2) cos(dk dx))

(minus for antibunching). :func:`fit_beat_curve` estimates (N, V, delta, dk) by
weighted least squares with a damped Gauss-Newton (Levenberg-Marquardt) iteration.

For estimation the fitted curves (or the exact channel probabilities) play the role
of the event model in the log-likelihood L(dx) = sum_c C_c ln m_c(dx). The
uncertainty of the maximizer is propagated from the count uncertainties through
d dx_ML / d C_c = -(d ln m_c / d dx) / (d^2 L / d dx^2).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import (
    Branch,
    Channel,
    DetectorArray,
    SourceParams,
    channel_arrays,
    channel_probabilities,
    sinc_channel_terms,
    _dsinc,
    _sinc,
)

__all__ = [
    "PARAM_NAMES",
    "FitError",
    "DegenerateFitWarning",
    "VisibilityClampWarning",
    "BoundaryMaximumError",
    "NonStationaryError",
    "DegenerateCurvatureError",
    "BeatFitParams",
    "EstimationResult",
    "beat_curve",
    "guess_beat_params",
    "fit_beat_curve",
    "BeatCurveModel",
    "ProbabilityModel",
    "log_likelihood",
    "mle_estimate",
    "mle_uncertainty",
    "estimate_displacement",
    "quarter_period_window",
    "least_squares_seed",
]

PARAM_NAMES = ("amplitude", "visibility", "delta", "delta_k")


class FitError(ArithmeticError):
    """The regression failed (no convergence, bad input)."""


class DegenerateFitWarning(UserWarning):
    """The Jacobian is rank deficient at the optimum; some parameters are not identifiable."""


class VisibilityClampWarning(UserWarning):
    pass


class BoundaryMaximumError(ArithmeticError):
    """The likelihood maximum sits on the edge of the search window."""


class NonStationaryError(ArithmeticError):
    pass


class DegenerateCurvatureError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# beat curve and its Jacobian
# ---------------------------------------------------------------------------

def beat_curve(dx, theta, sign: int, jacobian: bool = False):
    """Model counts (and optionally the Jacobian w.r.t. amplitude, visibility, delta, dk)."""
    N, V, delta, dk = theta
    dx = np.asarray(dx, dtype=float)
    u = 0.5 * delta * dx
    sc = _sinc(u)
    s = sc * sc
    cos = np.cos(dk * dx)
    shape = 1.0 + sign * V * s * cos
    y = N * shape
    if not jacobian:
        return y
    J = np.empty(dx.shape + (4,))
    J[..., 0] = shape
    J[..., 1] = N * sign * s * cos
    J[..., 2] = N * sign * V * cos * sc * _dsinc(u) * dx
    J[..., 3] = -N * sign * V * s * dx * np.sin(dk * dx)
    return y, J


@dataclass
class BeatFitParams:
    amplitude: float
    visibility: float
    delta: float
    delta_k: float
    branch: Branch
    covariance: np.ndarray = field(default_factory=lambda: np.full((4, 4), np.nan))
    residual_norm: float = math.nan
    chi2: float = math.nan
    dof: int = 0
    n_iter: int = 0
    degenerate: bool = False
    fixed: tuple[str, ...] = ()
    channel: Channel | None = None

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.amplitude, self.visibility, self.delta, self.delta_k])

    @property
    def stderr(self) -> dict[str, float]:
        d = np.sqrt(np.clip(np.diag(self.covariance), 0, None))
        return dict(zip(PARAM_NAMES, d.tolist()))

    def __call__(self, dx):
        return beat_curve(dx, self.theta, self.branch.sign)

    def derivatives(self, dx: float, order: int = 2):
        """C_fit and its first ``order`` derivatives with respect to dx."""
        return sinc_channel_terms(2.0 * self.amplitude, self.delta_k, self.branch.sign,
                                  self.visibility, dx, self.delta, order)

    def as_row(self) -> dict:
        err = self.stderr
        row = {}
        if self.channel is not None:
            row.update(branch=self.channel.branch.value, i=self.channel.i, j=self.channel.j)
        for name in PARAM_NAMES:
            row[name] = getattr(self, name)
            row[f"{name}_err"] = err[name]
        row.update(chi2=self.chi2, dof=self.dof, degenerate=int(self.degenerate))
        return row


def guess_beat_params(dx, y, err=None, branch: Branch = Branch.A, delta_k_max: float | None = None,
                      delta_max: float | None = None, n_dk: int = 600, n_delta: int = 60,
                      fixed: dict | None = None) -> np.ndarray:
    """Starting point from a grid over (delta, dk), solving the linear amplitudes exactly.

    For fixed (delta, dk) the model is a + b s cos, linear in (a, b); the pair with the
    smallest weighted residual is returned as (N, V, delta, dk). Entries of ``fixed``
    (by parameter name) collapse the corresponding grid axis.
    """
    fixed = dict(fixed or {})
    b = Branch.parse(branch)
    dx = np.asarray(dx, float)
    y = np.asarray(y, float)
    w = np.ones_like(y) if err is None else 1.0 / np.asarray(err, float) ** 2
    span = float(np.ptp(dx)) or 1.0
    if delta_k_max is None:
        step = float(np.min(np.diff(np.unique(dx)))) if dx.size > 1 else span
        delta_k_max = math.pi / step
    if delta_max is None:
        delta_max = 4.0 * math.pi / span
    dks = np.array([abs(fixed["delta_k"])]) if "delta_k" in fixed else np.linspace(0.0, delta_k_max, n_dk)
    deltas = (np.array([abs(fixed["delta"])]) if "delta" in fixed
              else np.linspace(delta_max / n_delta, delta_max, n_delta))
    sc = _sinc(0.5 * deltas[:, None, None] * dx)            # (n_delta, 1, n)
    basis = sc * sc * np.cos(dks[None, :, None] * dx)       # (n_delta, n_dk, n)
    sw, sy = w.sum(), (w * y).sum()
    sb, sbb, sby = (w * basis).sum(-1), (w * basis * basis).sum(-1), (w * basis * y).sum(-1)
    det = sw * sbb - sb * sb
    ok = det > 1e-12 * sw * np.maximum(sbb, 1e-300)
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(ok, (sbb * sy - sb * sby) / det, sy / sw)
        bb = np.where(ok, (sw * sby - sb * sy) / det, 0.0)
    resid = (w * y * y).sum() - 2 * a * sy - 2 * bb * sby + a * a * sw + 2 * a * bb * sb + bb * bb * sbb
    # only cells with a physical amplitude and visibility compete; near delta -> 0 the
    # basis degenerates into a parabola that the free linear pair would happily fit
    with np.errstate(invalid="ignore", divide="ignore"):
        vis = b.sign * bb / a
    physical = ok & (a > 0) & (vis >= 0) & (vis <= 1)
    if np.any(physical):
        resid = np.where(physical, resid, np.inf)
    else:
        resid = np.where(ok, resid, np.inf)
    k, m = np.unravel_index(np.nanargmin(resid), resid.shape)
    N = float(a[k, m]) if a[k, m] > 0 else float(np.mean(y))
    V = float(np.clip(b.sign * bb[k, m] / N, 0.02, 0.98)) if N > 0 else 0.1
    theta = np.array([max(N, 1e-12), V, float(deltas[k]), float(dks[m])])
    for name, value in fixed.items():
        theta[PARAM_NAMES.index(name)] = value
    return theta


def _lm(dx, y, err, theta0, sign, free, max_iter, xtol, gtol):
    theta = np.array(theta0, float)
    w = 1.0 / err

    def resid(t):
        return (y - beat_curve(dx, t, sign)) * w

    r = resid(theta)
    chi2 = float(r @ r)
    lam = 1e-3
    floor = 1e-6 * float(y @ y * w @ w + 1.0) / max(y.size, 1)
    for it in range(1, max_iter + 1):
        _, J = beat_curve(dx, theta, sign, jacobian=True)
        Jw = J[:, free] * w[:, None]
        g = Jw.T @ r
        A = Jw.T @ Jw
        diag = np.maximum(np.diag(A), floor * 1e-12 + 1e-300)
        colnorm = np.sqrt(diag)
        rnorm = math.sqrt(chi2)
        gcos = float(np.max(np.abs(g) / (colnorm * max(rnorm, 1e-300)))) if rnorm > 0 else 0.0
        if chi2 <= 1e-28 * float((y * w) @ (y * w)) or gcos <= gtol:
            return theta, chi2, it, True
        while True:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), g)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(A + lam * np.diag(diag), g, rcond=None)[0]
            trial = theta.copy()
            trial[free] += step
            rt = resid(trial)
            chi2_t = float(rt @ rt)
            small = float(np.linalg.norm(colnorm * step)) <= xtol * (float(np.linalg.norm(colnorm * theta[free])) + xtol)
            if chi2_t <= chi2:
                theta, r, chi2 = trial, rt, chi2_t
                lam = max(lam / 10.0, 1e-15)
                if small:
                    return theta, chi2, it, True
                break
            lam *= 10.0
            if small or lam > 1e16:
                # no downhill step remains at this resolution
                return theta, chi2, it, gcos <= 1e-6
    return theta, chi2, max_iter, False


def fit_beat_curve(dx, mean, err=None, branch: Branch | str = Branch.A, initial_guess=None, *,
                   fixed: dict | None = None, n_starts: int = 8, seed: int = 0, max_iter: int = 400,
                   xtol: float = 1e-10, gtol: float = 1e-10, weighted: bool = True,
                   channel: Channel | None = None) -> BeatFitParams:
    """Weighted least-squares fit of one channel's beat curve.

    ``initial_guess`` is (amplitude, visibility, delta, dk); when omitted it comes from
    :func:`guess_beat_params`. ``fixed`` pins parameters by name, e.g.
    ``{"delta_k": 0.0}`` for same-pixel channels. The best of ``n_starts`` jittered
    restarts is kept.
    """
    b = Branch.parse(branch)
    dx = np.asarray(dx, float)
    y = np.asarray(mean, float)
    if dx.size < 8 or y.shape != dx.shape:
        raise FitError("need at least 8 scan points with matching counts")
    if weighted:
        if err is None:
            raise FitError("weighted fit needs per-point errors")
        e = np.asarray(err, float)
        if e.shape != dx.shape or np.any(~(e > 0)):
            raise FitError("errors must be strictly positive")
    else:
        e = np.ones_like(y)
    fixed = dict(fixed or {})
    unknown = set(fixed) - set(PARAM_NAMES)
    if unknown:
        raise ValueError(f"unknown parameter(s) {sorted(unknown)}")
    free = np.array([n not in fixed for n in PARAM_NAMES])
    theta0 = np.array(initial_guess, float) if initial_guess is not None else guess_beat_params(dx, y, e, b, fixed=fixed)
    for name, value in fixed.items():
        theta0[PARAM_NAMES.index(name)] = value

    rng = np.random.default_rng(seed)
    starts = [theta0]
    for _ in range(max(n_starts, 1) - 1):
        t = theta0.copy()
        t[0] *= 1.0 + 0.05 * rng.standard_normal()
        t[1] = np.clip(t[1] * (1.0 + 0.3 * rng.standard_normal()), 0.01, 1.0)
        t[2] *= 1.0 + 0.15 * rng.standard_normal()
        t[3] *= 1.0 + 0.03 * rng.standard_normal()
        for name, value in fixed.items():
            t[PARAM_NAMES.index(name)] = value
        starts.append(t)

    best = None
    for t0 in starts:
        theta, chi2, n_iter, ok = _lm(dx, y, e, t0, b.sign, free, max_iter, xtol, gtol)
        if ok and (best is None or chi2 < best[1]):
            best = (theta, chi2, n_iter)
    if best is None:
        raise FitError(f"beat-curve fit did not converge in {max_iter} iterations from {len(starts)} starts")
    theta, chi2, n_iter = best
    theta[2], theta[3] = abs(theta[2]), abs(theta[3])  # model is even in delta and dk

    _, J = beat_curve(dx, theta, b.sign, jacobian=True)
    Jw = J[:, free] / e[:, None]
    sv = np.linalg.svd(Jw, compute_uv=False)
    degenerate = bool(sv.size == 0 or sv[-1] <= 1e-7 * sv[0])
    cov_free = np.linalg.pinv(Jw.T @ Jw)
    dof = int(dx.size - free.sum())
    if not weighted and dof > 0:
        cov_free = cov_free * chi2 / dof
    cov = np.zeros((4, 4))
    cov[np.ix_(free, free)] = cov_free
    if degenerate:
        warnings.warn(
            f"{b.value}-branch fit is rank deficient (singular values {sv.tolist()}); "
            "visibility near zero leaves delta and dk unidentifiable",
            DegenerateFitWarning,
            stacklevel=2,
        )
    if theta[1] < 0.0 or theta[1] > 1.0:
        if not (-1e-9 <= theta[1] <= 1.0 + 1e-9):
            warnings.warn(f"fitted visibility {theta[1]:.4g} clamped to [0, 1]", VisibilityClampWarning,
                          stacklevel=2)
        theta[1] = min(max(theta[1], 0.0), 1.0)
    if theta[0] <= 0:
        raise FitError(f"fitted amplitude is not positive ({theta[0]:.4g})")
    return BeatFitParams(*theta.tolist(), branch=b, covariance=cov, residual_norm=math.sqrt(chi2),
                         chi2=chi2, dof=dof, n_iter=n_iter, degenerate=degenerate,
                         fixed=tuple(sorted(fixed)), channel=channel)


# ---------------------------------------------------------------------------
# likelihood models
# ---------------------------------------------------------------------------

class BeatCurveModel:
    """Fitted beat curves used as the per-channel event model.

    With ``renormalize`` (the default) the curves are divided by their sum over
    channels, which makes the likelihood the conditional law of the recorded pairs.
    Without it the curves enter as they are, sum_c C_c ln C_fit_c; that form is
    only stationary at the truth when the summed rate does not depend on dx, which
    fails for a finite, masked array.
    """

    vectorized = True  # values() accepts a column of displacements

    def __init__(self, fits: Sequence[BeatFitParams], renormalize: bool = True):
        self.fits = list(fits)
        self.renormalize = renormalize
        self.channels = [f.channel for f in self.fits]
        self._amp = 2.0 * np.array([f.amplitude for f in self.fits])
        self._dk = np.array([f.delta_k for f in self.fits])
        self._sign = np.array([f.branch.sign for f in self.fits], float)
        self._V = np.array([f.visibility for f in self.fits])
        self._delta = np.array([f.delta for f in self.fits])

    def values(self, dx: float, order: int = 2):
        return sinc_channel_terms(self._amp, self._dk, self._sign, self._V, dx, self._delta, order)

    def log_terms(self, dx: float):
        return _log_terms(*self.values(dx, 2), self.renormalize)

    def fastest_beat(self) -> float:
        return float(np.max(self._dk)) if self._dk.size else 0.0


def _log_terms(m, d1, d2, renormalize):
    with np.errstate(divide="ignore", invalid="ignore"):
        g1 = d1 / m
        g2 = d2 / m - g1 * g1
        logm = np.log(m)
    if renormalize:
        z, z1, z2 = m.sum(), d1.sum(), d2.sum()
        h1 = z1 / z
        logm = logm - math.log(z)
        g1 = g1 - h1
        g2 = g2 - (z2 / z - h1 * h1)
    return logm, g1, g2


class ProbabilityModel:
    """Channel probabilities of the physical model over an array's unmasked channels.

    With ``renormalize`` the probabilities are conditioned on detection in one of
    those channels, which is the law the multinomial simulator samples.
    """

    def __init__(self, params: SourceParams, array: DetectorArray, use_exact: bool = False,
                 renormalize: bool = True):
        self.params = params
        self.array = array
        self.use_exact = use_exact
        self.renormalize = renormalize
        self.channels = array.channels()
        self._ca = channel_arrays(self.channels, array)

    def values(self, dx: float, order: int = 2):
        return channel_probabilities(self._ca, dx, self.params, self.array.delta, self.use_exact, order)

    def log_terms(self, dx: float):
        return _log_terms(*self.values(dx, 2), self.renormalize)

    def fastest_beat(self) -> float:
        return float(np.max(np.abs(self._ca.ki - self._ca.kj)))


def _counts_vector(counts, model) -> np.ndarray:
    c = np.asarray(counts, float)
    if c.shape != (len(model.channels),):
        raise ValueError(f"expected {len(model.channels)} channel counts, got shape {c.shape}")
    return c


def _loglik(c, logm):
    pos = c > 0
    if np.any(pos & ~np.isfinite(logm)):
        return -math.inf
    return float(np.sum(c[pos] * logm[pos]))


def log_likelihood(dx: float, counts, model) -> float:
    """sum_c C_c ln m_c(dx) over the model's channels (zero-count channels contribute 0)."""
    c = _counts_vector(counts, model)
    m = model.values(dx, 0)[0]
    bad = (c > 0) & ~(m > 0)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise ValueError(f"model value {m[k]!r} is not positive at dx={dx} for channel {k}")
    with np.errstate(divide="ignore"):
        return _loglik(c, np.log(m))


def _golden_max(f, a, b, tol):
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = f(x1), f(x2)
    while b - a > tol:
        if f1 >= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = f(x2)
    return (a + b) / 2.0, a, b


def mle_estimate(counts, model, window: tuple[float, float], n_grid: int = 512, xtol: float = 1e-6) -> float:
    """Maximizer of the log-likelihood inside ``window``: grid scan, golden-section
    refinement to ``xtol`` mm, then Newton polishing on the analytic derivatives."""
    lo, hi = float(window[0]), float(window[1])
    if not hi > lo:
        raise ValueError(f"empty search window {window}")
    c = _counts_vector(counts, model)

    def L(x):
        return _loglik(c, model.log_terms(x)[0])

    grid = np.linspace(lo, hi, max(int(n_grid), 512))
    vals = np.array([L(x) for x in grid])
    if not np.any(np.isfinite(vals)):
        raise ValueError("log-likelihood is -inf over the whole window")
    k = int(np.nanargmax(vals))
    if k == 0 or k == grid.size - 1:
        raise BoundaryMaximumError(
            f"likelihood maximum on the window boundary at dx={grid[k]:.6g} mm; widen or move the window"
        )
    x, a, b = _golden_max(L, grid[k - 1], grid[k + 1], xtol)
    fx = L(x)
    for _ in range(30):
        _, g1, g2 = model.log_terms(x)
        d1, d2 = float(c @ np.nan_to_num(g1)), float(c @ np.nan_to_num(g2))
        if not d2 < 0:
            break
        xn = x - d1 / d2
        if not a <= xn <= b:
            break
        fn = L(xn)
        if fn < fx - 1e-12 * abs(fx):
            break
        done = abs(xn - x) <= 1e-14 * max(1.0, abs(x))
        x, fx = xn, fn
        if done:
            break
    return x


def mle_uncertainty(counts, count_errs, model, dx_ml: float, stationarity_tol: float = 1e-6):
    """Propagated standard error of the maximizer and the per-channel sensitivities
    d dx_ML / d C_c."""
    c = _counts_vector(counts, model)
    e = np.asarray(count_errs, float)
    if e.shape != c.shape:
        raise ValueError("count errors must match counts")
    _, g1, g2 = model.log_terms(dx_ml)
    used = c > 0
    g1 = np.where(used | np.isfinite(g1), g1, 0.0)
    g2 = np.where(used | np.isfinite(g2), g2, 0.0)
    d1 = float(c @ g1)
    d2 = float(c @ g2)
    scale = float(np.abs(c) @ np.abs(g1))
    if abs(d1) > stationarity_tol * scale:
        raise NonStationaryError(f"dL/ddx = {d1:.3g} is not ~0 at dx={dx_ml} (scale {scale:.3g})")
    if not d2 < -1e-12 * (float(np.abs(c) @ np.abs(g2)) + 1e-300):
        raise DegenerateCurvatureError(f"log-likelihood curvature {d2:.3g} is not negative at dx={dx_ml}")
    sens = -g1 / d2
    return math.sqrt(float(np.sum((sens * e) ** 2))), sens


@dataclass
class EstimationResult:
    dx_ml: float
    dx_err: float
    n_total: float
    log_likelihood_at_max: float
    search_window: tuple[float, float]
    per_channel_sensitivities: np.ndarray

    @property
    def sqrtN_dx_err(self) -> float:
        return math.sqrt(self.n_total) * self.dx_err


def estimate_displacement(counts, count_errs, model, window, n_repeats: int = 1, **kw) -> EstimationResult:
    """Maximum-likelihood displacement with its propagated uncertainty.

    ``counts`` are per-repeat mean counts; the number of observed pairs is
    ``n_repeats * sum(counts)``.
    """
    x = mle_estimate(counts, model, window, **kw)
    err, sens = mle_uncertainty(counts, count_errs, model, x)
    c = _counts_vector(counts, model)
    return EstimationResult(x, err, n_repeats * float(c.sum()), log_likelihood(x, c, model),
                            (float(window[0]), float(window[1])), sens)


def quarter_period_window(center: float, fastest_dk: float) -> tuple[float, float]:
    """center +/- a quarter period of the fastest beat."""
    if not fastest_dk > 0:
        raise ValueError("need a non-zero beat frequency to size the window")
    w = 0.25 * 2.0 * math.pi / fastest_dk
    return center - w, center + w


def least_squares_seed(mean, err, model, search_range: tuple[float, float], n_grid: int = 2001) -> float:
    """Displacement whose model curves, scaled to the observed total, best match the
    counts in the weighted least-squares sense."""
    y = np.asarray(mean, float)
    e = np.asarray(err, float)
    w = np.where(e > 0, 1.0 / np.where(e > 0, e, 1.0) ** 2, 0.0)
    grid = np.linspace(search_range[0], search_range[1], n_grid)
    if getattr(model, "vectorized", False):
        m = model.values(grid[:, None], 0)[0]
    else:
        m = np.array([model.values(x, 0)[0] for x in grid])
    total = m.sum(axis=1, keepdims=True)
    expected = m * (y.sum() / np.where(total > 0, total, 1.0))
    chi2 = ((y - expected) ** 2 * w).sum(axis=1)
    return float(grid[int(np.argmin(chi2))])
