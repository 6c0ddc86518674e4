"""Scan analysis pipeline: per-channel fits, per-point estimation and bound tables.

Each function returns plain rows (lists of dicts) so the command line can write
them as CSV and tests can inspect them directly.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .estimation import FisherConfig, crb, fisher_information, qcrb
from .fit import (
    BeatCurveModel,
    BeatFitParams,
    DegenerateFitWarning,
    FitError,
    ProbabilityModel,
    estimate_displacement,
    fit_beat_curve,
    guess_beat_params,
    least_squares_seed,
    quarter_period_window,
)
from .model import Channel, DetectorArray, SourceParams
from .montecarlo import ScanDataset

__all__ = [
    "ChannelFit",
    "fit_scan",
    "fit_rows",
    "beat_curve_rows",
    "EstimationOptions",
    "estimate_scan",
    "bound_rows",
    "fig4_rows",
    "write_rows",
]


@dataclass
class ChannelFit:
    channel: Channel
    params: BeatFitParams | None
    status: str

    @property
    def usable(self) -> bool:
        return self.params is not None and self.status == "ok"


def fit_scan(ds: ScanDataset, *, weighted: bool = True, n_starts: int = 8, max_iter: int = 400,
             seed: int = 0, array: DetectorArray | None = None) -> list[ChannelFit]:
    """Fit every channel of the scan; failures are recorded, not raised.

    Same-pixel channels have no momentum difference, so their beat frequency is
    pinned to zero. With ``array`` the starting point takes delta and dk from the
    detector layout (all four parameters stay free); otherwise it comes from a grid
    search over the data alone. A fitted beat faster than the scan's Nyquist limit
    pi / step cannot be told apart from its aliases and is marked unusable.
    """
    out = []
    steps = np.diff(np.unique(ds.dx_values))
    nyquist = math.pi / float(steps.min()) if steps.size else math.inf
    for k, ch in enumerate(ds.channels):
        x, y, e = ds.channel_scan(ch)
        fixed = {"delta_k": 0.0} if ch.i == ch.j else None
        if weighted and np.any(~(e > 0)):
            out.append(ChannelFit(ch, None, "failed: zero uncertainty at some scan points"))
            continue
        guess = None
        if array is not None:
            layout = {"delta": array.delta, "delta_k": abs(float(array.k_centers[ch.i] - array.k_centers[ch.j]))}
            guess = guess_beat_params(x, y, e if weighted else None, ch.branch, fixed=layout)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegenerateFitWarning)
                p = fit_beat_curve(x, y, e if weighted else None, ch.branch, guess, fixed=fixed,
                                   n_starts=n_starts, max_iter=max_iter, seed=seed + k, weighted=weighted,
                                   channel=ch)
        except (FitError, ValueError) as exc:
            out.append(ChannelFit(ch, None, f"failed: {exc}"))
            continue
        if p.degenerate:
            status = "degenerate"
        elif p.delta_k > nyquist:
            status = f"aliased: dk {p.delta_k:.4g} above the scan Nyquist limit {nyquist:.4g} mm^-1"
        else:
            status = "ok"
        out.append(ChannelFit(ch, p, status))
    return out


FIT_COLUMNS = ("branch", "i", "j", "status", "amplitude", "amplitude_err", "visibility", "visibility_err",
               "delta", "delta_err", "delta_k", "delta_k_err", "delta_k_per_sep", "chi2", "dof")


def fit_rows(fits: Sequence[ChannelFit]) -> list[dict]:
    rows = []
    for f in fits:
        row = {"branch": f.channel.branch.value, "i": f.channel.i, "j": f.channel.j, "status": f.status}
        if f.params is not None:
            p = f.params
            err = p.stderr
            sep = abs(f.channel.i - f.channel.j)
            row.update(amplitude=p.amplitude, amplitude_err=err["amplitude"], visibility=p.visibility,
                       visibility_err=err["visibility"], delta=p.delta, delta_err=err["delta"],
                       delta_k=p.delta_k, delta_k_err=err["delta_k"],
                       delta_k_per_sep=p.delta_k / sep if sep else math.nan, chi2=p.chi2, dof=p.dof)
        rows.append(row)
    return rows


def beat_curve_rows(ds: ScanDataset, fits: Sequence[ChannelFit], samples_per_step: int = 4):
    """Data rows (dx, mean, err, fit) and dense fitted-curve rows per channel."""
    data, curves = [], []
    x = ds.dx_values
    dense = x
    if x.size > 1:
        dense = np.linspace(x[0], x[-1], (x.size - 1) * samples_per_step + 1)
    for f in fits:
        ch = f.channel
        _, y, e = ds.channel_scan(ch)
        fitted = f.params(x) if f.params is not None else np.full(x.shape, math.nan)
        for xv, yv, ev, fv in zip(x, y, e, fitted):
            data.append({"branch": ch.branch.value, "i": ch.i, "j": ch.j, "dx_mm": xv, "mean": yv,
                         "err": ev, "fit": fv})
        if f.params is not None:
            for xv, fv in zip(dense, f.params(dense)):
                curves.append({"branch": ch.branch.value, "i": ch.i, "j": ch.j, "dx_mm": xv, "fit": fv})
    return data, curves


@dataclass(frozen=True)
class EstimationOptions:
    model: str = "fitted"              # "fitted" curves or the "exact" channel probabilities
    renormalize: bool = True
    seed: str = "least_squares"        # or "nominal": centre the window on the scan position
    window_half_width: float | None = None
    n_grid: int = 512


ESTIMATION_COLUMNS = ("dx_mm", "dx_ml_mm", "dx_err_mm", "n_total", "sqrtN_dx_err_mm", "window_lo_mm",
                      "window_hi_mm", "status")


def _likelihood_model(ds, fits, opts, params, array):
    if opts.model == "exact":
        if params is None or array is None:
            raise ValueError("the exact likelihood model needs source parameters and an array")
        model = ProbabilityModel(params, array, renormalize=opts.renormalize)
        idx = [ds.channel_index(ch) for ch in model.channels]
        return model, idx
    usable = [f for f in fits if f.usable]
    if not usable:
        raise FitError("no channel produced a usable fit")
    model = BeatCurveModel([f.params for f in usable], renormalize=opts.renormalize)
    return model, [ds.channel_index(f.channel) for f in usable]


def estimate_scan(ds: ScanDataset, fits: Sequence[ChannelFit], opts: EstimationOptions = EstimationOptions(),
                  params: SourceParams | None = None, array: DetectorArray | None = None) -> list[dict]:
    """Maximum-likelihood displacement and propagated uncertainty at every scan point.

    Points where the estimate is not defined (no counts, vanishing information,
    boundary maximum) carry NaN values and a status message.
    """
    model, idx = _likelihood_model(ds, fits, opts, params, array)
    half = opts.window_half_width
    if half is None:
        half = quarter_period_window(0.0, model.fastest_beat())[1]
    lo, hi = float(ds.dx_values.min()), float(ds.dx_values.max())
    rows = []
    for k, x in enumerate(ds.dx_values):
        counts, errs = ds.mean[k, idx], ds.err[k, idx]
        row = dict.fromkeys(ESTIMATION_COLUMNS, math.nan)
        row.update(dx_mm=float(x), n_total=ds.n_repeats * float(counts.sum()))
        if counts.sum() <= 0:
            row["status"] = "no counts"
            rows.append(row)
            continue
        center = float(x) if opts.seed == "nominal" else least_squares_seed(counts, errs, model, (lo, hi))
        window = (center - half, center + half)
        row.update(window_lo_mm=window[0], window_hi_mm=window[1])
        try:
            res = estimate_displacement(counts, errs, model, window, n_repeats=ds.n_repeats, n_grid=opts.n_grid)
        except (ArithmeticError, ValueError) as exc:
            row["status"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
            continue
        row.update(dx_ml_mm=res.dx_ml, dx_err_mm=res.dx_err, n_total=res.n_total,
                   sqrtN_dx_err_mm=res.sqrtN_dx_err, status="ok")
        rows.append(row)
    return rows


BOUND_COLUMNS = ("dx_mm", "fisher_mm2", "sqrtN_crb_mm", "fisher_array_mm2", "sqrtN_crb_array_mm",
                 "sqrtN_qcrb_mm")


def bound_rows(dx_grid, params: SourceParams, array: DetectorArray, grid_half_width: int = 50,
               n_events: int = 10000) -> list[dict]:
    """Fisher information and sqrt(N)-scaled bounds for the ideal grid and for the array."""
    ideal = FisherConfig(params, array.delta, grid_half_width=grid_half_width)
    restricted = FisherConfig.for_array(params, array)
    q = math.sqrt(n_events) * qcrb(n_events, params)
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        for x in dx_grid:
            F = fisher_information(float(x), ideal)
            Fa = fisher_information(float(x), restricted)
            rows.append({"dx_mm": float(x), "fisher_mm2": F,
                         "sqrtN_crb_mm": math.sqrt(n_events) * crb(n_events, F),
                         "fisher_array_mm2": Fa,
                         "sqrtN_crb_array_mm": math.sqrt(n_events) * crb(n_events, Fa),
                         "sqrtN_qcrb_mm": q})
    return rows


FIG4_COLUMNS = ("dx_mm", "sqrtN_dx_exp_mm", "sqrtN_crb_mm", "sqrtN_crb_array_mm", "sqrtN_qcrb_mm")


def fig4_rows(estimates: Sequence[dict], params: SourceParams, array: DetectorArray,
              grid_half_width: int = 50) -> list[dict]:
    """Experimental uncertainty next to the bounds at each scan point (all scaled by sqrt(N))."""
    bounds = bound_rows([r["dx_mm"] for r in estimates], params, array, grid_half_width)
    rows = []
    for est, b in zip(estimates, bounds):
        rows.append({"dx_mm": est["dx_mm"], "sqrtN_dx_exp_mm": est["sqrtN_dx_err_mm"],
                     "sqrtN_crb_mm": b["sqrtN_crb_mm"], "sqrtN_crb_array_mm": b["sqrtN_crb_array_mm"],
                     "sqrtN_qcrb_mm": b["sqrtN_qcrb_mm"]})
    return rows


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_rows(path, columns: Sequence[str], rows: Sequence[dict], comments: dict | None = None) -> None:
    """CSV with ``# key: value`` header comments; missing cells are written empty."""
    with open(Path(path), "w", newline="") as fh:
        for key, value in (comments or {}).items():
            fh.write(f"# {key}: {value}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow(["" if row.get(c) is None else _fmt(row.get(c)) for c in columns])
