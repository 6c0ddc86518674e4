"""Run configuration: one YAML file of flat dotted keys plus command-line overrides.

Every key has a default, so an empty file (or none) describes the reference run:
V = 0.3, delta = 1.7 mm^-1, an 8-pixel array at 9.8 mm^-1 pitch with the default
bunching mask, scanned over 0..2 mm.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .ingest import CoincidenceWindows
from .model import DetectorArray, OpticalGeometry, SourceParams, default_bunching_mask

__all__ = ["ConfigError", "DEFAULTS", "RunConfig", "parse_grid", "load_config"]


class ConfigError(ValueError):
    """One or more configuration problems, all reported together."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output.dir": "out",
    "source.sigma_x_mm": 0.035,
    "source.visibility": 0.3,
    "geometry.wavelength_nm": 531.5,
    "geometry.focal_length_mm": 300.0,
    "geometry.pixel_pitch_um": 250.0,
    "geometry.pixel_width_um": 50.0,
    "geometry.n_pixels": 8,
    "geometry.center_index": None,
    # "fitted" uses the momentum pitch and sensitivity below; "geometric" derives
    # both from the optics
    "array.delta_mode": "fitted",
    "array.delta_per_mm": 1.7,
    "array.pitch_per_mm": 9.8,
    "array.bunching_mask": "default",
    "array.bunching_mask_separation": 1,
    "array.antibunching_mask": [],
    "scan.grid": "0:2:0.02",
    "scan.repeats": 10,
    "scan.events": 1000,
    "scan.exact_integral": False,
    "scan.poisson_totals": False,
    "timetags.write": False,
    "timetags.format": "binary",
    "timetags.jitter_bins": 0,
    "windows.bunching_center_ns": 0.0,
    "windows.antibunching_center_ns": 6.0,
    "windows.half_width_ns": 0.5,
    "windows.tac_range_ns": 25.0,
    "windows.n_tac_bins": 16384,
    "fit.weighted": True,
    "fit.n_starts": 8,
    "fit.max_iter": 400,
    "fit.curve_samples_per_step": 4,
    "estimation.model": "fitted",
    "estimation.renormalize": True,
    "estimation.seed": "least_squares",
    "estimation.window_half_width_mm": None,
    "estimation.n_grid": 512,
    "crb.grid": "0:4:0.005",
    "crb.grid_half_width": 50,
    "crb.n_events": 10000,
}

_CHOICES = {
    "array.delta_mode": ("fitted", "geometric"),
    "timetags.format": ("binary", "csv"),
    "estimation.model": ("fitted", "exact"),
    "estimation.seed": ("least_squares", "nominal"),
}


def parse_grid(text: str) -> np.ndarray:
    """"start:stop:step" (mm, stop inclusive up to rounding) to an array."""
    parts = str(text).split(":")
    if len(parts) != 3:
        raise ValueError(f"grid must be 'start:stop:step', got {text!r}")
    start, stop, step = (float(p) for p in parts)
    if not (math.isfinite(start) and math.isfinite(stop) and step > 0):
        raise ValueError(f"grid needs finite bounds and a positive step, got {text!r}")
    if stop < start:
        raise ValueError(f"grid stop {stop} is below start {start}")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(n)


def _flatten(data: Any, prefix: str = "") -> dict[str, Any]:
    out = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _pairs(value, name, problems):
    try:
        return [tuple(int(x) for x in pair) for pair in value]
    except (TypeError, ValueError):
        problems.append(f"{name} must be a list of [i, j] pairs, got {value!r}")
        return []


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def from_mapping(cls, mapping: dict | None = None, overrides: dict | None = None) -> "RunConfig":
        values = dict(DEFAULTS)
        problems = []
        given = _flatten(mapping or {})
        given.update({k: v for k, v in (overrides or {}).items() if v is not None})
        for key, value in given.items():
            if key not in DEFAULTS:
                problems.append(f"unknown key {key!r}")
            else:
                values[key] = value
        cfg = cls(values)
        problems += cfg._problems()
        if problems:
            raise ConfigError(problems)
        return cfg

    def _problems(self) -> list[str]:
        v = self.values
        problems = []

        def number(key, positive=False, nonneg=False, integer=False):
            x = v[key]
            if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
                problems.append(f"{key} must be a finite number, got {x!r}")
                return None
            if integer and int(x) != x:
                problems.append(f"{key} must be an integer, got {x!r}")
            if positive and not x > 0:
                problems.append(f"{key} must be positive, got {x!r}")
            if nonneg and x < 0:
                problems.append(f"{key} must be non-negative, got {x!r}")
            return x

        for key, options in _CHOICES.items():
            if v[key] not in options:
                problems.append(f"{key} must be one of {options}, got {v[key]!r}")
        for key in ("scan.exact_integral", "scan.poisson_totals", "timetags.write", "fit.weighted",
                    "estimation.renormalize"):
            if not isinstance(v[key], bool):
                problems.append(f"{key} must be true or false, got {v[key]!r}")

        seed = number("seed", nonneg=True, integer=True)
        if seed is not None and seed >= 2 ** 64:
            problems.append("seed must fit in 64 bits")
        number("source.sigma_x_mm", positive=True)
        vis = number("source.visibility")
        if vis is not None and not 0 <= vis <= 1:
            problems.append(f"source.visibility must lie in [0, 1], got {vis}")
        for key in ("geometry.wavelength_nm", "geometry.focal_length_mm", "geometry.pixel_pitch_um",
                    "geometry.pixel_width_um"):
            number(key, positive=True)
        n = number("geometry.n_pixels", integer=True)
        if n is not None and not 2 <= n <= 255:
            problems.append(f"geometry.n_pixels must lie in [2, 255], got {n}")
        if v["geometry.center_index"] is not None:
            number("geometry.center_index")
        delta = number("array.delta_per_mm", positive=True)
        pitch = number("array.pitch_per_mm", positive=True)
        if v["array.delta_mode"] == "fitted" and delta and pitch and delta >= pitch:
            problems.append(f"momentum sensitivity {delta} must be smaller than the pitch {pitch}")
        if v["array.delta_mode"] == "geometric":
            w, p = v["geometry.pixel_width_um"], v["geometry.pixel_pitch_um"]
            if isinstance(w, (int, float)) and isinstance(p, (int, float)) and w >= p:
                problems.append(f"pixel width {w} um must be smaller than the pitch {p} um")
        number("array.bunching_mask_separation", nonneg=True, integer=True)
        if v["array.bunching_mask"] != "default":
            _pairs(v["array.bunching_mask"], "array.bunching_mask", problems)
        _pairs(v["array.antibunching_mask"], "array.antibunching_mask", problems)

        for key in ("scan.grid", "crb.grid"):
            try:
                parse_grid(v[key])
            except ValueError as exc:
                problems.append(f"{key}: {exc}")
        reps = number("scan.repeats", integer=True)
        if reps is not None and reps < 2:
            problems.append(f"scan.repeats must be at least 2 to estimate uncertainties, got {reps}")
        number("scan.events", nonneg=True, integer=True)
        number("timetags.jitter_bins", nonneg=True, integer=True)
        number("fit.n_starts", positive=True, integer=True)
        number("fit.max_iter", positive=True, integer=True)
        number("fit.curve_samples_per_step", positive=True, integer=True)
        if v["estimation.window_half_width_mm"] is not None:
            number("estimation.window_half_width_mm", positive=True)
        ng = number("estimation.n_grid", integer=True)
        if ng is not None and ng < 512:
            problems.append(f"estimation.n_grid must be at least 512, got {ng}")
        number("crb.grid_half_width", positive=True, integer=True)
        number("crb.n_events", positive=True, integer=True)

        win = [number(k) for k in ("windows.bunching_center_ns", "windows.antibunching_center_ns")]
        hw = number("windows.half_width_ns", positive=True)
        number("windows.tac_range_ns", positive=True)
        number("windows.n_tac_bins", positive=True, integer=True)
        if None not in win and hw:
            if abs(win[1] - win[0]) < 2 * hw:
                problems.append("bunching and antibunching windows overlap")
            try:
                self.windows()
            except ValueError as exc:
                problems.append(f"windows: {exc}")

        if not problems:
            try:
                self.array()
            except ValueError as exc:
                problems.append(f"array: {exc}")
        return problems

    # -- derived objects ----------------------------------------------------

    def source(self) -> SourceParams:
        return SourceParams(float(self["source.sigma_x_mm"]), float(self["source.visibility"]))

    def geometry(self) -> OpticalGeometry:
        c = self["geometry.center_index"]
        return OpticalGeometry(float(self["geometry.wavelength_nm"]), float(self["geometry.focal_length_mm"]),
                               float(self["geometry.pixel_pitch_um"]), float(self["geometry.pixel_width_um"]),
                               int(self["geometry.n_pixels"]), None if c is None else float(c))

    def masks(self) -> dict:
        n = int(self["geometry.n_pixels"])
        bm = self["array.bunching_mask"]
        if bm == "default":
            bm = default_bunching_mask(n, int(self["array.bunching_mask_separation"]))
        return {"bunching_mask": frozenset(tuple(int(x) for x in p) for p in bm),
                "antibunching_mask": frozenset(tuple(int(x) for x in p) for p in self["array.antibunching_mask"])}

    def array(self) -> DetectorArray:
        geo = self.geometry()
        if self["array.delta_mode"] == "geometric":
            return geo.detector_array(**self.masks())
        return DetectorArray.uniform(geo.n_pixels, float(self["array.pitch_per_mm"]),
                                     float(self["array.delta_per_mm"]), geo.center_index, **self.masks())

    def windows(self) -> CoincidenceWindows:
        return CoincidenceWindows(float(self["windows.bunching_center_ns"]),
                                  float(self["windows.antibunching_center_ns"]),
                                  float(self["windows.half_width_ns"]), float(self["windows.tac_range_ns"]),
                                  int(self["windows.n_tac_bins"]))

    def scan_grid(self) -> np.ndarray:
        return parse_grid(self["scan.grid"])

    def crb_grid(self) -> np.ndarray:
        return parse_grid(self["crb.grid"])

    # -- identity -----------------------------------------------------------

    def canonical(self) -> dict:
        """Resolved values that determine outputs (the output directory is excluded)."""
        out = {}
        for key in sorted(self.values):
            if key == "output.dir":
                continue
            value = self.values[key]
            if isinstance(value, (list, tuple, frozenset, set)):
                value = sorted([int(x) for x in p] for p in value)
            out[key] = value
        return out

    @property
    def digest(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.canonical(), sort_keys=True)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Read a config file (if any) and apply overrides; raises :class:`ConfigError` or OSError."""
    mapping = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            mapping = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError([f"{path}: not valid YAML ({exc})"]) from None
        if not isinstance(mapping, dict):
            raise ConfigError([f"{path}: top level must be a mapping of keys to values"])
    return RunConfig.from_mapping(mapping, overrides)
