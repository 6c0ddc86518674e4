"""Synthetic coincidence data.

Each repeat draws a fixed number of detected pairs from the channel table
(multinomial); optionally the per-repeat total is itself Poisson. Scan points get
independent child seeds from one :class:`numpy.random.SeedSequence`, so a dataset
is reproducible from ``(config, seed)`` and does not depend on evaluation order.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ingest import CoincidenceWindows, CountMatrix, RECORD_DTYPE
from .model import Branch, Channel, DetectorArray, SourceParams, probability_table

__all__ = [
    "SimulationConfig",
    "ScanDataset",
    "CountMatrix",
    "RNG_ALGORITHM",
    "sample_counts",
    "simulate_scan",
    "synth_timetags",
    "counts_to_matrices",
]

RNG_ALGORITHM = "numpy.random.PCG64 (SeedSequence.spawn per scan point)"
SCAN_COLUMNS = ("dx_mm", "branch", "i", "j", "mean", "err", "n_r", "events")


@dataclass(frozen=True)
class SimulationConfig:
    params: SourceParams
    array: DetectorArray
    use_exact: bool = False
    poisson_totals: bool = False


def counts_to_matrices(channels: Sequence[Channel], values, array: DetectorArray,
                       dtype=np.int64) -> tuple[CountMatrix, CountMatrix]:
    n = array.n_pixels
    mats = {Branch.A: np.zeros((n, n), dtype=dtype), Branch.B: np.zeros((n, n), dtype=dtype)}
    for ch, v in zip(channels, values):
        mats[ch.branch][ch.i, ch.j] = v
    return (CountMatrix(Branch.A, mats[Branch.A], array.antibunching_mask),
            CountMatrix(Branch.B, mats[Branch.B], array.bunching_mask))


def sample_counts(dx: float, n_events: int, config: SimulationConfig, seed=None
                  ) -> tuple[CountMatrix, CountMatrix]:
    """One repeat: ``n_events`` detected pairs distributed over the unmasked channels."""
    if n_events < 0:
        raise ValueError("n_events must be non-negative")
    table = probability_table((Branch.A, Branch.B), dx, config.params, config.array, config.use_exact)
    rng = np.random.default_rng(seed)
    n = rng.poisson(n_events) if config.poisson_totals else n_events
    draw = rng.multinomial(n, table.probabilities)
    return counts_to_matrices(table.channels, draw, config.array)


@dataclass(eq=False)
class ScanDataset:
    """Mean counts and their standard errors per channel along a displacement scan.

    ``mean`` and ``err`` have shape ``(n_dx, n_channels)``. ``counts`` keeps the raw
    repeats ``(n_dx, n_repeats, n_channels)`` when they are known; the JSON form stores
    them, the CSV form does not.
    """

    dx_values: np.ndarray
    channels: tuple[Channel, ...]
    mean: np.ndarray
    err: np.ndarray
    n_repeats: int
    events_per_repeat: int
    n_pixels: int
    provenance: dict = field(default_factory=dict)
    counts: np.ndarray | None = None

    def __post_init__(self):
        self.dx_values = np.asarray(self.dx_values, dtype=float)
        self.channels = tuple(Channel(Branch.parse(b), int(i), int(j)) for b, i, j in self.channels)
        self.mean = np.asarray(self.mean, dtype=float).reshape(self.dx_values.size, len(self.channels))
        self.err = np.asarray(self.err, dtype=float).reshape(self.mean.shape)
        if self.n_repeats < 2 and np.any(self.err != 0):
            raise ValueError("uncertainties need at least two repeats")

    def channel_index(self, channel: Channel) -> int:
        return self.channels.index(Channel(Branch.parse(channel[0]), channel[1], channel[2]))

    def channel_scan(self, channel: Channel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = self.channel_index(channel)
        return self.dx_values, self.mean[:, k], self.err[:, k]

    def total_events(self, k: int) -> float:
        """Observed pairs behind scan point ``k``: repeats times the summed mean counts."""
        return self.n_repeats * float(self.mean[k].sum())

    # -- serialization ------------------------------------------------------

    def _comments(self) -> dict:
        return {key: self.provenance[key] for key in sorted(self.provenance)}

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        for key, value in self._comments().items():
            buf.write(f"# {key}: {value}\n")
        buf.write(f"# n_pixels: {self.n_pixels}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SCAN_COLUMNS)
        for k, x in enumerate(self.dx_values):
            for c, ch in enumerate(self.channels):
                w.writerow([repr(float(x)), ch.branch.value, ch.i, ch.j, repr(float(self.mean[k, c])),
                            repr(float(self.err[k, c])), self.n_repeats, self.events_per_repeat])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "ScanDataset":
        return cls.from_csv_text(Path(path).read_text())

    @classmethod
    def from_csv_text(cls, text: str) -> "ScanDataset":
        meta, rows = {}, []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                meta[key.strip()] = value.strip()
            elif line.strip():
                rows.append(line)
        reader = csv.DictReader(rows)
        if tuple(reader.fieldnames or ()) != SCAN_COLUMNS:
            raise ValueError(f"scan CSV must have columns {','.join(SCAN_COLUMNS)}")
        records = list(reader)
        dx_values = sorted({float(r["dx_mm"]) for r in records})
        channels = list(dict.fromkeys(Channel(Branch.parse(r["branch"]), int(r["i"]), int(r["j"]))
                                      for r in records))
        mean = np.zeros((len(dx_values), len(channels)))
        err = np.zeros_like(mean)
        xi = {x: k for k, x in enumerate(dx_values)}
        ci = {c: k for k, c in enumerate(channels)}
        n_r = events = 0
        for r in records:
            ch = Channel(Branch.parse(r["branch"]), int(r["i"]), int(r["j"]))
            k, c = xi[float(r["dx_mm"])], ci[ch]
            mean[k, c] = float(r["mean"])
            err[k, c] = float(r["err"])
            n_r, events = int(r["n_r"]), int(r["events"])
        n_pixels = int(meta.pop("n_pixels", 0)) or 1 + max((max(c.i, c.j) for c in channels), default=0)
        return cls(np.array(dx_values), tuple(channels), mean, err, n_r, events, n_pixels, meta)

    def to_json(self, path=None) -> str:
        doc = {
            "format": "mrhom-scan",
            "version": 1,
            "provenance": self._comments(),
            "n_pixels": self.n_pixels,
            "n_repeats": self.n_repeats,
            "events_per_repeat": self.events_per_repeat,
            "dx_mm": self.dx_values.tolist(),
            "channels": [[c.branch.value, c.i, c.j] for c in self.channels],
            "mean": self.mean.tolist(),
            "err": self.err.tolist(),
        }
        if self.counts is not None:
            doc["counts"] = self.counts.tolist()
        text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, path) -> "ScanDataset":
        return cls.from_json_text(Path(path).read_text())

    @classmethod
    def from_json_text(cls, text: str) -> "ScanDataset":
        doc = json.loads(text)
        if doc.get("format") != "mrhom-scan":
            raise ValueError("not a scan dataset file")
        return cls(np.array(doc["dx_mm"], float), tuple(tuple(c) for c in doc["channels"]),
                   np.array(doc["mean"], float), np.array(doc["err"], float), int(doc["n_repeats"]),
                   int(doc["events_per_repeat"]), int(doc["n_pixels"]), dict(doc["provenance"]),
                   None if doc.get("counts") is None else np.array(doc["counts"], dtype=np.int64))

    @classmethod
    def load(cls, path) -> "ScanDataset":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"dataset not found: {path}")
        return cls.from_json(path) if path.suffix.lower() == ".json" else cls.from_csv(path)


def simulate_scan(dx_grid, n_r: int, events_per_repeat: int, config: SimulationConfig, seed: int = 0,
                  provenance: dict | None = None) -> ScanDataset:
    """``n_r`` independent repeats at every displacement of ``dx_grid``."""
    if n_r < 2:
        raise ValueError("n_r must be at least 2 to estimate uncertainties")
    if events_per_repeat < 0:
        raise ValueError("events_per_repeat must be non-negative")
    grid = np.asarray(list(dx_grid), dtype=float)
    children = np.random.SeedSequence(seed).spawn(grid.size)
    channels = None
    raw = []
    for x, child in zip(grid, children):
        table = probability_table((Branch.A, Branch.B), x, config.params, config.array, config.use_exact)
        channels = channels or table.channels
        rng = np.random.Generator(np.random.PCG64(child))
        if config.poisson_totals:
            totals = rng.poisson(events_per_repeat, size=n_r)
            draws = np.stack([rng.multinomial(t, table.probabilities) for t in totals])
        else:
            draws = rng.multinomial(events_per_repeat, table.probabilities, size=n_r)
        raw.append(draws)
    if channels is None:
        channels = tuple(config.array.channels())
    counts = np.stack(raw) if raw else np.zeros((0, n_r, len(channels)), dtype=np.int64)
    mean = counts.mean(axis=1)
    err = counts.std(axis=1, ddof=1) / math.sqrt(n_r)
    prov = {"seed": int(seed), "rng": RNG_ALGORITHM}
    prov.update(provenance or {})
    return ScanDataset(grid, tuple(channels), mean, err, n_r, events_per_repeat,
                       config.array.n_pixels, prov, counts)


def synth_timetags(counts: tuple[CountMatrix, CountMatrix], windows: CoincidenceWindows = CoincidenceWindows(),
                   seed=None, jitter_bins: int = 0, mean_frame_gap: float = 50.0) -> np.ndarray:
    """Detection records whose coincidence analysis reproduces ``counts`` exactly.

    Every coincidence occupies its own frame. Bunching pairs share a TAC bin (up to
    ``jitter_bins``); antibunching pairs are separated by the detour offset, with the
    delayed photon assigned to either pixel at random.
    """
    rng = np.random.default_rng(seed)
    width = windows.tac_bin_width
    if jitter_bins < 0 or jitter_bins * width > windows.half_width:
        raise ValueError("jitter must stay inside the coincidence half-width")
    pieces = []
    for mat in counts:
        if mat.branch is Branch.B and np.any(np.diag(mat.counts)):
            raise ValueError("same-pixel bunching counts cannot be represented by click detectors")
        offset = windows.offset_bins(mat.branch)
        if offset + jitter_bins >= windows.n_tac_bins:
            raise ValueError(
                f"{mat.branch.value} offset of {offset} bins overflows the {windows.n_tac_bins}-bin TAC range"
            )
        ii, jj = np.nonzero(np.triu(mat.counts))
        reps = mat.counts[ii, jj].astype(np.int64)
        pi = np.repeat(ii, reps)
        pj = np.repeat(jj, reps)
        if pi.size == 0:
            continue
        swap = rng.random(pi.size) < 0.5
        first = np.where(swap, pj, pi)
        second = np.where(swap, pi, pj)
        jitter = rng.integers(-jitter_bins, jitter_bins + 1, size=pi.size) if jitter_bins else 0
        span = windows.n_tac_bins - offset - 2 * jitter_bins
        base = rng.integers(jitter_bins, jitter_bins + span, size=pi.size)
        pieces.append((first, second, base, base + offset + jitter))
    if not pieces:
        return np.empty(0, RECORD_DTYPE)
    first, second, t1, t2 = (np.concatenate(p) for p in zip(*pieces))
    order = rng.permutation(first.size)
    first, second, t1, t2 = first[order], second[order], t1[order], t2[order]
    gaps = 1 + rng.geometric(1.0 / mean_frame_gap, size=first.size) if mean_frame_gap > 1 else np.ones(first.size, int)
    frames = np.cumsum(gaps).astype(np.uint64)
    out = np.empty(2 * first.size, RECORD_DTYPE)
    out["pixel"][0::2], out["pixel"][1::2] = first, second
    out["frame"][0::2], out["frame"][1::2] = frames, frames
    out["tac_bin"][0::2], out["tac_bin"][1::2] = t1, t2
    return out
