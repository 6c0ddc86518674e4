"""Command-line front end.

    mrhom simulate [options]            scan dataset (and optional time-tag files)
    mrhom ingest TIMETAGS [options]     coincidence matrices from a time-tag file
    mrhom fit DATASET [options]         per-channel beat-curve fits
    mrhom crb [options]                 Fisher information and bounds over a grid
    mrhom report DATASET [options]      fits, estimation and the uncertainty table

Exit status: 0 success, 1 invalid configuration, 2 unreadable or malformed input
or unwritable output, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from importlib import metadata
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .ingest import TimeTagFormatError, coincidence_matrices, read_timetag_file, write_timetag_file
from .model import QuadratureError
from .montecarlo import SimulationConfig, counts_to_matrices, simulate_scan, synth_timetags
from .montecarlo import ScanDataset
from .report import (
    BOUND_COLUMNS,
    ESTIMATION_COLUMNS,
    FIG4_COLUMNS,
    FIT_COLUMNS,
    EstimationOptions,
    beat_curve_rows,
    bound_rows,
    estimate_scan,
    fig4_rows,
    fit_rows,
    fit_scan,
    write_rows,
)

log = logging.getLogger("mrhom")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3


class InputError(Exception):
    """An input file is missing, unreadable or malformed."""


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


class Run:
    """Output directory bookkeeping: every file gets the digest header and a manifest entry."""

    def __init__(self, cfg: RunConfig, command: str, inputs: dict | None = None):
        self.cfg = cfg
        self.command = command
        self.out = Path(cfg["output.dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}
        self.inputs = {name: _sha256(path) for name, path in (inputs or {}).items()}

    @property
    def comments(self) -> dict:
        c = {"config_digest": self.cfg.digest, "command": self.command}
        c.update({f"input_sha256[{k}]": v for k, v in self.inputs.items()})
        return c

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files[name] = ""
        return p

    def table(self, name, columns, rows, extra: dict | None = None):
        comments = dict(self.comments)
        comments.update(extra or {})
        write_rows(self.path(name), columns, rows, comments)

    def finish(self) -> Path:
        cfg_path = self.path("config.yaml")
        cfg_path.write_text(f"# config_digest: {self.cfg.digest}\n" + self.cfg.to_yaml())
        for name in list(self.files):
            self.files[name] = _sha256(self.out / name)
        manifest = {
            "command": self.command,
            "config_digest": self.cfg.digest,
            "package_version": _version(),
            "inputs": self.inputs,
            "files": dict(sorted(self.files.items())),
        }
        path = self.out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return path


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_dataset(path) -> ScanDataset:
    try:
        return ScanDataset.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot read dataset {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, args) -> int:
    run = Run(cfg, "simulate")
    params, array = cfg.source(), cfg.array()
    sim = SimulationConfig(params, array, use_exact=cfg["scan.exact_integral"],
                           poisson_totals=cfg["scan.poisson_totals"])
    ds = simulate_scan(cfg.scan_grid(), int(cfg["scan.repeats"]), int(cfg["scan.events"]), sim,
                       seed=int(cfg["seed"]), provenance={"config_digest": cfg.digest})
    ds.to_csv(run.path("scan.csv"))
    ds.to_json(run.path("scan.json"))
    if cfg["timetags.write"]:
        suffix = ".csv" if cfg["timetags.format"] == "csv" else ".bin"
        windows = cfg.windows()
        rows = []
        for k, x in enumerate(ds.dx_values):
            # the first repeat of each scan point becomes a time-tag stream
            mats = counts_to_matrices(ds.channels, ds.counts[k, 0], array)
            records = synth_timetags(mats, windows, seed=[int(cfg["seed"]), k],
                                     jitter_bins=int(cfg["timetags.jitter_bins"]))
            name = f"timetags/point_{k:04d}{suffix}"
            write_timetag_file(run.path(name), records, array.n_pixels, comments=run.comments)
            rows.append({"point": k, "dx_mm": float(x), "file": name, "records": int(records.size)})
        run.table("timetags/index.csv", ("point", "dx_mm", "file", "records"), rows)
    run.finish()
    log.info("wrote %d scan points x %d channels to %s", ds.dx_values.size, len(ds.channels), run.out)
    return EXIT_OK


def cmd_ingest(cfg: RunConfig, args) -> int:
    path = Path(args.timetags)
    array = cfg.array()
    try:
        records = read_timetag_file(path, n_pixels=array.n_pixels)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    cA, cB, tally = coincidence_matrices(records, cfg.windows(), array)
    run = Run(cfg, "ingest", {"timetags": path})
    for mat, name in ((cA, "counts_A.csv"), (cB, "counts_B.csv")):
        mat.to_csv(run.path(name), run.comments)
    run.table("tally.csv", ("quantity", "value"), [{"quantity": k, "value": v} for k, v in tally.as_dict().items()])
    run.finish()
    log.info("%d records: %s", records.size, tally.as_dict())
    return EXIT_OK


def _fit(cfg: RunConfig, ds: ScanDataset):
    array = cfg.array()
    if array.n_pixels != ds.n_pixels:
        raise InputError(f"dataset has {ds.n_pixels} pixels but the configuration describes {array.n_pixels}")
    return fit_scan(ds, weighted=cfg["fit.weighted"], n_starts=int(cfg["fit.n_starts"]),
                    max_iter=int(cfg["fit.max_iter"]), seed=int(cfg["seed"]), array=array)


def _write_fits(run: Run, cfg: RunConfig, ds: ScanDataset, fits):
    run.table("fit_params.csv", FIT_COLUMNS, fit_rows(fits))
    data, curves = beat_curve_rows(ds, fits, int(cfg["fit.curve_samples_per_step"]))
    run.table("beat_curves_data.csv", ("branch", "i", "j", "dx_mm", "mean", "err", "fit"), data)
    run.table("beat_curves_fit.csv", ("branch", "i", "j", "dx_mm", "fit"), curves)
    failed = [f for f in fits if not f.usable]
    if failed:
        log.warning("%d of %d channel fits unusable: %s", len(failed), len(fits),
                    ", ".join(f.channel.label() for f in failed))


def cmd_fit(cfg: RunConfig, args) -> int:
    ds = _load_dataset(args.dataset)
    run = Run(cfg, "fit", {"dataset": args.dataset})
    _write_fits(run, cfg, ds, _fit(cfg, ds))
    run.finish()
    return EXIT_OK


def cmd_crb(cfg: RunConfig, args) -> int:
    run = Run(cfg, "crb")
    rows = bound_rows(cfg.crb_grid(), cfg.source(), cfg.array(), int(cfg["crb.grid_half_width"]),
                      int(cfg["crb.n_events"]))
    run.table("crb.csv", BOUND_COLUMNS, rows)
    run.finish()
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    ds = _load_dataset(args.dataset)
    run = Run(cfg, "report", {"dataset": args.dataset})
    params, array = cfg.source(), cfg.array()
    fits = _fit(cfg, ds)
    _write_fits(run, cfg, ds, fits)
    opts = EstimationOptions(cfg["estimation.model"], cfg["estimation.renormalize"], cfg["estimation.seed"],
                             cfg["estimation.window_half_width_mm"], int(cfg["estimation.n_grid"]))
    est = estimate_scan(ds, fits, opts, params, array)
    run.table("estimation.csv", ESTIMATION_COLUMNS, est)
    run.table("uncertainty.csv", FIG4_COLUMNS, fig4_rows(est, params, array, int(cfg["crb.grid_half_width"])))
    run.finish()
    bad = sum(r["status"] != "ok" for r in est)
    if bad:
        log.warning("%d of %d scan points have no estimate (see estimation.csv)", bad, len(est))
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "ingest": cmd_ingest, "fit": cmd_fit, "crb": cmd_crb, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML file of dotted keys")
    common.add_argument("--seed", type=int, help="random seed (unsigned 64-bit)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--events", type=int, help="detected pairs per repeat")
    common.add_argument("--repeats", type=int, help="repeats per scan point")
    common.add_argument("--grid", metavar="START:STOP:STEP", help="displacement grid in mm")
    common.add_argument("--exact-integral", action="store_true", default=None,
                        help="integrate the pixel response exactly instead of the sinc approximation")
    common.add_argument("--delta-mode", choices=("geometric", "fitted"),
                        help="momentum pitch and sensitivity from the optics or from the configured values")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mrhom", description="Momentum-resolved two-photon interference toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate a displacement scan")
    p = sub.add_parser("ingest", parents=[common], help="build coincidence matrices from time tags")
    p.add_argument("timetags", help="binary (.bin) or CSV (.csv) time-tag file")
    p = sub.add_parser("fit", parents=[common], help="fit beat curves of a scan dataset")
    p.add_argument("dataset", help="scan dataset (.csv or .json)")
    sub.add_parser("crb", parents=[common], help="tabulate Fisher information and bounds")
    p = sub.add_parser("report", parents=[common], help="fits, estimation and uncertainty table")
    p.add_argument("dataset", help="scan dataset (.csv or .json)")
    return parser


def _overrides(args) -> dict:
    o = {"seed": args.seed, "output.dir": args.out, "scan.events": args.events, "scan.repeats": args.repeats,
         "scan.exact_integral": args.exact_integral, "array.delta_mode": args.delta_mode}
    if args.grid is not None:
        key = "crb.grid" if args.command == "crb" else "scan.grid"
        o[key] = args.grid
    return o


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    try:
        cfg = load_config(args.config, _overrides(args))
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"mrhom: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (InputError, TimeTagFormatError) as exc:
        print(f"mrhom: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"mrhom: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, QuadratureError, FloatingPointError) as exc:
        print(f"mrhom: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"mrhom: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
