"""Momentum-resolved Hong-Ou-Mandel interference: channel probabilities, Fisher
information and bounds, Monte Carlo scans, time-tag ingestion, beat-curve fitting
and maximum-likelihood displacement estimation."""
from .model import (
    Branch,
    Channel,
    DetectorArray,
    OpticalGeometry,
    SourceParams,
    joint_prob_continuous,
    joint_prob_pixel_exact,
    joint_prob_pixel_sinc,
    probability_table,
)
from .estimation import FisherConfig, crb, crb_curve, fisher_information, qcrb, quantum_fisher_information
from .ingest import CoincidenceWindows, CountMatrix, coincidence_matrices, parse_timetags, write_timetags
from .montecarlo import ScanDataset, SimulationConfig, sample_counts, simulate_scan, synth_timetags
from .fit import (
    BeatCurveModel,
    BeatFitParams,
    EstimationResult,
    ProbabilityModel,
    estimate_displacement,
    fit_beat_curve,
    log_likelihood,
    mle_estimate,
    mle_uncertainty,
)

__all__ = [
    "Branch", "Channel", "DetectorArray", "OpticalGeometry", "SourceParams",
    "joint_prob_continuous", "joint_prob_pixel_exact", "joint_prob_pixel_sinc", "probability_table",
    "FisherConfig", "crb", "crb_curve", "fisher_information", "qcrb", "quantum_fisher_information",
    "CoincidenceWindows", "CountMatrix", "coincidence_matrices", "parse_timetags", "write_timetags",
    "ScanDataset", "SimulationConfig", "sample_counts", "simulate_scan", "synth_timetags",
    "BeatCurveModel", "BeatFitParams", "EstimationResult", "ProbabilityModel", "estimate_displacement",
    "fit_beat_curve", "log_likelihood", "mle_estimate", "mle_uncertainty",
]
