"""Fisher information of the momentum-resolved measurement and the resulting bounds.

The ideal-grid computation places pixel centres at k = n delta for
n in -half_width..half_width and sums over every ordered pixel pair of both
branches. Because each channel depends on the pair only through f(k_n) f(k_m) and
k_n - k_m, pairs sharing the same difference are merged into a single weight,
which turns the O(n^2) sum into O(n).

Passing a :class:`~mrhom.model.DetectorArray` instead restricts the measurement to
that array's unmasked channels; the probabilities are then renormalized over the
surviving channels (the experiment only ever records those).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .model import (
    Branch,
    DetectorArray,
    SourceParams,
    channel_arrays,
    channel_probabilities,
    momentum_pdf,
    sinc_channel_terms,
)

__all__ = [
    "FisherConfig",
    "BoundResult",
    "SingularChannelError",
    "fisher_information",
    "quantum_fisher_information",
    "qcrb",
    "crb",
    "crb_curve",
    "local_maxima",
    "write_crb_csv",
]


class SingularChannelError(ArithmeticError):
    """A channel has zero probability but a non-zero derivative."""


@dataclass(frozen=True)
class FisherConfig:
    params: SourceParams
    delta: float
    grid_half_width: int = 50
    derivative_step: float | None = None  # mm; defaults to 1e-6 sigma_x
    array: DetectorArray | None = None
    use_exact: bool = False

    def __post_init__(self):
        if int(self.grid_half_width) != self.grid_half_width or self.grid_half_width < 1:
            raise ValueError(f"grid_half_width must be an integer >= 1, got {self.grid_half_width}")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.derivative_step is None:
            object.__setattr__(self, "derivative_step", 1e-6 * self.params.sigma_x)
        if not self.derivative_step > 0:
            raise ValueError("derivative_step must be positive")

    @classmethod
    def covering(cls, params: SourceParams, delta: float, n_sigma: float = 6.0, **kw) -> "FisherConfig":
        """Ideal grid wide enough to reach ``n_sigma`` momentum widths (at least 50 pixels a side)."""
        hw = max(50, int(math.ceil(n_sigma * params.sigma_k / delta)))
        return cls(params, delta, grid_half_width=hw, **kw)

    @classmethod
    def for_array(cls, params: SourceParams, array: DetectorArray, **kw) -> "FisherConfig":
        return cls(params, array.delta, array=array, **kw)


def _ratio(p, dp):
    p = np.asarray(p, dtype=float)
    dp = np.asarray(dp, dtype=float)
    zero = p <= 0.0
    if np.any(zero & (dp != 0.0)):
        raise SingularChannelError(
            "channel with zero probability has a non-zero derivative (visibility 1 at a node?)"
        )
    return np.where(zero, 0.0, dp * dp / np.where(zero, 1.0, p))


def _difference_weights(params: SourceParams, delta: float, half_width: int):
    """Sum of f(n delta) f(m delta) delta^2 over pairs with n - m = d, for every d."""
    k = np.arange(-half_width, half_width + 1) * delta
    f = momentum_pdf(k, params) * delta
    w = np.correlate(f, f, mode="full")
    d = np.arange(-2 * half_width, 2 * half_width + 1)
    return w, d * delta


def _grid_terms(dx: float, cfg: FisherConfig, order: int):
    w, dk = _difference_weights(cfg.params, cfg.delta, cfg.grid_half_width)
    V = cfg.params.visibility
    terms = []
    for b in (Branch.A, Branch.B):
        terms.append(sinc_channel_terms(w, dk, b.sign, V, dx, cfg.delta, order))
    return [np.concatenate(parts) for parts in zip(*terms)]


def _array_terms(dx: float, cfg: FisherConfig, order: int):
    array = cfg.array
    if array is None:
        array = DetectorArray.momentum_grid(cfg.delta, cfg.grid_half_width)
    ca = channel_arrays(array.channels(), array)
    return list(channel_probabilities(ca, dx, cfg.params, array.delta, cfg.use_exact, order))


def channel_terms(dx: float, cfg: FisherConfig, order: int = 1):
    """Channel probabilities (unnormalized) and derivatives used by :func:`fisher_information`."""
    if cfg.array is None and not cfg.use_exact:
        return _grid_terms(dx, cfg, order)
    return _array_terms(dx, cfg, order)


def fisher_information(dx: float, cfg: FisherConfig, numeric: bool = False) -> float:
    """Classical Fisher information (mm^-2) about the displacement ``dx``.

    With ``numeric=True`` the channel derivatives come from central differences of
    step ``cfg.derivative_step`` instead of the analytic expressions.

    At visibility 1 the antibunching probabilities vanish like dx^2, so for
    |dx| below about 1e-150 mm they underflow to zero while their derivatives do
    not, and :class:`SingularChannelError` is raised.
    """
    if not math.isfinite(dx):
        raise ValueError(f"dx must be finite, got {dx}")
    if numeric:
        h = cfg.derivative_step
        p = channel_terms(dx, cfg, 0)[0]
        dp = (channel_terms(dx + h, cfg, 0)[0] - channel_terms(dx - h, cfg, 0)[0]) / (2.0 * h)
    else:
        p, dp = channel_terms(dx, cfg, 1)
    info = float(np.sum(_ratio(p, dp)))
    if cfg.array is None:
        return info
    # probabilities renormalized over the surviving channels
    z = float(np.sum(p))
    dz = float(np.sum(dp))
    return max(info / z - (dz / z) ** 2, 0.0)


def quantum_fisher_information(params: SourceParams) -> float:
    """1 / (2 sigma_x^2), independent of the displacement."""
    return 1.0 / (2.0 * params.sigma_x ** 2)


def qcrb(n_events: int, params: SourceParams) -> float:
    """Quantum Cramer-Rao bound sqrt(2 / N) sigma_x on the displacement (mm)."""
    if n_events < 1:
        raise ValueError(f"need at least one event, got {n_events}")
    return math.sqrt(2.0 / n_events) * params.sigma_x


def crb(n_events: int, fisher: float) -> float:
    """Classical bound 1 / sqrt(N F); ``math.inf`` when the information vanishes."""
    if n_events < 1:
        raise ValueError(f"need at least one event, got {n_events}")
    if fisher < 0:
        raise ValueError(f"Fisher information must be non-negative, got {fisher}")
    if fisher == 0:
        return math.inf
    return 1.0 / math.sqrt(n_events * fisher)


@dataclass(frozen=True)
class BoundResult:
    dx: float
    fisher: float
    crb: float
    qcrb: float
    n_events: int

    def __post_init__(self):
        if self.fisher < 0:
            raise ValueError("fisher must be non-negative")

    @property
    def unbounded(self) -> bool:
        return math.isinf(self.crb)

    @property
    def sqrtN_crb(self) -> float:
        return math.sqrt(self.n_events) * self.crb

    @property
    def sqrtN_qcrb(self) -> float:
        return math.sqrt(self.n_events) * self.qcrb

    @property
    def below_quantum_bound(self) -> bool:
        """True when the classical bound undercuts the quantum one.

        Can happen for the constant-density pixel approximation at visibility 1 and
        for post-selected (masked, renormalized) channel sets.
        """
        return self.crb < self.qcrb * (1.0 - 1e-9)


def crb_curve(dx_grid: Iterable[float], n_events: int, cfg: FisherConfig) -> list[BoundResult]:
    grid = [float(x) for x in dx_grid]
    if not grid:
        raise ValueError("dx grid is empty")
    q = qcrb(n_events, cfg.params)
    out = []
    for x in grid:
        F = fisher_information(x, cfg)
        out.append(BoundResult(x, F, crb(n_events, F), q, n_events))
    return out


def local_maxima(results: Sequence[BoundResult]) -> list[float]:
    """Displacements where the CRB is a local maximum of the sampled curve (ends included)."""
    c = np.array([r.crb for r in results])
    out = []
    for k in range(len(c)):
        left = c[k - 1] if k > 0 else -np.inf
        right = c[k + 1] if k + 1 < len(c) else -np.inf
        if c[k] > left and c[k] >= right and (k > 0 or len(c) > 1):
            out.append(results[k].dx)
    return out


CRB_COLUMNS = ("dx_mm", "fisher_mm2", "sqrtN_crb_mm", "sqrtN_qcrb_mm")


def write_crb_csv(results: Sequence[BoundResult], path, comments: dict | None = None):
    with open(path, "w", newline="") as fh:
        for key, value in (comments or {}).items():
            fh.write(f"# {key}: {value}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CRB_COLUMNS)
        for r in results:
            w.writerow([repr(r.dx), repr(r.fisher), repr(r.sqrtN_crb), repr(r.sqrtN_qcrb)])
