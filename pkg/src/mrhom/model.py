"""Source parameters, far-field detector geometry and the two-photon probability laws.

All lengths are in mm and transverse momenta in mm^-1 unless a field name says
otherwise (``wavelength_nm``, ``pixel_pitch_um`` ...).

Two branches are distinguished: antibunching (A, photons leave the beam splitter
through different ports) and bunching (B, same port). The interference term enters
with a minus sign for A and a plus sign for B.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss

__all__ = [
    "Branch",
    "Channel",
    "SourceParams",
    "OpticalGeometry",
    "DetectorArray",
    "ProbabilityTable",
    "QuadratureError",
    "CoverageWarning",
    "momentum_pdf",
    "pixel_center_momentum",
    "joint_prob_continuous",
    "joint_prob_pixel_exact",
    "joint_prob_pixel_sinc",
    "probability_table",
    "sinc_envelope",
    "channel_arrays",
    "channel_probabilities",
    "sinc_channel_terms",
]

SQRT_2PI = math.sqrt(2.0 * math.pi)


class QuadratureError(RuntimeError):
    """Raised when the pixel double integral does not reach the requested accuracy."""


class CoverageWarning(UserWarning):
    """The detector array does not span the momentum distribution."""


class Branch(enum.Enum):
    A = "A"  # antibunching
    B = "B"  # bunching

    @property
    def sign(self) -> int:
        """Sign multiplying the visibility term: -1 for A, +1 for B."""
        return -1 if self is Branch.A else 1

    @classmethod
    def parse(cls, value: "Branch | str") -> "Branch":
        if isinstance(value, Branch):
            return value
        return cls(str(value).upper())


class Channel(NamedTuple):
    """One detectable outcome: a branch and an unordered pixel pair ``i <= j``."""

    branch: Branch
    i: int
    j: int

    @property
    def separation(self) -> int:
        return self.j - self.i

    def label(self) -> str:
        return f"{self.branch.value}({self.i},{self.j})"


@dataclass(frozen=True)
class SourceParams:
    """Single-photon transverse profile and two-photon visibility.

    ``sigma_k`` is always derived as ``1 / (2 sigma_x)``; use :meth:`from_sigma_k`
    to construct from the momentum width instead.
    """

    sigma_x: float = 0.035
    visibility: float = 1.0

    def __post_init__(self):
        if not (self.sigma_x > 0 and math.isfinite(self.sigma_x)):
            raise ValueError(f"sigma_x must be positive and finite, got {self.sigma_x}")
        if not 0.0 <= self.visibility <= 1.0:
            raise ValueError(f"visibility must lie in [0, 1], got {self.visibility}")

    @property
    def sigma_k(self) -> float:
        return 1.0 / (2.0 * self.sigma_x)

    @classmethod
    def from_sigma_k(cls, sigma_k: float, visibility: float = 1.0) -> "SourceParams":
        return cls(sigma_x=1.0 / (2.0 * sigma_k), visibility=visibility)

    def with_visibility(self, visibility: float) -> "SourceParams":
        return SourceParams(self.sigma_x, visibility)


@dataclass(frozen=True)
class OpticalGeometry:
    """Far-field imaging of the detector plane: a lens of focal length f maps a
    transverse position x on the array to momentum k = 2 pi x / (lambda f)."""

    wavelength_nm: float = 531.5
    focal_length_mm: float = 300.0
    pixel_pitch_um: float = 250.0
    pixel_width_um: float = 50.0
    n_pixels: int = 8
    center_index: float | None = None

    def __post_init__(self):
        problems = []
        for name in ("wavelength_nm", "focal_length_mm", "pixel_pitch_um", "pixel_width_um"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                problems.append(f"{name} must be positive, got {value}")
        if int(self.n_pixels) != self.n_pixels or self.n_pixels < 2:
            problems.append(f"n_pixels must be an integer >= 2, got {self.n_pixels}")
        if not problems and self.pixel_width_um >= self.pixel_pitch_um:
            problems.append(
                f"pixel width ({self.pixel_width_um} um) must be smaller than the pitch "
                f"({self.pixel_pitch_um} um)"
            )
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def center(self) -> float:
        return (self.n_pixels - 1) / 2.0 if self.center_index is None else float(self.center_index)

    def _scale(self) -> float:
        # mm^-1 per mm of transverse position on the array
        return 2.0 * math.pi / (self.wavelength_nm * 1e-6 * self.focal_length_mm)

    @property
    def momentum_pitch(self) -> float:
        return self._scale() * self.pixel_pitch_um * 1e-3

    @property
    def delta(self) -> float:
        """Momentum sensitivity set by the active pixel width."""
        return self._scale() * self.pixel_width_um * 1e-3

    def detector_array(self, **masks) -> "DetectorArray":
        k = [pixel_center_momentum(i, self) for i in range(self.n_pixels)]
        return DetectorArray(np.array(k), self.delta, **masks)


def pixel_center_momentum(i: int, geometry: OpticalGeometry) -> float:
    """Momentum (mm^-1) seen by the centre of pixel ``i``."""
    if not 0 <= i < geometry.n_pixels:
        raise IndexError(f"pixel index {i} outside [0, {geometry.n_pixels})")
    return geometry.momentum_pitch * (i - geometry.center)


def default_bunching_mask(n_pixels: int, max_separation: int = 1) -> frozenset[tuple[int, int]]:
    """Same-pixel and adjacent-pixel pairs, which the array cannot register for bunching."""
    return frozenset(
        (i, j) for i in range(n_pixels) for j in range(i, min(n_pixels, i + max_separation + 1))
    )


def _normalize_mask(mask: Iterable[tuple[int, int]], n: int) -> frozenset[tuple[int, int]]:
    out = set()
    for pair in mask:
        i, j = (int(p) for p in pair)
        i, j = min(i, j), max(i, j)
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"mask pair {pair} references a pixel outside [0, {n})")
        out.add((i, j))
    return frozenset(out)


@dataclass(frozen=True, eq=False)
class DetectorArray:
    """Pixel momentum centres, momentum sensitivity and per-branch channel exclusions.

    ``bunching_mask=None`` selects the default exclusions (same and adjacent pixels);
    pass an empty set to keep every bunching channel.
    """

    k_centers: np.ndarray
    delta: float
    bunching_mask: frozenset = None
    antibunching_mask: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        k = np.asarray(self.k_centers, dtype=float)
        if k.ndim != 1 or k.size < 1:
            raise ValueError("k_centers must be a non-empty 1-d sequence")
        if k.size >= 2:
            steps = np.diff(k)
            if np.any(steps <= 0):
                raise ValueError("k_centers must be strictly increasing")
            if np.max(np.abs(steps - steps[0])) > 1e-12 * abs(steps[0]):
                raise ValueError("k_centers must be equally spaced")
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise ValueError(f"delta must be positive, got {self.delta}")
        k.setflags(write=False)
        object.__setattr__(self, "k_centers", k)
        bmask = default_bunching_mask(k.size) if self.bunching_mask is None else self.bunching_mask
        object.__setattr__(self, "bunching_mask", _normalize_mask(bmask, k.size))
        object.__setattr__(self, "antibunching_mask", _normalize_mask(self.antibunching_mask, k.size))

    @property
    def n_pixels(self) -> int:
        return self.k_centers.size

    @property
    def pitch(self) -> float:
        return float(self.k_centers[1] - self.k_centers[0]) if self.n_pixels > 1 else float("nan")

    @classmethod
    def uniform(cls, n_pixels: int, pitch: float, delta: float, center_index: float | None = None,
                **masks) -> "DetectorArray":
        c = (n_pixels - 1) / 2.0 if center_index is None else center_index
        return cls(pitch * (np.arange(n_pixels) - c), delta, **masks)

    @classmethod
    def momentum_grid(cls, delta: float, half_width: int = 50) -> "DetectorArray":
        """Contiguous grid k = n delta, n = -half_width..half_width, nothing masked."""
        n = np.arange(-half_width, half_width + 1)
        return cls(n * delta, delta, bunching_mask=frozenset(), antibunching_mask=frozenset())

    def mask_for(self, branch: Branch) -> frozenset:
        return self.antibunching_mask if branch is Branch.A else self.bunching_mask

    def channels(self, branches: Iterable[Branch] = (Branch.A, Branch.B)) -> list[Channel]:
        out = []
        for b in branches:
            b = Branch.parse(b)
            mask = self.mask_for(b)
            out.extend(
                Channel(b, i, j)
                for i in range(self.n_pixels)
                for j in range(i, self.n_pixels)
                if (i, j) not in mask
            )
        return out

    def _check_pixel(self, *idx: int):
        for i in idx:
            if not 0 <= i < self.n_pixels:
                raise IndexError(f"pixel index {i} outside [0, {self.n_pixels})")


# ---------------------------------------------------------------------------
# sinc helpers (unnormalized: sin(u)/u)
# ---------------------------------------------------------------------------

_SMALL_U = 1e-2


def _sinc(u):
    u = np.asarray(u, dtype=float)
    return np.sinc(u / np.pi)


def _one_minus_sinc(u):
    u = np.asarray(u, dtype=float)
    u2 = u * u
    series = u2 / 6.0 * (1.0 - u2 / 20.0 * (1.0 - u2 / 42.0 * (1.0 - u2 / 72.0)))
    with np.errstate(invalid="ignore", divide="ignore"):
        direct = 1.0 - np.sin(u) / u
    return np.where(np.abs(u) < _SMALL_U, series, direct)


def _dsinc(u):
    u = np.asarray(u, dtype=float)
    u2 = u * u
    series = -u / 3.0 + u * u2 / 30.0 - u * u2 * u2 / 840.0
    with np.errstate(invalid="ignore", divide="ignore"):
        direct = (np.cos(u) - np.sin(u) / u) / u
    return np.where(np.abs(u) < _SMALL_U, series, direct)


def _d2sinc(u):
    u = np.asarray(u, dtype=float)
    u2 = u * u
    series = -1.0 / 3.0 + u2 / 10.0 - u2 * u2 / 168.0
    with np.errstate(invalid="ignore", divide="ignore"):
        direct = -_sinc(u) - 2.0 * _dsinc(u) / u
    return np.where(np.abs(u) < _SMALL_U, series, direct)


def sinc_envelope(dx, delta: float, order: int = 0):
    """sinc^2(dx delta / 2) and its first/second derivatives with respect to dx.

    Returns a tuple of arrays ``(s, ds, d2s)[: order + 1]``.
    """
    h = 0.5 * delta
    u = h * np.asarray(dx, dtype=float)
    sc = _sinc(u)
    out = [sc * sc]
    if order >= 1:
        d1 = _dsinc(u)
        out.append(2.0 * h * sc * d1)
    if order >= 2:
        out.append(2.0 * h * h * (d1 * d1 + sc * _d2sinc(u)))
    return tuple(out)


def _one_minus_envelope(dx, delta: float):
    u = 0.5 * delta * np.asarray(dx, dtype=float)
    oms = _one_minus_sinc(u)
    return oms * (2.0 - oms)


# ---------------------------------------------------------------------------
# probability laws
# ---------------------------------------------------------------------------

def momentum_pdf(k, params: SourceParams):
    """Gaussian single-photon momentum density f(k), in mm."""
    sk = params.sigma_k
    k = np.asarray(k, dtype=float)
    return np.exp(-0.5 * (k / sk) ** 2) / (sk * SQRT_2PI)


def _interference_factor(sign: int, visibility: float, s, phase, one_minus_s=None):
    """1 + sign * V * s * cos(phase), evaluated without cancellation for the minus sign."""
    if sign > 0:
        return 1.0 + visibility * s * np.cos(phase)
    if one_minus_s is None:
        one_minus_s = 1.0 - s
    # 1 - V s cos = (1 - V) + V [(1 - s) + 2 s sin^2(phase / 2)]
    return (1.0 - visibility) + visibility * (one_minus_s + 2.0 * s * np.sin(0.5 * phase) ** 2)


def joint_prob_continuous(branch, k1, k2, dx, params: SourceParams):
    """Joint density (mm^2) of detecting the pair at momenta (k1, k2) on ``branch``."""
    b = Branch.parse(branch)
    k1 = np.asarray(k1, dtype=float)
    k2 = np.asarray(k2, dtype=float)
    ff = momentum_pdf(k1, params) * momentum_pdf(k2, params)
    factor = _interference_factor(b.sign, params.visibility, 1.0, (k1 - k2) * dx, 0.0)
    return 0.5 * ff * factor


def _pixel_sinc(sign, ki, kj, dx, params: SourceParams, delta: float):
    C = momentum_pdf(ki, params) * momentum_pdf(kj, params) * delta * delta
    s = sinc_envelope(dx, delta)[0]
    oms = _one_minus_envelope(dx, delta)
    return 0.5 * C * _interference_factor(sign, params.visibility, s, (ki - kj) * dx, oms)


def joint_prob_pixel_sinc(branch, i: int, j: int, dx, params: SourceParams, array: DetectorArray):
    """Pixel-pair probability in the constant-density approximation.

    (C/2) (1 -/+ V sinc^2(dx delta / 2) cos((k_i - k_j) dx)), C = f(k_i) f(k_j) delta^2.
    """
    array._check_pixel(i, j)
    b = Branch.parse(branch)
    k = array.k_centers
    return _pixel_sinc(b.sign, k[i], k[j], dx, params, array.delta)


_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gl(order: int):
    if order not in _GL_CACHE:
        _GL_CACHE[order] = leggauss(order)
    return _GL_CACHE[order]


def _tensor_quad(integrand, ki, kj, delta, order):
    x, w = _gl(order)
    h = 0.5 * delta
    k1 = np.asarray(ki, float)[..., None, None] + h * x[:, None]
    k2 = np.asarray(kj, float)[..., None, None] + h * x[None, :]
    W = (h * h) * np.outer(w, w)
    return np.sum(integrand(k1, k2) * W, axis=(-2, -1))


def _pixel_exact(integrand, ki, kj, delta, scale, rtol=1e-8, order=16, max_order=256):
    """Tensor-product Gauss-Legendre over each pixel square, doubling the order until
    successive estimates agree to ``rtol`` relative to ``scale``."""
    prev = _tensor_quad(integrand, ki, kj, delta, order)
    while True:
        order *= 2
        cur = _tensor_quad(integrand, ki, kj, delta, order)
        err = np.abs(cur - prev)
        if np.all(err <= rtol * np.abs(scale)):
            return cur
        if order >= max_order:
            worst = float(np.max(err / np.abs(scale)))
            raise QuadratureError(
                f"pixel integral did not converge: relative change {worst:.2e} at order {order}"
            )
        prev = cur


def _pixel_base_scale(ki, kj, params, delta):
    # magnitude of the non-interfering part; used as the error reference
    return 0.5 * momentum_pdf(ki, params) * momentum_pdf(kj, params) * delta * delta + 1e-300


def joint_prob_pixel_exact(branch, i: int, j: int, dx: float, params: SourceParams,
                           array: DetectorArray, rtol: float = 1e-8):
    """Pixel-pair probability by direct 2-d quadrature of the continuous density."""
    array._check_pixel(i, j)
    b = Branch.parse(branch)
    k = array.k_centers
    integrand = lambda k1, k2: joint_prob_continuous(b, k1, k2, dx, params)  # noqa: E731
    scale = _pixel_base_scale(k[i], k[j], params, array.delta)
    return float(_pixel_exact(integrand, k[i], k[j], array.delta, scale, rtol))


# ---------------------------------------------------------------------------
# channel tables
# ---------------------------------------------------------------------------

class ChannelArrays(NamedTuple):
    sign: np.ndarray
    ki: np.ndarray
    kj: np.ndarray
    multiplicity: np.ndarray


def channel_arrays(channels: Sequence[Channel], array: DetectorArray) -> ChannelArrays:
    """Vectorized view of ``channels``. Off-diagonal pairs have multiplicity 2 because
    (k_i, k_j) and (k_j, k_i) are merged into one unordered channel."""
    sign = np.array([c.branch.sign for c in channels], dtype=float)
    i = np.array([c.i for c in channels], dtype=int)
    j = np.array([c.j for c in channels], dtype=int)
    k = array.k_centers
    mult = np.where(i == j, 1.0, 2.0)
    return ChannelArrays(sign, k[i], k[j], mult)


def channel_probabilities(ca: ChannelArrays, dx: float, params: SourceParams, delta: float,
                          use_exact: bool = False, order: int = 0):
    """Unnormalized channel probabilities and, for ``order >= 1``, their dx derivatives.

    Returns a tuple ``(p, dp, d2p)[: order + 1]``.
    """
    V = params.visibility
    if use_exact:
        scale = _pixel_base_scale(ca.ki, ca.kj, params, delta)
        kscale = np.abs(ca.ki - ca.kj) + delta
        sign = ca.sign[:, None, None]

        def dens(k1, k2):
            ff = 0.5 * momentum_pdf(k1, params) * momentum_pdf(k2, params)
            return ff * _interference_factor_vec(sign, V, (k1 - k2) * dx)

        out = [ca.multiplicity * _pixel_exact(dens, ca.ki, ca.kj, delta, scale)]
        if order >= 1:
            def d1(k1, k2):
                ff = momentum_pdf(k1, params) * momentum_pdf(k2, params)
                dk = k1 - k2
                return -0.5 * sign * V * ff * dk * np.sin(dk * dx)
            out.append(ca.multiplicity * _pixel_exact(d1, ca.ki, ca.kj, delta, scale * kscale))
        if order >= 2:
            def d2(k1, k2):
                ff = momentum_pdf(k1, params) * momentum_pdf(k2, params)
                dk = k1 - k2
                return -0.5 * sign * V * ff * dk * dk * np.cos(dk * dx)
            out.append(ca.multiplicity * _pixel_exact(d2, ca.ki, ca.kj, delta, scale * kscale ** 2))
        return tuple(out)

    C = ca.multiplicity * momentum_pdf(ca.ki, params) * momentum_pdf(ca.kj, params) * delta * delta
    return sinc_channel_terms(C, ca.ki - ca.kj, ca.sign, V, dx, delta, order)


def sinc_channel_terms(C, dk, sign, visibility: float, dx: float, delta: float, order: int = 0):
    """(C/2)(1 + sign V s cos(dk dx)) and its dx derivatives, with s = sinc^2(dx delta / 2).

    ``C``, ``dk``, ``sign``, ``visibility`` and ``delta`` broadcast against each other; returns ``(p, dp, d2p)[: order + 1]``.
    """
    V = visibility
    phase = dk * dx
    env = sinc_envelope(dx, delta, order)
    s = env[0]
    oms = _one_minus_envelope(dx, delta)
    factor = np.where(
        sign > 0,
        1.0 + V * s * np.cos(phase),
        (1.0 - V) + V * (oms + 2.0 * s * np.sin(0.5 * phase) ** 2),
    )
    out = [0.5 * C * factor]
    if order >= 1:
        cos, sin = np.cos(phase), np.sin(phase)
        ds = env[1]
        out.append(0.5 * C * sign * V * (ds * cos - s * dk * sin))
        if order >= 2:
            d2s = env[2]
            out.append(0.5 * C * sign * V * (d2s * cos - 2.0 * ds * dk * sin - s * dk * dk * cos))
    return tuple(out)


def _interference_factor_vec(sign, V, phase):
    return np.where(sign > 0, 1.0 + V * np.cos(phase), (1.0 - V) + 2.0 * V * np.sin(0.5 * phase) ** 2)


@dataclass(frozen=True)
class ProbabilityTable:
    """Normalized probabilities over the detectable channels at one displacement.

    ``raw`` holds the unnormalized channel probabilities (off-diagonal pairs already
    doubled); ``coverage`` is the unmasked, unnormalized total over every channel of
    both branches, i.e. the fraction of the two-photon distribution the array sees.
    """

    channels: tuple[Channel, ...]
    probabilities: np.ndarray
    raw: np.ndarray
    coverage: float

    def __len__(self):
        return len(self.channels)

    def as_dict(self) -> dict[Channel, float]:
        return dict(zip(self.channels, self.probabilities.tolist()))


def check_coverage(array: DetectorArray, params: SourceParams, n_sigma: float = 3.0) -> bool:
    kmax = float(np.max(np.abs(array.k_centers))) + 0.5 * array.delta
    ok = kmax >= n_sigma * params.sigma_k
    if not ok:
        warnings.warn(
            f"detector array reaches |k| = {kmax:.3g} mm^-1, below {n_sigma} sigma_k "
            f"= {n_sigma * params.sigma_k:.3g} mm^-1",
            CoverageWarning,
            stacklevel=3,
        )
    return ok


def probability_table(branch_set: Iterable[Branch | str], dx: float, params: SourceParams,
                      array: DetectorArray, use_exact: bool = False) -> ProbabilityTable:
    """Channel probabilities for all unmasked (branch, i <= j) pairs, renormalized to 1."""
    branches = [Branch.parse(b) for b in branch_set]
    check_coverage(array, params)
    channels = array.channels(branches)
    if not channels:
        raise ValueError("no detectable channels left after masking")

    everything = [Channel(b, i, j) for b in (Branch.A, Branch.B)
                  for i in range(array.n_pixels) for j in range(i, array.n_pixels)]
    full = channel_probabilities(channel_arrays(everything, array), dx, params, array.delta, use_exact)[0]
    lookup = dict(zip(everything, full))
    raw = np.array([lookup[c] for c in channels])
    total = raw.sum()
    if not total > 0:
        raise ValueError("channel probabilities sum to zero; table is degenerate")
    return ProbabilityTable(tuple(channels), raw / total, raw, float(full.sum()))
