"""Time-tag streams and coincidence-matrix construction.

Binary layout (little-endian)::

    header   "MRHT" | version u16 | n_pixels u8 | reserved u8        (8 bytes)
    record   pixel u8 | frame u64 | tac_bin u16                       (11 bytes each)

A frame is one laser-pulse period; ``tac_bin`` is the detection time inside the
frame on a 14-bit TAC ramp. Two detections in the same frame are a bunching
coincidence when their time difference falls in the window around 0 ns and an
antibunching one when it falls in the window around the arm detour (6 ns).
"""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .model import Branch, DetectorArray

__all__ = [
    "TimeTagRecord",
    "CoincidenceWindows",
    "CountMatrix",
    "PairTally",
    "TimeTagFormatError",
    "RECORD_DTYPE",
    "parse_timetags",
    "write_timetags",
    "read_timetag_file",
    "write_timetag_file",
    "parse_timetags_csv",
    "write_timetags_csv",
    "coincidence_matrices",
]

MAGIC = b"MRHT"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHBB")
RECORD_DTYPE = np.dtype([("pixel", "u1"), ("frame", "<u8"), ("tac_bin", "<u2")])
RECORD_SIZE = RECORD_DTYPE.itemsize  # 11, packed
TAC_BITS = 14
N_TAC_BINS = 1 << TAC_BITS


class TimeTagFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class TimeTagRecord(NamedTuple):
    pixel: int
    frame: int
    tac_bin: int


@dataclass(frozen=True)
class CoincidenceWindows:
    """Coincidence windows in ns, plus the TAC quantization."""

    bunching_center: float = 0.0
    antibunching_center: float = 6.0
    half_width: float = 0.5
    tac_range: float = 25.0
    n_tac_bins: int = N_TAC_BINS

    def __post_init__(self):
        if self.bunching_center < 0:
            raise ValueError("bunching_center must be >= 0")
        for name in ("antibunching_center", "half_width", "tac_range"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if abs(self.antibunching_center - self.bunching_center) <= 2 * self.half_width:
            raise ValueError("bunching and antibunching windows overlap")

    @property
    def tac_bin_width(self) -> float:
        return self.tac_range / self.n_tac_bins

    def offset_bins(self, branch: Branch) -> int:
        center = self.antibunching_center if branch is Branch.A else self.bunching_center
        return int(round(center / self.tac_bin_width))

    def classify(self, dt_ns: np.ndarray) -> np.ndarray:
        """0 = ignored, 1 = bunching, 2 = antibunching, for absolute time differences."""
        dt = np.abs(np.asarray(dt_ns, dtype=float))
        out = np.zeros(dt.shape, dtype=np.int8)
        out[np.abs(dt - self.bunching_center) <= self.half_width] = 1
        out[np.abs(dt - self.antibunching_center) <= self.half_width] = 2
        return out


@dataclass(eq=False)
class CountMatrix:
    """Coincidence counts of one branch over unordered pixel pairs (upper triangle)."""

    branch: Branch
    counts: np.ndarray
    masked: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.branch = Branch.parse(self.branch)
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("counts must be a square matrix")
        if np.any(c < 0):
            raise ValueError("counts must be non-negative")
        if np.any(np.tril(c, -1) != 0):
            raise ValueError("counts below the diagonal must be zero (pairs are stored as i <= j)")
        for i, j in self.masked:
            if c[i, j] != 0:
                raise ValueError(f"masked pair ({i},{j}) carries counts")
        self.counts = c
        self.masked = frozenset(self.masked)

    @classmethod
    def zeros(cls, branch, n_pixels: int, masked=frozenset(), dtype=np.int64) -> "CountMatrix":
        return cls(branch, np.zeros((n_pixels, n_pixels), dtype=dtype), masked)

    @property
    def n_pixels(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self):
        return self.counts.sum()

    def pairs(self) -> list[tuple[int, int]]:
        n = self.n_pixels
        return [(i, j) for i in range(n) for j in range(i, n) if (i, j) not in self.masked]

    def __eq__(self, other):
        if not isinstance(other, CountMatrix):
            return NotImplemented
        return (
            self.branch is other.branch
            and self.masked == other.masked
            and self.counts.shape == other.counts.shape
            and bool(np.array_equal(self.counts, other.counts))
        )

    def __repr__(self):
        return f"CountMatrix({self.branch.value}, n_pixels={self.n_pixels}, total={self.total})"

    def to_csv(self, path, comments: dict | None = None):
        with open(path, "w", newline="") as fh:
            for key, value in (comments or {}).items():
                fh.write(f"# {key}: {value}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["branch", "i", "j", "count"])
            for i, j in self.pairs():
                w.writerow([self.branch.value, i, j, self.counts[i, j]])


# ---------------------------------------------------------------------------
# binary and CSV formats
# ---------------------------------------------------------------------------

def _validate(arr: np.ndarray, n_pixels: int | None, base_offset: int):
    if arr.size == 0:
        return
    bad_tac = np.flatnonzero(arr["tac_bin"] >= N_TAC_BINS)
    bad_pix = np.flatnonzero(arr["pixel"] >= n_pixels) if n_pixels is not None else np.array([], int)
    bad = np.union1d(bad_tac, bad_pix)
    if bad.size:
        k = int(bad[0])
        rec = arr[k]
        what = (f"tac_bin {int(rec['tac_bin'])} >= {N_TAC_BINS}" if k in set(bad_tac.tolist())
                else f"pixel {int(rec['pixel'])} >= n_pixels {n_pixels}")
        raise TimeTagFormatError(f"record {k}: {what}", base_offset + k * RECORD_SIZE)


def parse_timetags(data: bytes, *, header: bool = True, n_pixels: int | None = None) -> np.ndarray:
    """Decode a time-tag stream into a structured array with fields pixel, frame, tac_bin.

    With ``header=True`` the stream starts with the 8-byte file header, whose pixel
    count bounds the pixel field. An empty stream decodes to an empty array.
    """
    buf = memoryview(data).cast("B")
    offset = 0
    if header and len(buf):
        if len(buf) < HEADER.size:
            raise TimeTagFormatError("truncated header", 0)
        magic, version, hdr_pixels, _ = HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise TimeTagFormatError(f"bad magic {magic!r}", 0)
        if version != FORMAT_VERSION:
            raise TimeTagFormatError(f"unsupported format version {version}", 4)
        n_pixels = hdr_pixels if n_pixels is None else min(n_pixels, hdr_pixels)
        offset = HEADER.size
    body = len(buf) - offset
    if body % RECORD_SIZE:
        last = offset + (body // RECORD_SIZE) * RECORD_SIZE
        raise TimeTagFormatError(f"truncated record ({body % RECORD_SIZE} trailing bytes)", last)
    arr = np.frombuffer(buf, dtype=RECORD_DTYPE, offset=offset).copy()
    _validate(arr, n_pixels, offset)
    return arr


def as_record_array(records) -> np.ndarray:
    if isinstance(records, np.ndarray) and records.dtype == RECORD_DTYPE:
        return records
    arr = np.array([tuple(r) for r in records], dtype=RECORD_DTYPE) if len(records) else np.empty(0, RECORD_DTYPE)
    return arr


def as_records(arr: np.ndarray) -> list[TimeTagRecord]:
    return [TimeTagRecord(int(p), int(f), int(t)) for p, f, t in arr.tolist()]


def write_timetags(records, n_pixels: int, *, header: bool = True) -> bytes:
    arr = as_record_array(records)
    if not 1 <= n_pixels <= 255:
        raise ValueError("n_pixels must fit in one byte")
    _validate(arr, n_pixels, HEADER.size if header else 0)
    head = HEADER.pack(MAGIC, FORMAT_VERSION, n_pixels, 0) if header else b""
    return head + arr.tobytes()


def read_timetag_file(path, n_pixels: int | None = None) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return parse_timetags_csv(path.read_text(), n_pixels=n_pixels)
    return parse_timetags(path.read_bytes(), n_pixels=n_pixels)


def write_timetag_file(path, records, n_pixels: int, comments: dict | None = None):
    """Binary unless the suffix is ``.csv``; ``comments`` only fit in the CSV form."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        path.write_text(write_timetags_csv(records, comments))
    else:
        path.write_bytes(write_timetags(records, n_pixels))


def parse_timetags_csv(text: str, n_pixels: int | None = None) -> np.ndarray:
    reader = csv.reader(io.StringIO(text))
    rows = [r for r in reader if r and not r[0].startswith("#")]
    if not rows:
        return np.empty(0, RECORD_DTYPE)
    if [c.strip() for c in rows[0]] != ["pixel", "frame", "tac_bin"]:
        raise TimeTagFormatError("CSV header must be 'pixel,frame,tac_bin'")
    out = np.empty(len(rows) - 1, RECORD_DTYPE)
    for n, row in enumerate(rows[1:]):
        try:
            pixel, frame, tac = (int(v) for v in row)
        except ValueError as exc:
            raise TimeTagFormatError(f"CSV row {n + 2}: {exc}") from None
        if not (0 <= pixel <= 255 and 0 <= frame < 2 ** 64 and 0 <= tac < N_TAC_BINS):
            raise TimeTagFormatError(f"CSV row {n + 2}: value out of range")
        out[n] = (pixel, frame, tac)
    if n_pixels is not None and out.size and int(out["pixel"].max()) >= n_pixels:
        k = int(np.flatnonzero(out["pixel"] >= n_pixels)[0])
        raise TimeTagFormatError(f"CSV row {k + 2}: pixel {int(out['pixel'][k])} >= n_pixels {n_pixels}")
    return out


def write_timetags_csv(records, comments: dict | None = None) -> str:
    arr = as_record_array(records)
    lines = [f"# {key}: {value}" for key, value in (comments or {}).items()]
    lines.append("pixel,frame,tac_bin")
    lines.extend(f"{p},{f},{t}" for p, f, t in arr.tolist())
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# coincidences
# ---------------------------------------------------------------------------

@dataclass
class PairTally:
    """Bookkeeping over every same-frame record pair."""

    total: int = 0
    bunching: int = 0
    antibunching: int = 0
    ignored: int = 0
    masked_dropped: int = 0

    def as_dict(self) -> dict[str, int]:
        return dict(total=self.total, bunching=self.bunching, antibunching=self.antibunching,
                    ignored=self.ignored, masked_dropped=self.masked_dropped)


def coincidence_matrices(records, windows: CoincidenceWindows, array: DetectorArray,
                         ) -> tuple[CountMatrix, CountMatrix, PairTally]:
    """Build the antibunching and bunching matrices from same-frame record pairs.

    Returns ``(C_A, C_B, tally)``. Two records of the same pixel inside the bunching
    window would need a photon-number-resolving pixel, so they are rejected as a
    format error; a same-pixel pair in the antibunching window is a legitimate
    ``C_A[i, i]`` count (the second photon arrives through the delayed arm).
    """
    arr = as_record_array(records)
    n = array.n_pixels
    cA = np.zeros((n, n), dtype=np.int64)
    cB = np.zeros((n, n), dtype=np.int64)
    tally = PairTally()
    if arr.size:
        if int(arr["pixel"].max()) >= n:
            k = int(np.flatnonzero(arr["pixel"] >= n)[0])
            raise TimeTagFormatError(f"record {k}: pixel {int(arr['pixel'][k])} outside the array")
        order = np.lexsort((arr["tac_bin"], arr["frame"]))
        frame = arr["frame"][order]
        tac = arr["tac_bin"][order].astype(np.int64)
        pix = arr["pixel"][order].astype(np.int64)
        width = windows.tac_bin_width
        d = 1
        while d < frame.size:
            same = frame[d:] == frame[:-d]
            if not same.any():
                break
            a = np.flatnonzero(same)
            b = a + d
            pi, pj = pix[a], pix[b]
            kind = windows.classify((tac[b] - tac[a]) * width)
            dup = (pi == pj) & (kind == 1)
            if dup.any():
                k = int(order[a[np.flatnonzero(dup)[0]]])
                raise TimeTagFormatError(
                    f"record {k}: two detections on pixel {int(pix[a[dup][0]])} within the bunching "
                    "window of one frame (pixels are not number-resolving)"
                )
            tally.total += int(a.size)
            tally.ignored += int(np.count_nonzero(kind == 0))
            lo, hi = np.minimum(pi, pj), np.maximum(pi, pj)
            for code, counts, branch in ((1, cB, Branch.B), (2, cA, Branch.A)):
                sel = kind == code
                if not sel.any():
                    continue
                flat = np.bincount(lo[sel] * n + hi[sel], minlength=n * n).reshape(n, n)
                mask = array.mask_for(branch)
                for i, j in mask:
                    tally.masked_dropped += int(flat[i, j])
                    flat[i, j] = 0
                kept = int(flat.sum())
                counts += flat
                if branch is Branch.B:
                    tally.bunching += kept
                else:
                    tally.antibunching += kept
            d += 1
    return (CountMatrix(Branch.A, cA, array.antibunching_mask),
            CountMatrix(Branch.B, cB, array.bunching_mask),
            tally)
