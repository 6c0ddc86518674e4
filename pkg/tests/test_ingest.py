import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrhom.ingest import (
    HEADER,
    MAGIC,
    RECORD_DTYPE,
    CoincidenceWindows,
    CountMatrix,
    TimeTagFormatError,
    TimeTagRecord,
    as_records,
    coincidence_matrices,
    parse_timetags,
    parse_timetags_csv,
    read_timetag_file,
    write_timetag_file,
    write_timetags,
    write_timetags_csv,
)
from mrhom.model import Branch, DetectorArray

W = CoincidenceWindows()
OPEN = DetectorArray.uniform(8, 9.8, 1.7, bunching_mask=frozenset())
REFERENCE = DetectorArray.uniform(8, 9.8, 1.7)


def records(*rows):
    return np.array(list(rows), dtype=RECORD_DTYPE)


def test_tac_quantization():
    assert W.tac_bin_width == pytest.approx(25 / 2 ** 14)
    assert W.tac_bin_width * 1e3 == pytest.approx(1.5259, abs=1e-4)
    assert W.offset_bins(Branch.A) == 3932
    assert W.offset_bins(Branch.B) == 0
    assert 3932 * W.tac_bin_width == pytest.approx(5.9998, abs=1e-4)


def test_windows_must_not_overlap():
    with pytest.raises(ValueError):
        CoincidenceWindows(antibunching_center=0.8, half_width=0.5)


def test_empty_stream():
    assert parse_timetags(b"").size == 0
    assert parse_timetags(HEADER.pack(MAGIC, 1, 8, 0)).size == 0
    assert parse_timetags(b"", header=False).size == 0


def test_single_record_layout():
    raw = struct.pack("<BQH", 3, 17, 3932)
    assert len(raw) == 11
    arr = parse_timetags(raw, header=False)
    assert as_records(arr) == [TimeTagRecord(3, 17, 3932)]


def test_large_stream_round_trip():
    rng = np.random.default_rng(7)
    arr = np.empty(10 ** 6, RECORD_DTYPE)
    arr["pixel"] = rng.integers(0, 8, arr.size)
    arr["frame"] = rng.integers(0, 2 ** 63, arr.size, dtype=np.uint64)
    arr["tac_bin"] = rng.integers(0, 2 ** 14, arr.size)
    data = write_timetags(arr, 8)
    assert len(data) == 8 + 11 * arr.size
    back = parse_timetags(data)
    assert back.tobytes() == arr.tobytes()
    assert write_timetags(back, 8) == data


def test_bad_magic_and_version():
    with pytest.raises(TimeTagFormatError) as e:
        parse_timetags(b"XXXX" + b"\x01\x00\x08\x00")
    assert e.value.offset == 0
    with pytest.raises(TimeTagFormatError) as e:
        parse_timetags(HEADER.pack(MAGIC, 2, 8, 0))
    assert e.value.offset == 4


def test_truncated_record_names_offset():
    data = write_timetags(records((1, 2, 3), (2, 2, 3)), 8)[:-4]
    with pytest.raises(TimeTagFormatError) as e:
        parse_timetags(data)
    assert e.value.offset == 8 + 11
    assert "19" in str(e.value)


def test_out_of_range_fields_name_offset():
    good = write_timetags(records((1, 2, 3), (2, 2, 3)), 8)
    bad = bytearray(good)
    bad[8 + 11 + 9: 8 + 11 + 11] = struct.pack("<H", 20000)
    with pytest.raises(TimeTagFormatError) as e:
        parse_timetags(bytes(bad))
    assert e.value.offset == 19
    bad = bytearray(good)
    bad[8] = 9
    with pytest.raises(TimeTagFormatError) as e:
        parse_timetags(bytes(bad))
    assert e.value.offset == 8


def test_bunching_and_antibunching_classification():
    cA, cB, t = coincidence_matrices(records((2, 5, 100), (5, 5, 100)), W, REFERENCE)
    assert cB.counts[2, 5] == 1 and cA.total == 0
    cA, cB, t = coincidence_matrices(records((5, 9, 100), (2, 9, 100 + 3932)), W, REFERENCE)
    assert cA.counts[2, 5] == 1 and cB.total == 0


def test_pairs_outside_windows_are_ignored():
    cA, cB, t = coincidence_matrices(records((2, 5, 100), (5, 5, 100 + 1500)), W, REFERENCE)
    assert cA.total == cB.total == 0
    assert t.ignored == 1 and t.total == 1


def test_different_frames_never_pair():
    cA, cB, t = coincidence_matrices(records((2, 5, 100), (5, 6, 100)), W, REFERENCE)
    assert t.total == 0


def test_same_pixel_bunching_is_format_error():
    with pytest.raises(TimeTagFormatError):
        coincidence_matrices(records((4, 1, 10), (4, 1, 12)), W, REFERENCE)


def test_same_pixel_antibunching_counts_on_diagonal():
    cA, _, _ = coincidence_matrices(records((4, 1, 10), (4, 1, 10 + 3932)), W, REFERENCE)
    assert cA.counts[4, 4] == 1


def test_masked_pairs_dropped_and_tallied():
    cA, cB, t = coincidence_matrices(records((3, 1, 50), (4, 1, 50)), W, REFERENCE)
    assert cB.total == 0 and t.masked_dropped == 1 and t.bunching == 0


@st.composite
def frame_records(draw):
    n = draw(st.integers(0, 40))
    pix = draw(st.lists(st.integers(0, 7), min_size=n, max_size=n))
    frames = draw(st.lists(st.integers(0, 5), min_size=n, max_size=n))
    tacs = draw(st.lists(st.sampled_from([0, 2, 3932, 3935, 9000, 16000]), min_size=n, max_size=n))
    arr = np.array(list(zip(pix, frames, tacs)), dtype=RECORD_DTYPE) if n else np.empty(0, RECORD_DTYPE)
    # click detectors: one pixel fires at most once per bunching window and frame
    keep, seen = [], set()
    for k, r in enumerate(arr.tolist()):
        key = (r[0], r[1], r[2] // 1000)
        if key not in seen:
            seen.add(key)
            keep.append(k)
    return arr[keep]


@settings(max_examples=60)
@given(arr=frame_records(), seed=st.integers(0, 2 ** 32 - 1))
def test_permutation_invariance_and_conservation(arr, seed):
    cA, cB, t = coincidence_matrices(arr, W, REFERENCE)
    perm = np.random.default_rng(seed).permutation(arr.size)
    cA2, cB2, t2 = coincidence_matrices(arr[perm], W, REFERENCE)
    assert cA == cA2 and cB == cB2 and t.as_dict() == t2.as_dict()
    assert t.bunching + t.antibunching + t.ignored + t.masked_dropped == t.total
    assert t.bunching == cB.total and t.antibunching == cA.total
    frames = arr["frame"]
    expected = sum(int(np.count_nonzero(frames == f)) * (int(np.count_nonzero(frames == f)) - 1) // 2
                   for f in np.unique(frames))
    assert t.total == expected


def test_csv_round_trip_and_comments():
    arr = records((1, 2, 3), (7, 2 ** 63, 16383))
    text = write_timetags_csv(arr, {"config_digest": "abc"})
    assert text.startswith("# config_digest: abc\n")
    assert parse_timetags_csv(text).tobytes() == arr.tobytes()


@pytest.mark.parametrize("text", ["a,b,c\n1,2,3\n", "pixel,frame,tac_bin\n1,2\n", "pixel,frame,tac_bin\n1,2,20000\n"])
def test_csv_format_errors(text):
    with pytest.raises(TimeTagFormatError):
        parse_timetags_csv(text)


def test_file_round_trip(tmp_path):
    arr = records((1, 2, 3), (2, 2, 3935))
    for name in ("t.bin", "t.csv"):
        write_timetag_file(tmp_path / name, arr, 8)
        assert read_timetag_file(tmp_path / name).tobytes() == arr.tobytes()


def test_count_matrix_validation(tmp_path):
    with pytest.raises(ValueError):
        CountMatrix("A", np.array([[0, 0], [1, 0]]))
    with pytest.raises(ValueError):
        CountMatrix("B", np.array([[1, 0], [0, 0]]), frozenset({(0, 0)}))
    with pytest.raises(ValueError):
        CountMatrix("A", -np.ones((2, 2)))
    m = CountMatrix("B", np.array([[0, 4], [0, 0]]), frozenset({(0, 0), (1, 1)}))
    m.to_csv(tmp_path / "m.csv", {"config_digest": "x"})
    assert (tmp_path / "m.csv").read_text().splitlines()[1:] == ["branch,i,j,count", "B,0,1,4"]
