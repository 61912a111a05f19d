import json
import random
from fractions import Fraction
from pathlib import Path

import pytest

from conftest import write_frames, write_video
from sitewarden.errors import FrameNameError, InvalidRate, TimeOutOfRange, UnreadableVideo
from sitewarden.ingest import (
    SENTINEL,
    Frame,
    extract_frames,
    format_frame_filename,
    format_time_label,
    ingest_directory,
    is_valid_time_label,
    parse_time_from_filename,
    sample_count,
    sample_instants,
    time_label_to_ms,
)


def frame(i, ms):
    return Frame(i, ms, Path("x.jpg"), "s")


@pytest.mark.parametrize("index,ms,expected", [
    (10, 5275, "Frame10-00:05:275.jpg"),
    (0, 0, "Frame0-00:00:000.jpg"),
    (3, 61042, "Frame3-01:01:042.jpg"),
])
def test_format_frame_filename(index, ms, expected):
    assert format_frame_filename(frame(index, ms)) == expected


@pytest.mark.parametrize("name,expected", [
    ("Frame10-00:05:275.jpg", "00:05:275"),
    ("badname.jpg", "???:???:???"),
    ("Frame3-00:00:000.jpg", "00:00:000"),
])
def test_parse_time_from_filename(name, expected):
    assert parse_time_from_filename(name) == expected


def test_parse_keeps_everything_after_first_dash():
    # split on the first dash only, strip the rightmost extension
    assert parse_time_from_filename("Frame1-a-b.tar.jpg") == "a-b.tar"
    assert parse_time_from_filename("nodash") == SENTINEL


def test_underscore_separator_round_trips():
    name = format_frame_filename(frame(4, 61042), sep="_")
    assert name == "Frame4-01_01_042.jpg"
    assert parse_time_from_filename(name) == "01:01:042"


def test_time_out_of_range():
    with pytest.raises(TimeOutOfRange):
        format_frame_filename(frame(0, 100 * 60 * 1000))
    with pytest.raises(TimeOutOfRange):
        format_time_label(-1)


def test_round_trip_random():
    rng = random.Random(7)
    for _ in range(2000):
        ms = rng.randrange(100 * 60 * 1000)
        label = parse_time_from_filename(format_frame_filename(frame(rng.randrange(10**6), ms)))
        assert is_valid_time_label(label)
        assert time_label_to_ms(label) == ms


def test_sample_count_arithmetic():
    assert sample_count(30, 1) == 30
    assert sample_count(0, 1) == 0
    assert sample_count(Fraction(5, 2), 1) == 3
    assert sample_instants(Fraction(5, 2), 1) == [0, 1, 2]
    assert sample_count(10, Fraction(1, 3)) == 4
    with pytest.raises(InvalidRate):
        sample_count(1, 0)
    with pytest.raises(InvalidRate):
        sample_count(1, -2)


@pytest.mark.parametrize("seconds,expected_times", [
    (30.0, list(range(30))),
    (2.5, [0, 1, 2]),
])
def test_extract_frames_synthetic_video(tmp_path, seconds, expected_times):
    video = write_video(tmp_path / "clip.avi", seconds)
    frames = extract_frames(video, 1, tmp_path / "out")
    assert [f.capture_time_ms for f in frames] == [t * 1000 for t in expected_times]
    assert [f.index for f in frames] == list(range(len(expected_times)))
    for f in frames:
        assert f.image_ref.exists()
        assert f.image_ref.name == format_frame_filename(f)
    records = [json.loads(line) for line in (tmp_path / "out" / "index.jsonl").read_text().splitlines()]
    assert records[1] == {"index": 1, "capture_time_ms": 1000, "time_label": "00:01:000", "file": "Frame1-00:01:000.jpg"}


def test_extract_fractional_rate(tmp_path):
    video = write_video(tmp_path / "clip.avi", 3.0)
    frames = extract_frames(video, Fraction(3, 2), tmp_path / "out")
    # instants 0, 2/3, 4/3, 2, 8/3
    assert [f.capture_time_ms for f in frames] == [0, 667, 1333, 2000, 2667]


def test_extract_errors(tmp_path):
    with pytest.raises(UnreadableVideo):
        extract_frames(tmp_path / "missing.avi", 1, tmp_path / "out")
    junk = tmp_path / "junk.avi"
    junk.write_bytes(b"not a video")
    with pytest.raises(UnreadableVideo):
        extract_frames(junk, 1, tmp_path / "out")
    video = write_video(tmp_path / "clip.avi", 1.0)
    with pytest.raises(InvalidRate):
        extract_frames(video, 0, tmp_path / "out")


def test_ingest_directory_orders_by_index(tmp_path):
    d = write_frames(tmp_path / "f", 12)
    frames = ingest_directory(d)
    assert [f.index for f in frames] == list(range(12))
    assert frames[11].time_label == "00:11:000"


def test_ingest_directory_rejects_bad_names(tmp_path):
    d = write_frames(tmp_path / "f", 2)
    (d / "badname.jpg").write_bytes((d / "Frame0-00:00:000.jpg").read_bytes())
    with pytest.raises(FrameNameError) as err:
        ingest_directory(d)
    assert err.value.bad_names == ["badname.jpg"]
