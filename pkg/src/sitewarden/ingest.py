"""Frame ingestion: sample a video at a fixed rate, name frames by timestamp.

Frame files are named ``Frame{index}-{MM:SS:mmm}.jpg``. The time label can be
recovered from a filename with :func:`parse_time_from_filename`. It never
raises; a name without a ``-`` yields the ``???:???:???`` sentinel.
"""

from __future__ import annotations

import json
import math
import os
import re
import shutil
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterator

from .errors import FrameNameError, InvalidRate, TimeOutOfRange, UnreadableVideo

SENTINEL = "???:???:???"
MAX_TIME_MS = 100 * 60 * 1000
INDEX_FILE = "index.jsonl"

_LABEL_RE = re.compile(r"^(\d{2})[:_](\d{2})[:_](\d{3})$")
_INDEX_RE = re.compile(r"^Frame(\d+)-", re.IGNORECASE)
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".webp"}


@dataclass(frozen=True)
class Frame:
    index: int
    capture_time_ms: int
    image_ref: Path
    source_id: str

    @property
    def time_label(self) -> str:
        return format_time_label(self.capture_time_ms)


def format_time_label(ms: int, sep: str = ":") -> str:
    if ms < 0 or ms >= MAX_TIME_MS:
        raise TimeOutOfRange(f"{ms} ms is outside [0, 100 min)")
    minutes, rest = divmod(int(ms), 60_000)
    seconds, millis = divmod(rest, 1000)
    return f"{minutes:02d}{sep}{seconds:02d}{sep}{millis:03d}"


def format_frame_filename(frame: Frame, sep: str = ":") -> str:
    """``Frame{index}-{MM:SS:mmm}.jpg``; ``sep`` replaces ``:`` where a filesystem rejects it."""
    return f"Frame{frame.index}-{format_time_label(frame.capture_time_ms, sep)}.jpg"


def parse_time_from_filename(name: str | os.PathLike) -> str:
    """Return the time label embedded in a frame filename.

    ``'Frame10-00:05:275.jpg' -> '00:05:275'``. Names without ``-`` give the
    sentinel ``'???:???:???'``. Labels written with ``_`` separators are
    returned in canonical colon form.
    """
    base = os.path.basename(os.fspath(name))
    parts = base.split("-", maxsplit=1)
    if len(parts) < 2:
        return SENTINEL
    time_part = parts[1].rsplit(".", 1)[0]
    m = _LABEL_RE.match(time_part)
    if m and "_" in time_part:
        return ":".join(m.groups())
    return time_part


def time_label_to_ms(label: str) -> int:
    m = _LABEL_RE.match(label)
    if not m:
        raise ValueError(f"not a MM:SS:mmm time label: {label!r}")
    minutes, seconds, millis = (int(g) for g in m.groups())
    if seconds > 59:
        raise ValueError(f"seconds field out of range in {label!r}")
    return minutes * 60_000 + seconds * 1000 + millis


def is_valid_time_label(label: str) -> bool:
    try:
        time_label_to_ms(label)
    except ValueError:
        return False
    return True


def _as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        # 29.97 should mean 2997/100, not the nearest binary double
        return Fraction(repr(value))
    return Fraction(value)


def _check_rate(rate_hz) -> Fraction:
    try:
        rate = _as_fraction(rate_hz)
    except (TypeError, ValueError, ZeroDivisionError) as exc:
        raise InvalidRate(f"rate {rate_hz!r} is not a number") from exc
    if rate <= 0:
        raise InvalidRate(f"rate must be > 0, got {rate_hz!r}")
    return rate


def sample_count(duration_s, rate_hz) -> int:
    """Number of instants ``i / rate`` strictly before ``duration``."""
    rate = _check_rate(rate_hz)
    duration = _as_fraction(duration_s)
    if duration <= 0:
        return 0
    return math.ceil(duration * rate)


def sample_instants(duration_s, rate_hz) -> list[Fraction]:
    rate = _check_rate(rate_hz)
    return [Fraction(i) / rate for i in range(sample_count(duration_s, rate))]


def _capture_ms(t: Fraction) -> int:
    # round half up; Python's round() would use banker's rounding
    return math.floor(t * 1000 + Fraction(1, 2))


def _decoded_frames(video_ref: Path) -> Iterator:
    import cv2

    cap = cv2.VideoCapture(str(video_ref))
    if not cap.isOpened():
        raise UnreadableVideo(f"cannot open video {video_ref}")
    try:
        while True:
            ok, image = cap.read()
            if not ok:
                break
            yield image
    finally:
        cap.release()


def _video_fps(video_ref: Path) -> Fraction:
    import cv2

    cap = cv2.VideoCapture(str(video_ref))
    if not cap.isOpened():
        raise UnreadableVideo(f"cannot open video {video_ref}")
    try:
        fps = cap.get(cv2.CAP_PROP_FPS)
    finally:
        cap.release()
    if not fps or fps <= 0 or math.isnan(fps):
        raise UnreadableVideo(f"video {video_ref} reports no frame rate")
    return Fraction(fps).limit_denominator(1001)


def extract_frames(
    video_ref: str | os.PathLike,
    rate_hz,
    out_dir: str | os.PathLike,
    *,
    source_id: str | None = None,
    time_sep: str = ":",
) -> list[Frame]:
    """Sample ``video_ref`` at ``t_i = i / rate_hz`` and write one JPEG per sample.

    Samples are taken for every ``t_i`` strictly before the decoded duration
    (decoded frame count divided by the container frame rate). The frame shown
    at ``t_i`` is the decoded frame ``floor(t_i * fps)``. Writes
    ``out_dir/index.jsonl`` alongside the images.
    """
    import cv2

    rate = _check_rate(rate_hz)
    video_ref = Path(video_ref)
    if not video_ref.is_file():
        raise UnreadableVideo(f"no such video file: {video_ref}")
    fps = _video_fps(video_ref)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source_id = source_id or video_ref.stem

    frames: list[Frame] = []
    i = 0
    for j, image in enumerate(_decoded_frames(video_ref)):
        # frame j covers [j/fps, (j+1)/fps); emit every sample instant inside it
        while Fraction(i) / rate * fps < j + 1:
            t = Fraction(i) / rate
            frame = Frame(i, _capture_ms(t), Path(), source_id)
            path = out / format_frame_filename(frame, time_sep)
            if not cv2.imwrite(str(path), image):
                raise OSError(f"failed to write {path}")
            frames.append(Frame(i, frame.capture_time_ms, path, source_id))
            i += 1
    write_frame_index(frames, out)
    return frames


def write_frame_index(frames: list[Frame], out_dir: str | os.PathLike) -> Path:
    path = Path(out_dir) / INDEX_FILE
    with open(path, "w", encoding="utf-8") as fh:
        for f in frames:
            record = {
                "index": f.index,
                "capture_time_ms": f.capture_time_ms,
                "time_label": f.time_label,
                "file": f.image_ref.name,
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    return path


def read_frame_index(frames_dir: str | os.PathLike, source_id: str | None = None) -> list[Frame]:
    frames_dir = Path(frames_dir)
    source_id = source_id or frames_dir.name
    frames = []
    with open(frames_dir / INDEX_FILE, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                frames.append(
                    Frame(rec["index"], rec["capture_time_ms"], frames_dir / rec["file"], source_id)
                )
    return frames


def ingest_directory(frames_dir: str | os.PathLike, source_id: str | None = None) -> list[Frame]:
    """Read pre-extracted frames, ordered by the index in their names.

    Every image file must carry a parseable ``Frame{i}-{MM:SS:mmm}`` name;
    otherwise :class:`FrameNameError` lists the offenders.
    """
    frames_dir = Path(frames_dir)
    source_id = source_id or frames_dir.name
    bad: list[str] = []
    frames: list[Frame] = []
    for path in sorted(frames_dir.iterdir()):
        if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        label = parse_time_from_filename(path.name)
        m = _INDEX_RE.match(path.name)
        if label == SENTINEL or not m or not is_valid_time_label(label):
            bad.append(path.name)
            continue
        frames.append(Frame(int(m.group(1)), time_label_to_ms(label), path, source_id))
    if bad:
        raise FrameNameError(bad)
    frames.sort(key=lambda f: f.index)
    seen = set()
    for f in frames:
        if f.index in seen:
            raise FrameNameError([f.image_ref.name])
        seen.add(f.index)
    for a, b in zip(frames, frames[1:]):
        if b.capture_time_ms <= a.capture_time_ms:
            raise FrameNameError([b.image_ref.name])
    return frames


def copy_frames(frames: list[Frame], out_dir: str | os.PathLike, time_sep: str = ":") -> list[Frame]:
    """Copy frames into ``out_dir`` under canonical names and write the index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    copied = []
    for f in frames:
        target = out / format_frame_filename(f, time_sep)
        if target.resolve() != Path(f.image_ref).resolve():
            shutil.copyfile(f.image_ref, target)
        copied.append(Frame(f.index, f.capture_time_ms, target, f.source_id))
    write_frame_index(copied, out)
    return copied
