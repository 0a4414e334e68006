"""Symbolic video traces: frames of labelled detections, entity segments and policies."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping


class TraceFormatError(ValueError):
    """Raised when a trace file is malformed. ``lineno`` is 1-based."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Detection:
    entity_id: str
    cls: str
    bbox: tuple[float, float, float, float]
    attrs: Mapping[str, str] = field(default_factory=dict)

    @property
    def center(self) -> tuple[float, float]:
        x, y, w, h = self.bbox
        return x + w / 2.0, y + h / 2.0

    def to_record(self) -> dict:
        return {"id": self.entity_id, "class": self.cls, "bbox": list(self.bbox), "attrs": dict(self.attrs)}


@dataclass(frozen=True)
class Frame:
    index: int
    detections: tuple[Detection, ...] = ()

    def to_record(self) -> dict:
        return {"index": self.index, "detections": [d.to_record() for d in self.detections]}


@dataclass(frozen=True)
class FrameStream:
    camera_id: str
    fps: int
    start_time: float
    grid: tuple[int, int]
    frames: tuple[Frame, ...] = ()

    def __post_init__(self):
        if self.fps < 1:
            raise TraceFormatError(f"fps must be >= 1, got {self.fps}")
        if self.grid[0] < 1 or self.grid[1] < 1:
            raise TraceFormatError(f"grid dims must be >= 1, got {self.grid}")

    def __len__(self) -> int:
        return len(self.frames)

    def header(self) -> dict:
        return {
            "camera_id": self.camera_id,
            "fps": self.fps,
            "start_time": self.start_time,
            "grid_cols": self.grid[0],
            "grid_rows": self.grid[1],
        }

    def frame_time(self, index: int) -> float:
        return self.start_time + index / self.fps


@dataclass(frozen=True, order=True)
class Segment:
    first_frame: int
    last_frame: int

    def __post_init__(self):
        if self.first_frame > self.last_frame:
            raise ValueError(f"empty segment [{self.first_frame}, {self.last_frame}]")

    @property
    def n_frames(self) -> int:
        return self.last_frame - self.first_frame + 1


@dataclass(frozen=True)
class Event:
    segments: tuple[Segment, ...] = ()

    def __post_init__(self):
        for a, b in zip(self.segments, self.segments[1:]):
            if a.last_frame >= b.first_frame:
                raise ValueError("event segments must be sorted and disjoint")

    def frames(self) -> list[int]:
        return [f for s in self.segments for f in range(s.first_frame, s.last_frame + 1)]


@dataclass(frozen=True)
class Policy:
    """Owner policy: events visible for at most ``rho`` seconds in ``k`` segments get ``epsilon``-DP."""

    rho: float
    k: int
    epsilon: float

    def __post_init__(self):
        if self.rho < 0 or self.k < 0 or int(self.k) != self.k or not self.epsilon > 0:
            raise ValueError(f"invalid policy {self}")


def duration_seconds(seg: Segment, fps: float) -> float:
    return seg.n_frames / fps


def _check_bbox(bbox, grid, lineno):
    x, y, w, h = bbox
    cols, rows = grid
    eps = 1e-9
    if not (w > 0 and h > 0):
        raise TraceFormatError(f"bbox width/height must be positive: {bbox}", lineno)
    if x < -eps or y < -eps or x + w > cols + eps or y + h > rows + eps:
        raise TraceFormatError(f"bbox {bbox} outside grid {grid}", lineno)


def _parse_detection(rec, grid, lineno) -> Detection:
    try:
        bbox = tuple(float(v) for v in rec["bbox"])
        if len(bbox) != 4:
            raise ValueError("bbox needs 4 numbers")
        attrs = {str(k): str(v) for k, v in (rec.get("attrs") or {}).items()}
        det = Detection(str(rec["id"]), str(rec["class"]), bbox, attrs)
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceFormatError(f"bad detection record: {exc}", lineno) from None
    _check_bbox(bbox, grid, lineno)
    return det


def parse_frame(line: str, grid: tuple[int, int], lineno: int | None = None) -> Frame:
    try:
        rec = json.loads(line)
        index = rec["index"]
        raw_dets = rec["detections"]
        if not isinstance(index, int) or not isinstance(raw_dets, list):
            raise TypeError("index must be an integer and detections a list")
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise TraceFormatError(f"bad frame record: {exc}", lineno) from None
    dets = tuple(_parse_detection(d, grid, lineno) for d in raw_dets)
    ids = [d.entity_id for d in dets]
    if len(set(ids)) != len(ids):
        raise TraceFormatError("duplicate entity id within a frame", lineno)
    return Frame(index, dets)


def read_trace(lines: Iterable[str]) -> FrameStream:
    it = iter(lines)
    try:
        head_line = next(it)
    except StopIteration:
        raise TraceFormatError("missing header record", 1) from None
    try:
        head = json.loads(head_line)
        camera_id = str(head["camera_id"])
        fps = head["fps"]
        if not isinstance(fps, int):
            raise TypeError("fps must be an integer")
        grid = (int(head["grid_cols"]), int(head["grid_rows"]))
        start_time = float(head["start_time"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise TraceFormatError(f"bad header record: {exc}", 1) from None
    frames = []
    for lineno, line in enumerate(it, start=2):
        if not line.strip():
            continue
        frame = parse_frame(line, grid, lineno)
        if frame.index != len(frames):
            raise TraceFormatError(f"expected frame index {len(frames)}, got {frame.index}", lineno)
        frames.append(frame)
    return FrameStream(camera_id, fps, start_time, grid, tuple(frames))


def load_trace(path: str | Path) -> FrameStream:
    with open(path, encoding="utf-8") as fh:
        return read_trace(fh)


def iter_trace_lines(stream: FrameStream) -> Iterator[str]:
    yield json.dumps(stream.header())
    for frame in stream.frames:
        yield json.dumps(frame.to_record())


def save_trace(stream: FrameStream, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in iter_trace_lines(stream):
            fh.write(line + "\n")


def _runs(frames: list[int]) -> tuple[Segment, ...]:
    segs = []
    start = prev = None
    for f in frames:
        if start is None:
            start = prev = f
        elif f == prev + 1:
            prev = f
        else:
            segs.append(Segment(start, prev))
            start = prev = f
    if start is not None:
        segs.append(Segment(start, prev))
    return tuple(segs)


def entity_frames(stream: FrameStream) -> dict[str, list[int]]:
    seen: dict[str, list[int]] = {}
    for frame in stream.frames:
        for det in frame.detections:
            seen.setdefault(det.entity_id, []).append(frame.index)
    return seen


def entity_segments(stream: FrameStream) -> dict[str, Event]:
    """Maximal contiguous visibility runs per entity, in frame order."""
    return {eid: Event(_runs(frames)) for eid, frames in entity_frames(stream).items()}


def min_cover_count(event: Event, max_frames: int) -> int:
    """Fewest windows of at most ``max_frames`` frames that together cover every visible frame.

    Greedy left-to-right placement is optimal for covering points on a line.
    """
    if not event.segments:
        return 0
    count = 0
    covered_to = -math.inf
    for seg in event.segments:
        f = max(seg.first_frame, covered_to + 1)
        while f <= seg.last_frame:
            count += 1
            covered_to = f + max_frames - 1
            f = covered_to + 1
    return count


def bound_of(event: Event, fps: float) -> tuple[float, int]:
    """(rho, k) with rho the longest visible run and k the fewest rho-long windows covering the event.

    k equals the number of runs unless nearby short runs fit into one window.  rho is the
    event's persistence, so it never grows when frames are hidden.
    """
    if not event.segments:
        return 0.0, 0
    longest = max(s.n_frames for s in event.segments)
    return longest / fps, min_cover_count(event, longest)
