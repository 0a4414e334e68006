"""Temporal chunking, masks and spatial region schemes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

from .trace import Detection, Frame, FrameStream

Cell = tuple[int, int]  # (col, row)

_FRAME_EPS = 1e-9


class ChunkingError(ValueError):
    pass


def seconds_to_frames(seconds: float, fps: int) -> int:
    """Exact frame count for a duration, or ChunkingError if it is not a whole number of frames."""
    frames = seconds * fps
    n = round(frames)
    if abs(frames - n) > 1e-6:
        raise ChunkingError(f"{seconds} s at {fps} fps is {frames:g} frames, not an integer")
    return int(n)


@dataclass(frozen=True)
class ChunkSpec:
    chunk_frames: int
    pitch_frames: int
    fps: int

    def __post_init__(self):
        if self.chunk_frames < 1 or self.pitch_frames < 1 or self.fps < 1:
            raise ChunkingError(f"invalid chunk spec {self}")

    @classmethod
    def from_seconds(cls, chunk_sec: float, stride_sec: float, fps: int) -> "ChunkSpec":
        chunk = seconds_to_frames(chunk_sec, fps)
        stride = seconds_to_frames(stride_sec, fps)
        return cls(chunk, chunk + stride, fps)

    @property
    def chunk_sec(self) -> float:
        return self.chunk_frames / self.fps

    @property
    def pitch_sec(self) -> float:
        return self.pitch_frames / self.fps


def event_frames(rho: float, fps: int) -> int:
    """Upper bound on the frames a segment of duration ``rho`` can cover (at least one)."""
    return max(1, math.ceil(rho * fps - _FRAME_EPS))


def max_chunk_span(rho: float, spec: ChunkSpec) -> int:
    """Most chunks a single segment of duration at most ``rho`` can intersect."""
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    fe = event_frames(rho, spec.fps)
    return -(-(fe - 1 + spec.chunk_frames) // spec.pitch_frames)


def bins_touched(span: int, pitch_sec: float, bin_sec: float) -> int:
    """Most aligned time bins of width ``bin_sec`` hit by ``span`` consecutive chunk start times."""
    if span <= 0:
        return 0
    # the run may start anywhere in a bin, so it can cross ceil(length / bin) bin boundaries
    length = (span - 1) * pitch_sec
    return math.ceil(length / bin_sec - _FRAME_EPS) + 1


@dataclass(frozen=True)
class Mask:
    mask_id: str
    cells: frozenset[Cell]
    threshold: float = 0.5

    def __post_init__(self):
        if not 0 < self.threshold <= 1:
            raise ValueError(f"mask threshold must be in (0,1], got {self.threshold}")

    def check_grid(self, grid: tuple[int, int]) -> None:
        for c, r in self.cells:
            if not (0 <= c < grid[0] and 0 <= r < grid[1]):
                raise ChunkingError(f"mask {self.mask_id} cell {(c, r)} outside grid {grid}")


@dataclass(frozen=True)
class RegionScheme:
    scheme_id: str
    regions: tuple[frozenset[Cell], ...]
    boundary: str = "hard"

    def __post_init__(self):
        if self.boundary not in ("hard", "soft"):
            raise ValueError(f"boundary must be hard or soft, got {self.boundary}")

    def check_grid(self, grid: tuple[int, int]) -> None:
        all_cells = {(c, r) for c in range(grid[0]) for r in range(grid[1])}
        seen: set[Cell] = set()
        for region in self.regions:
            if seen & region:
                raise ChunkingError(f"region scheme {self.scheme_id}: regions overlap")
            seen |= region
        if seen != all_cells:
            raise ChunkingError(f"region scheme {self.scheme_id}: regions do not partition the grid")

    def region_of(self, det: Detection, grid: tuple[int, int]) -> int:
        cx, cy = det.center
        cell = (min(max(int(math.floor(cx)), 0), grid[0] - 1), min(max(int(math.floor(cy)), 0), grid[1] - 1))
        for i, region in enumerate(self.regions):
            if cell in region:
                return i
        raise ChunkingError(f"cell {cell} not covered by scheme {self.scheme_id}")


def column_bands(scheme_id: str, grid: tuple[int, int], n_bands: int, boundary: str = "hard") -> RegionScheme:
    """Split the grid into ``n_bands`` vertical bands of whole columns."""
    cols, rows = grid
    edges = [round(i * cols / n_bands) for i in range(n_bands + 1)]
    regions = tuple(
        frozenset((c, r) for c in range(edges[i], edges[i + 1]) for r in range(rows)) for i in range(n_bands)
    )
    return RegionScheme(scheme_id, regions, boundary)


def cell_overlaps(bbox: tuple[float, float, float, float]) -> Iterable[tuple[Cell, float]]:
    """Yield (cell, fraction of the bbox area inside that cell) for every cell the bbox touches."""
    x, y, w, h = bbox
    area = w * h
    for c in range(int(math.floor(x)), int(math.ceil(x + w))):
        ox = min(x + w, c + 1) - max(x, c)
        if ox <= 0:
            continue
        for r in range(int(math.floor(y)), int(math.ceil(y + h))):
            oy = min(y + h, r + 1) - max(y, r)
            if oy > 0:
                yield (c, r), ox * oy / area


def masked_fraction(bbox, cells: frozenset[Cell] | set[Cell]) -> float:
    if not cells:
        return 0.0
    return sum(frac for cell, frac in cell_overlaps(bbox) if cell in cells)


def is_hidden(det: Detection, mask: Mask) -> bool:
    return masked_fraction(det.bbox, mask.cells) >= mask.threshold - 1e-12


def apply_mask(frame: Frame, mask: Mask | None) -> Frame:
    if mask is None or not mask.cells:
        return frame
    kept = tuple(d for d in frame.detections if not is_hidden(d, mask))
    if len(kept) == len(frame.detections):
        return frame
    return Frame(frame.index, kept)


def mask_stream(stream: FrameStream, mask: Mask | None) -> FrameStream:
    if mask is None or not mask.cells:
        return stream
    return FrameStream(stream.camera_id, stream.fps, stream.start_time, stream.grid,
                       tuple(apply_mask(f, mask) for f in stream.frames))


@dataclass(frozen=True)
class Chunk:
    chunk_index: int
    region_id: int
    t0: float
    frames: tuple[Frame, ...]


def window_frames(start_time: float, fps: int, begin: float, end: float) -> tuple[int, int]:
    """Frame range [a, b) whose timestamps fall in [begin, end); not clipped to any trace length."""
    a = max(0, math.ceil((begin - start_time) * fps - _FRAME_EPS))
    b = max(0, math.ceil((end - start_time) * fps - _FRAME_EPS))
    return a, max(a, b)


def chunk_starts(a: int, b: int, spec: ChunkSpec) -> range:
    """Start frames of every chunk in [a, b); the last chunk may be truncated at b."""
    return range(a, b, spec.pitch_frames) if b > a else range(0)


def split(stream: FrameStream, spec: ChunkSpec, begin: float | None = None, end: float | None = None,
          mask: Mask | None = None, scheme: RegionScheme | None = None) -> list[Chunk]:
    """Cut the stream into chunks, masking every frame and optionally splitting by region."""
    if spec.fps != stream.fps:
        raise ChunkingError(f"chunk spec fps {spec.fps} != stream fps {stream.fps}")
    begin = stream.start_time if begin is None else begin
    end = stream.frame_time(len(stream)) if end is None else end
    if begin >= end:
        return []
    a, b = window_frames(stream.start_time, stream.fps, begin, end)
    b = min(b, len(stream))
    chunks = []
    for k, s in enumerate(chunk_starts(a, b, spec)):
        frames = tuple(apply_mask(f, mask) for f in stream.frames[s:min(s + spec.chunk_frames, b)])
        t0 = stream.frame_time(s)
        if scheme is None:
            chunks.append(Chunk(k, 0, t0, frames))
            continue
        per_region: list[list[Frame]] = [[] for _ in scheme.regions]
        for f in frames:
            buckets: list[list[Detection]] = [[] for _ in scheme.regions]
            for det in f.detections:
                buckets[scheme.region_of(det, stream.grid)].append(det)
            for rid, dets in enumerate(buckets):
                per_region[rid].append(Frame(f.index, tuple(dets)))
        for rid, rframes in enumerate(per_region):
            chunks.append(Chunk(k, rid, t0, tuple(rframes)))
    return chunks
