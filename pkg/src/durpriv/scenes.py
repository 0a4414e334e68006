"""Deterministic synthetic camera scenes: entities crossing a grid, plus optional long-parked ones."""

from __future__ import annotations

import json
import math
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .trace import Detection, Frame, FrameStream

COLORS = ("RED", "WHITE", "SILVER", "BLACK", "BLUE")


@dataclass
class SceneConfig:
    duration_sec: float = 3600.0
    fps: int = 1
    grid: tuple[int, int] = (8, 6)
    arrival_rate: float = 1 / 60  # entities per second
    arrivals: str = "poisson"  # or "fixed": exactly one entity every 1/arrival_rate seconds
    dwell_min: float = 10.0
    dwell_max: float = 90.0  # hard cap on any moving entity's visit, seconds
    dwell_dist: str = "uniform"  # or "pareto": heavy tail truncated at dwell_max
    pareto_shape: float = 1.5
    n_parked: int = 0
    parked_min: float = 1800.0
    parked_max: float = 3600.0
    car_fraction: float = 0.5
    box_size: float = 0.8  # bbox side in cells
    camera_id: str = "cam0"
    start_time: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.grid = tuple(self.grid)
        if self.arrival_rate < 0 or self.duration_sec < 0:
            raise ValueError("rates and durations must be nonnegative")
        if self.fps < 1 or min(self.grid) < 1:
            raise ValueError("fps and grid dimensions must be positive")
        if not 0 < self.dwell_min <= self.dwell_max or not math.isfinite(self.dwell_max):
            raise ValueError("need 0 < dwell_min <= dwell_max < inf")
        if self.arrivals not in ("poisson", "fixed") or self.dwell_dist not in ("uniform", "pareto"):
            raise ValueError("unknown arrival process or dwell distribution")
        if not 0 < self.box_size <= min(self.grid):
            raise ValueError("box_size must fit in the grid")

    @classmethod
    def load(cls, path: str | Path) -> "SceneConfig":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class _Entity:
    entity_id: str
    cls: str
    first: int
    last: int  # inclusive
    start_xy: tuple[float, float]
    end_xy: tuple[float, float]
    attrs: dict = field(default_factory=dict)


def _edge_point(rng: np.random.Generator, grid, box: float) -> tuple[float, float]:
    cols, rows = grid
    side = rng.integers(4)
    u = rng.random()
    if side == 0:
        return u * (cols - box), 0.0
    if side == 1:
        return u * (cols - box), rows - box
    if side == 2:
        return 0.0, u * (rows - box)
    return cols - box, u * (rows - box)


def _attrs(rng: np.random.Generator, cls: str) -> dict:
    attrs = {"color": COLORS[int(rng.integers(len(COLORS)))]}
    if cls == "car":
        letters = "".join(rng.choice(list(string.ascii_uppercase), 3))
        attrs["plate"] = f"{letters}{int(rng.integers(1000)):03d}"
        attrs["speed"] = f"{rng.uniform(20, 80):.1f}"
    return attrs


def _dwell(cfg: SceneConfig, rng: np.random.Generator) -> float:
    if cfg.dwell_dist == "uniform":
        return float(rng.uniform(cfg.dwell_min, cfg.dwell_max))
    return float(min(cfg.dwell_min * (1.0 + rng.pareto(cfg.pareto_shape)), cfg.dwell_max))


def _arrival_times(cfg: SceneConfig, rng: np.random.Generator) -> list[float]:
    if cfg.arrival_rate == 0:
        return []
    if cfg.arrivals == "fixed":
        gap = 1.0 / cfg.arrival_rate
        return list(np.arange(0.0, cfg.duration_sec, gap))
    times, t = [], 0.0
    while True:
        t += float(rng.exponential(1.0 / cfg.arrival_rate))
        if t >= cfg.duration_sec:
            return times
        times.append(t)


def _entities(cfg: SceneConfig) -> list[_Entity]:
    rng = np.random.default_rng(cfg.seed)
    n_frames = int(round(cfg.duration_sec * cfg.fps))
    out = []
    for i, t in enumerate(_arrival_times(cfg, rng)):
        first = int(math.floor(t * cfg.fps))
        length = max(1, int(math.floor(_dwell(cfg, rng) * cfg.fps)))
        last = min(first + length - 1, n_frames - 1)
        cls = "car" if rng.random() < cfg.car_fraction else "person"
        a, b = _edge_point(rng, cfg.grid, cfg.box_size), _edge_point(rng, cfg.grid, cfg.box_size)
        out.append(_Entity(f"e{i}", cls, first, last, a, b, _attrs(rng, cls)))
    cols, rows = cfg.grid
    cells = [(c, r) for r in range(rows) for c in range(cols)]
    spots = rng.permutation(len(cells))[:cfg.n_parked] if cfg.n_parked else []
    margin = (1.0 - min(cfg.box_size, 1.0)) / 2
    for j, spot in enumerate(spots):
        col, row = cells[int(spot)]
        length = int(math.floor(rng.uniform(cfg.parked_min, cfg.parked_max) * cfg.fps))
        first = int(rng.integers(0, max(1, n_frames - length + 1)))
        last = min(first + max(length, 1) - 1, n_frames - 1)
        xy = (col + margin, row + margin)
        out.append(_Entity(f"p{j}", "car", first, last, xy, xy, _attrs(rng, "car")))
    return out


def gen_scene(cfg: SceneConfig) -> FrameStream:
    n_frames = int(round(cfg.duration_sec * cfg.fps))
    per_frame: list[list[Detection]] = [[] for _ in range(n_frames)]
    for ent in _entities(cfg):
        span = max(ent.last - ent.first, 1)
        size = min(cfg.box_size, 1.0) if ent.start_xy == ent.end_xy else cfg.box_size
        for f in range(ent.first, ent.last + 1):
            s = (f - ent.first) / span
            x = ent.start_xy[0] + s * (ent.end_xy[0] - ent.start_xy[0])
            y = ent.start_xy[1] + s * (ent.end_xy[1] - ent.start_xy[1])
            x = min(max(round(x, 4), 0.0), cfg.grid[0] - size)
            y = min(max(round(y, 4), 0.0), cfg.grid[1] - size)
            per_frame[f].append(Detection(ent.entity_id, ent.cls, (x, y, size, size), dict(ent.attrs)))
    frames = tuple(Frame(i, tuple(dets)) for i, dets in enumerate(per_frame))
    return FrameStream(cfg.camera_id, cfg.fps, cfg.start_time, cfg.grid, frames)
