"""Owner-side tooling: policy estimation, the mask ladder and the published camera registry."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chunking import Cell, Mask, RegionScheme, cell_overlaps, mask_stream
from .trace import FrameStream, Policy, bound_of, entity_segments

log = logging.getLogger(__name__)


def _is_parked(event, n_frames: int) -> bool:
    segs = event.segments
    return len(segs) == 1 and segs[0].first_frame == 0 and segs[0].last_frame == n_frames - 1


def estimate_policy(stream: FrameStream, safety: float = 1.0, exclude_parked: bool = False) -> tuple[float, int]:
    """(rho, k) covering every annotated entity, with rho inflated by ``safety``."""
    if safety < 1:
        raise ValueError("safety multiplier must be >= 1")
    events = entity_segments(stream)
    if exclude_parked:
        events = {e: ev for e, ev in events.items() if not _is_parked(ev, len(stream))}
    if not events:
        log.warning("no entities in trace %s; policy estimate is (0, 0)", stream.camera_id)
        return 0.0, 0
    bounds = [bound_of(ev, stream.fps) for ev in events.values()]
    return safety * max(b[0] for b in bounds), max(b[1] for b in bounds)


def policy_for_mask(stream: FrameStream, mask: Mask | None, safety: float = 1.0,
                    exclude_parked: bool = False) -> tuple[float, int]:
    return estimate_policy(mask_stream(stream, mask), safety, exclude_parked)


# ---------------------------------------------------------------- mask ladder

@dataclass(frozen=True)
class LadderStep:
    cell: Cell
    max_persistence_after: int  # frames
    identities_retained: float


def _longest_run(frames: np.ndarray, visible: np.ndarray) -> int:
    f = frames[visible]
    if len(f) == 0:
        return 0
    breaks = np.flatnonzero(np.diff(f) != 1)
    edges = np.concatenate(([-1], breaks, [len(f) - 1]))
    return int(np.diff(edges).max())


class _Occupancy:
    """Per-entity detection frames with the masked share of each detection's box."""

    def __init__(self, stream: FrameStream, threshold: float):
        self.threshold = threshold - 1e-12
        frames: dict[str, list[int]] = {}
        overlaps: dict[str, list[list[tuple[Cell, float]]]] = {}
        for frame in stream.frames:
            for det in frame.detections:
                frames.setdefault(det.entity_id, []).append(frame.index)
                overlaps.setdefault(det.entity_id, []).append(list(cell_overlaps(det.bbox)))
        self.entities = sorted(frames)
        self.frames = {e: np.array(frames[e]) for e in self.entities}
        self.masked = {e: np.zeros(len(frames[e])) for e in self.entities}
        # cell -> entity -> (occurrence indices, fractions)
        self.by_cell: dict[Cell, dict[str, tuple[np.ndarray, np.ndarray]]] = {}
        tmp: dict[Cell, dict[str, tuple[list, list]]] = {}
        for e in self.entities:
            for i, ovs in enumerate(overlaps[e]):
                for cell, frac in ovs:
                    idx, fr = tmp.setdefault(cell, {}).setdefault(e, ([], []))
                    idx.append(i)
                    fr.append(frac)
        for cell, per in tmp.items():
            self.by_cell[cell] = {e: (np.array(i), np.array(f)) for e, (i, f) in per.items()}
        self.persistence = {e: self._persist(e, self.masked[e]) for e in self.entities}

    def _persist(self, e: str, masked: np.ndarray) -> int:
        return _longest_run(self.frames[e], masked < self.threshold)

    def visible_cells(self, e: str) -> dict[Cell, int]:
        """Frames in which each cell overlaps a still-visible detection of ``e``."""
        visible = self.masked[e] < self.threshold
        out = {}
        for cell, per in self.by_cell.items():
            if e in per:
                idx, _ = per[e]
                n = int(visible[idx].sum())
                if n:
                    out[cell] = n
        return out

    def trial(self, cell: Cell) -> dict[str, int]:
        """Persistence of every entity the cell touches if the cell were masked."""
        out = {}
        for e, (idx, frac) in self.by_cell.get(cell, {}).items():
            masked = self.masked[e].copy()
            masked[idx] += frac
            out[e] = self._persist(e, masked)
        return out

    def commit(self, cell: Cell) -> None:
        for e, (idx, frac) in self.by_cell.get(cell, {}).items():
            self.masked[e][idx] += frac
            self.persistence[e] = self._persist(e, self.masked[e])

    def max_excluding(self, skip) -> int:
        return max((p for e, p in self.persistence.items() if e not in skip), default=0)

    def retained(self) -> float:
        if not self.entities:
            return 0.0
        alive = sum(1 for e in self.entities if (self.masked[e] < self.threshold).any())
        return alive / len(self.entities)


def mask_ladder(stream: FrameStream, threshold: float = 0.5, max_steps: int | None = None) -> list[LadderStep]:
    """Greedy ordering of grid cells to mask, each step cutting the longest visible run the most.

    Candidates are the cells overlapping a current longest-run entity; among them the cell giving
    the smallest resulting maximum wins, then the one overlapping those entities in the most
    frames, then (row, col) order.
    """
    occ = _Occupancy(stream, threshold)
    masked: set[Cell] = set()
    ladder: list[LadderStep] = []
    while max_steps is None or len(ladder) < max_steps:
        current = max(occ.persistence.values(), default=0)
        if current == 0:
            break
        top = [e for e, p in occ.persistence.items() if p == current]
        overlap: dict[Cell, int] = {}
        for e in top:
            for cell, n in occ.visible_cells(e).items():
                if cell not in masked:
                    overlap[cell] = overlap.get(cell, 0) + n
        if not overlap:
            break
        best = None
        for cell, n in overlap.items():
            changed = occ.trial(cell)
            after = max(max(changed.values(), default=0), occ.max_excluding(changed))
            score = (after, -n, cell[1], cell[0])
            if best is None or score < best[0]:
                best = (score, cell)
        cell = best[1]
        occ.commit(cell)
        masked.add(cell)
        ladder.append(LadderStep(cell, max(occ.persistence.values(), default=0), occ.retained()))
    return ladder


def ladder_mask(ladder: list[LadderStep], n: int, mask_id: str | None = None, threshold: float = 0.5) -> Mask:
    return Mask(mask_id or f"ladder-{n}", frozenset(s.cell for s in ladder[:n]), threshold)


# ---------------------------------------------------------------- registry

@dataclass(frozen=True)
class MaskEntry:
    mask: Mask
    rho: float
    k: int


@dataclass
class CameraRecord:
    camera_id: str
    fps: int
    grid: tuple[int, int]
    start_time: float
    policy: Policy
    masks: dict[str, MaskEntry] = field(default_factory=dict)
    schemes: dict[str, RegionScheme] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "camera_id": self.camera_id, "fps": self.fps, "grid_cols": self.grid[0], "grid_rows": self.grid[1],
            "start_time": self.start_time,
            "policy": {"rho": self.policy.rho, "k": self.policy.k, "epsilon": self.policy.epsilon},
            "masks": [{"mask_id": m.mask.mask_id, "cells": sorted(list(c) for c in m.mask.cells),
                       "threshold": m.mask.threshold, "rho": m.rho, "k": m.k} for m in self.masks.values()],
            "region_schemes": [{"scheme_id": s.scheme_id, "boundary": s.boundary,
                                "regions": [sorted(list(c) for c in r) for r in s.regions]}
                               for s in self.schemes.values()],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "CameraRecord":
        pol = rec["policy"]
        masks = {}
        for m in rec.get("masks", []):
            mask = Mask(m["mask_id"], frozenset(tuple(c) for c in m["cells"]), m.get("threshold", 0.5))
            masks[mask.mask_id] = MaskEntry(mask, float(m["rho"]), int(m["k"]))
        schemes = {}
        for s in rec.get("region_schemes", []):
            regions = tuple(frozenset(tuple(c) for c in r) for r in s["regions"])
            schemes[s["scheme_id"]] = RegionScheme(s["scheme_id"], regions, s.get("boundary", "hard"))
        return cls(rec["camera_id"], int(rec["fps"]), (int(rec["grid_cols"]), int(rec["grid_rows"])),
                   float(rec.get("start_time", 0.0)), Policy(float(pol["rho"]), int(pol["k"]), float(pol["epsilon"])),
                   masks, schemes)

    def policy_for(self, mask_id: str | None) -> tuple[float, int]:
        if mask_id is None:
            return self.policy.rho, self.policy.k
        entry = self.masks[mask_id]
        return entry.rho, entry.k


class CameraRegistry(dict):
    """camera_id -> CameraRecord, stored one JSON record per line."""

    @classmethod
    def load(cls, path: str | Path) -> "CameraRegistry":
        reg = cls()
        p = Path(path)
        if not p.exists():
            return reg
        with open(p, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if line.strip():
                    try:
                        rec = CameraRecord.from_record(json.loads(line))
                    except (KeyError, ValueError, TypeError) as exc:
                        raise ValueError(f"{path}:{lineno}: bad camera record: {exc}") from None
                    reg[rec.camera_id] = rec
        return reg

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for cam in sorted(self):
                fh.write(json.dumps(self[cam].to_record()) + "\n")


def register_camera(registry: CameraRegistry, stream: FrameStream, policy: Policy) -> CameraRecord:
    rec = CameraRecord(stream.camera_id, stream.fps, stream.grid, stream.start_time, policy)
    old = registry.get(stream.camera_id)
    if old is not None:
        rec.masks, rec.schemes = old.masks, old.schemes
    registry[stream.camera_id] = rec
    return rec


def add_region_scheme(record: CameraRecord, scheme: RegionScheme) -> None:
    scheme.check_grid(record.grid)
    record.schemes[scheme.scheme_id] = scheme


def add_ladder_masks(record: CameraRecord, stream: FrameStream, ladder: list[LadderStep],
                     sizes: list[int], threshold: float = 0.5, safety: float = 1.0,
                     exclude_parked: bool = False) -> list[MaskEntry]:
    """Publish ladder prefixes as named masks, each with (rho, k) measured on the masked trace."""
    added = []
    for n in sizes:
        if not 1 <= n <= len(ladder):
            continue
        mask = ladder_mask(ladder, n, threshold=threshold)
        rho, k = policy_for_mask(stream, mask, safety, exclude_parked)
        entry = MaskEntry(mask, rho, k)
        record.masks[mask.mask_id] = entry
        added.append(entry)
    return added
