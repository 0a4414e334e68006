"""Query validation against camera metadata, end-to-end execution, reports and parameter sweeps."""

from __future__ import annotations

import json
import math
import random
import uuid
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .chunking import ChunkSpec, chunk_starts, split, window_frames
from .owner import CameraRecord, CameraRegistry
from .privacy import (Decision, LedgerStore, NoisyRelease, Reservation, UniformSource, deployment_rng,
                      noise_scale, release)
from .processing import ENGINE_COLUMNS, IntermediateTable, TableMeta, resolve_executable, run_processor
from .query import (Agg, Binary, Call, Col, Duration, Join, Lit, ProcessStmt, QueryPlan, SelectStmt, SplitStmt,
                    SubSelect, TableRef, Unary, Union_, parse_query)
from .relational import ReleaseValue, evaluate
from .sensitivity import ConstraintSet, PlanError, ReleaseGroup, analyze_release, base_constraints

BELT_FACTOR = math.log(100.0)  # Laplace: P(|noise| > b ln 100) = 1%


class ValidationError(ValueError):
    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class BudgetDenied(RuntimeError):
    pass


class EngineError(RuntimeError):
    pass


@dataclass
class EngineConfig:
    total_epsilon: float = 1.0  # shared by SELECTs without CONSUMING
    workers: int = 1
    pad_to_timeout: bool = False
    ledger_dir: str | None = None
    registry: str | None = None
    baseline_timeout: float = 60.0
    baseline_max_rows: int = 1_000_000
    seed: int | None = None  # None: noise from the OS entropy pool

    @classmethod
    def load(cls, path: str | Path) -> "EngineConfig":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------- validation

@dataclass(frozen=True)
class TablePlan:
    name: str
    split: SplitStmt
    process: ProcessStmt
    camera: CameraRecord
    chunk_spec: ChunkSpec
    window: tuple[int, int]  # frames [a, b) relative to the camera's start
    timeout_sec: float
    rho: float
    k: int
    meta: TableMeta
    constraints: ConstraintSet

    @property
    def mask(self):
        return self.camera.masks[self.split.mask].mask if self.split.mask else None

    @property
    def scheme(self):
        return self.camera.schemes[self.split.region_scheme] if self.split.region_scheme else None


@dataclass(frozen=True)
class ValidatedPlan:
    plan: QueryPlan
    tables: dict[str, TablePlan]
    groups: tuple[ReleaseGroup, ...]
    epsilons: tuple[tuple[float, ...], ...]  # per group, per release
    reservations: tuple[Reservation, ...]

    @property
    def eps_q(self) -> float:
        return math.fsum(e for group in self.epsilons for e in group)


def _whole_frames(d: Duration, fps: int) -> int | None:
    x = d.frames(fps)
    n = round(x)
    return int(n) if abs(x - n) <= 1e-6 else None


def _merge(intervals: list[tuple[int, int]]) -> list[tuple[int, int]]:
    out: list[list[int]] = []
    for a, b in sorted(intervals):
        if out and a <= out[-1][1] + 1:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [tuple(x) for x in out]


def validate(plan: QueryPlan, registry: Mapping[str, CameraRecord], total_epsilon: float = 1.0) -> ValidatedPlan:
    """Check a parsed plan against camera metadata only and precompute every release's sensitivity."""
    errors: list[str] = []
    splits: dict[str, tuple[SplitStmt, CameraRecord, ChunkSpec, tuple[int, int]]] = {}
    for s in plan.splits:
        where = f"SPLIT {s.name}"
        cam = registry.get(s.camera_id)
        if cam is None:
            errors.append(f"{where}: unknown camera {s.camera_id!r}")
            continue
        fc, stride = _whole_frames(s.chunk, cam.fps), _whole_frames(s.stride, cam.fps)
        if fc is None or stride is None:
            errors.append(f"{where}: chunk and stride must be whole frames at {cam.fps} fps")
            continue
        if fc < 1:
            errors.append(f"{where}: chunk must be at least one frame")
            continue
        if fc + stride < 1:
            errors.append(f"{where}: chunk + stride must be positive")
            continue
        bad = False
        if s.mask is not None and s.mask not in cam.masks:
            errors.append(f"{where}: camera {cam.camera_id} has no mask {s.mask!r}")
            bad = True
        if s.region_scheme is not None:
            scheme = cam.schemes.get(s.region_scheme)
            if scheme is None:
                errors.append(f"{where}: camera {cam.camera_id} has no region scheme {s.region_scheme!r}")
                bad = True
            elif scheme.boundary == "soft" and fc != 1:
                errors.append(f"{where}: soft-boundary region scheme {scheme.scheme_id!r} needs a 1-frame chunk")
                bad = True
        if not bad:
            window = window_frames(cam.start_time, cam.fps, s.begin, s.end) if s.begin < s.end else (0, 0)
            splits[s.name] = (s, cam, ChunkSpec(fc, fc + stride, cam.fps), window)

    tables: dict[str, TablePlan] = {}
    for p in plan.processes:
        where = f"PROCESS {p.name}"
        if p.max_rows < 1:
            errors.append(f"{where}: PRODUCING needs at least 1 row")
        names = [c.name for c in p.schema]
        for c in p.schema:
            if c.name in ENGINE_COLUMNS:
                errors.append(f"{where}: column name {c.name!r} is reserved")
            if names.count(c.name) > 1:
                errors.append(f"{where}: duplicate column {c.name!r}")
            if (c.dtype == "STRING") != isinstance(c.default, str):
                errors.append(f"{where}: default for {c.name!r} does not match {c.dtype}")
        if p.source not in splits:
            if p.source not in {s.name for s in plan.splits}:
                errors.append(f"{where}: unknown chunk set {p.source!r}")
            continue
        s, cam, spec, (a, b) = splits[p.source]
        timeout = p.timeout.value if p.timeout.unit == "sec" else p.timeout.value / cam.fps
        if not timeout > 0:
            errors.append(f"{where}: TIMEOUT must be positive")
        if p.max_rows < 1 or not timeout > 0:
            continue
        times = tuple(cam.start_time + f / cam.fps for f in chunk_starts(a, b, spec))
        scheme = cam.schemes.get(s.region_scheme) if s.region_scheme else None
        meta = TableMeta(cam.camera_id, spec, p.max_rows, times, len(scheme.regions) if scheme else 1,
                         scheme.boundary if scheme else None)
        rho, k = cam.policy_for(s.mask)
        tables[p.name] = TablePlan(p.name, s, p, cam, spec, (a, b), timeout, rho, k, meta,
                                   base_constraints(meta, p.schema, rho, k))

    env = {name: t.constraints for name, t in tables.items()}
    groups = []
    for i, stmt in enumerate(plan.selects, start=1):
        try:
            groups.append(analyze_release(stmt, env, f"S{i}"))
        except PlanError as exc:
            errors.append(f"SELECT S{i}: {exc}")

    epsilons: list[tuple[float, ...]] = []
    if not errors:
        explicit = math.fsum(g.stmt.epsilon * len(g.releases) for g in groups if g.stmt.epsilon is not None)
        implicit = sum(len(g.releases) for g in groups if g.stmt.epsilon is None)
        for i, g in enumerate(groups, start=1):
            if g.stmt.epsilon is not None and not g.stmt.epsilon > 0:
                errors.append(f"SELECT S{i}: CONSUMING must be positive")
        share = (total_epsilon - explicit) / implicit if implicit else 0.0
        if implicit and not share > 0:
            errors.append(f"explicit CONSUMING budgets ({explicit:g}) leave nothing of the total {total_epsilon:g}"
                          " for the remaining releases")
        for g in groups:
            eps = g.stmt.epsilon if g.stmt.epsilon is not None else share
            epsilons.append(tuple(eps for _ in g.releases))
        if not groups:
            errors.append("query has no SELECT")
    if errors:
        raise ValidationError(errors)

    per_camera: dict[str, list[tuple[int, int]]] = {}
    for t in tables.values():
        a, b = t.window
        if b > a:
            per_camera.setdefault(t.camera.camera_id, []).append((a, b - 1))
    reservations = []
    for cam_id, intervals in sorted(per_camera.items()):
        cam = registry[cam_id]
        margin = max(0, math.ceil(cam.policy.rho * cam.fps - 1e-9))
        reservations.extend(Reservation(cam_id, a, b, margin) for a, b in _merge(intervals))
    return ValidatedPlan(plan, tables, tuple(groups), tuple(epsilons), tuple(reservations))


def explain(vplan: ValidatedPlan) -> str:
    lines = []
    for name, t in vplan.tables.items():
        lines.append(f"table {name}: camera={t.camera.camera_id} chunk={t.chunk_spec.chunk_frames}f "
                     f"pitch={t.chunk_spec.pitch_frames}f max_rows={t.meta.max_rows} rho={t.rho:g}s k={t.k} "
                     f"chunks={len(t.meta.chunk_times)} regions={t.meta.n_regions} delta={t.constraints.delta:g}")
    for g, eps in zip(vplan.groups, vplan.epsilons):
        for r, e in zip(g.releases, eps):
            cr = "-" if r.cr is None else f"{r.cr:g}"
            cs = "-" if r.cs is None else f"{r.cs}"
            lines.append(f"{r.release_id}\t{r.agg}\tdelta={r.delta:g}\tcr={cr}\tcs={cs}\tdelta_q={r.delta_q:.6g}"
                         f"\teps={e:.6g}\tb={noise_scale(r.agg, r.delta_q, e):.6g}")
    lines.append(f"eps_q={vplan.eps_q:.6g}")
    return "\n".join(lines)


# ---------------------------------------------------------------- execution

def check_executables(vplan: ValidatedPlan, base_dir: str | Path | None = None) -> None:
    for t in vplan.tables.values():
        resolve_executable(t.process.executable, base_dir)


def _check_streams(vplan: ValidatedPlan, streams) -> None:
    for t in vplan.tables.values():
        cam = t.camera
        stream = streams.get(cam.camera_id)
        if stream is None:
            raise EngineError(f"no trace supplied for camera {cam.camera_id!r}")
        if stream.fps != cam.fps or tuple(stream.grid) != tuple(cam.grid) or stream.start_time != cam.start_time:
            raise EngineError(f"trace for {cam.camera_id!r} does not match its registry entry")


def process_tables(vplan: ValidatedPlan, streams, config: EngineConfig, base_dir=None,
                   baseline: bool = False) -> dict[str, IntermediateTable]:
    """Split and process every table; ``baseline`` uses coarse chunks, no row cap and a long timeout."""
    out = {}
    for name, t in vplan.tables.items():
        stream = streams[t.camera.camera_id]
        spec = baseline_chunk_spec(vplan, t) if baseline else t.chunk_spec
        chunks = split(stream, spec, t.split.begin, t.split.end, t.mask, t.scheme)
        times = None if baseline else t.meta.chunk_times
        out[name] = run_processor(
            chunks, t.process, t.camera.camera_id, spec, times, t.meta.n_regions, t.meta.boundary, base_dir,
            workers=config.workers, pad_to_timeout=config.pad_to_timeout and not baseline,
            timeout=config.baseline_timeout if baseline else t.timeout_sec,
            max_rows=config.baseline_max_rows if baseline else t.meta.max_rows)
    return out


def raw_values(vplan: ValidatedPlan, tables, private: bool = True) -> list[list[ReleaseValue]]:
    out = []
    for g in vplan.groups:
        bound = g.size_bound if private and g.stmt.aggregate.fn in ("AVG", "VAR") else None
        out.append(evaluate(g.stmt, tables, g.prefix, g.keys, bound))
    return out


def noised(vplan: ValidatedPlan, values: list[list[ReleaseValue]], decision: Decision,
           rng: UniformSource) -> list[NoisyRelease]:
    flat_v = [v for group in values for v in group]
    flat_s = [s for g in vplan.groups for s in g.releases]
    flat_e = [e for group in vplan.epsilons for e in group]
    return release(flat_v, flat_s, flat_e, decision, rng)


def _time_exprs(node, found: set) -> None:
    """Collect how the chunk column is used: 'raw', 'hour' or 'day'."""
    if isinstance(node, Call) and node.fn in ("hour", "day") and node.args and node.args[0] == Col("chunk"):
        found.add(node.fn)
        return
    if isinstance(node, Col):
        if node.name == "chunk":
            found.add("raw")
        return
    if isinstance(node, (Lit, str, int, float)) or node is None:
        return
    if isinstance(node, (list, tuple)):
        for x in node:
            _time_exprs(x, found)
        return
    if hasattr(node, "__dataclass_fields__"):
        for f in node.__dataclass_fields__:
            if f != "keys":
                _time_exprs(getattr(node, f), found)


def baseline_chunk_spec(vplan: ValidatedPlan, t: TablePlan) -> ChunkSpec:
    """One chunk per time bin the query reads (hour or day), else one chunk spanning the window."""
    used: set = set()
    for g in vplan.groups:
        _time_exprs(g.stmt, used)
    fps = t.chunk_spec.fps
    if "raw" in used:
        return t.chunk_spec
    if "hour" in used:
        frames = 3600 * fps
    elif "day" in used:
        frames = 86400 * fps
    else:
        frames = max(1, t.window[1] - t.window[0])
    return ChunkSpec(frames, frames, fps)


@dataclass
class ReleaseRecord:
    release_id: str
    key: tuple | None
    value: float | str
    noise_scale: float
    epsilon: float
    raw: float | str | None = None
    baseline: float | str | None = None
    belt: tuple[float, float] | None = None
    accuracy: float | None = None

    def to_record(self, experiment: bool = False) -> dict:
        rec = {"release_id": self.release_id, "key": list(self.key) if self.key is not None else None,
               "value": self.value, "noise_scale": self.noise_scale, "epsilon": self.epsilon}
        if experiment:
            rec.update(raw=self.raw, baseline=self.baseline,
                       belt=list(self.belt) if self.belt else None, accuracy=self.accuracy)
        return rec


@dataclass
class QueryReport:
    query_id: str
    eps_q: float
    releases: list[ReleaseRecord]
    failures: dict = field(default_factory=dict)  # table -> number of chunks that timed out or crashed

    def lines(self, experiment: bool = False) -> list[str]:
        return [json.dumps(r.to_record(experiment)) for r in self.releases]

    def summary(self, experiment: bool = False) -> str:
        out = [f"query {self.query_id}: {len(self.releases)} release(s), eps_q={self.eps_q:.6g}"]
        for r in self.releases:
            v = f"{r.value:.4f}" if isinstance(r.value, float) else str(r.value)
            line = f"  {r.release_id:<24} {v:>14}  b={r.noise_scale:.4g}"
            if experiment and r.belt is not None:
                line += f"  raw={r.raw:.4f} belt=[{r.belt[0]:.4f}, {r.belt[1]:.4f}]"
                if r.baseline is not None:
                    line += f" baseline={r.baseline:.4f} acc={r.accuracy:.3f}"
            out.append(line)
        for name, n in self.failures.items():
            out.append(f"  table {name}: {n} chunk(s) fell back to default rows")
        return "\n".join(out)


def accuracy(value: float, baseline: float) -> float:
    return 1.0 - abs(value - baseline) / max(abs(baseline), 1.0)


def _display_raw(v: ReleaseValue):
    if v.scores is not None:
        return v.scores[int(v.raw)][0]
    return v.raw


def build_report(query_id: str, vplan: ValidatedPlan, values, noisy: list[NoisyRelease], tables,
                 baseline_values=None) -> QueryReport:
    flat_v = [v for group in values for v in group]
    flat_b = [v for group in baseline_values for v in group] if baseline_values is not None else None
    records = []
    for i, (v, n) in enumerate(zip(flat_v, noisy)):
        raw = _display_raw(v)
        belt = None if v.scores is not None else (v.raw - n.noise_scale * BELT_FACTOR,
                                                   v.raw + n.noise_scale * BELT_FACTOR)
        base = acc = None
        if flat_b is not None:
            base = _display_raw(flat_b[i])
            if v.scores is not None:
                acc = 1.0 if base == n.value else 0.0
            else:
                acc = accuracy(n.value, base)
        records.append(ReleaseRecord(n.release_id, n.key, n.value, n.noise_scale, n.epsilon, raw, base, belt, acc))
    failures = {name: len(t.failures) for name, t in tables.items() if t.failures}
    return QueryReport(query_id, vplan.eps_q, records, failures)


def make_rng(seed: int | None) -> UniformSource:
    return deployment_rng() if seed is None else random.Random(seed)


def run_query(vplan: ValidatedPlan, store: LedgerStore, streams, config: EngineConfig | None = None,
              base_dir=None, experiment: bool = False, rng: UniformSource | None = None,
              query_id: str | None = None) -> QueryReport:
    """Admission, split, process, evaluate, noise, report.  Nothing runs if the budget is denied."""
    config = config or EngineConfig()
    check_executables(vplan, base_dir)
    _check_streams(vplan, streams)
    query_id = query_id or uuid.uuid4().hex[:12]
    decision = store.check_and_reserve(query_id, vplan.reservations, vplan.eps_q)
    if decision is not Decision.ACCEPT:
        raise BudgetDenied(f"insufficient budget for eps_q={vplan.eps_q:.6g}")
    tables = process_tables(vplan, streams, config, base_dir)
    values = raw_values(vplan, tables)
    noisy = noised(vplan, values, decision, rng or make_rng(config.seed))
    baseline = None
    if experiment:
        base_tables = process_tables(vplan, streams, config, base_dir, baseline=True)
        baseline = raw_values(vplan, base_tables, private=False)
    return build_report(query_id, vplan, values, noisy, tables, baseline)


def submit(text: str, registry: CameraRegistry, streams, config: EngineConfig | None = None, **kwargs) -> QueryReport:
    config = config or EngineConfig()
    vplan = validate(parse_query(text), registry, config.total_epsilon)
    store = LedgerStore(config.ledger_dir, {c: r.policy.epsilon for c, r in registry.items()})
    return run_query(vplan, store, streams, config, **kwargs)


# ---------------------------------------------------------------- sweeps

def _scale_ranges(node, hi: float):
    """Copy of ``node`` with every range(x, lo, u) upper bound replaced by ``hi``."""
    if isinstance(node, Call):
        args = tuple(_scale_ranges(a, hi) for a in node.args)
        if node.fn == "range" and len(args) == 3:
            args = (args[0], args[1], Lit(float(hi)))
        return Call(node.fn, args)
    if isinstance(node, (Col, Lit)) or node is None:
        return node
    if isinstance(node, tuple):
        return tuple(_scale_ranges(x, hi) for x in node)
    if isinstance(node, (Agg, Unary, Binary, SubSelect, SelectStmt, Join, Union_, TableRef)) or \
            hasattr(node, "__dataclass_fields__"):
        changes = {f: _scale_ranges(getattr(node, f), hi) for f in node.__dataclass_fields__
                   if f not in ("keys", "on")}
        return replace(node, **changes)
    return node


def with_param(plan: QueryPlan, param: str, value: float) -> QueryPlan:
    """Plan variant for one sweep point: chunk seconds, range upper bound, or window seconds."""
    stmts = []
    for s in plan.statements:
        if isinstance(s, SplitStmt) and param == "chunk":
            s = replace(s, chunk=Duration(float(value), "sec"))
        elif isinstance(s, SplitStmt) and param == "window":
            s = replace(s, end=s.begin + float(value))
        elif isinstance(s, SelectStmt) and param == "range":
            s = _scale_ranges(s, value)
        stmts.append(s)
    if param not in ("chunk", "range", "window"):
        raise ValueError(f"unknown sweep parameter {param!r}")
    return QueryPlan(tuple(stmts))


@dataclass
class SweepPoint:
    param: str
    value: float
    noise_scales: list[float]
    raw: list[float]
    baseline: list[float] | None
    rmse: float  # root mean squared noise over releases and repetitions
    relative_rmse: float  # rmse divided by the mean |raw| value

    def to_record(self) -> dict:
        return asdict(self)


def run_sweep(text: str, registry: CameraRegistry, streams, param: str, values: Sequence[float],
              repetitions: int = 100, seed: int = 0, config: EngineConfig | None = None, base_dir=None,
              with_baseline: bool = False) -> list[SweepPoint]:
    """Noise-only error curves; every point reuses the same noise seeds so only the scale differs."""
    config = config or EngineConfig()
    plan = parse_query(text)
    out = []
    for value in values:
        vplan = validate(with_param(plan, param, value), registry, config.total_epsilon)
        check_executables(vplan, base_dir)
        _check_streams(vplan, streams)
        tables = process_tables(vplan, streams, config, base_dir)
        vals = raw_values(vplan, tables)
        flat = [v for group in vals for v in group]
        if any(v.scores is not None for v in flat):
            raise ValueError("sweeps support numeric releases only")
        sq = []
        scales = []
        for rep in range(repetitions):
            noisy = noised(vplan, vals, Decision.ACCEPT, random.Random(seed + rep))
            scales = [n.noise_scale for n in noisy]
            sq.extend((n.value - v.raw) ** 2 for n, v in zip(noisy, flat))
        rmse = math.sqrt(math.fsum(sq) / len(sq)) if sq else 0.0
        mean_raw = math.fsum(abs(v.raw) for v in flat) / len(flat) if flat else 0.0
        baseline = None
        if with_baseline:
            base = raw_values(vplan, process_tables(vplan, streams, config, base_dir, baseline=True), private=False)
            baseline = [v.raw for group in base for v in group]
        out.append(SweepPoint(param, float(value), scales, [v.raw for v in flat], baseline, rmse,
                              rmse / mean_raw if mean_raw > 0 else math.inf))
    return out
