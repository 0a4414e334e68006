"""Command-line entry point: owner tooling, query submission, budget status and sweeps."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .chunking import column_bands
from .engine import (BudgetDenied, EngineConfig, EngineError, ValidationError, explain, run_query, run_sweep,
                     validate)
from .owner import (CameraRegistry, add_ladder_masks, add_region_scheme, estimate_policy, mask_ladder,
                    policy_for_mask, register_camera)
from .privacy import LedgerStore
from .processing import ProcessorMissing
from .query import ParseError, parse_query
from .scenes import SceneConfig, gen_scene
from .trace import Policy, TraceFormatError, load_trace, save_trace

LEDGER_ENV = "DURPRIV_LEDGER_DIR"
DEFAULT_REGISTRY = "registry.jsonl"
DEFAULT_LEDGER = ".durpriv-ledger"

EXIT_OK, EXIT_ERROR, EXIT_INVALID, EXIT_DENIED, EXIT_MISSING = 0, 1, 2, 3, 4


def _config(args) -> EngineConfig:
    cfg = EngineConfig.load(args.config) if getattr(args, "config", None) else EngineConfig()
    overrides = {}
    if getattr(args, "registry", None):
        overrides["registry"] = args.registry
    if getattr(args, "ledger_dir", None):
        overrides["ledger_dir"] = args.ledger_dir
    for name in ("workers", "seed", "total_epsilon"):
        if getattr(args, name, None) is not None:
            overrides[name] = getattr(args, name)
    if getattr(args, "pad_to_timeout", False):
        overrides["pad_to_timeout"] = True
    cfg = replace(cfg, **overrides)
    if cfg.ledger_dir is None:
        cfg.ledger_dir = os.environ.get(LEDGER_ENV, DEFAULT_LEDGER)
    if cfg.registry is None:
        cfg.registry = DEFAULT_REGISTRY
    return cfg


def cmd_gen_scene(args) -> int:
    params = json.loads(Path(args.config).read_text()) if args.config else {}
    for key in ("duration_sec", "fps", "arrival_rate", "arrivals", "dwell_max", "dwell_dist", "n_parked",
                "camera_id", "start_time", "seed"):
        value = getattr(args, key)
        if value is not None:
            params[key] = value
    stream = gen_scene(SceneConfig(**params))
    save_trace(stream, args.out)
    n = len({d.entity_id for f in stream.frames for d in f.detections})
    print(f"wrote {args.out}: {len(stream)} frames, {n} entities")
    return EXIT_OK


def cmd_estimate_policy(args) -> int:
    stream = load_trace(args.trace)
    mask = None
    if args.mask:
        rec = CameraRegistry.load(args.registry)[stream.camera_id]
        mask = rec.masks[args.mask].mask
    rho, k = policy_for_mask(stream, mask, args.safety, args.exclude_parked)
    print(json.dumps({"camera_id": stream.camera_id, "rho": rho, "k": k}))
    return EXIT_OK


def cmd_register_camera(args) -> int:
    stream = load_trace(args.trace)
    if args.rho is not None and args.k is not None:
        rho, k = args.rho, args.k
    else:
        rho, k = estimate_policy(stream, args.safety, args.exclude_parked)
    registry = CameraRegistry.load(args.registry)
    rec = register_camera(registry, stream, Policy(rho, k, args.epsilon))
    if args.regions:
        scheme = column_bands(args.scheme_id or f"bands{args.regions}-{args.boundary}", stream.grid,
                              args.regions, args.boundary)
        add_region_scheme(rec, scheme)
    registry.save(args.registry)
    print(json.dumps(rec.to_record()))
    return EXIT_OK


def cmd_gen_masks(args) -> int:
    stream = load_trace(args.trace)
    ladder = mask_ladder(stream, args.threshold, args.steps)
    for i, step in enumerate(ladder, start=1):
        print(f"{i}\t{step.cell[0]},{step.cell[1]}\t{step.max_persistence_after}\t{step.identities_retained:.4f}")
    if args.publish:
        registry = CameraRegistry.load(args.registry)
        if stream.camera_id not in registry:
            print(f"camera {stream.camera_id!r} is not registered", file=sys.stderr)
            return EXIT_ERROR
        sizes = [int(x) for x in args.publish.split(",") if x.strip()]
        added = add_ladder_masks(registry[stream.camera_id], stream, ladder, sizes, args.threshold,
                                 args.safety, args.exclude_parked)
        registry.save(args.registry)
        for entry in added:
            print(f"published {entry.mask.mask_id}: {len(entry.mask.cells)} cells, rho={entry.rho:g}s k={entry.k}")
    return EXIT_OK


def _streams(paths):
    streams = {}
    for p in paths:
        s = load_trace(p)
        streams[s.camera_id] = s
    return streams


def cmd_submit_query(args) -> int:
    cfg = _config(args)
    registry = CameraRegistry.load(cfg.registry)
    text = Path(args.query).read_text(encoding="utf-8")
    vplan = validate(parse_query(text), registry, cfg.total_epsilon)
    if args.explain:
        print(explain(vplan))
        return EXIT_OK
    store = LedgerStore(cfg.ledger_dir, {c: r.policy.epsilon for c, r in registry.items()})
    report = run_query(vplan, store, _streams(args.trace), cfg, base_dir=Path(args.query).parent,
                       experiment=args.experiment, query_id=args.query_id)
    for line in report.lines(args.experiment):
        print(line)
    print(report.summary(args.experiment), file=sys.stderr)
    return EXIT_OK


def cmd_budget_status(args) -> int:
    cfg = _config(args)
    registry = CameraRegistry.load(cfg.registry)
    if args.camera not in registry:
        print(f"unknown camera {args.camera!r}", file=sys.stderr)
        return EXIT_ERROR
    store = LedgerStore(cfg.ledger_dir, {c: r.policy.epsilon for c, r in registry.items()})
    led = store.ledger(args.camera)
    state = led.state()
    first = args.first if args.first is not None else 0
    last = args.last if args.last is not None else max(len(state) - 1, 0)
    rem = led.remaining(first, last)
    lo = float(rem.min()) if len(rem) else led.epsilon
    hi = float(rem.max()) if len(rem) else led.epsilon
    print(json.dumps({"camera_id": args.camera, "epsilon": led.epsilon, "first_frame": first, "last_frame": last,
                      "min_remaining": lo, "max_remaining": hi}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    registry = CameraRegistry.load(cfg.registry)
    text = Path(args.query).read_text(encoding="utf-8")
    values = [float(v) for v in args.values.split(",")]
    points = run_sweep(text, registry, _streams(args.trace), args.param, values, args.reps, args.seed or 0, cfg,
                       base_dir=Path(args.query).parent, with_baseline=args.baseline)
    for p in points:
        print(json.dumps(p.to_record()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="durpriv", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="write a synthetic trace")
    p.add_argument("--config", help="JSON file of scene parameters")
    p.add_argument("--out", required=True)
    p.add_argument("--duration", dest="duration_sec", type=float)
    p.add_argument("--fps", type=int)
    p.add_argument("--rate", dest="arrival_rate", type=float, help="arrivals per second")
    p.add_argument("--arrivals", choices=("poisson", "fixed"))
    p.add_argument("--dwell-max", type=float)
    p.add_argument("--dwell-dist", choices=("uniform", "pareto"))
    p.add_argument("--parked", dest="n_parked", type=int)
    p.add_argument("--camera", dest="camera_id")
    p.add_argument("--start-time", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("estimate-policy", help="(rho, k) covering every entity in a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--safety", type=float, default=1.0)
    p.add_argument("--exclude-parked", action="store_true")
    p.add_argument("--mask", help="published mask id to apply first")
    p.add_argument("--registry", default=DEFAULT_REGISTRY)
    p.set_defaults(func=cmd_estimate_policy)

    p = sub.add_parser("register-camera", help="add or update a camera in the registry")
    p.add_argument("--trace", required=True)
    p.add_argument("--registry", default=DEFAULT_REGISTRY)
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--rho", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--safety", type=float, default=1.0)
    p.add_argument("--exclude-parked", action="store_true")
    p.add_argument("--regions", type=int, help="publish a scheme of this many vertical bands")
    p.add_argument("--boundary", choices=("hard", "soft"), default="hard")
    p.add_argument("--scheme-id")
    p.set_defaults(func=cmd_register_camera)

    p = sub.add_parser("gen-masks", help="compute the mask ladder and optionally publish prefixes")
    p.add_argument("--trace", required=True)
    p.add_argument("--registry", default=DEFAULT_REGISTRY)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--steps", type=int)
    p.add_argument("--publish", help="comma-separated prefix sizes to publish as masks")
    p.add_argument("--safety", type=float, default=1.0)
    p.add_argument("--exclude-parked", action="store_true")
    p.set_defaults(func=cmd_gen_masks)

    def engine_flags(p):
        p.add_argument("--registry")
        p.add_argument("--config", help="JSON engine config")
        p.add_argument("--ledger-dir", help=f"overrides ${LEDGER_ENV}")
        p.add_argument("--workers", type=int)
        p.add_argument("--seed", type=int, help="seeded noise (testing only)")
        p.add_argument("--total-epsilon", type=float)

    p = sub.add_parser("submit-query", help="run a query under the privacy policy")
    p.add_argument("--query", required=True)
    p.add_argument("--trace", action="append", default=[])
    p.add_argument("--explain", action="store_true", help="print sensitivities and exit without running")
    p.add_argument("--pad-to-timeout", action="store_true")
    p.add_argument("--experiment", action="store_true", help="also report raw values, belts and baseline")
    p.add_argument("--query-id")
    engine_flags(p)
    p.set_defaults(func=cmd_submit_query)

    p = sub.add_parser("budget", help="privacy budget ledger")
    bsub = p.add_subparsers(dest="budget_command", required=True)
    s = bsub.add_parser("status")
    s.add_argument("--camera", required=True)
    s.add_argument("--from", dest="first", type=int)
    s.add_argument("--to", dest="last", type=int)
    engine_flags(s)
    s.set_defaults(func=cmd_budget_status)

    p = sub.add_parser("sweep", help="noise error as one query parameter varies")
    p.add_argument("--param", choices=("chunk", "range", "window"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values (seconds, or range upper bound)")
    p.add_argument("--query", required=True)
    p.add_argument("--trace", action="append", default=[])
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--baseline", action="store_true")
    engine_flags(p)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ParseError, ValidationError) as exc:
        print(f"invalid query: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except BudgetDenied as exc:
        print(f"denied: {exc}", file=sys.stderr)
        return EXIT_DENIED
    except ProcessorMissing as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (EngineError, TraceFormatError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
