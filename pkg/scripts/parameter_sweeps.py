"""Noise scale and error against chunk length and value range for a per-chunk average.

    python3 scripts/parameter_sweeps.py --chunks 30 60 120 300 --ranges 5 10 20 40
"""
import argparse
import json
from dataclasses import asdict, dataclass, field

from durpriv.engine import run_sweep
from durpriv.owner import CameraRegistry, estimate_policy, register_camera
from durpriv.scenes import SceneConfig, gen_scene
from durpriv.trace import Policy

QUERY = """
SPLIT cam0 BEGIN 0 END {window} BY TIME 60sec STRIDE 0sec INTO chunks;
PROCESS chunks USING count_entries.py TIMEOUT 5sec PRODUCING 1 ROWS WITH SCHEMA (n:NUMBER=0) INTO counts;
SELECT AVG(range(n, 0, 10)) FROM counts;
"""


@dataclass
class SweepConfig:
    chunks: list[float] = field(default_factory=lambda: [30, 60, 120, 300])
    ranges: list[float] = field(default_factory=lambda: [5, 10, 20, 40])
    window_sec: int = 3600
    arrivals_per_hour: float = 60.0
    reps: int = 100
    seed: int = 0


def run(cfg: SweepConfig) -> list[dict]:
    stream = gen_scene(SceneConfig(duration_sec=cfg.window_sec, arrival_rate=cfg.arrivals_per_hour / 3600,
                                   seed=cfg.seed))
    registry = CameraRegistry()
    register_camera(registry, stream, Policy(*estimate_policy(stream), 1.0))
    text = QUERY.format(window=cfg.window_sec)
    out = []
    for param, values in (("chunk", cfg.chunks), ("range", cfg.ranges)):
        for p in run_sweep(text, registry, {"cam0": stream}, param, values, cfg.reps, cfg.seed, with_baseline=True):
            out.append(p.to_record())
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--chunks", type=float, nargs="+", default=SweepConfig().chunks)
    ap.add_argument("--ranges", type=float, nargs="+", default=SweepConfig().ranges)
    ap.add_argument("--window", type=int, default=3600)
    ap.add_argument("--reps", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = SweepConfig(args.chunks, args.ranges, args.window, reps=args.reps, seed=args.seed)
    print(json.dumps({"config": asdict(cfg)}))
    for row in run(cfg):
        print(json.dumps(row))


if __name__ == "__main__":
    main()
