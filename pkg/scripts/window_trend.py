"""Relative error of an hourly-average query as the window grows, on a fixed-rate synthetic scene.

    python3 scripts/window_trend.py --hours 3 6 12 24 --reps 100
"""
import argparse
import json
from dataclasses import asdict, dataclass, field

from durpriv.engine import run_sweep
from durpriv.owner import CameraRegistry, estimate_policy, register_camera
from durpriv.scenes import SceneConfig, gen_scene
from durpriv.trace import Policy

QUERY = """
SPLIT cam0 BEGIN 0 END 3600 BY TIME 600sec STRIDE 0sec INTO chunks;
PROCESS chunks USING count_entries.py TIMEOUT 5sec PRODUCING 1 ROWS WITH SCHEMA (n:NUMBER=0) INTO counts;
SELECT AVG(range(c, 0, 120)) FROM
    (SELECT hour(chunk) AS h, SUM(range(n, 0, 20)) AS c FROM counts GROUP BY hour(chunk));
"""


@dataclass
class WindowTrendConfig:
    hours: list[int] = field(default_factory=lambda: [3, 6, 12, 24])
    arrivals_per_hour: float = 60.0
    reps: int = 100
    seed: int = 0


def run(cfg: WindowTrendConfig) -> list[dict]:
    scene = SceneConfig(duration_sec=max(cfg.hours) * 3600, arrival_rate=cfg.arrivals_per_hour / 3600,
                        arrivals="fixed", dwell_min=20, dwell_max=40, seed=cfg.seed)
    stream = gen_scene(scene)
    registry = CameraRegistry()
    rho, k = estimate_policy(stream)
    register_camera(registry, stream, Policy(rho, k, 1.0))
    points = run_sweep(QUERY, registry, {"cam0": stream}, "window", [h * 3600 for h in cfg.hours],
                       repetitions=cfg.reps, seed=cfg.seed)
    return [dict(hours=h, rho=rho, k=k, **p.to_record()) for h, p in zip(cfg.hours, points)]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--hours", type=int, nargs="+", default=WindowTrendConfig().hours)
    ap.add_argument("--rate", type=float, default=60.0, help="arrivals per hour")
    ap.add_argument("--reps", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = WindowTrendConfig(args.hours, args.rate, args.reps, args.seed)
    print(json.dumps({"config": asdict(cfg)}))
    for row in run(cfg):
        print(json.dumps(row))


if __name__ == "__main__":
    main()
