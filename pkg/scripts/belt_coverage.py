"""How often the 99% belt around the raw value contains the noised release, for hourly counts.

    python3 scripts/belt_coverage.py --hours 3 --draws 10000
"""
import argparse
import json
import random
from dataclasses import asdict, dataclass

from durpriv.engine import EngineConfig, build_report, noised, process_tables, raw_values, validate
from durpriv.owner import CameraRegistry, estimate_policy, register_camera
from durpriv.privacy import Decision
from durpriv.query import parse_query
from durpriv.scenes import SceneConfig, gen_scene
from durpriv.trace import Policy

QUERY = """
SPLIT cam0 BEGIN 0 END {end} BY TIME 600sec STRIDE 0sec INTO chunks;
PROCESS chunks USING count_entries.py TIMEOUT 5sec PRODUCING 1 ROWS WITH SCHEMA (n:NUMBER=0) INTO counts;
SELECT hour(chunk), SUM(range(n, 0, 20)) FROM counts GROUP BY hour(chunk);
"""


@dataclass
class BeltConfig:
    hours: int = 3
    draws: int = 10_000
    arrivals_per_hour: float = 60.0
    seed: int = 0


def run(cfg: BeltConfig) -> list[dict]:
    stream = gen_scene(SceneConfig(duration_sec=cfg.hours * 3600, arrival_rate=cfg.arrivals_per_hour / 3600,
                                   seed=cfg.seed))
    registry = CameraRegistry()
    register_camera(registry, stream, Policy(*estimate_policy(stream), 1.0))
    vplan = validate(parse_query(QUERY.format(end=cfg.hours * 3600)), registry)
    values = raw_values(vplan, process_tables(vplan, {"cam0": stream}, EngineConfig()))
    rng = random.Random(cfg.seed)
    inside = None
    for _ in range(cfg.draws):
        recs = build_report("belt", vplan, values, noised(vplan, values, Decision.ACCEPT, rng), {}).releases
        hits = [r.belt[0] <= r.value <= r.belt[1] for r in recs]
        inside = hits if inside is None else [a + b for a, b in zip(inside, hits)]
    return [{"release_id": r.release_id, "raw": r.raw, "noise_scale": r.noise_scale, "belt": list(r.belt),
             "coverage": n / cfg.draws} for r, n in zip(recs, inside)]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--hours", type=int, default=3)
    ap.add_argument("--draws", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = BeltConfig(args.hours, args.draws, seed=args.seed)
    print(json.dumps({"config": asdict(cfg)}))
    for row in run(cfg):
        print(json.dumps(row))


if __name__ == "__main__":
    main()
