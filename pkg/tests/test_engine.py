import json
import math
import re

import pytest

from builders import FIXTURES, registry_for
from durpriv import cli
from durpriv.engine import (BELT_FACTOR, BudgetDenied, EngineConfig, EngineError, accuracy, baseline_chunk_spec,
                            explain, run_query, run_sweep, submit, validate)
from durpriv.owner import CameraRegistry, estimate_policy
from durpriv.privacy import LedgerStore
from durpriv.processing import ProcessorMissing
from durpriv.query import parse_query, parse_timestamp
from durpriv.scenes import SceneConfig, gen_scene
from durpriv.trace import save_trace

HOURLY = """
SPLIT cam0 BEGIN 0 END {end} BY TIME 600sec STRIDE 0sec INTO chunks;
PROCESS chunks USING count_entries.py TIMEOUT 5sec PRODUCING 1 ROWS WITH SCHEMA (n:NUMBER=0) INTO counts;
SELECT hour(chunk), SUM(range(n, 0, 20)) FROM counts GROUP BY hour(chunk);
"""

CHUNK_AVG = """
SPLIT cam0 BEGIN 0 END 1800 BY TIME 60sec STRIDE 0sec INTO chunks;
PROCESS chunks USING count_entries.py TIMEOUT 5sec PRODUCING 1 ROWS WITH SCHEMA (n:NUMBER=0) INTO counts;
SELECT AVG(range(n, 0, 10)) FROM counts;
"""


@pytest.fixture(scope="module")
def people():
    stream = gen_scene(SceneConfig(duration_sec=3 * 3600, arrival_rate=1 / 60, dwell_max=60, seed=4))
    rho, k = estimate_policy(stream)
    return stream, registry_for(stream, rho, k)


@pytest.fixture(scope="module")
def cars():
    start = parse_timestamp("12-01-2020/12:00am")
    stream = gen_scene(SceneConfig(duration_sec=300, arrival_rate=1 / 10, dwell_max=30, car_fraction=1.0,
                                   camera_id="camA", start_time=start, seed=8))
    return stream, registry_for(stream, 30, 1)


def _listing():
    text = (FIXTURES / "queries" / "listing1.query").read_text()
    text = text.replace("END 01-01-2021/12:00am", "END 12-01-2020/12:05am")
    return text.replace("model.py", "cars.py")


def test_hourly_counts_come_with_belts(people, tmp_path):
    stream, reg = people
    cfg = EngineConfig(ledger_dir=str(tmp_path), seed=1)
    report = submit(HOURLY.format(end=3 * 3600), reg, {"cam0": stream}, cfg, experiment=True)
    assert [r.key for r in report.releases] == [(0.0,), (1.0,), (2.0,)]
    for r in report.releases:
        assert r.belt == pytest.approx((r.raw - r.noise_scale * BELT_FACTOR, r.raw + r.noise_scale * BELT_FACTOR))
        # the baseline reads one hour-long chunk, so the whole hour is clamped as a single row
        assert r.baseline <= 20 <= r.raw
        assert r.accuracy == pytest.approx(accuracy(r.value, r.baseline))
    # hourly entry counts of a one-per-minute scene
    assert 120 <= sum(r.raw for r in report.releases) <= 240


def test_listing_on_a_car_scene(cars, tmp_path):
    stream, reg = cars
    cfg = EngineConfig(ledger_dir=str(tmp_path), seed=2)
    report = submit(_listing(), reg, {"camA": stream}, cfg)
    assert [r.release_id for r in report.releases] == ["S1", "S2[RED]", "S2[WHITE]", "S2[SILVER]"]
    assert report.eps_q == pytest.approx(1.0)
    assert all(r.epsilon == pytest.approx(0.25) for r in report.releases)
    for line in report.lines():
        rec = json.loads(line)
        assert set(rec) == {"release_id", "key", "value", "noise_scale", "epsilon"}
    assert "raw" not in report.summary()


def test_explain_matches_the_report(cars, tmp_path):
    stream, reg = cars
    text = _listing()
    vplan = validate(parse_query(text), reg)
    scales = [float(m) for m in re.findall(r"\tb=([0-9.e+-]+)", explain(vplan))]
    report = submit(text, reg, {"camA": stream}, EngineConfig(ledger_dir=str(tmp_path), seed=3))
    assert scales == pytest.approx([r.noise_scale for r in report.releases], rel=1e-5)
    # 300 s of 5 s chunks: AVG divides by the 60 x 10 possible rows
    assert vplan.groups[0].size_bound == 600


def test_budget_runs_out(people, tmp_path):
    stream, reg = people
    cfg = EngineConfig(ledger_dir=str(tmp_path), seed=1)
    text = HOURLY.format(end=3600)
    submit(text, reg, {"cam0": stream}, cfg)
    with pytest.raises(BudgetDenied):
        submit(text, reg, {"cam0": stream}, cfg)
    # a disjoint window far enough away still has budget
    later = text.replace("BEGIN 0 END 3600", "BEGIN 7200 END 9000")
    assert len(submit(later, reg, {"cam0": stream}, cfg).releases) == 1


def test_nothing_is_charged_when_the_executable_is_missing(people, tmp_path):
    stream, reg = people
    store = LedgerStore(tmp_path, {"cam0": 1.0})
    vplan = validate(parse_query(HOURLY.format(end=3600).replace("count_entries.py", "absent.py")), reg)
    with pytest.raises(ProcessorMissing):
        run_query(vplan, store, {"cam0": stream})
    assert (tmp_path / LedgerStore.JOURNAL).read_text() == ""


def test_trace_must_match_the_registry(people, tmp_path):
    stream, reg = people
    vplan = validate(parse_query(HOURLY.format(end=3600)), reg)
    store = LedgerStore(tmp_path, {"cam0": 1.0})
    with pytest.raises(EngineError):
        run_query(vplan, store, {})
    other = gen_scene(SceneConfig(duration_sec=60, fps=2))
    with pytest.raises(EngineError):
        run_query(vplan, store, {"cam0": other})


def test_baseline_chunking_follows_the_time_bins(people):
    _, reg = people
    vplan = validate(parse_query(HOURLY.format(end=3 * 3600)), reg)
    assert baseline_chunk_spec(vplan, vplan.tables["counts"]).chunk_frames == 3600
    whole = validate(parse_query(CHUNK_AVG), reg)
    assert baseline_chunk_spec(whole, whole.tables["counts"]).chunk_frames == 1800


def test_coarser_chunks_mean_more_noise_for_a_chunk_average(people):
    stream, reg = people
    points = run_sweep(CHUNK_AVG, reg, {"cam0": stream}, "chunk", [60, 120, 300], repetitions=20)
    scales = [p.noise_scales[0] for p in points]
    assert scales == sorted(scales) and scales[0] < scales[-1]


def test_doubling_the_range_doubles_the_noise(people):
    stream, reg = people
    points = run_sweep(CHUNK_AVG, reg, {"cam0": stream}, "range", [5, 10], repetitions=50, seed=9)
    assert points[1].noise_scales[0] == pytest.approx(2 * points[0].noise_scales[0])
    # same noise seeds, so the error scales exactly with the noise
    assert points[1].rmse == pytest.approx(2 * points[0].rmse)
    with pytest.raises(ValueError):
        run_sweep(CHUNK_AVG, reg, {"cam0": stream}, "fps", [1])


def test_config_file(tmp_path):
    path = tmp_path / "engine.json"
    path.write_text(json.dumps({"total_epsilon": 2.0, "workers": 2}))
    assert EngineConfig.load(path).total_epsilon == 2.0
    path.write_text(json.dumps({"nonsense": 1}))
    with pytest.raises(ValueError):
        EngineConfig.load(path)


# ---------------------------------------------------------------- command line

@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.LEDGER_ENV, str(tmp_path / "ledger"))
    monkeypatch.chdir(tmp_path)
    return tmp_path


def _run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_end_to_end(workspace, capsys):
    trace, reg = workspace / "cam0.jsonl", workspace / "registry.jsonl"
    code, out, _ = _run(capsys, "gen-scene", "--out", trace, "--duration", 3600, "--rate", 1 / 60, "--seed", 3)
    assert code == 0 and "3600 frames" in out
    code, out, _ = _run(capsys, "register-camera", "--trace", trace, "--registry", reg, "--regions", 2)
    assert code == 0 and json.loads(out)["region_schemes"][0]["scheme_id"] == "bands2-hard"
    code, out, _ = _run(capsys, "estimate-policy", "--trace", trace)
    assert code == 0 and json.loads(out)["k"] >= 1
    code, out, _ = _run(capsys, "gen-masks", "--trace", trace, "--registry", reg, "--steps", 3, "--publish", "1,2")
    assert code == 0 and "published ladder-2" in out
    assert set(CameraRegistry.load(reg)["cam0"].masks) == {"ladder-1", "ladder-2"}

    query = workspace / "q.query"
    query.write_text(HOURLY.format(end=3600))
    code, out, _ = _run(capsys, "submit-query", "--query", query, "--registry", reg, "--explain")
    assert code == 0 and "eps_q=1" in out
    code, out, err = _run(capsys, "submit-query", "--query", query, "--trace", trace, "--registry", reg,
                          "--seed", 1)
    assert code == 0 and len(out.strip().splitlines()) == 1 and "eps_q=1" in err
    code, _, err = _run(capsys, "submit-query", "--query", query, "--trace", trace, "--registry", reg)
    assert code == 3 and "denied" in err
    code, out, _ = _run(capsys, "budget", "status", "--camera", "cam0", "--registry", reg, "--to", 3599)
    assert code == 0 and json.loads(out)["min_remaining"] == pytest.approx(0.0)

    bad = workspace / "bad.query"
    bad.write_text("SELECT plate FROM t")
    assert _run(capsys, "submit-query", "--query", bad, "--registry", reg)[0] == 2
    missing = workspace / "missing.query"
    missing.write_text(HOURLY.format(end=3600).replace("count_entries.py", "absent.py")
                       .replace("BEGIN 0 END 3600", "BEGIN 0 END 60"))
    assert _run(capsys, "submit-query", "--query", missing, "--trace", trace, "--registry", reg)[0] == 4
    assert _run(capsys, "budget", "status", "--camera", "nobody", "--registry", reg)[0] == 1


def test_cli_sweep(workspace, capsys):
    trace, reg = workspace / "cam0.jsonl", workspace / "registry.jsonl"
    stream = gen_scene(SceneConfig(duration_sec=1800, arrival_rate=1 / 60, seed=5))
    save_trace(stream, trace)
    assert _run(capsys, "register-camera", "--trace", trace, "--registry", reg)[0] == 0
    query = workspace / "avg.query"
    query.write_text(CHUNK_AVG)
    code, out, _ = _run(capsys, "sweep", "--param", "range", "--values", "5,10", "--query", query, "--trace", trace,
                        "--registry", reg, "--reps", 5)
    assert code == 0
    points = [json.loads(line) for line in out.strip().splitlines()]
    assert points[1]["noise_scales"][0] == pytest.approx(2 * points[0]["noise_scales"][0])
    assert all(math.isfinite(p["rmse"]) for p in points)
