import csv
import json
import math
from pathlib import Path

import pytest

from citybem import cli, pipeline
from citybem.config import ConfigError, load_config
from citybem.partition import PartitionPlan
from citybem.pipeline import (BenchReport, PipelineError, RunRecord, StageTimings, bench_scaling,
                              emit_report, load_report, physical_cores, run_pipeline, timings_ok)
from synthetic import write_district


def output_bytes(out: Path) -> dict[str, bytes]:
    """Every numerical output of a run, keyed by relative path."""
    files = sorted((out / "buildings").glob("*.csv")) + [out / "summary.json"]
    files += [p for p in [out / "buildings_all.csv"] if p.exists()]
    return {str(p.relative_to(out)): p.read_bytes() for p in files}


def test_single_building_smoke(tmp_path):
    cfg = write_district(tmp_path, 1, 1)
    res = run_pipeline(cfg)
    t = res.timings
    assert min(t.pre_s, t.sim_s, t.post_s, t.wall_s) > 0 and timings_ok(t)
    assert res.building_count == 1 and res.output_bytes > 0
    csv_path = cfg.out / "buildings" / "g000-000.csv"
    rows = csv_path.read_text().splitlines()
    assert rows[0] == "time,t_in,q_heat" and len(rows) == 25
    summary = json.loads((cfg.out / "summary.json").read_text())
    assert summary["n_buildings"] == 1 and summary["total_kwh"] > 0
    assert set(json.loads((cfg.out / "timings.json").read_text())) == {"pre_s", "sim_s", "post_s", "wall_s"}
    assert PartitionPlan.from_json((cfg.out / "plan.json").read_text()).assignment == {"g000-000": 0}


def test_rerun_gives_identical_summary(tmp_path):
    cfg = write_district(tmp_path, 3, 2)
    run_pipeline(cfg.with_(out=tmp_path / "a"))
    run_pipeline(cfg.with_(out=tmp_path / "b"))
    assert (tmp_path / "a/summary.json").read_bytes() == (tmp_path / "b/summary.json").read_bytes()


def test_outputs_do_not_depend_on_worker_count(tmp_path):
    cfg = write_district(tmp_path, 4, 3)
    ref = None
    for n in (1, 2, 5):
        run_pipeline(cfg.with_(n_workers=n, out=tmp_path / f"w{n}"))
        got = output_bytes(tmp_path / f"w{n}")
        assert len(got) == 13
        ref = ref or got
        assert got == ref


def test_aggregate_output_holds_the_same_rows(tmp_path):
    cfg = write_district(tmp_path, 2, 2)
    run_pipeline(cfg.with_(out=tmp_path / "per"))
    run_pipeline(cfg.with_(out=tmp_path / "agg", aggregate_output=True))
    assert not list((tmp_path / "agg/buildings").glob("*.csv"))
    lines = (tmp_path / "agg/buildings_all.csv").read_text().splitlines()
    assert lines[0] == "building,time,t_in,q_heat"
    for p in (tmp_path / "per/buildings").glob("*.csv"):
        rows = p.read_text().splitlines()[1:]
        assert [f"{p.stem},{r}" for r in rows] == [x for x in lines if x.startswith(p.stem + ",")]
    assert (tmp_path / "per/summary.json").read_bytes() == (tmp_path / "agg/summary.json").read_bytes()


def test_case1_couples_buildings_and_assigns_terrain(tmp_path):
    cfg = write_district(tmp_path, 3, 3, terrain=True, partition_case=1, vf_rays=500, n_workers=2)
    res = run_pipeline(cfg, keep_result=True)
    assert res.result.metadata["coupled"]
    plan = PartitionPlan.from_json((cfg.out / "plan.json").read_text())
    assert plan.env_assignment is not None and set(plan.env_assignment.tolist()) == {0, 1}
    assert sum(plan.env_load) == len(plan.env_assignment)


def test_failure_is_stage_tagged_and_cleans_up(tmp_path):
    cfg = write_district(tmp_path, 2, 1)
    cfg.weather.write_text("timestamp,t_out,dni,dhi\n2024-01-01T00:00:00Z,cold,0,0\n")
    with pytest.raises(PipelineError) as err:
        run_pipeline(cfg)
    assert err.value.stage == "pre"
    assert not cfg.out.exists()


def test_failure_during_export_removes_partial_files(tmp_path, monkeypatch):
    cfg = write_district(tmp_path, 3, 1)

    def broken(prep, result, config, out, created):
        for k in range(2):
            p = out / f"partial-{k}.csv"
            created.append(p)
            p.write_text("x")
        raise OSError("disk full")

    monkeypatch.setattr(pipeline, "export_results", broken)
    with pytest.raises(PipelineError) as err:
        run_pipeline(cfg)
    assert err.value.stage == "post" and not cfg.out.exists()


def test_missing_input_is_a_config_error(tmp_path):
    cfg = write_district(tmp_path, 1, 1)
    with pytest.raises(ConfigError):
        run_pipeline(cfg.with_(weather=tmp_path / "nope.csv"))


def test_config_validation():
    with pytest.raises(ConfigError):
        write_district("/tmp/unused-district", 1, 1, n_workers=0)


# --- bench and reports ---

def fake_report(times_by_workers, complete=True):
    runs = [RunRecord(n, StageTimings(*t), 10, 1000 + n, 11) for n, t in times_by_workers]
    return BenchReport({"host": "test", "physical_cores": 4}, runs, complete)


def test_single_count_sweep_has_unit_speedups(tmp_path):
    cfg = write_district(tmp_path, 2, 2)
    rep = bench_scaling(cfg, [1], tmp_path / "bench")
    assert rep.complete and len(rep.runs) == 1
    assert rep.speedups() == [{"pre": 1.0, "sim": 1.0, "post": 1.0, "wall": 1.0}]
    assert sum(rep.fractions()[0].values()) == pytest.approx(1.0, abs=0.02)
    assert (tmp_path / "bench/workers-1/summary.json").exists()


def test_sweep_requires_baseline(tmp_path):
    cfg = write_district(tmp_path, 1, 1)
    with pytest.raises(ValueError):
        bench_scaling(cfg, [2, 4])


def test_failed_run_marks_report_incomplete(tmp_path, monkeypatch):
    cfg = write_district(tmp_path, 1, 1)
    real = pipeline.run_pipeline

    def flaky(config, keep_result=False):
        if config.n_workers == 2:
            raise PipelineError("sim", RuntimeError("lane crashed"))
        return real(config, keep_result)

    monkeypatch.setattr(pipeline, "run_pipeline", flaky)
    rep = bench_scaling(cfg, [1, 2, 3], tmp_path / "b")
    assert not rep.complete
    assert [r.ok for r in rep.runs] == [True, False, True]
    assert math.isnan(rep.speedups()[1]["sim"]) and "lane crashed" in rep.runs[1].error


def test_empty_sweep_documents(tmp_path):
    rep = BenchReport({"host": "x"}, [], True)
    doc = json.loads(emit_report(rep, tmp_path / "r.json").read_text())
    assert doc["runs"] == [] and doc["schema_version"] == pipeline.REPORT_SCHEMA
    back = load_report(emit_report(rep, tmp_path / "r.csv", "csv"))
    assert back.runs == [] and back.machine == {"host": "x"}


def test_json_csv_json_round_trip(tmp_path):
    rep = fake_report([(1, (1.5, 8.0, 2.25, 11.8)), (2, (1.25, 4.125, 2.5, 7.9)),
                       (4, (1.0, 2.0625, 2.75, 5.85))], complete=False)
    j1 = emit_report(rep, tmp_path / "a.json")
    c = emit_report(load_report(j1), tmp_path / "b.csv", "csv")
    j2 = emit_report(load_report(c), tmp_path / "c.json")
    d1, d2 = json.loads(j1.read_text()), json.loads(j2.read_text())
    strip = lambda d: [{k: v for k, v in r.items() if k != "error"} for r in d["runs"]]  # noqa: E731
    assert strip(d1) == strip(d2) and d1["machine"] == d2["machine"] and d2["complete"] is False


def test_csv_rows_and_recomputable_speedups(tmp_path):
    rep = fake_report([(1, (1.5, 8.0, 2.25, 11.8)), (4, (1.0, 2.1, 2.75, 5.9))])
    path = emit_report(rep, tmp_path / "r.csv", "csv")
    rows = list(csv.DictReader(line for line in path.read_text().splitlines() if not line.startswith("#")))
    assert len(rows) == 2 * 4
    assert tuple(rows[0]) == pipeline.CSV_COLUMNS
    secs = {(r["n_workers"], r["stage"]): float(r["seconds"]) for r in rows}
    for r in rows:
        assert float(r["speedup"]) == pytest.approx(secs[("1", r["stage"])] / float(r["seconds"]), rel=1e-12)


def test_timing_invariants():
    assert timings_ok(StageTimings(1.0, 2.0, 3.0, 6.0))
    assert not timings_ok(StageTimings(1.0, 2.0, 3.0, 5.0))
    assert physical_cores() >= 1


# --- command line ---

def write_toml(path: Path, cfg) -> Path:
    lines = [f'{k} = "{v}"' for k, v in (("footprints", cfg.footprints), ("weather", cfg.weather),
                                         ("out", cfg.out))]
    lines += ["zoom = 16", "sky_az = 12", "sky_alt = 4", "samples = 4", "vf_rays = 300"]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_cli_subcommands_write_their_outputs(tmp_path):
    cfg = write_district(tmp_path, 2, 1)
    conf = str(write_toml(tmp_path / "run.toml", cfg))
    out = tmp_path / "cli"
    assert cli.main(["reconstruct", "--config", conf, "--out", str(out)]) == 0
    assert (out / "scene.obj").read_text().startswith(("#", "v", "o"))
    assert cli.main(["shading", "--config", conf, "--out", str(out)]) == 0
    assert len(json.loads((out / "masks/index.json").read_text())) == 10
    assert cli.main(["viewfactor", "--config", conf, "--out", str(out)]) == 0
    assert json.loads((out / "view_factors.json").read_text())["ids"] == ["g000-000", "g000-001"]
    assert cli.main(["partition", "--config", conf, "--out", str(out), "--workers", "2"]) == 0
    assert cli.main(["simulate", "--config", conf, "--out", str(out / "sim"), "--seed", "5"]) == 0
    assert json.loads((out / "sim/summary.json").read_text())["seed"] == 5
    assert cli.main(["bench", "--config", conf, "--out", str(out / "bench"), "--counts", "1,2"]) == 0
    report = out / "bench" / "bench.json"
    assert report.exists()
    assert cli.main(["report", str(report), str(tmp_path / "report.csv")]) == 0
    assert load_report(tmp_path / "report.csv").runs[1].n_workers == 2


def test_cli_exit_codes(tmp_path):
    assert cli.main(["simulate", "--config", str(tmp_path / "missing.toml")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("footprints = 'x.geojson'\nweather = 'w.csv'\nn_workers = 0\n")
    assert cli.main(["simulate", "--config", str(bad)]) == 2
    cfg = write_district(tmp_path, 1, 1)
    conf = write_toml(tmp_path / "run.toml", cfg)
    cfg.footprints.write_text("{not json")
    assert cli.main(["simulate", "--config", str(conf)]) == 3
    cfg = write_district(tmp_path / "rt", 1, 1)
    conf = write_toml(tmp_path / "rt.toml", cfg)
    text = conf.read_text().replace("zoom = 16", "zoom = 16\narchetype = \"castle\"")
    conf.write_text(text)
    assert cli.main(["simulate", "--config", str(conf)]) == 4
    assert load_config(conf).archetype == "castle"


@pytest.mark.skipif(physical_cores() < 4, reason="needs a host with at least 4 physical cores")
def test_hundred_building_grid_scales_on_four_cores(tmp_path):
    cfg = write_district(tmp_path, 10, 10, hours=24 * 365)
    one = run_pipeline(cfg.with_(n_workers=1, out=tmp_path / "w1")).timings
    four = run_pipeline(cfg.with_(n_workers=4, out=tmp_path / "w4")).timings
    assert one.sim_s / four.sim_s >= 2.8
