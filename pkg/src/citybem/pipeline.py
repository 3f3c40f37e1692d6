"""End-to-end run with stage timing.

Stages follow the usual split: pre-processing is everything before the
simulation time loop (ingest, repair, meshing, masks, view factors,
partitioning), simulation is the time loop, post-processing is the result
export. Post-processing deliberately writes one file per building from a
single sink.
"""
from __future__ import annotations

import json
import logging
import math
import re
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from citybem import geo_ingest as gi
from citybem.config import ConfigError, RunConfig
from citybem.meshgen import (BuildingModel, Scene, TileContent, TreeSpec, build_scene,
                             embed_buildings, scene_to_obj, terrain_heights, terrain_mesh)
from citybem.partition import PartitionPlan, partition_case0, partition_case1, weights
from citybem.polygon import DegenerateRingError, UnrepairableError, repair
from citybem.radiation import ShadingMask, ViewFactorMatrix, build_bvh, shading_masks, view_factors
from citybem.solar import SkyGrid
from citybem.thermal import SimConfig, SimResult, derive_params, simulate

log = logging.getLogger(__name__)

SUMMARY_SCHEMA = 1


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class StageTimings:
    pre_s: float = 0.0
    sim_s: float = 0.0
    post_s: float = 0.0
    wall_s: float = 0.0

    def stages(self) -> dict[str, float]:
        return {"pre": self.pre_s, "sim": self.sim_s, "post": self.post_s}

    def fractions(self) -> dict[str, float]:
        total = self.pre_s + self.sim_s + self.post_s
        return {k: (v / total if total > 0 else 0.0) for k, v in self.stages().items()}

    def as_dict(self) -> dict[str, float]:
        return {"pre_s": self.pre_s, "sim_s": self.sim_s, "post_s": self.post_s,
                "wall_s": self.wall_s}


def _seconds(ns: int) -> float:
    return round(ns / 1e9, 6)


@dataclass
class Prepared:
    """Everything the simulation needs, produced by pre-processing."""
    scene: Scene
    masks: dict[int, ShadingMask]
    vf: ViewFactorMatrix | None
    plan: PartitionPlan
    params: dict
    weather: gi.WeatherSeries
    origin: tuple[float, float]  # lon0, lat0 of the local frame
    tiles: list[gi.TileIndex]
    warnings: list[str] = field(default_factory=list)


@dataclass
class RunOutcome:
    timings: StageTimings
    out_dir: Path
    files: list[Path]
    building_count: int
    result: SimResult | None = None

    @property
    def output_bytes(self) -> int:
        return sum(p.stat().st_size for p in self.files if p.exists())


# --- pre-processing pieces --------------------------------------------------

def _read(path: Path) -> bytes:
    return Path(path).read_bytes()


def _footprint_bbox(fps: list[gi.GeoFootprint]) -> tuple[float, float, float, float]:
    pts = np.array([p for fp in fps for p in fp.outer])
    return (float(pts[:, 0].min()), float(pts[:, 1].min()),
            float(pts[:, 0].max()), float(pts[:, 1].max()))


def _tile_of(fp: gi.GeoFootprint, tiles: set[gi.TileIndex], z: int) -> list[gi.TileIndex]:
    lon = [p[0] for p in fp.outer]
    lat = [p[1] for p in fp.outer]
    return [t for t in gi.tiles_for_region((min(lon), min(lat), max(lon), max(lat)), z) if t in tiles]


def _parse_trees(data: bytes, origin) -> list[TreeSpec]:
    doc = json.loads(data.decode("utf-8"))
    out = []
    for feat in doc.get("features", []):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Point":
            continue
        lon, lat = geom["coordinates"][:2]
        props = feat.get("properties") or {}
        x, y = gi.to_local(lon, lat, *origin)
        out.append(TreeSpec((float(x), float(y), 0.0), float(props.get("height", 8.0)),
                            props.get("species", "broadleaf")))
    return out


def load_inputs(config: RunConfig):
    fp_warn: list[str] = []
    footprints = gi.parse_footprints(_read(config.footprints), fp_warn)
    weather = gi.parse_weather(_read(config.weather))
    if config.period is not None:
        lo, hi = config.period
        weather = gi.WeatherSeries(weather.timestamps[lo:hi], weather.t_out[lo:hi],
                                   weather.dni[lo:hi], weather.dhi[lo:hi])
    grid = gi.parse_elevation(_read(config.elevation)) if config.elevation else None
    return footprints, weather, grid, fp_warn


def prepare_geometry(config: RunConfig, footprints, grid, warnings: list[str]):
    """Tiles, repaired per-tile buildings, terrain and the merged scene."""
    if not footprints:
        raise ValueError("no building footprints in input")
    bbox = config.bbox or _footprint_bbox(footprints)
    lon0, lat0 = (bbox[0] + bbox[2]) / 2, (bbox[1] + bbox[3]) / 2
    tiles = gi.tiles_for_region(bbox, config.zoom)
    tile_set = set(tiles)
    per_tile: dict[gi.TileIndex, list[gi.GeoFootprint]] = {t: [] for t in tiles}
    for fp in footprints:
        for t in _tile_of(fp, tile_set, config.zoom):
            per_tile[t].append(fp)

    def make_tile(t):
        out = []
        for fp in per_tile[t]:
            rings = []
            for ring in [fp.outer] + fp.holes:
                x, y = gi.to_local([p[0] for p in ring], [p[1] for p in ring], lon0, lat0)
                rings.append(list(zip(x.tolist(), y.tolist())))
            try:
                poly = repair(rings)
            except (DegenerateRingError, UnrepairableError) as exc:
                out.append(f"footprint {fp.id}: {exc}; skipped")
                continue
            out.append(BuildingModel(fp.id, poly, 0.0, fp.height_m or gi.DEFAULT_HEIGHT_M, config.lod))
        return t, out

    with ThreadPoolExecutor(config.n_workers) as pool:
        made = list(pool.map(make_tile, tiles))
    contents = []
    skipped = set()
    for t, items in made:
        blds = [b for b in items if isinstance(b, BuildingModel)]
        skipped.update(s for s in items if isinstance(s, str))
        contents.append(TileContent(t, blds))
    warnings.extend(sorted(skipped))

    terrain = None
    if grid is not None:
        terrain = terrain_mesh(grid, grid.extent)
        for tc in contents:
            tc.buildings = embed_buildings(terrain, tc.buildings)
        contents[0].terrain = terrain
    if config.trees is not None:
        trees = _parse_trees(_read(config.trees), (lon0, lat0))
        if terrain is not None and trees:
            z = terrain_heights(terrain, np.array([t.position[:2] for t in trees]))
            for t, zt in zip(trees, z):
                t.position = (t.position[0], t.position[1], float(zt) if np.isfinite(zt) else 0.0)
        contents[0].trees = trees
    scene = build_scene(contents)
    return scene, terrain, (lon0, lat0), tiles


def prepare(config: RunConfig) -> Prepared:
    footprints, weather, grid, warnings = load_inputs(config)
    scene, terrain, origin, tiles = prepare_geometry(config, footprints, grid, warnings)
    sky = SkyGrid(config.sky_az, config.sky_alt)
    bvh = build_bvh(scene)
    masks = shading_masks(scene, scene.exterior_faces(), sky, config.samples, config.seed,
                          workers=config.n_workers, bvh=bvh)
    params = {bid: derive_params(scene.building_mesh(bid), config.archetype)
              for bid in scene.index}
    plan = partition_case0(weights(scene), config.n_workers)
    vf = None
    if config.partition_case == 1:
        ids = list(scene.index)
        vf = view_factors(scene, [scene.building_faces(b) for b in ids], config.vf_rays,
                          config.seed, ids=ids, workers=config.n_workers, bvh=bvh)
        if terrain is not None:
            cents = {b: scene.buildings[b].footprint.centroid() for b in ids}
            plan = partition_case1(plan, terrain, cents)
    return Prepared(scene, masks, vf, plan, params, weather, origin, tiles, warnings)


# --- post-processing --------------------------------------------------------

_SAFE = re.compile(r"[^A-Za-z0-9._+-]")


def safe_name(bid: str) -> str:
    return _SAFE.sub("_", bid)


def _rows(result: SimResult, k: int) -> str:
    stamps = [ts.strftime("%Y-%m-%dT%H:%M:%SZ") for ts in result.timestamps]
    return "".join(f"{s},{float(t)!r},{float(q)!r}\n"
                   for s, t, q in zip(stamps, result.t_in[k], result.q_heat[k]))


def summary_document(prep: Prepared, result: SimResult, config: RunConfig) -> dict:
    energy = result.energy_kwh
    return {
        "schema_version": SUMMARY_SCHEMA,
        "model_variant": result.variant,
        "archetype": config.archetype,
        "lod": config.lod,
        "partition_case": config.partition_case,
        "seed": config.seed,
        "dt_s": result.dt,
        "n_steps": len(result.timestamps),
        "n_buildings": len(result.ids),
        "origin": list(prep.origin),
        "buildings": {bid: float(e) for bid, e in zip(result.ids, energy)},
        "total_kwh": float(energy.sum()),
        "warnings": prep.warnings,
    }


def export_results(prep: Prepared, result: SimResult, config: RunConfig, out: Path,
                   created: list[Path]) -> None:
    """Write per-building CSVs (or one aggregated file) and the summary."""
    bdir = out / "buildings"
    bdir.mkdir(parents=True, exist_ok=True)
    header = "time,t_in,q_heat\n"
    if config.aggregate_output:
        path = out / "buildings_all.csv"
        created.append(path)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("building," + header)
            for k, bid in enumerate(result.ids):
                fh.write("".join(f"{bid},{line}\n" for line in _rows(result, k).splitlines()))
    else:
        for k, bid in enumerate(result.ids):
            path = bdir / f"{safe_name(bid)}.csv"
            created.append(path)
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(header)
                fh.write(_rows(result, k))
    path = out / "summary.json"
    created.append(path)
    path.write_text(json.dumps(summary_document(prep, result, config), indent=1) + "\n",
                    encoding="utf-8")


# --- orchestration ----------------------------------------------------------

def run_pipeline(config: RunConfig, keep_result: bool = False) -> RunOutcome:
    """Run pre-processing, simulation and export; returns stage timings.

    Any failure is re-raised as :class:`PipelineError` tagged with the stage,
    after removing whatever this run had written.
    """
    config.check_paths()
    out = Path(config.out)
    created: list[Path] = []
    made_dir = not out.exists()
    stage = "pre"
    t_start = time.perf_counter_ns()
    try:
        prep = prepare(config)
        t_pre = time.perf_counter_ns()
        stage = "sim"
        sim_cfg = SimConfig(lat=prep.origin[1], lon=prep.origin[0], workers=config.n_workers,
                            seed=config.seed)
        result = simulate(prep.scene, prep.params, prep.weather, prep.masks, prep.vf, sim_cfg,
                          parts=prep.plan.parts())
        t_sim = time.perf_counter_ns()
        stage = "post"
        out.mkdir(parents=True, exist_ok=True)
        export_results(prep, result, config, out, created)
        t_post = time.perf_counter_ns()
    except ConfigError:
        _cleanup(created, out if made_dir else None)
        raise
    except Exception as exc:
        _cleanup(created, out if made_dir else None)
        raise PipelineError(stage, exc) from exc
    timings = StageTimings(_seconds(t_pre - t_start), _seconds(t_sim - t_pre),
                           _seconds(t_post - t_sim), _seconds(t_post - t_start))
    (out / "timings.json").write_text(json.dumps(timings.as_dict(), indent=1) + "\n")
    (out / "plan.json").write_text(prep.plan.to_json() + "\n")
    log.info("run done: %d buildings, pre %.3fs sim %.3fs post %.3fs", len(result.ids),
             timings.pre_s, timings.sim_s, timings.post_s)
    return RunOutcome(timings, out, created, len(result.ids), result if keep_result else None)


def _cleanup(created: list[Path], out_dir: Path | None) -> None:
    for p in created:
        p.unlink(missing_ok=True)
    if out_dir is not None and out_dir.exists():
        shutil.rmtree(out_dir, ignore_errors=True)


# --- single-purpose entry points used by the CLI ---------------------------

def reconstruct(config: RunConfig) -> Path:
    footprints, _, grid, warnings = load_inputs(config)
    scene, *_ = prepare_geometry(config, footprints, grid, warnings)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "scene.obj"
    path.write_text(scene_to_obj(scene))
    return path


def write_masks(config: RunConfig) -> Path:
    prep_fp, _, grid, warnings = load_inputs(config)
    scene, *_ = prepare_geometry(config, prep_fp, grid, warnings)
    masks = shading_masks(scene, scene.exterior_faces(), SkyGrid(config.sky_az, config.sky_alt),
                          config.samples, config.seed, workers=config.n_workers)
    mdir = Path(config.out) / "masks"
    mdir.mkdir(parents=True, exist_ok=True)
    index = {}
    for f, m in masks.items():
        name = f"face-{f}.csv"
        (mdir / name).write_text(m.to_csv())
        index[name] = {"building": scene.face_owner[f],
                       "tag": int(scene.face_tag[f]),
                       "normal": scene.face_normal[f].tolist(),
                       "area": float(scene.face_area[f])}
    (mdir / "index.json").write_text(json.dumps(index, indent=1))
    return mdir


def write_view_factors(config: RunConfig) -> Path:
    fps, _, grid, warnings = load_inputs(config)
    scene, *_ = prepare_geometry(config, fps, grid, warnings)
    ids = list(scene.index)
    vf = view_factors(scene, [scene.building_faces(b) for b in ids], config.vf_rays, config.seed,
                      ids=ids, workers=config.n_workers)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "view_factors.json"
    path.write_text(json.dumps(vf.to_json_dict()))
    return path


def write_plan(config: RunConfig) -> Path:
    fps, _, grid, warnings = load_inputs(config)
    scene, terrain, *_ = prepare_geometry(config, fps, grid, warnings)
    plan = partition_case0(weights(scene), config.n_workers)
    if config.partition_case == 1 and terrain is not None:
        cents = {b: scene.buildings[b].footprint.centroid() for b in scene.index}
        plan = partition_case1(plan, terrain, cents)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "plan.json"
    path.write_text(plan.to_json() + "\n")
    return path


def physical_cores() -> int:
    try:
        import psutil
        n = psutil.cpu_count(logical=False)
    except ImportError:
        n = None
    if not n:
        import os
        n = os.cpu_count() or 1
    return int(n)


def timings_ok(t: StageTimings) -> bool:
    parts = t.pre_s + t.sim_s + t.post_s
    return min(t.pre_s, t.sim_s, t.post_s, t.wall_s) >= 0 and parts <= t.wall_s * 1.05 + 1e-6


def efficiency(base: StageTimings, run: StageTimings, workers: int, stage: str = "sim") -> float:
    b = getattr(base, f"{stage}_s")
    r = getattr(run, f"{stage}_s")
    return b / r / workers if r > 0 else math.inf


# --- scaling sweep and reports ----------------------------------------------

REPORT_SCHEMA = 1
STAGES = ("pre", "sim", "post", "wall")


def machine_descriptor() -> dict:
    import os
    import platform
    return {
        "hostname": platform.node(),
        "platform": platform.platform(),
        "python": platform.python_version(),
        "processor": platform.processor() or platform.machine(),
        "physical_cores": physical_cores(),
        "logical_cores": os.cpu_count() or 1,
    }


@dataclass
class RunRecord:
    n_workers: int
    timings: StageTimings
    building_count: int
    output_bytes: int
    file_count: int
    ok: bool = True
    error: str = ""


@dataclass
class BenchReport:
    machine: dict
    runs: list[RunRecord] = field(default_factory=list)
    complete: bool = True

    def baseline(self) -> RunRecord | None:
        return next((r for r in self.runs if r.ok and r.n_workers == 1), None)

    def speedups(self) -> list[dict[str, float]]:
        """Per run, baseline time over run time for every stage and end to end."""
        base = self.baseline()
        out = []
        for r in self.runs:
            row = {}
            for s in STAGES:
                b = getattr(base.timings, f"{s}_s") if base else math.nan
                t = getattr(r.timings, f"{s}_s")
                if r is base:
                    row[s] = 1.0
                elif not r.ok or base is None or t <= 0:
                    row[s] = math.nan
                else:
                    row[s] = b / t
            out.append(row)
        return out

    def fractions(self) -> list[dict[str, float]]:
        return [r.timings.fractions() for r in self.runs]


def bench_scaling(config: RunConfig, worker_counts, out_root: Path | None = None) -> BenchReport:
    """Run the pipeline once per worker count on identical inputs.

    A failed run is recorded and marks the report incomplete; the sweep
    carries on with the remaining counts.
    """
    counts = list(worker_counts)
    if 1 not in counts:
        raise ValueError("worker_counts must include 1")
    root = Path(out_root) if out_root is not None else Path(config.out)
    report = BenchReport(machine_descriptor())
    for n in counts:
        cfg = config.with_(n_workers=int(n), out=root / f"workers-{n}")
        try:
            res = run_pipeline(cfg)
        except (PipelineError, ConfigError) as exc:
            log.error("bench run with %d workers failed: %s", n, exc)
            report.runs.append(RunRecord(int(n), StageTimings(), 0, 0, 0, False, str(exc)))
            report.complete = False
            continue
        report.runs.append(RunRecord(int(n), res.timings, res.building_count, res.output_bytes,
                                     len(res.files)))
    return report


def report_document(report: BenchReport) -> dict:
    return {
        "schema_version": REPORT_SCHEMA,
        "complete": report.complete,
        "machine": report.machine,
        "runs": [
            {
                "n_workers": r.n_workers,
                "ok": r.ok,
                "error": r.error,
                "building_count": r.building_count,
                "output_bytes": r.output_bytes,
                "file_count": r.file_count,
                "timings": r.timings.as_dict(),
                "fractions": f,
                "speedup": {k: (None if math.isnan(v) else v) for k, v in s.items()},
            }
            for r, f, s in zip(report.runs, report.fractions(), report.speedups())
        ],
    }


CSV_COLUMNS = ("run", "n_workers", "ok", "building_count", "output_bytes", "file_count",
               "stage", "seconds", "fraction", "speedup")


def emit_report(report: BenchReport, path: str | Path, fmt: str = "json") -> Path:
    """Write the report as JSON, or as CSV with one row per (run, stage)."""
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(report_document(report), indent=1) + "\n", encoding="utf-8")
        return path
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = [f"# schema_version={REPORT_SCHEMA}", f"# complete={str(report.complete).lower()}",
             f"# machine={json.dumps(report.machine, sort_keys=True)}"]
    lines.append(",".join(CSV_COLUMNS))
    for k, (r, fr, sp) in enumerate(zip(report.runs, report.fractions(), report.speedups())):
        for s in STAGES:
            sec = getattr(r.timings, f"{s}_s")
            frac = fr.get(s, 1.0 if s == "wall" else 0.0)
            lines.append(",".join(str(v) for v in (
                k, r.n_workers, int(r.ok), r.building_count, r.output_bytes, r.file_count,
                s, repr(sec), repr(frac), "" if math.isnan(sp[s]) else repr(sp[s]))))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_report(path: str | Path) -> BenchReport:
    """Read a report back from either format; the format follows the file suffix."""
    import csv
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        doc = json.loads(text)
        runs = [RunRecord(r["n_workers"], StageTimings(**r["timings"]), r["building_count"],
                          r["output_bytes"], r["file_count"], r["ok"], r.get("error", ""))
                for r in doc["runs"]]
        return BenchReport(doc["machine"], runs, doc["complete"])
    meta = {}
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
        elif line:
            body.append(line)
    if int(meta.get("schema_version", -1)) != REPORT_SCHEMA:
        raise ValueError(f"unsupported report schema {meta.get('schema_version')}")
    runs: dict[int, RunRecord] = {}
    for row in csv.DictReader(body):
        k = int(row["run"])
        rec = runs.setdefault(k, RunRecord(int(row["n_workers"]), StageTimings(),
                                           int(row["building_count"]), int(row["output_bytes"]),
                                           int(row["file_count"]), bool(int(row["ok"]))))
        setattr(rec.timings, f"{row['stage']}_s", float(row["seconds"]))
    return BenchReport(json.loads(meta.get("machine", "{}")),
                       [runs[k] for k in sorted(runs)], meta.get("complete") == "true")
