"""Regenerate the bundled micro-district under src/citybem/data/district.

Deterministic: the same script always writes the same bytes.

    python3 tools/make_district.py
"""
from __future__ import annotations

import json
import math
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from citybem.geo_ingest import ElevationGrid, WeatherSeries, elevation_to_text, to_lonlat, weather_to_csv

LON0, LAT0 = 7.7500, 48.5830
BLOCK = 62.0         # block pitch, m
N_BLOCKS = 7
OUT = Path(__file__).resolve().parents[1] / "src" / "citybem" / "data" / "district"


def rect(x, y, w, h):
    return [(x, y), (x + w, y), (x + w, y + h), (x, y + h)]


def l_shape(x, y, w, h, t):
    return [(x, y), (x + w, y), (x + w, y + t), (x + t, y + t), (x + t, y + h), (x, y + h)]


def lonlat_ring(ring):
    xs, ys = zip(*ring)
    lon, lat = to_lonlat(np.array(xs), np.array(ys), LON0, LAT0)
    pts = [[round(float(a), 9), round(float(b), 9)] for a, b in zip(lon, lat)]
    return pts + [pts[0]]


def block_buildings(i, j, rng):
    """Four footprints per block, the shape mix cycles with the block index."""
    x0 = (i - N_BLOCKS / 2) * BLOCK
    y0 = (j - N_BLOCKS / 2) * BLOCK
    kind = (i * N_BLOCKS + j) % 5
    out = []
    if kind == 0:  # four detached rectangles
        for k, (dx, dy) in enumerate([(4, 4), (32, 4), (4, 32), (32, 32)]):
            w, h = rng.uniform(14, 22), rng.uniform(12, 20)
            out.append(([rect(x0 + dx, y0 + dy, w, h)], {"height": round(rng.uniform(7, 18), 1)}))
    elif kind == 1:  # touching row houses along the south edge, plus an L
        w = 9.0
        for k in range(3):
            out.append(([rect(x0 + 4 + k * w, y0 + 4, w, 11.0)], {"building:levels": int(rng.integers(2, 5))}))
        out.append(([l_shape(x0 + 8, y0 + 26, 40, 28, 11)], {"height": 15.0}))
    elif kind == 2:  # courtyard block and three small houses
        outer = rect(x0 + 4, y0 + 4, 30, 30)
        hole = rect(x0 + 12, y0 + 12, 14, 14)[::-1]
        out.append(([outer, hole], {"height": 18.0}))
        for dx, dy in [(40, 6), (40, 30), (8, 42)]:
            out.append(([rect(x0 + dx, y0 + dy, 12, 10)], {"building:levels": 2}))
    elif kind == 3:  # rotated slabs, levels only or nothing at all
        for k in range(4):
            cx, cy = x0 + 15 + (k % 2) * 28, y0 + 15 + (k // 2) * 28
            a = math.radians(rng.uniform(-35, 35))
            w, h = rng.uniform(12, 18), rng.uniform(7, 10)
            c, s = math.cos(a), math.sin(a)
            ring = [(cx + c * px - s * py, cy + s * px + c * py)
                    for px, py in [(-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2), (-w / 2, h / 2)]]
            props = {"building:levels": int(rng.integers(3, 7))} if k < 3 else {}
            out.append(([ring], props))
    else:  # irregular hexagon-ish footprints
        for dx, dy in [(6, 6), (34, 6), (6, 34), (34, 34)]:
            cx, cy = x0 + dx + 10, y0 + dy + 9
            ang = np.sort(rng.uniform(0, 2 * math.pi, 6))
            rad = rng.uniform(6, 10, 6)
            ring = [(cx + r * math.cos(t), cy + r * math.sin(t)) for r, t in zip(rad, ang)]
            out.append(([ring], {"height": round(rng.uniform(6, 14), 1)}))
    return out


def footprints(rng) -> dict:
    feats = []
    n = 0
    for i in range(N_BLOCKS):
        for j in range(N_BLOCKS):
            for rings, props in block_buildings(i, j, rng):
                n += 1
                feats.append({
                    "type": "Feature",
                    "properties": {"id": f"b{n:03d}", **props},
                    "geometry": {"type": "Polygon", "coordinates": [lonlat_ring(r) for r in rings]},
                })
    # one two-part building at the north-east corner
    x0 = y0 = N_BLOCKS / 2 * BLOCK + 6
    parts = [[lonlat_ring(rect(x0, y0, 14, 10))], [lonlat_ring(rect(x0 + 20, y0, 10, 10))]]
    feats.append({"type": "Feature", "properties": {"id": "annex", "height": 6.0},
                  "geometry": {"type": "MultiPolygon", "coordinates": parts}})
    return {"type": "FeatureCollection", "features": feats}


def trees(rng) -> dict:
    feats = []
    for k in range(24):
        x = rng.uniform(-N_BLOCKS / 2, N_BLOCKS / 2) * BLOCK
        y = (math.floor(rng.uniform(-N_BLOCKS / 2, N_BLOCKS / 2)) + 0.97) * BLOCK
        lon, lat = to_lonlat(x, y, LON0, LAT0)
        feats.append({"type": "Feature",
                      "properties": {"height": round(rng.uniform(6, 12), 1),
                                     "species": "conifer" if k % 3 == 0 else "broadleaf"},
                      "geometry": {"type": "Point", "coordinates": [round(float(lon), 9), round(float(lat), 9)]}})
    return {"type": "FeatureCollection", "features": feats}


def elevation() -> ElevationGrid:
    half = N_BLOCKS / 2 * BLOCK + 80.0
    cs = 10.0
    n = int(2 * half / cs)
    x0 = y0 = -half
    rows = np.arange(n)
    cols = np.arange(n)
    yc = y0 + (n - rows - 0.5) * cs
    xc = x0 + (cols + 0.5) * cs
    z = 140.0 + 0.012 * xc[None, :] + 0.006 * yc[:, None]
    return ElevationGrid((x0, y0), cs, n, n, np.round(z, 3))


def weather() -> WeatherSeries:
    t0 = datetime(2024, 1, 16, tzinfo=timezone.utc)
    stamps, t_out, dni, dhi = [], [], [], []
    for h in range(24):
        stamps.append(t0 + timedelta(hours=h))
        t_out.append(round(-1.5 + 3.5 * math.sin(math.pi * (h - 9) / 12), 2))
        day = max(0.0, math.sin(math.pi * (h - 7.5) / 9)) if 7.5 <= h <= 16.5 else 0.0
        dni.append(round(420 * day, 1))
        dhi.append(round(90 * day, 1))
    return WeatherSeries(stamps, np.array(t_out), np.array(dni), np.array(dhi))


CONFIG = """\
# Bundled micro-district: ~200 footprints near Strasbourg, one winter day.
footprints = "footprints.geojson"
elevation = "elevation.asc"
weather = "weather.csv"
trees = "trees.geojson"
zoom = 17
lod = 1
sky_az = 72
sky_alt = 10
samples = 8
vf_rays = 2000
n_workers = 4
partition_case = 0
seed = 7
archetype = "old"
out = "out"
"""


def main() -> None:
    rng = np.random.default_rng(20240116)
    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "footprints.geojson").write_text(json.dumps(footprints(rng), indent=1) + "\n")
    (OUT / "trees.geojson").write_text(json.dumps(trees(rng), indent=1) + "\n")
    (OUT / "elevation.asc").write_text(elevation_to_text(elevation()))
    (OUT / "weather.csv").write_text(weather_to_csv(weather()))
    (OUT / "config.toml").write_text(CONFIG)
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
