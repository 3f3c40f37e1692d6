import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from citybem import geo_ingest as gi


def fc(*features):
    return json.dumps({"type": "FeatureCollection", "features": list(features)})


def square_feature(props, size=1.0, geom="Polygon"):
    ring = [[0, 0], [size, 0], [size, size], [0, size], [0, 0]]
    coords = [ring] if geom == "Polygon" else [[ring]]
    return {"type": "Feature", "properties": props, "geometry": {"type": geom, "coordinates": coords}}


# --- footprints ---

def test_height_is_copied():
    fps = gi.parse_footprints(fc(square_feature({"height": 2})))
    assert len(fps) == 1 and fps[0].height_m == 2


def test_levels_give_three_metres_each():
    fps = gi.parse_footprints(fc(square_feature({"building:levels": 3})))
    assert fps[0].height_m == 9.0 and fps[0].levels == 3


def test_missing_height_defaults_to_nine():
    assert gi.parse_footprints(fc(square_feature({})))[0].height_m == 9.0


def test_empty_collection():
    assert gi.parse_footprints(fc()) == []


def test_height_wins_over_levels(caplog):
    fps = gi.parse_footprints(fc(square_feature({"height": 20, "building:levels": 2})))
    assert fps[0].height_m == 20


def test_short_ring_is_skipped_with_warning():
    bad = {"type": "Feature", "properties": {"id": "x"},
           "geometry": {"type": "Polygon", "coordinates": [[[0, 0], [1, 0], [0, 0]]]}}
    warnings = []
    fps = gi.parse_footprints(fc(bad, square_feature({"id": "ok"})), warnings)
    assert [f.id for f in fps] == ["ok"]
    assert len(warnings) == 1


def test_multipolygon_parts_are_separate_footprints():
    feat = square_feature({"id": "m"}, geom="MultiPolygon")
    feat["geometry"]["coordinates"].append([[[5, 5], [6, 5], [6, 6], [5, 6], [5, 5]]])
    fps = gi.parse_footprints(fc(feat))
    assert len(fps) == 2 and fps[0].id != fps[1].id


def test_malformed_document_reports_location():
    with pytest.raises(gi.GeoParseError) as err:
        gi.parse_footprints('{"type": "FeatureCollection",\n "features": [}')
    assert err.value.line == 2


def test_footprint_round_trip():
    feat = square_feature({"id": "a", "height": 12.5, "building:levels": 4})
    feat["geometry"]["coordinates"].append([[0.2, 0.2], [0.2, 0.4], [0.4, 0.4], [0.4, 0.2], [0.2, 0.2]])
    first = gi.parse_footprints(fc(feat))
    again = gi.parse_footprints(gi.footprints_to_geojson(first))
    assert again == first


# --- tiles ---

def scalar_tile(lon, lat, z):
    n = 2 ** z
    x = math.floor((lon + 180.0) / 360.0 * n)
    y = math.floor((1.0 - math.asinh(math.tan(math.radians(lat))) / math.pi) / 2.0 * n)
    return min(x, n - 1), min(y, n - 1)


def test_origin_point_tile():
    assert gi.tiles_for_region((0.0, 0.0, 0.0, 0.0), 1) == [gi.TileIndex(1, 1, 1)]


def test_whole_world_at_zoom_zero():
    assert gi.tiles_for_region((-180, -85.06, 180, 85.06), 0) == [gi.TileIndex(0, 0, 0)]


def test_strasbourg_tiles_match_scalar_formula():
    bbox = (7.73, 48.57, 7.78, 48.60)
    x0, y1 = scalar_tile(bbox[0], bbox[1], 15)
    x1, y0 = scalar_tile(bbox[2], bbox[3], 15)
    expected = [gi.TileIndex(15, x, y) for y in range(y0, y1 + 1) for x in range(x0, x1 + 1)]
    assert gi.tiles_for_region(bbox, 15) == expected
    assert len(expected) > 1


def test_latitude_is_clamped():
    tiles = gi.tiles_for_region((0.0, 89.0, 1.0, 89.5), 3)
    assert all(t.y == 0 for t in tiles)


@settings(max_examples=60, deadline=None)
@given(st.floats(-170, 170), st.floats(-80, 80), st.floats(0.01, 5), st.floats(0.01, 5),
       st.integers(0, 10))
def test_children_refine_parent_tiles(lon, lat, w, h, z):
    bbox = (lon, lat, min(lon + w, 179.9), min(lat + h, 84.0))
    parents = gi.tiles_for_region(bbox, z)
    kids = set(gi.tiles_for_region(bbox, z + 1))
    for t in parents:
        assert len(t.children()) == 4
    assert kids <= {c for t in parents for c in t.children()}


@settings(max_examples=40, deadline=None)
@given(st.floats(-179, 179), st.floats(-84, 84), st.integers(0, 18))
def test_point_tile_matches_oracle(lon, lat, z):
    assert gi.lonlat_to_tile(lon, lat, z) == scalar_tile(lon, lat, z)


def test_local_projection_round_trip():
    x, y = gi.to_local(7.76, 48.59, 7.75, 48.58)
    assert x == pytest.approx(0.01 * math.cos(math.radians(48.58)) * 111320)
    assert y == pytest.approx(0.01 * 110540)
    lon, lat = gi.to_lonlat(x, y, 7.75, 48.58)
    assert lon == pytest.approx(7.76, abs=1e-12) and lat == pytest.approx(48.59, abs=1e-12)


# --- elevation ---

def asc(rows, cs=1.0, nodata=-9999, x0=0.0, y0=0.0):
    head = (f"ncols {len(rows[0])}\nnrows {len(rows)}\nxllcorner {x0}\nyllcorner {y0}\n"
            f"cellsize {cs}\nNODATA_value {nodata}\n")
    return head + "\n".join(" ".join(str(v) for v in r) for r in rows) + "\n"


def test_flat_grid():
    g = gi.parse_elevation(asc([[0, 0], [0, 0]]))
    assert g.values.shape == (2, 2) and not g.values.any()


def test_nodata_cell_is_flagged():
    g = gi.parse_elevation(asc([[1, -9999], [3, 4]]))
    assert g.mask.tolist() == [[False, True], [False, False]]
    assert g.values[1, 1] == 4 and g.values[0, 0] == 1


def test_ramp_reads_back_row_major():
    g = gi.parse_elevation(asc([[0, 1, 2], [3, 4, 5], [6, 7, 8]]))
    assert g.values.ravel().tolist() == list(range(9))


def test_value_count_mismatch():
    with pytest.raises(gi.GeoParseError):
        gi.parse_elevation(asc([[0, 1, 2], [3, 4, 5]]).replace("nrows 2", "nrows 3"))


def test_elevation_round_trip():
    g = gi.parse_elevation(asc([[0.5, 1, 2], [3, -9999, 5]], cs=2.5, x0=-10, y0=4))
    h = gi.parse_elevation(gi.elevation_to_text(g))
    assert h.origin == g.origin and h.cell_size == g.cell_size
    assert np.array_equal(h.values, g.values)


def test_constant_grid_at_cell_centre():
    g = gi.parse_elevation(asc([[7, 7, 7], [7, 7, 7]]))
    assert gi.sample_elevation(g, *g.cell_center(0, 1)) == 7


def test_midpoint_of_ramp():
    g = gi.parse_elevation(asc([[0, 10], [0, 10]]))
    assert gi.sample_elevation(g, 1.0, 1.0) == pytest.approx(5.0)


def bilinear_oracle(rows, cs, x, y):
    """Hand bilinear through cell centres, rows listed north to south."""
    n = len(rows)
    fx = x / cs - 0.5
    fy = y / cs - 0.5
    i, j = int(fx), int(fy)
    tx, ty = fx - i, fy - j
    z = lambda c, r: rows[n - 1 - r][c]  # noqa: E731
    return ((1 - tx) * (1 - ty) * z(i, j) + tx * (1 - ty) * z(i + 1, j)
            + (1 - tx) * ty * z(i, j + 1) + tx * ty * z(i + 1, j + 1))


def test_interior_point_on_ramp():
    rows = [[0, 1, 2], [3, 4, 5], [6, 7, 8]]
    g = gi.parse_elevation(asc(rows, cs=2.0))
    for x, y in [(1.3, 2.2), (3.9, 4.7), (2.0, 2.0), (4.1, 1.01)]:
        assert gi.sample_elevation(g, x, y) == pytest.approx(bilinear_oracle(rows, 2.0, x, y), abs=1e-12)


def test_nodata_neighbour_is_renormalised():
    g = gi.parse_elevation(asc([[2, -9999], [2, 2]]))
    assert gi.sample_elevation(g, 1.0, 1.0) == pytest.approx(2.0)


def test_outside_and_all_nodata_raise():
    g = gi.parse_elevation(asc([[-9999, -9999], [-9999, -9999]]))
    with pytest.raises(gi.ElevationError):
        gi.sample_elevation(g, 5.0, 0.5)
    with pytest.raises(gi.ElevationError):
        gi.sample_elevation(g, 1.0, 1.0)


def test_continuity_across_cell_edges():
    rng = np.random.default_rng(3)
    rows = rng.uniform(0, 50, (5, 6)).round(3).tolist()
    g = gi.parse_elevation(asc(rows, cs=3.0))
    for k in range(1, 6):
        edge = 3.0 * k
        for y in np.linspace(0.1, 14.9, 11):
            a = gi.sample_elevation(g, edge - 1e-12, y)
            b = gi.sample_elevation(g, edge + 1e-12, y)
            assert abs(a - b) < 1e-9


# --- weather ---

def weather_csv(stamps, dni=None):
    rows = ["timestamp,t_out,dni,dhi"]
    for k, s in enumerate(stamps):
        rows.append(f"{s},{-1 + k * 0.5},{(dni or {}).get(k, 100.0)},50")
    return "\n".join(rows) + "\n"


def test_hourly_day():
    text = weather_csv([f"2024-01-16T{h:02d}:00:00Z" for h in range(24)])
    w = gi.parse_weather(text)
    assert len(w) == 24 and w.step_s == 3600


def test_gap_is_reported_at_row_three():
    text = weather_csv(["2024-01-16T00:00:00Z", "2024-01-16T01:00:00Z", "2024-01-16T03:00:00Z"])
    with pytest.raises(gi.GeoParseError) as err:
        gi.parse_weather(text)
    assert err.value.row == 3


def test_negative_dni_is_rejected():
    with pytest.raises(gi.GeoParseError):
        gi.parse_weather(weather_csv(["2024-01-16T00:00:00Z", "2024-01-16T01:00:00Z"], {1: -1}))


def test_weather_round_trip():
    w = gi.parse_weather(weather_csv([f"2024-01-16T{h:02d}:30:00Z" for h in range(5)]))
    again = gi.parse_weather(gi.weather_to_csv(w))
    assert again.timestamps == w.timestamps
    assert list(again.t_out) == list(w.t_out) and list(again.dni) == list(w.dni)
    assert list(again.dhi) == list(w.dhi)
