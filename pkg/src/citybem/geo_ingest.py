"""GIS and weather ingestion.

Footprints come in as a GeoJSON subset, elevation as an ESRI ASCII grid and
weather as a small CSV. Everything downstream works in a local tangent-plane
frame (meters east/north of a reference point), see :func:`to_local`.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np

log = logging.getLogger(__name__)

STOREY_HEIGHT_M = 3.0
DEFAULT_HEIGHT_M = 9.0
MERCATOR_MAX_LAT = 85.0511287798066

M_PER_DEG_LON = 111320.0
M_PER_DEG_LAT = 110540.0


class GeoParseError(ValueError):
    """Malformed input document.

    ``line`` and ``feature`` locate the problem when known.
    """

    def __init__(self, message: str, line: int | None = None, feature: int | None = None,
                 row: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if row is not None:
            where.append(f"row {row}")
        if feature is not None:
            where.append(f"feature {feature}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.row = row
        self.feature = feature


class ElevationError(ValueError):
    pass


@dataclass
class GeoFootprint:
    id: str
    outer: list[tuple[float, float]]
    holes: list[list[tuple[float, float]]] = field(default_factory=list)
    height_m: float | None = None
    levels: int | None = None

    def __post_init__(self):
        self.outer = [(_wrap_lon(lon), lat) for lon, lat in self.outer]
        self.holes = [[(_wrap_lon(lon), lat) for lon, lat in h] for h in self.holes]
        if len(set(self.outer)) < 3:
            raise ValueError(f"footprint {self.id}: outer ring needs >= 3 distinct vertices")
        for lon, lat in self.outer:
            if abs(lat) > 90:
                raise ValueError(f"footprint {self.id}: latitude {lat} out of range")
        if self.height_m is not None and not self.height_m > 0:
            raise ValueError(f"footprint {self.id}: height must be positive")


@dataclass(frozen=True, order=True)
class TileIndex:
    z: int
    x: int
    y: int

    def __post_init__(self):
        n = 1 << self.z
        if not (0 <= self.x < n and 0 <= self.y < n):
            raise ValueError(f"tile {self} outside zoom-{self.z} range")

    def children(self) -> list[TileIndex]:
        return [TileIndex(self.z + 1, 2 * self.x + dx, 2 * self.y + dy)
                for dy in (0, 1) for dx in (0, 1)]

    def bounds(self) -> tuple[float, float, float, float]:
        """(lon_min, lat_min, lon_max, lat_max) of the tile."""
        n = 1 << self.z
        lon0 = self.x / n * 360.0 - 180.0
        lon1 = (self.x + 1) / n * 360.0 - 180.0
        lat_top = math.degrees(math.atan(math.sinh(math.pi * (1 - 2 * self.y / n))))
        lat_bot = math.degrees(math.atan(math.sinh(math.pi * (1 - 2 * (self.y + 1) / n))))
        return lon0, lat_bot, lon1, lat_top


@dataclass
class ElevationGrid:
    origin: tuple[float, float]
    cell_size: float
    nrows: int
    ncols: int
    values: np.ndarray  # row 0 is the northernmost row, as written in the file
    nodata: float = -9999.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if self.nrows < 2 or self.ncols < 2:
            raise ValueError("elevation grid needs at least 2x2 cells")
        if self.values.shape != (self.nrows, self.ncols):
            raise ValueError(f"values shape {self.values.shape} != ({self.nrows}, {self.ncols})")

    @property
    def mask(self) -> np.ndarray:
        """True where the cell holds the nodata sentinel."""
        return self.values == self.nodata

    @property
    def extent(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return x0, y0, x0 + self.ncols * self.cell_size, y0 + self.nrows * self.cell_size

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        x0, y0 = self.origin
        cs = self.cell_size
        return x0 + (col + 0.5) * cs, y0 + (self.nrows - row - 0.5) * cs


@dataclass
class WeatherSeries:
    timestamps: list[datetime]
    t_out: np.ndarray
    dni: np.ndarray
    dhi: np.ndarray

    def __post_init__(self):
        self.t_out = np.asarray(self.t_out, dtype=float)
        self.dni = np.asarray(self.dni, dtype=float)
        self.dhi = np.asarray(self.dhi, dtype=float)
        if not self.timestamps:
            raise ValueError("weather series is empty")
        if not (len(self.timestamps) == len(self.t_out) == len(self.dni) == len(self.dhi)):
            raise ValueError("weather columns differ in length")

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def step_s(self) -> float:
        if len(self.timestamps) < 2:
            return 3600.0
        return (self.timestamps[1] - self.timestamps[0]).total_seconds()


def _wrap_lon(lon: float) -> float:
    lon = float(lon)
    if -180.0 <= lon < 180.0:
        return lon
    return (lon + 180.0) % 360.0 - 180.0


# --- footprints ------------------------------------------------------------

def _ring(coords, fi) -> list[tuple[float, float]]:
    try:
        pts = [(float(c[0]), float(c[1])) for c in coords]
    except (TypeError, ValueError, IndexError):
        raise GeoParseError("bad coordinate in ring", feature=fi) from None
    if len(pts) > 1 and pts[0] == pts[-1]:
        pts = pts[:-1]
    return pts


def _height_from_props(props: dict, fid: str) -> tuple[float, int | None]:
    height = props.get("height")
    levels = props.get("building:levels")
    if levels is not None:
        levels = int(float(levels))
    if height is not None:
        height = float(height)
        if levels is not None and not math.isclose(height, levels * STOREY_HEIGHT_M):
            log.info("footprint %s: height %.2f conflicts with %d levels; using height",
                     fid, height, levels)
        return height, levels
    if levels is not None and levels > 0:
        return levels * STOREY_HEIGHT_M, levels
    return DEFAULT_HEIGHT_M, levels


def parse_footprints(data: bytes | str, warnings: list[str] | None = None) -> list[GeoFootprint]:
    """Parse a GeoJSON FeatureCollection into footprints.

    Polygon features give one footprint, MultiPolygon features one per part
    (ids suffixed ``#k`` after the first). Features whose outer ring has fewer
    than 3 distinct vertices are skipped and reported in ``warnings``.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise GeoParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise GeoParseError("document is not a FeatureCollection", line=1)
    features = doc.get("features", [])
    if not isinstance(features, list):
        raise GeoParseError("'features' is not a list", line=1)
    if warnings is None:
        warnings = []

    out: list[GeoFootprint] = []
    for fi, feat in enumerate(features):
        if not isinstance(feat, dict) or not isinstance(feat.get("geometry"), dict):
            raise GeoParseError("feature without geometry object", feature=fi)
        geom = feat["geometry"]
        props = feat.get("properties") or {}
        fid = str(props.get("id", feat.get("id", fi)))
        gtype = geom.get("type")
        if gtype == "Polygon":
            parts = [geom.get("coordinates")]
        elif gtype == "MultiPolygon":
            parts = geom.get("coordinates")
        else:
            warnings.append(f"feature {fi} ({fid}): unsupported geometry {gtype!r}, skipped")
            continue
        if not isinstance(parts, list):
            raise GeoParseError("coordinates are not a list", feature=fi)
        try:
            height, levels = _height_from_props(props, fid)
        except (TypeError, ValueError):
            raise GeoParseError("non-numeric height or levels", feature=fi) from None
        for k, rings in enumerate(parts):
            if not rings:
                warnings.append(f"feature {fi} ({fid}): empty polygon, skipped")
                continue
            outer = _ring(rings[0], fi)
            if len(set(outer)) < 3:
                warnings.append(f"feature {fi} ({fid}): fewer than 3 vertices, skipped")
                continue
            holes = [h for h in (_ring(r, fi) for r in rings[1:]) if len(set(h)) >= 3]
            pid = fid if k == 0 else f"{fid}#{k}"
            out.append(GeoFootprint(pid, outer, holes, height, levels))
    return out


def footprints_to_geojson(footprints: list[GeoFootprint]) -> str:
    features = []
    for fp in footprints:
        rings = [fp.outer + fp.outer[:1]] + [h + h[:1] for h in fp.holes]
        props = {"id": fp.id}
        if fp.height_m is not None:
            props["height"] = fp.height_m
        if fp.levels is not None:
            props["building:levels"] = fp.levels
        features.append({
            "type": "Feature",
            "properties": props,
            "geometry": {"type": "Polygon", "coordinates": [[list(p) for p in r] for r in rings]},
        })
    return json.dumps({"type": "FeatureCollection", "features": features}, indent=1)


# --- tiles -----------------------------------------------------------------

def lonlat_to_tile(lon: float, lat: float, z: int) -> tuple[int, int]:
    n = 1 << z
    lat = max(-MERCATOR_MAX_LAT, min(MERCATOR_MAX_LAT, lat))
    x = math.floor((lon + 180.0) / 360.0 * n)
    lat_r = math.radians(lat)
    y = math.floor((1.0 - math.asinh(math.tan(lat_r)) / math.pi) / 2.0 * n)
    return min(max(x, 0), n - 1), min(max(y, 0), n - 1)


def tiles_for_region(bbox: tuple[float, float, float, float], z: int) -> list[TileIndex]:
    """Slippy-map tiles covering ``bbox = (lon_min, lat_min, lon_max, lat_max)``.

    Latitudes beyond the web-mercator limit are clamped to it. A point bbox is
    accepted and yields the tile containing it. Tiles come out row-major
    (north to south, then west to east).
    """
    if not 0 <= z <= 19:
        raise ValueError(f"zoom {z} outside [0, 19]")
    lon0, lat0, lon1, lat1 = bbox
    if lon1 < lon0 or lat1 < lat0:
        raise ValueError(f"degenerate bbox {bbox}")
    x0, y_south = lonlat_to_tile(lon0, lat0, z)
    x1, y_north = lonlat_to_tile(lon1, lat1, z)
    # a max edge sitting exactly on a tile boundary does not reach into the next tile
    n = 1 << z
    if lon1 > lon0 and x1 > x0 and (lon1 + 180.0) / 360.0 * n == x1:
        x1 -= 1
    return [TileIndex(z, x, y) for y in range(y_north, y_south + 1) for x in range(x0, x1 + 1)]


# --- local frame -----------------------------------------------------------

def to_local(lon, lat, lon0: float, lat0: float):
    """Tangent-plane projection: meters east/north of (lon0, lat0)."""
    x = (np.asarray(lon, dtype=float) - lon0) * math.cos(math.radians(lat0)) * M_PER_DEG_LON
    y = (np.asarray(lat, dtype=float) - lat0) * M_PER_DEG_LAT
    return x, y


def to_lonlat(x, y, lon0: float, lat0: float):
    lon = np.asarray(x, dtype=float) / (math.cos(math.radians(lat0)) * M_PER_DEG_LON) + lon0
    lat = np.asarray(y, dtype=float) / M_PER_DEG_LAT + lat0
    return lon, lat


# --- elevation -------------------------------------------------------------

_ESRI_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize")


def parse_elevation(data: bytes | str) -> ElevationGrid:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    lines = data.splitlines()
    header: dict[str, float] = {}
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        key = parts[0].lower()
        if key in _ESRI_KEYS or key == "nodata_value":
            if len(parts) != 2:
                raise GeoParseError(f"bad header entry {lines[i]!r}", line=i + 1)
            try:
                header[key] = float(parts[1])
            except ValueError:
                raise GeoParseError(f"non-numeric header value {parts[1]!r}", line=i + 1) from None
            i += 1
        else:
            break
    missing = [k for k in _ESRI_KEYS if k not in header]
    if missing:
        raise GeoParseError(f"missing header keys {missing}", line=i + 1)
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    tokens: list[float] = []
    first_value_line = i + 1
    for j in range(i, len(lines)):
        try:
            tokens.extend(float(t) for t in lines[j].split())
        except ValueError:
            raise GeoParseError("non-numeric elevation value", line=j + 1) from None
    if len(tokens) != nrows * ncols:
        raise GeoParseError(
            f"expected {nrows * ncols} values for {nrows}x{ncols} grid, found {len(tokens)}",
            line=first_value_line)
    return ElevationGrid(
        origin=(header["xllcorner"], header["yllcorner"]),
        cell_size=header["cellsize"],
        nrows=nrows, ncols=ncols,
        values=np.array(tokens).reshape(nrows, ncols),
        nodata=header.get("nodata_value", -9999.0),
    )


def elevation_to_text(grid: ElevationGrid) -> str:
    out = io.StringIO()
    out.write(f"ncols {grid.ncols}\nnrows {grid.nrows}\n")
    out.write(f"xllcorner {grid.origin[0]!r}\nyllcorner {grid.origin[1]!r}\n")
    out.write(f"cellsize {grid.cell_size!r}\nNODATA_value {grid.nodata!r}\n")
    for row in grid.values:
        out.write(" ".join(repr(float(v)) for v in row) + "\n")
    return out.getvalue()


def sample_elevation(grid: ElevationGrid, x: float, y: float) -> float:
    """Bilinear elevation between cell centers.

    Between the outermost cell centers and the grid edge the value is held
    constant. Nodata neighbours are dropped and the remaining weights
    renormalized.
    """
    x0, y0, x1, y1 = grid.extent
    if not (x0 <= x <= x1 and y0 <= y <= y1):
        raise ElevationError(f"point ({x}, {y}) outside grid extent {grid.extent}")
    cs = grid.cell_size
    # continuous column / row-from-south coordinates of cell centers
    u = min(max((x - x0) / cs - 0.5, 0.0), grid.ncols - 1.0)
    v = min(max((y - y0) / cs - 0.5, 0.0), grid.nrows - 1.0)
    c0 = min(int(math.floor(u)), grid.ncols - 2)
    r0 = min(int(math.floor(v)), grid.nrows - 2)
    fu, fv = u - c0, v - r0
    total = 0.0
    wsum = 0.0
    for dr, wr in ((0, 1.0 - fv), (1, fv)):
        for dc, wc in ((0, 1.0 - fu), (1, fu)):
            w = wr * wc
            if w == 0.0:
                continue
            val = grid.values[grid.nrows - 1 - (r0 + dr), c0 + dc]
            if val == grid.nodata:
                continue
            total += w * val
            wsum += w
    if wsum == 0.0:
        raise ElevationError(f"no valid elevation around ({x}, {y})")
    return total / wsum


# --- weather ---------------------------------------------------------------

WEATHER_HEADER = ["timestamp", "t_out", "dni", "dhi"]


def _parse_time(text: str, row: int) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(text)
    except ValueError:
        raise GeoParseError(f"bad timestamp {text!r}", line=row) from None
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def parse_weather(data: bytes | str) -> WeatherSeries:
    """Read ``timestamp,t_out,dni,dhi`` rows.

    Errors carry ``row`` (1-based data row, header excluded) and ``line``.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    reader = csv.reader(io.StringIO(data))
    try:
        header = next(reader)
    except StopIteration:
        raise GeoParseError("empty weather file", line=1) from None
    if [h.strip() for h in header] != WEATHER_HEADER:
        raise GeoParseError(f"header must be {','.join(WEATHER_HEADER)}", line=1)
    stamps: list[datetime] = []
    cols: list[list[float]] = [[], [], []]
    step: timedelta | None = None
    nrow = 0
    for rownum, row in enumerate(reader, start=2):
        if not row or not any(c.strip() for c in row):
            continue
        nrow += 1
        if len(row) != 4:
            raise GeoParseError(f"expected 4 fields, got {len(row)}", line=rownum, row=nrow)
        ts = _parse_time(row[0], rownum)
        try:
            t_out, dni, dhi = (float(c) for c in row[1:])
        except ValueError:
            raise GeoParseError("non-numeric weather value", line=rownum, row=nrow) from None
        if dni < 0 or dhi < 0:
            raise GeoParseError(f"negative irradiance (dni={dni}, dhi={dhi})", line=rownum, row=nrow)
        if stamps:
            delta = ts - stamps[-1]
            if step is None:
                if delta.total_seconds() <= 0:
                    raise GeoParseError("timestamps not increasing", line=rownum, row=nrow)
                step = delta
            elif delta != step:
                raise GeoParseError(
                    f"non-uniform time step: {delta.total_seconds():g} s vs {step.total_seconds():g} s",
                    line=rownum, row=nrow)
        stamps.append(ts)
        for c, v in zip(cols, (t_out, dni, dhi)):
            c.append(v)
    if not stamps:
        raise GeoParseError("weather file has no data rows", line=2)
    return WeatherSeries(stamps, *cols)


def weather_to_csv(series: WeatherSeries) -> str:
    out = io.StringIO()
    out.write(",".join(WEATHER_HEADER) + "\n")
    for ts, t, a, b in zip(series.timestamps, series.t_out, series.dni, series.dhi):
        out.write(f"{ts.strftime('%Y-%m-%dT%H:%M:%SZ')},{float(t)!r},{float(a)!r},{float(b)!r}\n")
    return out.getvalue()
