"""Building, terrain and vegetation meshes and the merged scene.

Every triangle carries a tag (wall/roof/ground/terrain/tree), an owner
(building id or None) and a face number. Faces are the planar patches the
radiation code works on: one per wall segment, one roof, one ground, one per
terrain mesh and one per tree.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np
from scipy import ndimage

from citybem.geo_ingest import ElevationError, ElevationGrid, sample_elevation
from citybem.polygon import PolygonWithHoles, signed_area, union_groups
from citybem.raytrace import build_bvh
from citybem.triangulate import TriangulationError, triangulate

MIN_TRIANGLE_AREA = 1e-10
EMBED_SAMPLE_STEP = 1.0


class FaceTag(IntEnum):
    WALL = 0
    ROOF = 1
    GROUND = 2
    TERRAIN = 3
    TREE = 4


class MeshError(ValueError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    tags: np.ndarray
    owner: np.ndarray  # object array: building id or None
    face: np.ndarray   # face number per triangle, local to this mesh

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        n = len(self.triangles)
        self.tags = np.asarray(self.tags, dtype=np.int8).reshape(n)
        self.owner = np.asarray(self.owner, dtype=object).reshape(n)
        self.face = np.asarray(self.face, dtype=np.int64).reshape(n)
        if n and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise MeshError("triangle index out of range")

    @classmethod
    def empty(cls) -> TriMesh:
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), [], [], [])

    def __len__(self) -> int:
        return len(self.triangles)

    def corners(self):
        v = self.vertices
        t = self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def cross(self) -> np.ndarray:
        a, b, c = self.corners()
        return np.cross(b - a, c - a)

    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.cross(), axis=1)

    def normals(self) -> np.ndarray:
        cr = self.cross()
        return cr / np.linalg.norm(cr, axis=1, keepdims=True)

    def volume(self) -> float:
        """Signed enclosed volume (divergence theorem); positive when outward-oriented."""
        a, b, c = self.corners()
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def edge_counts(self) -> dict[tuple[int, int], int]:
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]],
                            self.triangles[:, [2, 0]]])
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return {(int(a), int(b)): int(c) for (a, b), c in zip(uniq, counts)}

    def is_watertight(self) -> bool:
        return all(c == 2 for c in self.edge_counts().values())

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def translated(self, offset) -> TriMesh:
        return replace(self, vertices=self.vertices + np.asarray(offset, dtype=float))

    def subset(self, mask) -> TriMesh:
        idx = np.flatnonzero(mask)
        used, inv = np.unique(self.triangles[idx], return_inverse=True)
        return TriMesh(self.vertices[used], inv.reshape(-1, 3), self.tags[idx],
                       self.owner[idx], self.face[idx])

    @staticmethod
    def merge(meshes: list[TriMesh]) -> TriMesh:
        """Concatenate meshes; face numbers are offset so they stay distinct."""
        if not meshes:
            return TriMesh.empty()
        verts, tris, faces = [], [], []
        voff = foff = 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + voff)
            faces.append(m.face + foff)
            voff += len(m.vertices)
            if len(m.face):
                foff += int(m.face.max()) + 1
        return TriMesh(np.concatenate(verts), np.concatenate(tris),
                       np.concatenate([m.tags for m in meshes]),
                       np.concatenate([m.owner for m in meshes]),
                       np.concatenate(faces))


@dataclass
class BuildingModel:
    id: str
    footprint: PolygonWithHoles
    base_z: float = 0.0
    height_m: float = 9.0
    lod: int = 1

    def __post_init__(self):
        if not self.height_m > 0:
            raise ValueError(f"building {self.id}: height must be positive")
        if self.lod not in (0, 1):
            raise ValueError(f"building {self.id}: lod must be 0 or 1")

    @property
    def roof_z(self) -> float:
        return self.base_z + self.height_m


def building_mesh(b: BuildingModel) -> TriMesh:
    return lod0_mesh(b) if b.lod == 0 else lod1_mesh(b)


# --- LOD-1 -----------------------------------------------------------------

def _extrude(rings: list[list[tuple[float, float]]], cap: list[tuple[int, int, int]],
             z0: float, z1: float, owner) -> TriMesh:
    pts = [p for r in rings for p in r]
    n = len(pts)
    xy = np.asarray(pts, dtype=float)
    verts = np.vstack([np.column_stack([xy, np.full(n, z0)]),
                       np.column_stack([xy, np.full(n, z1)])])
    tris, tags, faces = [], [], []
    face = 0
    off = 0
    for ring in rings:
        m = len(ring)
        for k in range(m):
            a, b = off + k, off + (k + 1) % m
            tris += [(a, b, n + b), (a, n + b, n + a)]
            tags += [FaceTag.WALL, FaceTag.WALL]
            faces += [face, face]
            face += 1
        off += m
    for a, b, c in cap:
        tris.append((n + a, n + b, n + c))
        tags.append(FaceTag.ROOF)
        faces.append(face)
    face += 1
    for a, b, c in cap:
        tris.append((a, c, b))
        tags.append(FaceTag.GROUND)
        faces.append(face)
    return TriMesh(verts, tris, tags, [owner] * len(tris), faces)


def lod1_mesh(b: BuildingModel) -> TriMesh:
    """Footprint extruded from ``base_z`` to the roof, caps ear-clipped."""
    try:
        cap = triangulate(b.footprint)
    except TriangulationError as exc:
        raise TriangulationError(f"building {b.id}: {exc}", ring=exc.ring) from exc
    return _extrude([b.footprint.outer] + b.footprint.holes, cap, b.base_z, b.roof_z, b.id)


# --- LOD-0 -----------------------------------------------------------------

def convex_hull(points) -> np.ndarray:
    """Monotone-chain hull, CCW, no collinear points."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float))))
    if len(pts) < 3:
        return np.asarray(pts)

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and ((out[-1][0] - out[-2][0]) * (p[1] - out[-2][1])
                                     - (out[-1][1] - out[-2][1]) * (p[0] - out[-2][0])) <= 0:
                out.pop()
            out.append(p)
        return out

    lower, upper = half(pts), half(pts[::-1])
    return np.asarray(lower[:-1] + upper[:-1])


def oriented_bbox(points) -> np.ndarray:
    """Minimum-area enclosing rectangle (rotating calipers over hull edges), CCW corners."""
    hull = convex_hull(points)
    if len(hull) < 3 or abs(signed_area(hull)) < 1e-12:
        raise MeshError("degenerate footprint: zero-area hull")
    best = None
    for i in range(len(hull)):
        e = hull[(i + 1) % len(hull)] - hull[i]
        u = e / np.hypot(*e)
        v = np.array([-u[1], u[0]])
        pu, pv = hull @ u, hull @ v
        area = (pu.max() - pu.min()) * (pv.max() - pv.min())
        if best is None or area < best[0] - 1e-12:
            best = (area, u, v, pu.min(), pu.max(), pv.min(), pv.max())
    _, u, v, u0, u1, v0, v1 = best
    return np.array([u0 * u + v0 * v, u1 * u + v0 * v, u1 * u + v1 * v, u0 * u + v1 * v])


def lod0_mesh(b: BuildingModel) -> TriMesh:
    """Oriented bounding box of the outer ring, extruded; 12 triangles."""
    box = oriented_bbox(b.footprint.outer)
    ring = [tuple(p) for p in box]
    return _extrude([ring], [(0, 1, 2), (0, 2, 3)], b.base_z, b.roof_z, b.id)


# --- terrain ---------------------------------------------------------------

def terrain_mesh(grid: ElevationGrid, region: tuple[float, float, float, float] | None = None) -> TriMesh:
    """Uniform lattice through the cell centers inside ``region`` (local meters).

    Node elevations come from :func:`sample_elevation`; nodata nodes take the
    value of the nearest valid node.
    """
    cs = grid.cell_size
    x0, y0 = grid.origin
    xs = x0 + (np.arange(grid.ncols) + 0.5) * cs
    ys = y0 + (np.arange(grid.nrows)[::-1] + 0.5) * cs  # row 0 is north
    if region is None:
        region = grid.extent
    rx0, ry0, rx1, ry1 = region
    gx0, gy0, gx1, gy1 = grid.extent
    if rx0 < gx0 - 1e-9 or ry0 < gy0 - 1e-9 or rx1 > gx1 + 1e-9 or ry1 > gy1 + 1e-9:
        raise MeshError(f"region {region} outside elevation grid {grid.extent}")
    cols = np.flatnonzero((xs >= rx0) & (xs <= rx1))
    rows = np.flatnonzero((ys >= ry0) & (ys <= ry1))
    if len(cols) < 2 or len(rows) < 2:
        raise MeshError("region covers fewer than 2x2 elevation nodes")
    z = np.full((len(rows), len(cols)), np.nan)
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            try:
                z[i, j] = sample_elevation(grid, xs[c], ys[r])
            except ElevationError:
                pass
    bad = np.isnan(z)
    if bad.all():
        raise MeshError("no valid elevation in region")
    if bad.any():
        _, (ii, jj) = ndimage.distance_transform_edt(bad, return_indices=True)
        z = z[ii, jj]
    X, Y = np.meshgrid(xs[cols], ys[rows])
    verts = np.column_stack([X.ravel(), Y.ravel(), z.ravel()])
    nr, nc = len(rows), len(cols)
    idx = np.arange(nr * nc).reshape(nr, nc)
    # rows run north to south, so (r+1) is south of r
    a = idx[1:, :-1].ravel()   # SW
    b = idx[1:, 1:].ravel()    # SE
    c = idx[:-1, 1:].ravel()   # NE
    d = idx[:-1, :-1].ravel()  # NW
    tris = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    n = len(tris)
    return TriMesh(verts, tris, np.full(n, FaceTag.TERRAIN), [None] * n, np.zeros(n))


def terrain_heights(terrain: TriMesh, xy) -> np.ndarray:
    """Terrain elevation under each plan point (nan where not covered)."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    lo, hi = terrain.bbox()
    bvh = build_bvh(terrain.vertices, terrain.triangles)
    top = hi[2] + 10.0
    origins = np.column_stack([xy, np.full(len(xy), top)])
    dirs = np.tile([0.0, 0.0, -1.0], (len(xy), 1))
    t, tri = bvh.trace(origins, dirs, t_min=0.0)
    z = top - t
    z[tri < 0] = np.nan
    return z


def _footprint_samples(poly: PolygonWithHoles, step: float) -> np.ndarray:
    outer = np.asarray(poly.outer)
    pts = [outer] + [np.asarray(h) for h in poly.holes]
    x0, y0 = outer.min(axis=0)
    x1, y1 = outer.max(axis=0)
    gx = np.arange(math.floor(x0 / step) * step, x1 + step, step)
    gy = np.arange(math.floor(y0 / step) * step, y1 + step, step)
    G = np.stack(np.meshgrid(gx, gy), axis=-1).reshape(-1, 2)
    if len(G):
        from shapely import contains_xy
        G = G[contains_xy(poly.to_shapely(), G[:, 0], G[:, 1])]
        pts.append(G)
    return np.concatenate(pts)


def embed_buildings(terrain: TriMesh, buildings: list[BuildingModel],
                    step: float = EMBED_SAMPLE_STEP) -> list[BuildingModel]:
    """Seat buildings on the terrain.

    The base goes to the lowest ground sampled under the footprint (vertices
    plus a ``step`` interior grid) and the height grows by the ground relief,
    so the roof keeps its nominal height above the highest ground point.
    """
    samples = [_footprint_samples(b.footprint, step) for b in buildings]
    if not buildings:
        return []
    z = terrain_heights(terrain, np.concatenate(samples))
    out = []
    off = 0
    outside = []
    for b, s in zip(buildings, samples):
        zb = z[off:off + len(s)]
        off += len(s)
        if np.isnan(zb).any():
            outside.append(b.id)
            continue
        lo, hi = float(zb.min()), float(zb.max())
        out.append(replace(b, base_z=lo, height_m=b.height_m + (hi - lo)))
    if outside:
        raise MeshError(f"footprints outside terrain: {', '.join(outside)}")
    return out


# --- vegetation ------------------------------------------------------------

@dataclass
class TreeTemplate:
    """Unit-height reference tree; ``crown`` flags the crown triangles."""
    name: str
    vertices: np.ndarray
    triangles: np.ndarray
    crown: np.ndarray


def _ring_xy(r: float, n: int) -> np.ndarray:
    a = 2 * np.pi * np.arange(n) / n
    return np.column_stack([r * np.cos(a), r * np.sin(a)])


def _cylinder(r, z0, z1, n):
    ring = _ring_xy(r, n)
    v = np.vstack([np.column_stack([ring, np.full(n, z0)]), np.column_stack([ring, np.full(n, z1)])])
    t = []
    for k in range(n):
        a, b = k, (k + 1) % n
        t += [(a, b, n + b), (a, n + b, n + a)]
    for k in range(1, n - 1):
        t.append((0, k + 1, k))
        t.append((n, n + k, n + k + 1))
    return v, t


def _cone(r, z0, z1, n):
    ring = _ring_xy(r, n)
    v = np.vstack([np.column_stack([ring, np.full(n, z0)]), [[0.0, 0.0, z1]]])
    t = [(k, (k + 1) % n, n) for k in range(n)]
    t += [(0, k + 1, k) for k in range(1, n - 1)]
    return v, t


def _ellipsoid(rx, rz, zc, n_lon, n_lat):
    v = [[0.0, 0.0, zc - rz]]
    for i in range(1, n_lat):
        phi = -np.pi / 2 + np.pi * i / n_lat
        for x, y in _ring_xy(rx * np.cos(phi), n_lon):
            v.append([x, y, zc + rz * np.sin(phi)])
    v.append([0.0, 0.0, zc + rz])
    top = len(v) - 1
    t = [(0, 1 + (k + 1) % n_lon, 1 + k) for k in range(n_lon)]
    for i in range(n_lat - 2):
        base = 1 + i * n_lon
        for k in range(n_lon):
            a, b = base + k, base + (k + 1) % n_lon
            t += [(a, b, b + n_lon), (a, b + n_lon, a + n_lon)]
    base = 1 + (n_lat - 2) * n_lon
    t += [(base + k, base + (k + 1) % n_lon, top) for k in range(n_lon)]
    return np.asarray(v), t


def _template(name, parts) -> TreeTemplate:
    verts, tris, crown = [], [], []
    off = 0
    for (v, t), is_crown in parts:
        verts.append(v)
        tris += [(a + off, b + off, c + off) for a, b, c in t]
        crown += [is_crown] * len(t)
        off += len(v)
    return TreeTemplate(name, np.vstack(verts), np.asarray(tris, dtype=np.int64), np.asarray(crown))


def conifer_template() -> TreeTemplate:
    return _template("conifer", [(_cylinder(0.04, 0.0, 0.3, 6), False),
                                 (_cone(0.25, 0.3, 1.0, 8), True)])


def broadleaf_template() -> TreeTemplate:
    return _template("broadleaf", [(_cylinder(0.04, 0.0, 0.45, 6), False),
                                   (_ellipsoid(0.3, 0.275, 0.725, 6, 4), True)])


TREE_TEMPLATES = {"conifer": conifer_template, "broadleaf": broadleaf_template}


def tree_mesh(position, height_m: float, template: TreeTemplate | str = "broadleaf") -> TriMesh:
    """Reference tree scaled uniformly by ``height_m`` and moved to ``position``."""
    if not height_m > 0:
        raise ValueError("tree height must be positive")
    if isinstance(template, str):
        template = TREE_TEMPLATES[template]()
    verts = template.vertices * height_m + np.asarray(position, dtype=float)
    n = len(template.triangles)
    return TriMesh(verts, template.triangles.copy(), np.full(n, FaceTag.TREE), [None] * n,
                   np.zeros(n))


# --- scene -----------------------------------------------------------------

@dataclass
class TreeSpec:
    position: tuple[float, float, float]
    height_m: float
    species: str = "broadleaf"


@dataclass
class TileContent:
    tile: object
    buildings: list[BuildingModel] = field(default_factory=list)
    trees: list[TreeSpec] = field(default_factory=list)
    terrain: TriMesh | None = None


@dataclass
class Scene:
    mesh: TriMesh
    index: dict[str, tuple[int, int]]       # building id -> triangle range
    buildings: dict[str, BuildingModel]
    bbox: tuple[np.ndarray, np.ndarray]

    def __post_init__(self):
        m = self.mesh
        self.face_ids, first = np.unique(m.face, return_index=True)
        if len(self.face_ids) and not np.array_equal(self.face_ids, np.arange(len(self.face_ids))):
            raise MeshError("scene face numbers must be contiguous from 0")
        self.face_tag = m.tags[first]
        self.face_owner = m.owner[first]
        areas = m.areas()
        cr = m.cross()
        n = len(self.face_ids)
        self.face_area = np.bincount(m.face, weights=areas, minlength=n)
        nsum = np.zeros((n, 3))
        np.add.at(nsum, m.face, cr)
        nrm = np.linalg.norm(nsum, axis=1, keepdims=True)
        self.face_normal = np.divide(nsum, nrm, out=np.zeros_like(nsum), where=nrm > 0)
        order = np.argsort(m.face, kind="stable")
        self._face_tris = np.split(order, np.cumsum(np.bincount(m.face, minlength=n))[:-1])

    @property
    def n_faces(self) -> int:
        return len(self.face_ids)

    def face_triangles(self, face: int) -> np.ndarray:
        if not 0 <= face < self.n_faces:
            raise KeyError(f"unknown face id {face}")
        return self._face_tris[face]

    def building_faces(self, bid: str, tags=(FaceTag.WALL, FaceTag.ROOF)) -> np.ndarray:
        lo, hi = self.index[bid]
        f = np.unique(self.mesh.face[lo:hi])
        return f[np.isin(self.face_tag[f], [int(t) for t in tags])]

    def building_mesh(self, bid: str) -> TriMesh:
        lo, hi = self.index[bid]
        mask = np.zeros(len(self.mesh), dtype=bool)
        mask[lo:hi] = True
        return self.mesh.subset(mask)

    def exterior_faces(self) -> np.ndarray:
        return np.flatnonzero(np.isin(self.face_tag, [FaceTag.WALL, FaceTag.ROOF])
                              & (self.face_owner != None))  # noqa: E711


def assemble_scene(buildings: list[BuildingModel], terrain: TriMesh | None = None,
                   trees: list[TriMesh] = ()) -> Scene:
    parts, index = [], {}
    off = 0
    for b in buildings:
        m = building_mesh(b)
        parts.append(m)
        index[b.id] = (off, off + len(m))
        off += len(m)
    if terrain is not None:
        parts.append(terrain)
    parts.extend(trees)
    mesh = TriMesh.merge(parts)
    if len(mesh) == 0:
        raise MeshError("empty scene")
    return Scene(mesh, index, {b.id: b for b in buildings}, mesh.bbox())


def _same_geometry(a: BuildingModel, b: BuildingModel) -> bool:
    return (a.footprint.canonical() == b.footprint.canonical()
            and math.isclose(a.height_m, b.height_m) and math.isclose(a.base_z, b.base_z)
            and a.lod == b.lod)


def merge_tile_buildings(tiles: list[TileContent]) -> list[BuildingModel]:
    """Drop cross-tile duplicates (same id) and union buildings that touch.

    A merged building takes the lowest base, the highest roof and the joined
    ids of its members.
    """
    seen: dict[str, BuildingModel] = {}
    for tc in tiles:
        for b in tc.buildings:
            prev = seen.get(b.id)
            if prev is None:
                seen[b.id] = b
            elif not _same_geometry(prev, b):
                raise MeshError(f"building id {b.id} appears in several tiles with different geometry")
    unique = [seen[k] for k in sorted(seen)]
    out = []
    for members, poly in union_groups([b.footprint for b in unique]):
        group = [unique[i] for i in members]
        if len(group) == 1:
            out.append(group[0])
            continue
        base = min(b.base_z for b in group)
        roof = max(b.roof_z for b in group)
        ids = "+".join(b.id for b in group)
        bid = ids if ids not in {o.id for o in out} else f"{ids}@{len(out)}"
        out.append(BuildingModel(bid, poly, base, roof - base, max(b.lod for b in group)))
    return out


def build_scene(tiles: list[TileContent]) -> Scene:
    """Merge per-tile contents into one scene (single-threaded reduction)."""
    buildings = merge_tile_buildings(tiles)
    terrains = [tc.terrain for tc in tiles if tc.terrain is not None]
    terrain = TriMesh.merge(terrains) if terrains else None
    trees = [tree_mesh(t.position, t.height_m, t.species) for tc in tiles for t in tc.trees]
    return assemble_scene(buildings, terrain, trees)


# --- export ----------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.9g}"


def scene_to_obj(scene: Scene) -> str:
    """ASCII OBJ: one ``o`` group per building (plus terrain and trees), ``usemtl`` per tag."""
    m = scene.mesh
    lines = [f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in m.vertices]
    groups: list[tuple[str, np.ndarray]] = []
    covered = np.zeros(len(m), dtype=bool)
    for bid, (lo, hi) in scene.index.items():
        groups.append((f"building-{bid}", np.arange(lo, hi)))
        covered[lo:hi] = True
    rest = np.flatnonzero(~covered)
    for tag in (FaceTag.TERRAIN, FaceTag.TREE):
        sel = rest[m.tags[rest] == tag]
        if len(sel):
            groups.append((tag.name.lower(), sel))
    for name, tri_ids in groups:
        lines.append(f"o {name}")
        current = None
        for t in tri_ids:
            tag = FaceTag(int(m.tags[t])).name.lower()
            if tag != current:
                lines.append(f"usemtl {tag}")
                current = tag
            a, b, c = m.triangles[t] + 1
            lines.append(f"f {a} {b} {c}")
    return "\n".join(lines) + "\n"
