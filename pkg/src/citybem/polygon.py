"""Footprint polygon hygiene and union of touching buildings.

Coordinates are local meters. Vertices are snapped to a 1 mm grid, which is
also the tolerance under which two buildings are considered to touch.
"""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import shapely
from shapely.geometry import Polygon
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

SNAP = 1e-3


class DegenerateRingError(ValueError):
    pass


class UnrepairableError(ValueError):
    pass


Ring = list  # list[tuple[float, float]], implicitly closed


@dataclass
class PolygonWithHoles:
    outer: list[tuple[float, float]]
    holes: list[list[tuple[float, float]]] = field(default_factory=list)

    @property
    def area(self) -> float:
        return signed_area(self.outer) + sum(signed_area(h) for h in self.holes)

    def to_shapely(self) -> Polygon:
        return Polygon(self.outer, self.holes)

    def bounds(self) -> tuple[float, float, float, float]:
        xy = np.asarray(self.outer)
        return (*xy.min(axis=0), *xy.max(axis=0))

    def centroid(self) -> tuple[float, float]:
        c = self.to_shapely().centroid
        return c.x, c.y

    def canonical(self) -> tuple:
        """Hashable form independent of ring start vertex and hole order."""
        def rot(r):
            k = min(range(len(r)), key=lambda i: r[i])
            return tuple(r[k:] + r[:k])
        return rot(list(self.outer)), tuple(sorted(rot(list(h)) for h in self.holes))


def signed_area(ring: Sequence[tuple[float, float]]) -> float:
    """Shoelace area, positive for counter-clockwise rings."""
    xy = np.asarray(ring, dtype=float)
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _snap(ring) -> list[tuple[float, float]]:
    xy = np.round(np.asarray(ring, dtype=float) / SNAP) * SNAP
    xy += 0.0  # drop negative zeros
    return [(float(x), float(y)) for x, y in xy]


def _clean(ring: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Drop repeated and collinear-within-tolerance vertices until stable."""
    pts = list(ring)
    changed = True
    while changed and len(pts) >= 3:
        changed = False
        out = []
        for p in pts:
            if not out or abs(p[0] - out[-1][0]) > SNAP / 2 or abs(p[1] - out[-1][1]) > SNAP / 2:
                out.append(p)
        while len(out) > 1 and abs(out[0][0] - out[-1][0]) <= SNAP / 2 and abs(out[0][1] - out[-1][1]) <= SNAP / 2:
            out.pop()
        if len(out) != len(pts):
            changed = True
        pts = out
        n = len(pts)
        if n < 3:
            break
        for i in range(n):
            a, b, c = pts[i - 1], pts[i], pts[(i + 1) % n]
            ab = np.hypot(c[0] - a[0], c[1] - a[1])
            cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            # distance of b from line ac below tolerance, or a spike back onto itself
            if ab <= SNAP or abs(cross) / ab <= SNAP / 2:
                del pts[i]
                changed = True
                break
    return pts


def _segments_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-12 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    o1, o2 = orient(p1, p2, p3), orient(p1, p2, p4)
    o3, o4 = orient(p3, p4, p1), orient(p3, p4, p2)
    if o1 != o2 and o3 != o4 and 0 not in (o1, o2, o3, o4):
        return True
    return (o1 == 0 and on_seg(p1, p2, p3)) or (o2 == 0 and on_seg(p1, p2, p4)) or \
        (o3 == 0 and on_seg(p3, p4, p1)) or (o4 == 0 and on_seg(p3, p4, p2))


def is_simple(ring: Sequence[tuple[float, float]]) -> bool:
    n = len(ring)
    for i in range(n):
        a, b = ring[i], ring[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or j == (i + 1) % n:
                continue
            if _segments_cross(a, b, ring[j], ring[(j + 1) % n]):
                return False
    return True


def repair(raw: Sequence[Sequence[tuple[float, float]]]) -> PolygonWithHoles:
    """Clean raw rings (first = outer, rest = holes) into a valid polygon.

    Snaps to the 1 mm grid, removes duplicate and collinear vertices and
    fixes orientation (outer CCW, holes CW). Self-intersecting rings are
    rejected, not split.
    """
    if not raw:
        raise DegenerateRingError("no rings given")
    rings = []
    for k, r in enumerate(raw):
        if len(r) > 1 and tuple(r[0]) == tuple(r[-1]):
            r = list(r)[:-1]
        cleaned = _clean(_snap(r))
        if len(cleaned) < 3:
            raise DegenerateRingError(f"ring {k} has fewer than 3 vertices after cleanup")
        if not is_simple(cleaned):
            raise UnrepairableError(f"ring {k} self-intersects")
        rings.append(cleaned)
    outer = rings[0]
    if signed_area(outer) < 0:
        outer = outer[::-1]
    holes = []
    for h in rings[1:]:
        holes.append(h[::-1] if signed_area(h) > 0 else h)
    return PolygonWithHoles(outer, holes)


def from_shapely(poly: Polygon) -> PolygonWithHoles:
    return repair([list(poly.exterior.coords)] + [list(r.coords) for r in poly.interiors])


def intersects(a: PolygonWithHoles, b: PolygonWithHoles) -> bool:
    """Closed-region intersection test; edge or corner contact counts."""
    return a.to_shapely().distance(b.to_shapely()) <= SNAP / 2


def _groups(polys: list[PolygonWithHoles]) -> list[list[int]]:
    geoms = [p.to_shapely() for p in polys]
    tree = shapely.STRtree(geoms)
    left, right = tree.query(geoms, predicate="dwithin", distance=SNAP / 2)
    n = len(polys)
    graph = coo_matrix((np.ones(len(left)), (left, right)), shape=(n, n))
    ncomp, labels = connected_components(graph, directed=False)
    groups: list[list[int]] = [[] for _ in range(ncomp)]
    for i, lab in enumerate(labels):
        groups[lab].append(i)
    return groups


def union_groups(polys: list[PolygonWithHoles]) -> list[tuple[list[int], PolygonWithHoles]]:
    """Like :func:`union_touching` but also reports which inputs formed each output."""
    if not polys:
        return []
    out = []
    for members in _groups(polys):
        if len(members) == 1:
            out.append((members, polys[members[0]]))
            continue
        merged = shapely.unary_union([polys[i].to_shapely() for i in members], grid_size=SNAP)
        parts = [merged] if merged.geom_type == "Polygon" else list(merged.geoms)
        # corner-only contacts leave separate parts; keep them, largest first
        parts.sort(key=lambda p: -p.area)
        for p in parts:
            out.append((members, from_shapely(p)))
    return out


def union_touching(polys: list[PolygonWithHoles]) -> list[PolygonWithHoles]:
    """Merge polygons whose closures touch or overlap; disjoint ones pass through."""
    return [p for _, p in union_groups(polys)]
