"""Ear-clipping triangulation of polygons with holes.

Holes are first bridged into the outer ring (rightmost hole vertex joined to
a visible outer vertex), which turns the polygon into a single weakly simple
ring; that ring is then ear-clipped. Output indices refer to the
concatenation ``outer + holes[0] + holes[1] + ...``.
"""
from __future__ import annotations

import math

from citybem.polygon import PolygonWithHoles, signed_area


class TriangulationError(ValueError):
    def __init__(self, message, ring=None):
        super().__init__(message)
        self.ring = ring


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _in_triangle(p, a, b, c) -> bool:
    # closed test on a CCW triangle
    return _cross(a, b, p) >= 0 and _cross(b, c, p) >= 0 and _cross(c, a, p) >= 0


def _bridge(ring: list[int], hole: list[int], pts) -> list[int]:
    """Splice ``hole`` (CW) into ``ring`` (CCW) and return the merged ring."""
    m_local = max(range(len(hole)), key=lambda k: (pts[hole[k]][0], -pts[hole[k]][1]))
    m = pts[hole[m_local]]
    # nearest intersection of the ray m + t*(1, 0) with a ring edge
    best_x = math.inf
    best_edge = -1
    n = len(ring)
    for i in range(n):
        a, b = pts[ring[i]], pts[ring[(i + 1) % n]]
        # interior lies left of every edge, so edges right of m run upwards
        if not (a[1] <= m[1] <= b[1]) or a[1] == b[1]:
            continue
        x = a[0] + (m[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0])
        if m[0] <= x < best_x:
            best_x = x
            best_edge = i
    if best_edge < 0:
        raise TriangulationError("hole is not inside the outer ring", ring=[pts[i] for i in hole])
    a_i, b_i = best_edge, (best_edge + 1) % n
    a, b = pts[ring[a_i]], pts[ring[b_i]]
    hit = (best_x, m[1])
    if hit == a:
        cand = a_i
    elif hit == b:
        cand = b_i
    else:
        # candidate: endpoint of the hit edge with larger x
        cand = a_i if a[0] > b[0] else b_i
        p = pts[ring[cand]]
        tri = (m, hit, p) if _cross(m, hit, p) > 0 else (m, p, hit)
        best_key = None
        for i in range(n):
            q = pts[ring[i]]
            if q == p or q == m:
                continue
            # reflex ring vertices inside the triangle block the view of p
            prev, nxt = pts[ring[i - 1]], pts[ring[(i + 1) % n]]
            if _cross(prev, q, nxt) > 0:
                continue
            if _in_triangle(q, *tri):
                angle = abs(math.atan2(q[1] - m[1], q[0] - m[0]))
                key = (angle, (q[0] - m[0]) ** 2 + (q[1] - m[1]) ** 2)
                if best_key is None or key < best_key:
                    best_key = key
                    cand = i
    hole_seq = hole[m_local:] + hole[:m_local]
    return ring[:cand + 1] + hole_seq + [hole_seq[0], ring[cand]] + ring[cand + 1:]


def _is_ear(ring, i, pts) -> bool:
    n = len(ring)
    ia, ib, ic = ring[i - 1], ring[i], ring[(i + 1) % n]
    a, b, c = pts[ia], pts[ib], pts[ic]
    if _cross(a, b, c) <= 0:
        return False
    for k in range(n):
        q_i = ring[k]
        if q_i in (ia, ib, ic):
            continue
        q = pts[q_i]
        if q == a or q == b or q == c:
            continue
        if _in_triangle(q, a, b, c):
            return False
    return True


def ear_clip(ring: list[int], pts) -> list[tuple[int, int, int]]:
    ring = list(ring)
    tris: list[tuple[int, int, int]] = []
    while len(ring) > 3:
        n = len(ring)
        for i in range(n):
            if _is_ear(ring, i, pts):
                tris.append((ring[i - 1], ring[i], ring[(i + 1) % n]))
                del ring[i]
                break
        else:
            # collinear remnants from bridging: drop a zero-area vertex and continue
            for i in range(n):
                if _cross(pts[ring[i - 1]], pts[ring[i]], pts[ring[(i + 1) % n]]) == 0:
                    del ring[i]
                    break
            else:
                raise TriangulationError("no ear found; ring is not simple",
                                         ring=[pts[i] for i in ring])
    if _cross(pts[ring[0]], pts[ring[1]], pts[ring[2]]) > 0:
        tris.append((ring[0], ring[1], ring[2]))
    elif len(tris) == 0:
        raise TriangulationError("degenerate triangle", ring=[pts[i] for i in ring])
    return tris


def triangulate(poly: PolygonWithHoles) -> list[tuple[int, int, int]]:
    """CCW triangles covering the polygon, indices into outer + holes vertices."""
    pts = list(poly.outer)
    ring = list(range(len(pts)))
    holes = []
    for h in poly.holes:
        holes.append(list(range(len(pts), len(pts) + len(h))))
        pts.extend(h)
    holes.sort(key=lambda h: -max(pts[i][0] for i in h))
    for h in holes:
        ring = _bridge(ring, h, pts)
    tris = ear_clip(ring, pts)
    # the caps must tile the polygon exactly, otherwise the input was not simple
    covered = sum(_cross(pts[a], pts[b], pts[c]) for a, b, c in tris) / 2
    expected = signed_area(poly.outer) + sum(signed_area(h) for h in poly.holes)
    if not math.isclose(covered, expected, rel_tol=1e-9, abs_tol=1e-12):
        raise TriangulationError(f"triangles cover {covered:g} m2 of {expected:g} m2",
                                 ring=list(poly.outer))
    return tris
