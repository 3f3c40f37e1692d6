"""Monte Carlo shading masks and view factors, plus the 2D crossed-strings oracle.

Random streams are keyed by (master seed, purpose, face or surface index)
through :class:`numpy.random.SeedSequence`, so results do not depend on how
work is spread over threads.
"""
from __future__ import annotations

import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from citybem.meshgen import Scene, TriMesh
from citybem.raytrace import T_MIN, Bvh, build_bvh as _build_bvh
from citybem.solar import SkyGrid

DEFAULT_SAMPLES_PER_BIN = 64
DEFAULT_RAYS_PER_SURFACE = 100_000

_MASK_STREAM = 0
_VF_STREAM = 1


def build_bvh(scene: Scene | TriMesh) -> Bvh:
    mesh = scene.mesh if isinstance(scene, Scene) else scene
    if len(mesh) == 0:
        raise ValueError("scene is empty")
    return _build_bvh(mesh.vertices, mesh.triangles)


def scene_from_mesh(mesh: TriMesh) -> Scene:
    """Wrap a bare mesh (face numbers as given) so it can be traced."""
    return Scene(mesh, {}, {}, mesh.bbox())


def _rng(seed: int, stream: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, int(key))))


def _sample_on_triangles(mesh: TriMesh, tri_ids: np.ndarray, n: int, rng: np.random.Generator):
    """Area-uniform points on a set of triangles; returns points and the triangle used."""
    t = mesh.triangles[tri_ids]
    a, b, c = (mesh.vertices[t[:, k]] for k in range(3))
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        raise ValueError("surface has zero area")
    pick = rng.choice(len(tri_ids), size=n, p=areas / total)
    u = rng.random((n, 2))
    su = np.sqrt(u[:, 0])
    w0, w1 = 1.0 - su, su * (1.0 - u[:, 1])
    w2 = su * u[:, 1]
    pts = w0[:, None] * a[pick] + w1[:, None] * b[pick] + w2[:, None] * c[pick]
    return pts, pick


# --- shading masks ---------------------------------------------------------

@dataclass
class ShadingMask:
    face: int
    grid: SkyGrid
    blocked: np.ndarray  # (n_az, n_alt)
    samples_per_bin: int
    seed: int

    def lookup(self, i_az: int, i_alt: int) -> float:
        return float(self.blocked[i_az, i_alt])

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("azimuth," + ",".join(f"{a:g}" for a in self.grid.alt_centers()) + "\n")
        for az, row in zip(self.grid.az_centers(), self.blocked):
            out.write(f"{az:g}," + ",".join(repr(float(v)) for v in row) + "\n")
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str, face: int = -1, samples_per_bin: int = 0, seed: int = 0) -> ShadingMask:
        rows = [line.split(",") for line in text.strip().splitlines()]
        values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        grid = SkyGrid(values.shape[0], values.shape[1])
        return cls(face, grid, values, samples_per_bin, seed)


def _bin_directions(grid: SkyGrid, samples: int, rng: np.random.Generator) -> np.ndarray:
    """Directions uniform in solid angle within each bin, shape (n_az, n_alt, samples, 3)."""
    u = rng.random((grid.n_az, grid.n_alt, samples, 2))
    i_az = np.arange(grid.n_az)[:, None, None]
    i_alt = np.arange(grid.n_alt)[None, :, None]
    az = np.radians((i_az + u[..., 0]) * grid.d_az)
    s0 = np.sin(np.radians(i_alt * grid.d_alt))
    s1 = np.sin(np.radians((i_alt + 1) * grid.d_alt))
    sz = s0 + u[..., 1] * (s1 - s0)
    cz = np.sqrt(np.clip(1.0 - sz * sz, 0.0, None))
    return np.stack([cz * np.sin(az), cz * np.cos(az), sz], axis=-1)


def shading_mask(scene: Scene, face: int, grid: SkyGrid | None = None,
                 samples_per_bin: int = DEFAULT_SAMPLES_PER_BIN, seed: int = 0,
                 bvh: Bvh | None = None) -> ShadingMask:
    """Fraction of rays leaving ``face`` that hit other geometry, per sky bin.

    Bins whose center direction is not in front of the face are fully
    blocked. Rays ignore the face's own triangles.
    """
    grid = grid or SkyGrid()
    tris = scene.face_triangles(face)
    if bvh is None:
        bvh = build_bvh(scene)
    rng = _rng(seed, _MASK_STREAM, face)
    n = grid.n_bins * samples_per_bin
    pts, _ = _sample_on_triangles(scene.mesh, tris, n, rng)
    dirs = _bin_directions(grid, samples_per_bin, rng).reshape(-1, 3)
    normal = scene.face_normal[face]
    facing = (dirs @ normal) > 0
    hit = np.ones(n, dtype=bool)
    if facing.any():
        _, tri = bvh.trace(pts[facing], dirs[facing], T_MIN, tri_face=scene.mesh.face,
                           ray_face=face, any_hit=True)
        hit[facing] = tri >= 0
    blocked = hit.reshape(grid.n_az, grid.n_alt, samples_per_bin).mean(axis=2)
    behind = (grid.center_vectors() @ normal) <= 0
    blocked[behind] = 1.0
    return ShadingMask(int(face), grid, blocked, samples_per_bin, seed)


def shading_masks(scene: Scene, faces, grid: SkyGrid | None = None,
                  samples_per_bin: int = DEFAULT_SAMPLES_PER_BIN, seed: int = 0,
                  workers: int = 1, bvh: Bvh | None = None) -> dict[int, ShadingMask]:
    """Masks for many faces, fanned out over ``workers`` threads."""
    if bvh is None:
        bvh = build_bvh(scene)
    faces = [int(f) for f in faces]

    def one(f):
        return shading_mask(scene, f, grid, samples_per_bin, seed, bvh)

    if workers <= 1:
        masks = [one(f) for f in faces]
    else:
        with ThreadPoolExecutor(workers) as pool:
            masks = list(pool.map(one, faces))
    return {m.face: m for m in masks}


# --- view factors ----------------------------------------------------------

@dataclass
class ViewFactorMatrix:
    ids: list
    areas: np.ndarray
    F: np.ndarray
    sigma: np.ndarray
    rays_per_surface: int
    seed: int

    def to_json_dict(self) -> dict:
        return {
            "ids": [str(i) for i in self.ids],
            "areas": self.areas.tolist(),
            "F": self.F.tolist(),
            "sigma": self.sigma.tolist(),
            "rays_per_surface": self.rays_per_surface,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> ViewFactorMatrix:
        return cls(list(d["ids"]), np.asarray(d["areas"], dtype=float), np.asarray(d["F"], dtype=float),
                   np.asarray(d["sigma"], dtype=float), int(d["rays_per_surface"]), int(d["seed"]))


def _cosine_directions(normals: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(normals)
    u = rng.random((n, 2))
    r = np.sqrt(u[:, 0])
    phi = 2 * np.pi * u[:, 1]
    local = np.column_stack([r * np.cos(phi), r * np.sin(phi), np.sqrt(1.0 - u[:, 0])])
    # orthonormal frame per normal (Duff et al. branchless construction)
    nx, ny, nz = normals.T
    sign = np.where(nz >= 0, 1.0, -1.0)
    a = -1.0 / (sign + nz)
    b = nx * ny * a
    t = np.column_stack([1.0 + sign * nx * nx * a, sign * b, -sign * nx])
    s = np.column_stack([b, sign + ny * ny * a, -ny])
    return local[:, :1] * t + local[:, 1:2] * s + local[:, 2:] * normals


def view_factors(scene: Scene, surfaces: list, rays_per_surface: int = DEFAULT_RAYS_PER_SURFACE,
                 seed: int = 0, ids: list | None = None, workers: int = 1,
                 bvh: Bvh | None = None) -> ViewFactorMatrix:
    """Surface-to-surface view factors by first-hit counting.

    Each surface is a collection of face ids. Points are area-uniform and
    directions cosine-weighted about the local triangle normal, so the share
    of rays landing on surface j estimates F_ij directly.
    """
    if bvh is None:
        bvh = build_bvh(scene)
    mesh = scene.mesh
    owner = np.full(len(mesh), -1, dtype=np.int64)
    tri_sets = []
    for k, faces in enumerate(surfaces):
        tris = np.concatenate([scene.face_triangles(int(f)) for f in faces]) if len(faces) else \
            np.zeros(0, dtype=np.int64)
        if np.any(owner[tris] >= 0):
            raise ValueError(f"surface {k} overlaps another surface")
        owner[tris] = k
        tri_sets.append(tris)
    tri_area = mesh.areas()
    tri_normal = mesh.normals() if len(mesh) else np.zeros((0, 3))
    areas = np.array([tri_area[t].sum() for t in tri_sets])
    for k, a in enumerate(areas):
        if a <= 0:
            raise ValueError(f"surface {k} has zero area")
    n = len(surfaces)

    def one(k):
        rng = _rng(seed, _VF_STREAM, k)
        pts, pick = _sample_on_triangles(mesh, tri_sets[k], rays_per_surface, rng)
        dirs = _cosine_directions(tri_normal[tri_sets[k][pick]], rng)
        _, tri = bvh.trace(pts, dirs, T_MIN)
        dest = owner[tri[tri >= 0]]
        return np.bincount(dest[dest >= 0], minlength=n)[:n] / rays_per_surface

    if workers <= 1:
        rows = [one(k) for k in range(n)]
    else:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, range(n)))
    F = np.array(rows).reshape(n, n)
    sigma = np.sqrt(F * (1.0 - F) / rays_per_surface)
    return ViewFactorMatrix(list(ids) if ids is not None else list(range(n)), areas, F, sigma,
                            rays_per_surface, seed)


# --- 2D crossed strings ----------------------------------------------------

def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _proper_cross(p, q, a, b, eps=1e-12) -> bool:
    """Segments pq and ab cross at a point interior to both."""
    d1, d2 = _orient(a, b, p), _orient(a, b, q)
    d3, d4 = _orient(p, q, a), _orient(p, q, b)
    return ((d1 > eps and d2 < -eps) or (d1 < -eps and d2 > eps)) and \
        ((d3 > eps and d4 < -eps) or (d3 < -eps and d4 > eps))


def _segments_overlap(s, t, eps=1e-12) -> bool:
    if _proper_cross(s[0], s[1], t[0], t[1], eps):
        return True
    # collinear overlap of positive length
    if abs(_orient(s[0], s[1], t[0])) < eps and abs(_orient(s[0], s[1], t[1])) < eps:
        d = np.subtract(s[1], s[0])
        d = d / np.hypot(*d)
        proj = sorted([0.0, float(np.dot(np.subtract(s[1], s[0]), d))])
        tp = sorted(float(np.dot(np.subtract(p, s[0]), d)) for p in t)
        return min(proj[1], tp[1]) - max(proj[0], tp[0]) > eps
    return False


def clip_front(seg, origin, normal):
    """Part of ``seg`` strictly in front of the line through ``origin`` with ``normal``."""
    p, q = np.asarray(seg[0], float), np.asarray(seg[1], float)
    dp, dq = np.dot(p - origin, normal), np.dot(q - origin, normal)
    eps = 1e-12
    if dp <= eps and dq <= eps:
        return None
    if dp > eps and dq > eps:
        return p, q
    s = dp / (dp - dq)
    x = p + s * (q - p)
    return (p, x) if dp > eps else (x, q)


def _angle(p, x, t, n) -> float:
    d = np.subtract(x, p)
    return math.atan2(float(d @ t), float(d @ n))


def _ray_dist(p, theta, t, n, seg) -> float:
    """Distance along the ray from p at angle theta to the line of ``seg``."""
    r = math.sin(theta) * t + math.cos(theta) * n
    a, b = np.asarray(seg[0], float), np.asarray(seg[1], float)
    e = b - a
    den = r[0] * -e[1] - r[1] * -e[0]
    if abs(den) < 1e-300:
        return math.inf
    w = a - p
    return (w[0] * -e[1] - w[1] * -e[0]) / den


def _visible_intervals(p, t, n, receiver, blockers):
    """Angular intervals of ``receiver`` seen from p, as (lo, hi, x_lo, x_hi).

    Each bound carries the scene point that defines it, so the interval can be
    integrated along the emitter in closed form.
    """
    (c, d) = receiver
    ends = sorted([(_angle(p, c, t, n), c), (_angle(p, d, t, n), d)], key=lambda e: e[0])
    pieces = [(ends[0][0], ends[1][0], ends[0][1], ends[1][1])]
    for blk in blockers:
        bends = sorted([(_angle(p, blk[0], t, n), blk[0]), (_angle(p, blk[1], t, n), blk[1])],
                       key=lambda e: e[0])
        out = []
        for lo, hi, xl, xh in pieces:
            a = max(lo, bends[0][0])
            b = min(hi, bends[1][0])
            if b - a <= 1e-15:
                out.append((lo, hi, xl, xh))
                continue
            mid = 0.5 * (a + b)
            if _ray_dist(p, mid, t, n, blk) >= _ray_dist(p, mid, t, n, receiver):
                out.append((lo, hi, xl, xh))  # blocker is behind the receiver here
                continue
            if a > lo:
                out.append((lo, a, xl, bends[0][1]))
            if b < hi:
                out.append((b, hi, bends[1][1], xh))
        pieces = out
    return pieces


def _line_hits(p, q, a, u, length):
    """Parameter s in (0, length) where line pq crosses the emitter a + s*u."""
    d = np.subtract(q, p)
    den = u[0] * d[1] - u[1] * d[0]
    if abs(den) < 1e-14:
        return None
    w = np.subtract(p, a)
    s = (w[0] * d[1] - w[1] * d[0]) / den
    return s if 1e-12 < s < length - 1e-12 else None


def _blocked_view(A, B, C, D, blockers) -> float:
    """Exact obstructed view factor by piecewise string integration.

    Along the emitter the visible intervals are bounded by fixed scene points;
    the integral of sin(angle) to a fixed point X is the change in the string
    length |X - P|, so every piece between alignment events is closed form.
    """
    a = np.asarray(A, float)
    length = math.dist(A, B)
    u = (np.asarray(B, float) - a) / length
    n = np.array([-u[1], u[0]])
    side = sum(float(np.dot(np.subtract(x, a), n)) for x in (C, D))
    if side < 0:
        n = -n
    # keep only what lies in front of the emitter line
    rec = clip_front((C, D), a, n)
    if rec is None or math.dist(*rec) < 1e-15:
        return 0.0
    rec = (tuple(rec[0]), tuple(rec[1]))
    blks = []
    for b in blockers:
        cb = clip_front(b, a, n)
        if cb is not None and math.dist(*cb) > 1e-15:
            blks.append((tuple(cb[0]), tuple(cb[1])))
    points = [rec[0], rec[1]] + [x for b in blks for x in b]
    cuts = {0.0, length}
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            s = _line_hits(points[i], points[j], a, u, length)
            if s is not None:
                cuts.add(s)
    cuts = sorted(cuts)
    total = 0.0
    for s0, s1 in zip(cuts[:-1], cuts[1:]):
        if s1 - s0 <= 1e-15:
            continue
        p0, p1 = a + s0 * u, a + s1 * u
        pm = a + 0.5 * (s0 + s1) * u
        for _, _, x_lo, x_hi in _visible_intervals(pm, u, n, rec, blks):
            gain_hi = math.dist(x_hi, p0) - math.dist(x_hi, p1)
            gain_lo = math.dist(x_lo, p0) - math.dist(x_lo, p1)
            total += 0.5 * (gain_hi - gain_lo)
    return total / length


def crossed_strings_2d(emitter, receiver, blockers=()) -> float:
    """View factor from ``emitter`` to ``receiver`` (2D segments).

    Unobstructed pairs use Hottel's construction: (crossed strings - uncrossed
    strings) / (2 * emitter length). With blockers the same string balance is
    accumulated lane by lane: the emitter is cut wherever two scene endpoints
    line up, and on each piece the visible intervals are bounded by fixed
    endpoints whose string lengths integrate exactly.
    """
    A, B = (tuple(map(float, p)) for p in emitter)
    C, D = (tuple(map(float, p)) for p in receiver)
    length = math.dist(A, B)
    if length == 0 or math.dist(C, D) == 0:
        raise ValueError("degenerate segment")
    if _segments_overlap((A, B), (C, D)):
        raise ValueError("emitter and receiver intersect")
    blockers = [tuple(tuple(map(float, p)) for p in b) for b in blockers]
    if blockers:
        return float(min(1.0, max(0.0, _blocked_view(A, B, C, D, blockers))))
    ac_bd = math.dist(A, C) + math.dist(B, D)
    ad_bc = math.dist(A, D) + math.dist(B, C)
    # the crossed pair is the one whose straight strings intersect
    if _proper_cross(A, D, B, C):
        crossed, uncrossed = ad_bc, ac_bd
    elif _proper_cross(A, C, B, D):
        crossed, uncrossed = ac_bd, ad_bc
    else:
        crossed, uncrossed = max(ac_bd, ad_bc), min(ac_bd, ad_bc)
    return float(min(1.0, max(0.0, (crossed - uncrossed) / (2.0 * length))))
