"""Bounding volume hierarchy and ray-triangle queries.

The tree is built in numpy (median split on the widest centroid axis) and
stored flat; traversal runs in numba with the GIL released so callers can
fan ray batches out over threads. Intersection uses the watertight
shear-and-scale formulation, two-sided.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

T_MIN = 1e-4
LEAF_SIZE = 4
_STACK = 128


@dataclass
class Bvh:
    node_min: np.ndarray   # (n_nodes, 3)
    node_max: np.ndarray
    left: np.ndarray       # child index, -1 for leaves
    right: np.ndarray
    start: np.ndarray      # leaf range into ``order``
    count: np.ndarray
    order: np.ndarray      # triangle ids grouped by leaf
    v0: np.ndarray         # triangle corners, original triangle order
    v1: np.ndarray
    v2: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    @property
    def n_triangles(self) -> int:
        return len(self.v0)

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left < 0)

    def trace(self, origins, directions, t_min: float = T_MIN, tri_face=None, ray_face=None,
              any_hit: bool = False, workers: int = 1):
        """Nearest hit per ray as ``(t, triangle_id)``; misses give ``(inf, -1)``.

        ``tri_face``/``ray_face`` let each ray ignore the triangles of one face.
        With ``any_hit`` the search stops at the first accepted hit, so ``t`` is
        a hit distance but not necessarily the nearest one.
        """
        t, tri, _ = self.trace_counted(origins, directions, t_min, tri_face, ray_face,
                                       any_hit, workers)
        return t, tri

    def trace_counted(self, origins, directions, t_min: float = T_MIN, tri_face=None,
                      ray_face=None, any_hit: bool = False, workers: int = 1):
        o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        d = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
        n = len(o)
        if tri_face is None:
            tri_face = np.zeros(self.n_triangles, dtype=np.int64)
            ray_face = np.full(n, -1, dtype=np.int64)
        else:
            tri_face = np.ascontiguousarray(tri_face, dtype=np.int64)
            ray_face = np.ascontiguousarray(
                np.broadcast_to(np.asarray(ray_face, dtype=np.int64), (n,)))
        out_t = np.empty(n)
        out_id = np.empty(n, dtype=np.int64)
        out_tests = np.empty(n, dtype=np.int64)
        args = (self.node_min, self.node_max, self.left, self.right, self.start, self.count,
                self.order, self.v0, self.v1, self.v2, tri_face)

        def run(lo, hi):
            _trace_kernel(o[lo:hi], d[lo:hi], t_min, ray_face[lo:hi], any_hit, *args,
                          out_t[lo:hi], out_id[lo:hi], out_tests[lo:hi])

        if workers <= 1 or n < 4096:
            run(0, n)
        else:
            bounds = np.linspace(0, n, workers + 1).astype(int)
            with ThreadPoolExecutor(workers) as pool:
                list(pool.map(run, bounds[:-1], bounds[1:]))
        return out_t, out_id, out_tests


def build_bvh(vertices, triangles, leaf_size: int = LEAF_SIZE) -> Bvh:
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    if len(triangles) == 0:
        raise ValueError("cannot build a BVH over an empty triangle set")
    v0 = np.ascontiguousarray(vertices[triangles[:, 0]])
    v1 = np.ascontiguousarray(vertices[triangles[:, 1]])
    v2 = np.ascontiguousarray(vertices[triangles[:, 2]])
    tmin = np.minimum(np.minimum(v0, v1), v2)
    tmax = np.maximum(np.maximum(v0, v1), v2)
    cent = (tmin + tmax) * 0.5

    node_min, node_max, left, right, start, count = [], [], [], [], [], []
    order_parts: list[np.ndarray] = []
    n_ordered = 0

    def new_node(ids):
        node_min.append(tmin[ids].min(axis=0))
        node_max.append(tmax[ids].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(left) - 1

    root = new_node(np.arange(len(triangles)))
    stack = [(root, np.arange(len(triangles)))]
    while stack:
        node, ids = stack.pop()
        if len(ids) <= leaf_size:
            start[node] = n_ordered
            count[node] = len(ids)
            order_parts.append(ids)
            n_ordered += len(ids)
            continue
        c = cent[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        half = len(ids) // 2
        # stable ordering makes the tree independent of argpartition internals
        srt = ids[np.lexsort((ids, c[:, axis]))]
        lo_ids, hi_ids = srt[:half], srt[half:]
        lnode = new_node(lo_ids)
        rnode = new_node(hi_ids)
        left[node] = lnode
        right[node] = rnode
        stack.append((rnode, hi_ids))
        stack.append((lnode, lo_ids))

    return Bvh(
        node_min=np.array(node_min), node_max=np.array(node_max),
        left=np.array(left, dtype=np.int64), right=np.array(right, dtype=np.int64),
        start=np.array(start, dtype=np.int64), count=np.array(count, dtype=np.int64),
        order=np.concatenate(order_parts).astype(np.int64),
        v0=v0, v1=v1, v2=v2,
    )


def ray_hit(bvh: Bvh, origin, direction, t_min: float = T_MIN) -> tuple[float, int] | None:
    direction = np.asarray(direction, dtype=float)
    if not np.any(direction):
        raise ValueError("ray direction must be non-zero")
    t, tri = bvh.trace(np.asarray(origin, dtype=float)[None], direction[None], t_min)
    if tri[0] < 0:
        return None
    return float(t[0]), int(tri[0])


def brute_force_trace(vertices, triangles, origins, directions, t_min: float = T_MIN):
    """Reference query: test every triangle for every ray."""
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    v0 = np.ascontiguousarray(vertices[triangles[:, 0]])
    v1 = np.ascontiguousarray(vertices[triangles[:, 1]])
    v2 = np.ascontiguousarray(vertices[triangles[:, 2]])
    o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    out_t = np.empty(len(o))
    out_id = np.empty(len(o), dtype=np.int64)
    _brute_kernel(o, d, t_min, v0, v1, v2, out_t, out_id)
    return out_t, out_id


# --- kernels ---------------------------------------------------------------

@numba.njit(cache=True, nogil=True, error_model="numpy")
def _ray_setup(d):
    ax, ay, az = abs(d[0]), abs(d[1]), abs(d[2])
    kz = 0
    if ay > ax and ay >= az:
        kz = 1
    elif az > ax and az > ay:
        kz = 2
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    if d[kz] < 0.0:
        kx, ky = ky, kx
    sz = 1.0 / d[kz]
    return kx, ky, kz, d[kx] * sz, d[ky] * sz, sz


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _intersect(o, kx, ky, kz, sx, sy, sz, a, b, c):
    """Hit distance along the ray, or inf."""
    ax_ = a[kx] - o[kx]
    ay_ = a[ky] - o[ky]
    az_ = a[kz] - o[kz]
    bx_ = b[kx] - o[kx]
    by_ = b[ky] - o[ky]
    bz_ = b[kz] - o[kz]
    cx_ = c[kx] - o[kx]
    cy_ = c[ky] - o[ky]
    cz_ = c[kz] - o[kz]
    ax = ax_ - sx * az_
    ay = ay_ - sy * az_
    bx = bx_ - sx * bz_
    by = by_ - sy * bz_
    cx = cx_ - sx * cz_
    cy = cy_ - sy * cz_
    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    if (u < 0.0 or v < 0.0 or w < 0.0) and (u > 0.0 or v > 0.0 or w > 0.0):
        return np.inf
    det = u + v + w
    if det == 0.0:
        return np.inf
    t = (u * sz * az_ + v * sz * bz_ + w * sz * cz_) / det
    return t


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _box_entry(o, inv, bmin, bmax, t_far):
    tmin = -np.inf
    tmax = t_far
    for k in range(3):
        t1 = (bmin[k] - o[k]) * inv[k]
        t2 = (bmax[k] - o[k]) * inv[k]
        if t1 > t2:
            t1, t2 = t2, t1
        if t1 > tmin:
            tmin = t1
        if t2 < tmax:
            tmax = t2
    if tmax < 0.0 or tmin > tmax:
        return np.inf
    return tmin


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _trace_kernel(origins, dirs, t_min, ray_face, any_hit, node_min, node_max, left, right,
                  start, count, order, v0, v1, v2, tri_face, out_t, out_id, out_tests):
    stack = np.empty(_STACK, dtype=np.int64)
    inv = np.empty(3)
    for r in range(origins.shape[0]):
        o = origins[r]
        d = dirs[r]
        for k in range(3):
            inv[k] = 1.0 / d[k] if d[k] != 0.0 else (1e300 if not np.signbit(d[k]) else -1e300)
        kx, ky, kz, sx, sy, sz = _ray_setup(d)
        skip = ray_face[r]
        best = np.inf
        best_id = -1
        tests = 0
        sp = 0
        if _box_entry(o, inv, node_min[0], node_max[0], np.inf) < np.inf:
            stack[0] = 0
            sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_entry(o, inv, node_min[node], node_max[node], best) == np.inf:
                continue
            if left[node] < 0:
                for i in range(start[node], start[node] + count[node]):
                    tri = order[i]
                    if skip >= 0 and tri_face[tri] == skip:
                        continue
                    tests += 1
                    t = _intersect(o, kx, ky, kz, sx, sy, sz, v0[tri], v1[tri], v2[tri])
                    if t > t_min and (t < best or (t == best and tri < best_id)):
                        best = t
                        best_id = tri
                if any_hit and best_id >= 0:
                    break
            else:
                stack[sp] = right[node]
                stack[sp + 1] = left[node]
                sp += 2
        out_t[r] = best
        out_id[r] = best_id
        out_tests[r] = tests


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _brute_kernel(origins, dirs, t_min, v0, v1, v2, out_t, out_id):
    for r in range(origins.shape[0]):
        o = origins[r]
        kx, ky, kz, sx, sy, sz = _ray_setup(dirs[r])
        best = np.inf
        best_id = -1
        for tri in range(v0.shape[0]):
            t = _intersect(o, kx, ky, kz, sx, sy, sz, v0[tri], v1[tri], v2[tri])
            if t > t_min and t < best:
                best = t
                best_id = tri
        out_t[r] = best
        out_id[r] = best_id
