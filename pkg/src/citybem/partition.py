"""Workload partitioning.

Case 0 spreads buildings over parts with longest-processing-time greedy.
Case 1 additionally hands every terrain cell to the part owning the nearest
building, so each part gets its buildings' surroundings.
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field

import numpy as np

from citybem.meshgen import Scene, TriMesh


@dataclass
class PartitionPlan:
    n_parts: int
    assignment: dict[str, int]
    load: list[float]
    env_assignment: np.ndarray | None = None  # terrain triangle -> part
    env_load: list[float] = field(default_factory=list)

    def parts(self) -> list[list[str]]:
        """Building ids per part, in assignment order."""
        out: list[list[str]] = [[] for _ in range(self.n_parts)]
        for bid, p in self.assignment.items():
            out[p].append(bid)
        return out

    def to_json(self) -> str:
        doc = {
            "n_parts": self.n_parts,
            "parts": [{"part": k, "buildings": ids, "load": self.load[k]}
                      for k, ids in enumerate(self.parts())],
            "imbalance": imbalance(self) if sum(self.load) > 0 else None,
        }
        if self.env_assignment is not None:
            doc["env_load"] = self.env_load
            doc["env_assignment"] = [int(p) for p in self.env_assignment]
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> PartitionPlan:
        doc = json.loads(text)
        assignment = {bid: p["part"] for p in doc["parts"] for bid in p["buildings"]}
        env = doc.get("env_assignment")
        return cls(doc["n_parts"], assignment, [p["load"] for p in doc["parts"]],
                   None if env is None else np.asarray(env, dtype=np.int64),
                   doc.get("env_load", []))


def weights(scene: Scene) -> dict[str, int]:
    """Triangle count per building mesh."""
    return {bid: hi - lo for bid, (lo, hi) in scene.index.items()}


def partition_case0(w: dict[str, float], n_parts: int) -> PartitionPlan:
    """Longest-processing-time greedy.

    Heaviest first (ties by ascending id), each onto the least-loaded part
    (ties by lowest part index). Empty parts are allowed.
    """
    if n_parts < 1:
        raise ValueError("n_parts must be >= 1")
    items = sorted(w.items(), key=lambda kv: (-kv[1], kv[0]))
    heap = [(0.0, p) for p in range(n_parts)]
    load = [0.0] * n_parts
    assignment: dict[str, int] = {}
    for bid, wt in items:
        cur, p = heapq.heappop(heap)
        assignment[bid] = p
        load[p] = cur + wt
        heapq.heappush(heap, (load[p], p))
    return PartitionPlan(n_parts, assignment, load)


def partition_case1(plan: PartitionPlan, terrain: TriMesh,
                    centroids: dict[str, tuple[float, float]]) -> PartitionPlan:
    """Attach each terrain cell (triangle) to the part of its nearest building centroid."""
    n_cells = len(terrain)
    cells = terrain.vertices[terrain.triangles].mean(axis=1)[:, :2]
    ids = [b for b in plan.assignment if b in centroids]
    if not ids:
        env = np.zeros(n_cells, dtype=np.int64)
    else:
        C = np.array([centroids[b] for b in ids], dtype=float)
        part = np.array([plan.assignment[b] for b in ids], dtype=np.int64)
        env = np.empty(n_cells, dtype=np.int64)
        chunk = max(1, 2_000_000 // len(ids))
        for lo in range(0, n_cells, chunk):
            d = ((cells[lo:lo + chunk, None, :] - C[None, :, :]) ** 2).sum(axis=2)
            nearest = d == d.min(axis=1, keepdims=True)
            # among equidistant buildings the lowest part index wins
            env[lo:lo + chunk] = np.where(nearest, part[None, :], plan.n_parts).min(axis=1)
    env_load = np.bincount(env, minlength=plan.n_parts).astype(float).tolist()
    return PartitionPlan(plan.n_parts, dict(plan.assignment), list(plan.load), env, env_load)


def imbalance(plan: PartitionPlan) -> float:
    """Max part load over mean part load; 1.0 is perfect."""
    total = sum(plan.load)
    if total <= 0:
        raise ValueError("total weight must be positive")
    return max(plan.load) / (total / plan.n_parts)
