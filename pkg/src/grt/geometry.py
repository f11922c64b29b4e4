"""Deterministic spatial primitives over batches of 2D point clouds.

Batches are stored as concatenated clouds plus an ``offsets`` array of cloud
boundaries ``[0, n_1, n_1 + n_2, ..., N]``. Every query is cloud-local.

All distances are evaluated in float64. Ties are resolved by the
lexicographic order of the candidate's ``(x, y)`` and finally by its index,
which makes sampling and neighbor search reproducible and (up to exact
duplicates) independent of the input ordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CloudGeometry:
    """Coordinates of one or more concatenated clouds."""

    coords: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        offsets = np.asarray(self.offsets, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"coords must have shape (N, 2), got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coords must be finite")
        if offsets.ndim != 1 or len(offsets) < 2 or offsets[0] != 0:
            raise ValueError("offsets must start at 0 and list at least one cloud")
        if np.any(np.diff(offsets) <= 0):
            raise ValueError("offsets must be strictly increasing (every cloud needs a point)")
        if offsets[-1] != len(coords):
            raise ValueError(f"offsets end at {offsets[-1]} but there are {len(coords)} points")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "offsets", offsets)

    @classmethod
    def single(cls, coords) -> "CloudGeometry":
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        return cls(coords, np.array([0, len(coords)]))

    @classmethod
    def concat(cls, clouds) -> "CloudGeometry":
        clouds = [np.asarray(c, dtype=np.float64).reshape(-1, 2) for c in clouds]
        sizes = [len(c) for c in clouds]
        return cls(np.concatenate(clouds), np.concatenate([[0], np.cumsum(sizes)]))

    @property
    def num_clouds(self) -> int:
        return len(self.offsets) - 1

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def cloud(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def subset(self, index: np.ndarray, offsets: np.ndarray) -> "CloudGeometry":
        return CloudGeometry(self.coords[index], offsets)

    def __len__(self):
        return len(self.coords)


@dataclass(frozen=True)
class NeighborTable:
    """``indices[i, j]`` is the global index of the j-th neighbor of query i."""

    indices: np.ndarray

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def __len__(self):
        return len(self.indices)


def lexicographic_rank(coords: np.ndarray) -> np.ndarray:
    """Rank of each point under the (x, y, index) order."""
    order = np.lexsort((np.arange(len(coords)), coords[:, 1], coords[:, 0]))
    rank = np.empty(len(coords), dtype=np.int64)
    rank[order] = np.arange(len(coords))
    return rank


def _pick_max(values: np.ndarray, rank: np.ndarray) -> int:
    best = values.max()
    candidates = np.flatnonzero(values == best)
    if len(candidates) == 1:
        return int(candidates[0])
    return int(candidates[np.argmin(rank[candidates])])


def _fps_single(coords: np.ndarray, m: int) -> np.ndarray:
    rank = lexicographic_rank(coords)
    centroid = coords.mean(axis=0)
    d_centroid = ((coords - centroid) ** 2).sum(axis=1)
    selected = np.empty(m, dtype=np.int64)
    selected[0] = _pick_max(d_centroid, rank)
    min_d = ((coords - coords[selected[0]]) ** 2).sum(axis=1)
    taken = np.zeros(len(coords), dtype=bool)
    taken[selected[0]] = True
    for t in range(1, m):
        # already-selected points are excluded so duplicates can still be picked
        cand = np.where(taken, -1.0, min_d)
        nxt = _pick_max(cand, rank)
        selected[t] = nxt
        taken[nxt] = True
        np.minimum(min_d, ((coords - coords[nxt]) ** 2).sum(axis=1), out=min_d)
    return selected


def farthest_point_sampling(geom: CloudGeometry, m_per_cloud) -> np.ndarray:
    """Greedy farthest point sampling, cloud by cloud.

    ``m_per_cloud`` is an int or one count per cloud. The first pick is the
    point farthest from the cloud centroid; every subsequent pick maximizes the
    distance to the already selected set. Returns global indices, cloud by
    cloud, each cloud's block in selection order.
    """
    counts = np.broadcast_to(np.asarray(m_per_cloud, dtype=np.int64), (geom.num_clouds,))
    out = []
    for c in range(geom.num_clouds):
        sl = geom.cloud(c)
        n = sl.stop - sl.start
        m = int(counts[c])
        if m < 1 or m > n:
            raise ValueError(f"cannot sample {m} points from cloud {c} with {n} points")
        out.append(_fps_single(geom.coords[sl], m) + sl.start)
    return np.concatenate(out)


def _knn_single(q: np.ndarray, r: np.ndarray, k: int) -> np.ndarray:
    d2 = ((q[:, None, :] - r[None, :, :]) ** 2).sum(axis=2)
    shape = d2.shape
    keys = (
        np.broadcast_to(np.arange(len(r)), shape),
        np.broadcast_to(r[:, 1], shape),
        np.broadcast_to(r[:, 0], shape),
        d2,
    )
    order = np.lexsort(keys, axis=-1)
    return order[:, :k]


def knn(queries: CloudGeometry, references: CloudGeometry, k: int) -> NeighborTable:
    """Exact k nearest references for every query, within the same cloud.

    Rows are sorted by distance, then neighbor x, neighbor y, neighbor index.
    """
    if queries.num_clouds != references.num_clouds:
        raise ValueError(
            f"queries span {queries.num_clouds} clouds, references {references.num_clouds}"
        )
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    too_small = np.flatnonzero(references.sizes < k)
    if len(too_small):
        raise ValueError(
            f"k={k} exceeds the reference count of cloud(s) {too_small.tolist()}"
        )
    rows = []
    for c in range(queries.num_clouds):
        qs, rs = queries.cloud(c), references.cloud(c)
        rows.append(_knn_single(queries.coords[qs], references.coords[rs], k) + rs.start)
    return NeighborTable(np.concatenate(rows).astype(np.int64))


def relative_positions(
    queries: CloudGeometry, neighbors: NeighborTable, references: CloudGeometry
) -> np.ndarray:
    """Displacements ``p_query - p_neighbor`` with shape (M, k, 2)."""
    idx = neighbors.indices
    if len(idx) != len(queries):
        raise ValueError(f"{len(idx)} neighbor rows for {len(queries)} queries")
    if idx.size and (idx.min() < 0 or idx.max() >= len(references)):
        raise ValueError("neighbor index out of range")
    return queries.coords[:, None, :] - references.coords[idx]
