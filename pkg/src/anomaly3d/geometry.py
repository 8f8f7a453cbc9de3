"""Point-cloud and mesh types plus the geometric kernels used everywhere else.

All kernels are pure functions over numpy arrays. Anywhere a ``PointCloud`` is
accepted a plain ``(n, 3)`` array works too.

Neighbor ordering is by squared Euclidean distance with ties broken by
ascending point index, so every query is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    CountTooLarge,
    EmptySet,
    InsufficientNeighbors,
    InvalidInput,
    InvalidMesh,
    KTooLarge,
)

DEFAULT_EPS = 1e-9
RADIUS_FACTOR = 2.5
# extra candidates fetched from the kd-tree so index tie-breaks can be applied
_TIE_PAD = 8


def _frozen(a: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if a is not None:
        a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PointCloud:
    """n x 3 coordinates with optional per-point normals and ground truth.

    Attributes:
        points: (n, 3) float64 coordinates.
        normals: optional (n, 3) unit vectors.
        gt_label: optional (n,) uint8, 1 = anomalous.
        region_id: optional (n,) int32, 0 = normal, >= 1 = defect region.
    """

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    gt_label: Optional[np.ndarray] = None
    region_id: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise InvalidInput("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        n = len(pts)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=np.float64, copy=True).reshape(-1, 3)
            if len(nrm) != n:
                raise InvalidInput(f"normals has {len(nrm)} rows, expected {n}")
            if n and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-6:
                raise InvalidInput("normals must be unit length")
            object.__setattr__(self, "normals", _frozen(nrm))
        if self.gt_label is not None:
            gt = np.array(self.gt_label, dtype=np.uint8, copy=True).reshape(-1)
            if len(gt) != n:
                raise InvalidInput(f"gt_label has {len(gt)} entries, expected {n}")
            if np.any(gt > 1):
                raise InvalidInput("gt_label must be binary")
            object.__setattr__(self, "gt_label", _frozen(gt))
        if self.region_id is not None:
            reg = np.array(self.region_id, dtype=np.int32, copy=True).reshape(-1)
            if len(reg) != n:
                raise InvalidInput(f"region_id has {len(reg)} entries, expected {n}")
            if np.any(reg < 0):
                raise InvalidInput("region_id must be non-negative")
            if self.gt_label is not None and np.any((reg > 0) != (self.gt_label == 1)):
                raise InvalidInput("region_id > 0 must coincide with gt_label == 1")
            object.__setattr__(self, "region_id", _frozen(reg))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def with_normals(self, normals: np.ndarray) -> "PointCloud":
        return replace(self, normals=normals)

    def subset(self, idx: np.ndarray) -> "PointCloud":
        """Cloud restricted to ``idx`` (all per-point fields follow)."""
        idx = np.asarray(idx)
        take = lambda a: None if a is None else a[idx]  # noqa: E731
        return PointCloud(
            self.points[idx], take(self.normals), take(self.gt_label), take(self.region_id)
        )


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64, copy=True).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64, copy=True).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise InvalidMesh("mesh vertices must be finite")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise InvalidMesh("face index out of range")
        if len(f) and np.any(
            (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        ):
            raise InvalidMesh("degenerate face (repeated vertex index)")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals following the face winding."""
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        fn = np.cross(b - a, c - a)
        vn = np.zeros_like(self.vertices)
        for i in range(3):
            np.add.at(vn, self.faces[:, i], fn)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        norm[norm == 0] = 1.0
        return vn / norm


@dataclass
class NeighborGraph:
    """Per-query neighbor lists.

    For kNN queries ``indices`` is a dense (m, k) array. For radius queries it
    is padded with -1 and ``valid`` marks real entries.
    """

    indices: np.ndarray
    sq_dists: np.ndarray
    k: Optional[int] = None
    radius: Optional[float] = None
    valid: Optional[np.ndarray] = None

    def neighbors(self, i: int) -> np.ndarray:
        if self.valid is None:
            return self.indices[i]
        return self.indices[i][self.valid[i]]

    def counts(self) -> np.ndarray:
        if self.valid is None:
            return np.full(len(self.indices), self.indices.shape[1])
        return self.valid.sum(axis=1)


CloudLike = Union[PointCloud, np.ndarray]


def as_points(cloud: CloudLike) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise InvalidInput("point coordinates must be finite")
    return pts


def _sq_dist(points: np.ndarray, idx: np.ndarray, queries: np.ndarray) -> np.ndarray:
    diff = points[idx] - queries[:, None, :]
    return np.sum(diff * diff, axis=-1)


class NeighborIndex:
    """kd-tree wrapper with deterministic kNN and radius queries."""

    def __init__(self, cloud: CloudLike):
        self.points = as_points(cloud)
        self.tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def knn(self, queries, k: int) -> NeighborGraph:
        n = len(self.points)
        if k > n:
            raise KTooLarge(f"k={k} exceeds point count {n}")
        if k < 1:
            raise InvalidInput("k must be >= 1")
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(q)):
            raise InvalidInput("query coordinates must be finite")
        m = min(n, k + _TIE_PAD)
        _, cand = self.tree.query(q, k=m)
        cand = np.asarray(cand, dtype=np.int64).reshape(len(q), m)
        d2 = _sq_dist(self.points, cand, q)
        order = np.lexsort((cand, d2), axis=-1)
        cand = np.take_along_axis(cand, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)
        if m < n:
            # the k-th distance ties with the window edge: candidates may be missing
            unsafe = np.flatnonzero(d2[:, k - 1] >= d2[:, -1] * (1.0 - 1e-12))
            for r in unsafe:
                all_d2 = np.sum((self.points - q[r]) ** 2, axis=1)
                full = np.lexsort((np.arange(n), all_d2))[:m]
                cand[r], d2[r] = full, all_d2[full]
        return NeighborGraph(cand[:, :k].copy(), d2[:, :k].copy(), k=k)

    def radius(self, radius: float, queries=None) -> NeighborGraph:
        """Neighbors within ``radius`` (inclusive) of each point, self excluded.

        With ``queries`` given, neighbors of arbitrary positions are returned
        and no self-exclusion applies.
        """
        if radius <= 0:
            raise InvalidInput("radius must be positive")
        self_query = queries is None
        q = self.points if self_query else np.asarray(queries, np.float64).reshape(-1, 3)
        n = len(self.points)
        r_pad = radius * (1.0 + 1e-9)
        counts = self.tree.query_ball_point(q, r_pad, return_length=True)
        kmax = max(int(np.max(counts)) if len(q) else 1, 1)
        kmax = min(kmax, n)
        _, idx = self.tree.query(q, k=kmax, distance_upper_bound=r_pad * (1.0 + 1e-9))
        idx = np.asarray(idx, dtype=np.int64).reshape(len(q), kmax)
        present = idx < n
        safe = np.where(present, idx, 0)
        d2 = _sq_dist(self.points, safe, q)
        valid = present & (d2 <= radius * radius)
        if self_query:
            valid &= safe != np.arange(len(q))[:, None]
        # compact valid entries to the left, ordered by (distance, index)
        key_d = np.where(valid, d2, np.inf)
        key_i = np.where(valid, safe, n)
        order = np.lexsort((key_i, key_d), axis=-1)
        safe = np.take_along_axis(safe, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)
        valid = np.take_along_axis(valid, order, axis=1)
        width = max(int(valid.sum(axis=1).max()) if len(q) else 0, 1)
        safe, d2, valid = safe[:, :width], d2[:, :width], valid[:, :width]
        return NeighborGraph(
            np.where(valid, safe, -1), np.where(valid, d2, np.inf), radius=radius, valid=valid
        )


def knn(cloud: CloudLike, queries, k: int) -> NeighborGraph:
    """k nearest cloud points of each query, sorted by (distance, index)."""
    return NeighborIndex(cloud).knn(queries, k)


def radius_neighbors(cloud: CloudLike, radius: float) -> NeighborGraph:
    return NeighborIndex(cloud).radius(radius)


def mean_spacing(cloud: CloudLike) -> float:
    """Mean distance from each point to its nearest other point."""
    pts = as_points(cloud)
    if len(pts) < 2:
        raise EmptySet("need at least two points to measure spacing")
    d, _ = cKDTree(pts).query(pts, k=2)
    return float(np.mean(d[:, 1]))


def default_radius(cloud: CloudLike, min_neighbors: int = 3) -> float:
    """Neighborhood radius: RADIUS_FACTOR times the sampling pitch.

    The pitch of a uniformly random surface sample is about twice its mean
    nearest-neighbor distance. The radius then grows by 25% steps until every
    point has ``min_neighbors`` neighbors.
    """
    pts = as_points(cloud)
    r = RADIUS_FACTOR * 2.0 * mean_spacing(pts)
    if len(pts) <= min_neighbors:
        return r
    tree = cKDTree(pts)
    for _ in range(40):
        counts = tree.query_ball_point(pts, r, return_length=True) - 1
        if counts.min() >= min_neighbors:
            break
        r *= 1.25
    return float(r)


@dataclass
class LocalShape:
    """Neighborhood PCA results for every point of a cloud."""

    graph: NeighborGraph
    eigvals: np.ndarray  # (n, 3) ascending
    eigvecs: np.ndarray  # (n, 3, 3), columns match eigvals
    centroid: np.ndarray = field(default_factory=lambda: np.zeros(3))


def local_shape(cloud: CloudLike, radius: Optional[float] = None, min_neighbors: int = 3) -> LocalShape:
    """Covariance eigen-decomposition of each point's radius neighborhood.

    The neighborhood is the point itself plus its radius neighbors; fitting
    the plane through their mean absorbs the signed plane offset.
    """
    pts = as_points(cloud)
    if radius is None:
        radius = default_radius(pts)
    graph = NeighborIndex(pts).radius(radius)
    counts = graph.counts()
    short = np.flatnonzero(counts < min_neighbors)
    if len(short):
        raise InsufficientNeighbors(int(short[0]), int(counts[short[0]]), min_neighbors)
    n = len(pts)
    idx = np.concatenate([np.arange(n)[:, None], np.where(graph.valid, graph.indices, 0)], axis=1)
    w = np.concatenate([np.ones((n, 1)), graph.valid.astype(np.float64)], axis=1)
    nb = pts[idx]
    wsum = w.sum(axis=1)
    mean = np.einsum("nk,nkd->nd", w, nb) / wsum[:, None]
    centered = (nb - mean[:, None, :]) * np.sqrt(w)[:, :, None]
    cov = np.einsum("nki,nkj->nij", centered, centered) / wsum[:, None, None]
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    return LocalShape(graph, evals, evecs, pts.mean(axis=0))


def orient_outward(points: np.ndarray, normals: np.ndarray, centroid: np.ndarray) -> np.ndarray:
    """Flip normals so dot(normal, p - centroid) >= 0; ties keep the +z side."""
    rel = points - centroid
    dots = np.sum(normals * rel, axis=1)
    tie = np.abs(dots) <= 1e-12 * np.maximum(np.linalg.norm(rel, axis=1), 1e-300)
    flip = np.where(tie, normals[:, 2] < 0, dots < 0)
    out = normals.copy()
    out[flip] *= -1.0
    return out


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def estimate_normals(cloud: CloudLike, radius: Optional[float] = None, shape: Optional[LocalShape] = None) -> PointCloud:
    """Plane-fit normals (smallest-eigenvalue eigenvector), oriented outward."""
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(cloud)
    shape = shape or local_shape(cloud, radius)
    normals = _unit(shape.eigvecs[:, :, 0])
    normals = orient_outward(cloud.points, normals, shape.centroid)
    return cloud.with_normals(normals)


def curvature(cloud: CloudLike, radius: Optional[float] = None, eps: float = DEFAULT_EPS,
              shape: Optional[LocalShape] = None) -> np.ndarray:
    """lambda_min / (lambda_min + lambda_mid + eps) per point, in [0, 0.5]."""
    shape = shape or local_shape(cloud, radius)
    lam_c, lam_b = shape.eigvals[:, 0], shape.eigvals[:, 1]
    return lam_c / (lam_b + lam_c + eps)


def chamfer_l2(a, b) -> float:
    """Symmetric l2 Chamfer distance (sum of both mean squared NN distances)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptySet("chamfer_l2 needs two non-empty sets")
    if len(a) * len(b) <= 4_000_000:
        d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
        return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())
    _, ia = cKDTree(b).query(a)
    _, ib = cKDTree(a).query(b)
    da = np.sum((a - b[ia]) ** 2, axis=1)
    db = np.sum((b - a[ib]) ** 2, axis=1)
    return float(da.mean() + db.mean())


def chamfer_l2_batched(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Chamfer distance between matching sets of two (m, k, 3) stacks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0]:
        raise InvalidInput(f"incompatible stacks {a.shape} and {b.shape}")
    if a.shape[1] == 0 or b.shape[1] == 0:
        raise EmptySet("chamfer_l2 needs two non-empty sets")
    out = np.empty(len(a))
    for s in range(0, len(a), chunk):
        aa, bb = a[s:s + chunk], b[s:s + chunk]
        d2 = np.sum((aa[:, :, None, :] - bb[:, None, :, :]) ** 2, axis=-1)
        out[s:s + chunk] = d2.min(axis=2).mean(axis=1) + d2.min(axis=1).mean(axis=1)
    return out


def fps(cloud: CloudLike, count: int, start: int = 0, pool: Optional[np.ndarray] = None,
        weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Farthest point sampling.

    Args:
        cloud: points to sample from.
        count: number of indices to return.
        start: first pick, as a position inside ``pool`` when a pool is given.
        pool: optional subset of indices to restrict sampling to.
        weights: optional positive per-candidate multipliers on the squared
            distance score; local spacing then shrinks as 1/sqrt(weight).

    Returns:
        Indices into ``cloud`` in pick order. Ties go to the lowest position.
    """
    pts = as_points(cloud)
    cand = pts if pool is None else pts[np.asarray(pool, dtype=np.int64)]
    if count > len(cand):
        raise CountTooLarge(f"requested {count} samples from {len(cand)} points")
    if count <= 0:
        return np.zeros(0, dtype=np.int64)
    sel = np.empty(count, dtype=np.int64)
    sel[0] = start
    w = None if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w is not None and (len(w) != len(cand) or np.any(w <= 0)):
        raise InvalidInput("fps weights must be positive, one per candidate")
    d = np.sum((cand - cand[start]) ** 2, axis=1)
    d[start] = -1.0
    for i in range(1, count):
        j = int(np.argmax(d if w is None else d * w))
        sel[i] = j
        d = np.minimum(d, np.sum((cand - cand[j]) ** 2, axis=1))
        d[sel[: i + 1]] = -1.0
    return sel if pool is None else np.asarray(pool, dtype=np.int64)[sel]


def random_sample(cloud: CloudLike, count: int, seed: int) -> np.ndarray:
    n = len(as_points(cloud))
    if count > n:
        raise CountTooLarge(f"requested {count} samples from {n} points")
    return np.random.default_rng(seed).choice(n, size=count, replace=False)


def voxel_sample(cloud: CloudLike, voxel: float) -> np.ndarray:
    """One point per occupied voxel: the one nearest the voxel centroid."""
    if voxel <= 0:
        raise InvalidInput("voxel size must be positive")
    pts = as_points(cloud)
    if len(pts) == 0:
        return np.zeros(0, dtype=np.int64)
    keys = np.floor((pts - pts.min(axis=0)) / voxel).astype(np.int64)
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    m = inv.max() + 1
    sums = np.zeros((m, 3))
    np.add.at(sums, inv, pts)
    cent = sums / np.bincount(inv, minlength=m)[:, None]
    d2 = np.sum((pts - cent[inv]) ** 2, axis=1)
    order = np.lexsort((np.arange(len(pts)), d2, inv))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inv[order][1:] != inv[order][:-1]
    return order[first]
