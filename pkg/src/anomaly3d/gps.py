"""Geometry-aware center sampling.

Every point gets a rate-of-change score: the mean over its radius neighbors of
the normal difference per unit distance plus the absolute curvature
difference. Points ranked in the top ``floor(tau * n)`` form the salient set,
which receives ``salient_boost`` times the center density of the rest.

Inside the salient pool, FPS scores each candidate by its squared distance to
the chosen centers times ``clip(R / R_tau, 1, boost**2) ** 2`` where ``R_tau``
is the salience at the rank threshold. Center spacing therefore shrinks in
proportion to the rate of change (at most ``boost**2`` fold) while the pool
stays covered. With flat salience, or ``salient_boost == 1``, this is plain FPS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CountTooLarge, InsufficientNeighbors, InvalidInput, IsolatedPoint
from .geometry import (
    DEFAULT_EPS,
    CloudLike,
    PointCloud,
    as_points,
    curvature,
    default_radius,
    estimate_normals,
    fps,
    local_shape,
)


@dataclass(frozen=True)
class GpsConfig:
    tau: float = 0.3
    salient_boost: float = 2.0
    center_count: int = 256

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise InvalidInput(f"tau must be in (0, 1], got {self.tau}")
        if self.salient_boost < 1.0:
            raise InvalidInput(f"salient_boost must be >= 1, got {self.salient_boost}")
        if self.center_count < 1:
            raise InvalidInput("center_count must be >= 1")


@dataclass
class SalienceField:
    """Per-point rate of change ``R`` and its descending rank (1 = highest)."""

    R: np.ndarray
    rank: np.ndarray
    R_norm: Optional[np.ndarray] = None
    R_curv: Optional[np.ndarray] = None

    @classmethod
    def from_values(cls, R: np.ndarray, **parts) -> "SalienceField":
        R = np.asarray(R, dtype=np.float64)
        order = rank_order(R)
        rank = np.empty(len(R), dtype=np.int64)
        rank[order] = np.arange(1, len(R) + 1)
        return cls(R, rank, **parts)

    def restrict(self, idx: np.ndarray) -> "SalienceField":
        """Field over a subset of points, re-ranked within the subset."""
        return SalienceField.from_values(self.R[idx])


def rank_order(R: np.ndarray) -> np.ndarray:
    """Indices sorted by descending R, ties by ascending index."""
    return np.lexsort((np.arange(len(R)), -np.asarray(R)))


def salience(cloud: CloudLike, radius: Optional[float] = None, eps: float = DEFAULT_EPS) -> SalienceField:
    """Rate-of-change field over a cloud.

    Normals and curvature are estimated from the same radius neighborhoods
    when the cloud carries no normals.
    """
    pts = as_points(cloud)
    if radius is None:
        radius = default_radius(pts)
    has_normals = isinstance(cloud, PointCloud) and cloud.normals is not None
    shape = local_shape(pts, radius, min_neighbors=0)
    counts = shape.graph.counts()
    if np.any(counts == 0):
        raise IsolatedPoint(int(np.flatnonzero(counts == 0)[0]))
    if not has_normals and np.any(counts < 3):
        short = int(np.flatnonzero(counts < 3)[0])
        raise InsufficientNeighbors(short, int(counts[short]))
    if has_normals:
        normals = cloud.normals
    else:
        normals = estimate_normals(pts, shape=shape).normals
    K = curvature(pts, eps=eps, shape=shape)
    idx = np.where(shape.graph.valid, shape.graph.indices, 0)
    valid = shape.graph.valid
    dist = np.sqrt(shape.graph.sq_dists)
    dn = np.linalg.norm(normals[:, None, :] - normals[idx], axis=-1)
    # coincident points: zero distance contributes no normal-rate term
    with np.errstate(divide="ignore", invalid="ignore"):
        r_norm = np.where(valid & (dist > 0), dn / dist, 0.0)
    r_curv = np.where(valid, np.abs(K[:, None] - K[idx]), 0.0)
    c = counts.astype(np.float64)
    R_norm = r_norm.sum(axis=1) / c
    R_curv = r_curv.sum(axis=1) / c
    return SalienceField.from_values(R_norm + R_curv, R_norm=R_norm, R_curv=R_curv)


def salient_set(field: SalienceField, tau: float) -> np.ndarray:
    """Indices whose rank is within ``floor(tau * n)``, in rank order."""
    n = len(field.R)
    top = int(math.floor(tau * n))
    return np.argsort(field.rank, kind="stable")[:top]


def salient_quota(q: int, n_salient: int, n: int, boost: float) -> int:
    """Number of centers drawn from the salient pool (round half up)."""
    if n == 0:
        return 0
    s = n_salient / n
    denom = s * boost + (1.0 - s)
    return int(math.floor(q * s * boost / denom + 0.5))


def salience_weights(R: np.ndarray, r_tau: float, boost: float) -> np.ndarray:
    """FPS score multipliers for salient candidates; 1 where salience is flat."""
    floor = 1e-9 * max(float(np.max(R)), 1e-300)
    if r_tau <= floor or boost <= 1.0:
        return np.ones(len(R))
    ratio = np.clip(R / r_tau, 1.0, boost * boost)
    return ratio * ratio


def gps_centers(cloud: CloudLike, field: SalienceField, cfg: GpsConfig) -> np.ndarray:
    """Salience-boosted FPS: quota from the salient pool, remainder elsewhere."""
    pts = as_points(cloud)
    n = len(pts)
    q = cfg.center_count
    if q > n:
        raise CountTooLarge(f"requested {q} centers from {n} points")
    if len(field.R) != n:
        raise InvalidInput("salience field does not match cloud size")
    S = salient_set(field, cfg.tau)
    if len(S) == 0:
        return fps(pts, q, start=int(rank_order(field.R)[0]))
    in_s = np.zeros(n, dtype=bool)
    in_s[S] = True
    comp = np.flatnonzero(~in_s)
    q_s = salient_quota(q, len(S), n, cfg.salient_boost)
    q_ns = q - q_s
    # overflow moves to the other pool
    if q_s > len(S):
        q_ns += q_s - len(S)
        q_s = len(S)
    if q_ns > len(comp):
        q_s += q_ns - len(comp)
        q_ns = len(comp)
    S_sorted = np.sort(S)
    picks = []
    if q_s:
        start = int(np.searchsorted(S_sorted, S[0]))  # S[0] is the global max-R point
        w = salience_weights(field.R[S_sorted], field.R[S[-1]], cfg.salient_boost)
        picks.append(fps(pts, q_s, start=start, pool=S_sorted, weights=w))
    if q_ns:
        best = comp[rank_order(field.R[comp])[0]]
        start = int(np.searchsorted(comp, best))
        picks.append(fps(pts, q_ns, start=start, pool=comp))
    return np.concatenate(picks)
