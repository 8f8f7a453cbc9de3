"""Point patches, random patch masks and patch/position embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import DegenerateMask, InvalidInput, InvalidRatio, KTooLarge, ShapeMismatch
from .geometry import CloudLike, NeighborIndex, as_points


@dataclass
class PatchSet:
    """Centers, their k nearest cloud points and center-relative coordinates."""

    centers: np.ndarray        # (n_c, 3)
    neighbor_idx: np.ndarray   # (n_c, k) indices into the source cloud
    local_coords: np.ndarray   # (n_c, k, 3)
    center_idx: Optional[np.ndarray] = None

    @property
    def n_centers(self) -> int:
        return len(self.centers)

    @property
    def k(self) -> int:
        return self.local_coords.shape[1]

    def points(self) -> np.ndarray:
        """Absolute coordinates of every patch point, (n_c * k, 3)."""
        return (self.local_coords + self.centers[:, None, :]).reshape(-1, 3)

    def with_local(self, local: np.ndarray) -> "PatchSet":
        if local.shape != self.local_coords.shape:
            raise ShapeMismatch(f"expected {self.local_coords.shape}, got {local.shape}")
        return PatchSet(self.centers, self.neighbor_idx, local, self.center_idx)


def make_patches(cloud: CloudLike, centers: np.ndarray, k: int,
                 index: Optional[NeighborIndex] = None) -> PatchSet:
    """kNN patches around the cloud points at ``centers`` (an index list).

    Each center is its own nearest neighbor and sits at local (0, 0, 0) in
    slot 0, even when duplicate points tie with it.
    """
    pts = as_points(cloud)
    centers = np.asarray(centers, dtype=np.int64).reshape(-1)
    if len(centers) and (centers.min() < 0 or centers.max() >= len(pts)):
        raise InvalidInput("center index out of range")
    if k > len(pts):
        raise KTooLarge(f"k={k} exceeds point count {len(pts)}")
    index = index or NeighborIndex(pts)
    nb = index.knn(pts[centers], k).indices
    for r in np.flatnonzero(nb[:, 0] != centers):
        row = nb[r]
        hit = np.flatnonzero(row == centers[r])
        pos = hit[0] if len(hit) else k - 1
        nb[r] = np.concatenate([[centers[r]], np.delete(row, pos)])
    c = pts[centers]
    return PatchSet(c, nb, pts[nb] - c[:, None, :], centers)


def patches_at(cloud: CloudLike, center_coords: np.ndarray, k: int,
               index: Optional[NeighborIndex] = None) -> PatchSet:
    """kNN patches of ``cloud`` around arbitrary coordinates."""
    pts = as_points(cloud)
    c = np.asarray(center_coords, dtype=np.float64).reshape(-1, 3)
    if k > len(pts):
        raise KTooLarge(f"k={k} exceeds point count {len(pts)}")
    index = index or NeighborIndex(pts)
    nb = index.knn(c, k).indices
    return PatchSet(c, nb, pts[nb] - c[:, None, :])


@dataclass
class MaskSpec:
    """Boolean mask over patches; True marks a patch hidden from the encoder."""

    masked: np.ndarray
    ratio: float

    def __post_init__(self):
        self.masked = np.asarray(self.masked, dtype=bool).reshape(-1)
        if self.masked.all() and len(self.masked):
            raise DegenerateMask("at least one patch must stay visible")

    @property
    def masked_idx(self) -> np.ndarray:
        return np.flatnonzero(self.masked)

    @property
    def visible_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.masked)

    @classmethod
    def none(cls, n_c: int) -> "MaskSpec":
        return cls(np.zeros(n_c, dtype=bool), 0.0)


def mask_count(n_c: int, m: float) -> int:
    return int(math.floor(m * n_c + 1e-9))


def random_mask(n_c: int, m: float, seed) -> MaskSpec:
    """Uniformly random subset of floor(m * n_c) patches, seed-deterministic."""
    if not 0.0 <= m < 1.0:
        raise InvalidRatio(f"mask ratio must lie in [0, 1), got {m}")
    count = mask_count(n_c, m)
    if m > 0 and count == 0:
        raise DegenerateMask(f"mask ratio {m} hides no patch out of {n_c}")
    if count >= n_c:
        raise DegenerateMask("at least one patch must stay visible")
    rng = np.random.default_rng(seed)
    masked = np.zeros(n_c, dtype=bool)
    masked[rng.choice(n_c, size=count, replace=False)] = True
    return MaskSpec(masked, m)


@dataclass
class TokenBatch:
    tokens: np.ndarray
    d: int


def embed_patches(patchset: PatchSet, maskspec: MaskSpec, params) -> Tuple[TokenBatch, TokenBatch]:
    """Visible-patch tokens and positional embeddings of every center."""
    from .net.layers import pointnet_fwd
    from .net.model import pos_embed

    p = params.tensors
    d = params.config.d
    if len(maskspec.masked) != patchset.n_centers:
        raise ShapeMismatch("mask length differs from the patch count")
    if patchset.k != params.config.k:
        raise ShapeMismatch(f"patch size {patchset.k} differs from model k={params.config.k}")
    dtype = p["embed.fc1.w"].dtype
    local = patchset.local_coords[maskspec.visible_idx].astype(dtype)
    tok, _ = pointnet_fwd(local, p, "embed.")
    pos, _ = pos_embed(patchset.centers.astype(dtype), p)
    return TokenBatch(tok, d), TokenBatch(pos, d)


SAMPLERS = ("gps", "fps", "rs", "voxel")


def select_centers(cloud: CloudLike, n_c: int, sampler: str = "gps", field=None,
                   gps_cfg=None, seed=0) -> np.ndarray:
    """Patch-center indices from one of the supported samplers.

    ``gps`` needs a salience field (computed when omitted). ``voxel`` searches
    the voxel size whose occupied-cell count first reaches ``n_c`` and keeps
    ``n_c`` of those points by FPS.
    """
    from .geometry import fps, random_sample, voxel_sample
    from .gps import GpsConfig, gps_centers, salience

    pts = as_points(cloud)
    if sampler == "gps":
        field = field if field is not None else salience(pts)
        cfg = gps_cfg or GpsConfig(center_count=n_c)
        if cfg.center_count != n_c:
            cfg = GpsConfig(cfg.tau, cfg.salient_boost, n_c)
        return gps_centers(pts, field, cfg)
    if sampler == "fps":
        return fps(pts, n_c, start=0)
    if sampler == "rs":
        return np.sort(random_sample(pts, n_c, seed))
    if sampler == "voxel":
        if n_c > len(pts):
            from .errors import CountTooLarge
            raise CountTooLarge(f"requested {n_c} centers from {len(pts)} points")
        hi = float(np.max(np.ptp(pts, axis=0))) + 1e-9
        lo = hi / 1e4
        for _ in range(60):
            mid = math.sqrt(lo * hi)
            if len(voxel_sample(pts, mid)) >= n_c:
                lo = mid
            else:
                hi = mid
        picks = voxel_sample(pts, lo)
        return picks[fps(pts[picks], n_c, start=0)]
    raise InvalidInput(f"unknown sampler {sampler!r}; choose from {SAMPLERS}")
