"""Anomaly scoring by iterative masked reconstruction.

A test cloud is cut into patches, and random subsets of patches are hidden
and re-predicted a few times so that defective patches are likely to be
replaced by normal-looking geometry. Two per-point fields compare the input
with that reconstruction:

* a point field: Chamfer distance between each point's neighborhood in the
  input and the same-sized neighborhood around it in the reconstruction;
* a feature field: cosine distance between multi-layer decoder features of
  the input patches and of the reconstructed patches, interpolated from the
  patch centers to every point.

Reconstructed features that stray too far from a stored normal template are
swapped for the template feature before the comparison. Both fields are
normalized and averaged; the object score is the mean of the top 1% of the
fused field. Normalization uses the field ranges seen on normal training
clouds when the template carries them, and per-cloud min-max otherwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import (EmptyCloud, EmptyDataset, InvalidIterations, ShapeMismatch,
                     TemplateMismatch, UntrainedModel)
from .geometry import NeighborIndex, PointCloud, as_points, chamfer_l2_batched
from .gps import GpsConfig, salience
from .io import atomic_write_text, write_ply
from .net.model import ModelParams, forward_batch
from .patching import PatchSet, make_patches, random_mask, select_centers

IDW_EPS = 1e-9


@dataclass(frozen=True)
class DetectConfig:
    m: float = 0.4
    iterations: int = 3
    score_k: int = 64
    sampler: str = "gps"
    tau: float = 0.3
    salient_boost: float = 2.0
    tau_reg_percentile: float = 97.5
    use_template: bool = True
    top_fraction: float = 0.01
    seed: int = 0

    def to_dict(self) -> Dict:
        return asdict(self)


# ---------------------------------------------------------------- reconstruction

@dataclass
class ReconstructionResult:
    recon_cloud: PointCloud
    patches: PatchSet                     # final working patches (same centers as the input)
    input_patches: PatchSet
    iterates: List[np.ndarray] = field(default_factory=list)  # local coords after each pass


def input_patches(cloud, params: ModelParams, cfg: DetectConfig = DetectConfig(),
                  index: Optional[NeighborIndex] = None) -> PatchSet:
    pts = as_points(cloud)
    mc = params.config
    fld = salience(pts) if cfg.sampler == "gps" else None
    centers = select_centers(pts, mc.n_c, cfg.sampler, fld,
                             GpsConfig(cfg.tau, cfg.salient_boost, mc.n_c), seed=cfg.seed)
    return make_patches(pts, centers, mc.k, index)


def _require_trained(params: ModelParams, allow_untrained: bool):
    if not params.trained and not allow_untrained:
        raise UntrainedModel("model parameters have never been trained (step 0)")


def iterative_reconstruct(cloud, params: ModelParams, m: float = 0.4, T: int = 3, seed=0,
                          patches: Optional[PatchSet] = None, keep_iterates: bool = False,
                          allow_untrained: bool = False,
                          cfg: DetectConfig = DetectConfig()) -> ReconstructionResult:
    """Hide a fresh random mask T times and overwrite the hidden patches with predictions.

    Centers never move; visible patches keep their current coordinates. Pass
    ``t`` uses the mask seeded by ``(seed, t)``.
    """
    _require_trained(params, allow_untrained)
    if not isinstance(T, (int, np.integer)) or T < 0:
        raise InvalidIterations(f"iterations must be a non-negative integer, got {T!r}")
    ps = patches if patches is not None else input_patches(cloud, params, cfg)
    work = ps.local_coords.copy()
    iterates = []
    for t in range(int(T)):
        mask = random_mask(ps.n_centers, m, np.random.SeedSequence([int(seed), t]))
        out = forward_batch(params, work[None], ps.centers[None], mask.masked[None])
        work[mask.masked_idx] = out.offsets[0].astype(np.float64)
        if keep_iterates:
            iterates.append(work.copy())
    final = ps.with_local(work)
    return ReconstructionResult(PointCloud(_recon_points(cloud, final, ps)), final, ps, iterates)


def _recon_points(cloud, patches: PatchSet, original: PatchSet) -> np.ndarray:
    """Union of the patch points plus the input points no patch covers.

    Uncovered input points have no prediction, so they stand for themselves;
    otherwise every gap between patches would score as a defect. Patches that
    were never overwritten contribute their exact input points rather than
    center + offset, which can differ in the last bit.
    """
    pts = as_points(cloud)
    covered = np.zeros(len(pts), dtype=bool)
    covered[patches.neighbor_idx.reshape(-1)] = True
    same = np.all(patches.local_coords == original.local_coords, axis=(1, 2))
    moved = patches.points().reshape(patches.n_centers, -1, 3)[~same].reshape(-1, 3)
    kept = pts[patches.neighbor_idx[same].reshape(-1)]
    return np.unique(np.concatenate([moved, kept, pts[~covered]]), axis=0)


# ---------------------------------------------------------------- point field

def score_points(input_cloud, recon_cloud, k: int = 64, chunk: int = 128) -> np.ndarray:
    """Chamfer distance between each point's k-neighborhood in both clouds."""
    a = as_points(input_cloud)
    b = as_points(recon_cloud)
    if len(a) == 0 or len(b) == 0:
        raise EmptyCloud("score_points needs two non-empty clouds")
    ka, kb = min(k, len(a)), min(k, len(b))
    ia = NeighborIndex(a).knn(a, ka).indices
    ib = NeighborIndex(b).knn(a, kb).indices
    out = np.empty(len(a))
    for s in range(0, len(a), chunk):
        q = a[s:s + chunk, None, :]
        out[s:s + chunk] = chamfer_l2_batched(a[ia[s:s + chunk]] - q, b[ib[s:s + chunk]] - q)
    return out


# ---------------------------------------------------------------- feature field

def patch_features(params: ModelParams, patches: PatchSet) -> np.ndarray:
    """Fused decoder features (n_c, 3d) with every patch visible."""
    mask = np.zeros((1, patches.n_centers), dtype=bool)
    out = forward_batch(params, patches.local_coords[None], patches.centers[None], mask)
    return np.concatenate([f[0] for f in out.features], axis=-1).astype(np.float64)


@dataclass
class FeatureTemplate:
    features: np.ndarray      # (n_c, 3d)
    centers: np.ndarray       # (n_c, 3)
    distances: np.ndarray     # training distance bank
    tau_reg: float
    diameter: float
    scale: Optional["ScoreScale"] = None

    def __post_init__(self):
        if not self.tau_reg > 0:
            raise ShapeMismatch("tau_reg must be positive")

    def match(self, centers: np.ndarray, cloud_diameter: Optional[float] = None) -> np.ndarray:
        """Nearest template center of every given center."""
        d, j = cKDTree(self.centers).query(np.asarray(centers, dtype=np.float64))
        limit = 0.5 * (cloud_diameter if cloud_diameter is not None else self.diameter)
        if np.any(d > limit):
            raise TemplateMismatch(f"center lies {float(d.max()):.3g} from the template (limit {limit:.3g})")
        return j


def regularize(features: np.ndarray, centers: np.ndarray, template: Optional[FeatureTemplate],
               cloud_diameter: Optional[float] = None, tau_reg: Optional[float] = None):
    """Swap feature vectors that drift beyond tau_reg from the matched template vector.

    Returns (regularized features, replaced mask, distances before replacement).
    """
    if template is None:
        return features, np.zeros(len(features), dtype=bool), np.zeros(len(features))
    if features.shape[1] != template.features.shape[1]:
        raise TemplateMismatch("feature width differs from the template")
    j = template.match(centers, cloud_diameter)
    ref = template.features[j]
    d = np.linalg.norm(ref - features, axis=1)
    thr = template.tau_reg if tau_reg is None else tau_reg
    replace = d > thr
    out = features.copy()
    out[replace] = ref[replace]
    return out, replace, d


def cosine_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise 1 - cos(a, b); zero vectors count as identical to each other."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    dot = np.sum(a * b, axis=1)
    denom = na * nb
    cos = np.where(denom > 0, dot / np.where(denom > 0, denom, 1.0), np.where((na == 0) & (nb == 0), 1.0, 0.0))
    return np.clip(1.0 - cos, 0.0, 2.0)


def interpolate_to_points(points: np.ndarray, centers: np.ndarray, values: np.ndarray,
                          neighbors: int = 3) -> np.ndarray:
    """Inverse-distance weights 1/(d + 1e-9) over the nearest centers, normalized."""
    k = min(neighbors, len(centers))
    d, j = cKDTree(centers).query(points, k=k)
    d, j = d.reshape(len(points), k), j.reshape(len(points), k)
    w = 1.0 / (d + IDW_EPS)
    return np.sum(w * values[j], axis=1) / np.sum(w, axis=1)


def _diameter(pts: np.ndarray) -> float:
    return float(np.linalg.norm(np.ptp(pts, axis=0)))


def score_features(input_cloud, recon: ReconstructionResult, params: ModelParams,
                   template: Optional[FeatureTemplate] = None, allow_untrained: bool = False,
                   return_centers: bool = False):
    """Per-point feature-distance field (and optionally the per-center values)."""
    _require_trained(params, allow_untrained)
    pts = as_points(input_cloud)
    f_in = patch_features(params, recon.input_patches)
    f_out = patch_features(params, recon.patches)
    f_out, _, _ = regularize(f_out, recon.patches.centers, template, _diameter(pts))
    per_center = cosine_distance(f_in, f_out)
    per_point = interpolate_to_points(pts, recon.patches.centers, per_center)
    return (per_point, per_center) if return_centers else per_point


def build_template(train_clouds: Sequence, params: ModelParams, cfg: DetectConfig = DetectConfig(),
                   allow_untrained: bool = False) -> FeatureTemplate:
    """Template from the first training cloud; distance bank from the others.

    Distances are measured between reconstructed-patch features of each other
    training cloud and the matched template features, the same comparison
    that regularization makes at test time. tau_reg is the configured
    percentile of that bank, or 0.25 x the median template feature norm when
    only one cloud is available. The other clouds are then scored like test
    clouds to fix the fusion scale.
    """
    _require_trained(params, allow_untrained)
    if not train_clouds:
        raise EmptyDataset("template construction needs at least one training cloud")
    first = as_points(train_clouds[0])
    ps0 = input_patches(first, params, cfg)
    feats = patch_features(params, ps0)
    diameter = _diameter(first)
    probe = FeatureTemplate(feats, ps0.centers, np.zeros(0), 1.0, diameter)
    bank, recons = [], []
    for c in train_clouds[1:]:
        pts = as_points(c)
        rec = iterative_reconstruct(pts, params, cfg.m, cfg.iterations, cfg.seed,
                                    allow_untrained=True, cfg=cfg)
        f = patch_features(params, rec.patches)
        j = probe.match(rec.patches.centers, _diameter(pts))
        bank.append(np.linalg.norm(feats[j] - f, axis=1))
        recons.append((pts, rec))
    bank = np.concatenate(bank) if bank else np.zeros(0)
    if len(bank):
        tau = float(np.percentile(bank, cfg.tau_reg_percentile))
    else:
        tau = 0.25 * float(np.median(np.linalg.norm(feats, axis=1)))
    tau = max(tau, 1e-12)
    template = FeatureTemplate(feats, ps0.centers, bank, tau, diameter)
    if recons:
        use = template if cfg.use_template else None
        fields = [(score_points(pts, rec.recon_cloud, cfg.score_k),
                   score_features(pts, rec, params, use, allow_untrained=True))
                  for pts, rec in recons]
        template.scale = ScoreScale.fit([a for a, _ in fields], [b for _, b in fields])
    return template


# ---------------------------------------------------------------- fusion

def minmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def top_mean(x: np.ndarray, fraction: float = 0.01) -> float:
    """Mean of the largest ``fraction`` of values (at least one)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    count = max(1, int(math.floor(fraction * len(x))))
    return float(np.mean(np.partition(x, len(x) - count)[len(x) - count:]))


@dataclass
class AnomalyScores:
    point_scores: np.ndarray
    a_p: np.ndarray
    a_f: np.ndarray
    object_score: float
    meta: Dict = field(default_factory=dict)

    def to_json(self) -> Dict:
        return {
            "object_score": float(self.object_score),
            "a_p_max": float(np.max(self.a_p)),
            "a_f_max": float(np.max(self.a_f)),
            **self.meta,
        }


@dataclass(frozen=True)
class ScoreScale:
    """Per-class ranges of both score fields on normal training clouds."""

    lo_p: float
    hi_p: float
    lo_f: float
    hi_f: float

    @classmethod
    def fit(cls, a_p: Sequence[np.ndarray], a_f: Sequence[np.ndarray]) -> "ScoreScale":
        if not a_p or not a_f:
            raise EmptyDataset("score scale needs at least one normal cloud")
        p = np.concatenate([np.ravel(x) for x in a_p])
        f = np.concatenate([np.ravel(x) for x in a_f])
        return cls(float(p.min()), float(p.max()), float(f.min()), float(f.max()))

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def squash(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map a field through its normal range: 0 at ``lo``, 1/2 at ``hi``, below 1 always."""
    span = hi - lo
    if not span > 0:
        return np.zeros_like(np.asarray(x, dtype=np.float64))
    c = np.clip((np.asarray(x, dtype=np.float64) - lo) / span, 0.0, None)
    return c / (1.0 + c)


def fuse(a_p: np.ndarray, a_f: np.ndarray, top_fraction: float = 0.01,
         scale: Optional[ScoreScale] = None) -> AnomalyScores:
    """Average of the two normalized fields; object score = mean of the top fraction.

    Without ``scale`` each field is min-max normalized over this cloud. With
    a ``scale`` fitted on normal clouds, each field is squashed relative to
    its normal range instead, so scores stay comparable across clouds.
    """
    a_p = np.asarray(a_p, dtype=np.float64)
    a_f = np.asarray(a_f, dtype=np.float64)
    if a_p.shape != a_f.shape:
        raise ShapeMismatch("score fields differ in length")
    if scale is None:
        A = 0.5 * (minmax(a_p) + minmax(a_f))
    else:
        A = 0.5 * (squash(a_p, scale.lo_p, scale.hi_p) + squash(a_f, scale.lo_f, scale.hi_f))
    return AnomalyScores(A, a_p, a_f, top_mean(A, top_fraction))


# ---------------------------------------------------------------- pipeline

class Detector:
    """Scores clouds with one trained model and optional template."""

    def __init__(self, params: ModelParams, template: Optional[FeatureTemplate] = None,
                 cfg: DetectConfig = DetectConfig(), allow_untrained: bool = False):
        _require_trained(params, allow_untrained)
        self.params = params
        self.template = template if cfg.use_template else None
        self.scale = template.scale if template is not None else None
        self.cfg = cfg
        self.allow_untrained = allow_untrained

    def score(self, cloud) -> AnomalyScores:
        pts = as_points(cloud)
        cfg = self.cfg
        rec = iterative_reconstruct(pts, self.params, cfg.m, cfg.iterations, cfg.seed,
                                    allow_untrained=self.allow_untrained, cfg=cfg)
        a_p = score_points(pts, rec.recon_cloud, cfg.score_k)
        a_f = score_features(pts, rec, self.params, self.template, self.allow_untrained)
        s = fuse(a_p, a_f, cfg.top_fraction, self.scale)
        s.meta = {"iterations": cfg.iterations, "m": cfg.m, "calibrated": self.scale is not None}
        return s


def feature_dispersion(clouds: Sequence, params: ModelParams, cfg: DetectConfig = DetectConfig(),
                       allow_untrained: bool = False) -> np.ndarray:
    """Standard deviation of every fused-feature dimension over all centers of all clouds."""
    _require_trained(params, allow_untrained)
    rows = [patch_features(params, input_patches(c, params, cfg)) for c in clouds]
    if not rows:
        raise EmptyDataset("feature_dispersion needs at least one cloud")
    return np.std(np.concatenate(rows), axis=0)


def write_dispersion_csv(path, std: np.ndarray) -> None:
    lines = ["dim,std"] + [f"{i},{float(v)!r}" for i, v in enumerate(std)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def export_scores(ply_path, json_path, cloud: PointCloud, scores: AnomalyScores) -> None:
    """Input cloud plus float32 score fields, and a JSON summary."""
    extra = {"score": scores.point_scores.astype(np.float32),
             "a_p": scores.a_p.astype(np.float32), "a_f": scores.a_f.astype(np.float32)}
    write_ply(ply_path, cloud, extra)
    atomic_write_text(json_path, json.dumps(scores.to_json(), indent=2, sort_keys=True) + "\n")
