"""Asymmetric masked-patch transformer.

The encoder sees only visible patch tokens. The decoder sees the full
sequence with a shared learned mask token at every hidden position, and a
linear head turns decoder outputs at hidden positions into k x 3
center-relative point offsets. Positions (an MLP of the patch centers) are
added at the input of every block.

All batched entry points take arrays with a leading batch axis B; every
sample in a batch has the same patch count and the same number of hidden
patches.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..errors import CountMismatch, InvalidInput, ShapeMismatch
from ..patching import MaskSpec, PatchSet
from . import layers as L


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    enc_layers: int = 3
    dec_layers: int = 3
    heads: int = 4
    mlp_ratio: int = 4
    k: int = 64
    n_c: int = 256
    m: float = 0.4
    embed_hidden: int = 128

    def __post_init__(self):
        for name in ("d", "enc_layers", "dec_layers", "heads", "mlp_ratio", "k", "n_c", "embed_hidden"):
            if int(getattr(self, name)) < 1:
                raise InvalidInput(f"{name} must be >= 1")
        if self.d % self.heads:
            raise InvalidInput(f"d={self.d} is not divisible by heads={self.heads}")
        if not 0.0 <= self.m < 1.0:
            raise InvalidInput("m must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def feature_layers(self) -> int:
        """Number of decoder blocks tapped for features (at most 3)."""
        return min(3, self.dec_layers)

    def to_dict(self) -> Dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered tensor names and shapes."""
    d, hid, mlp = cfg.d, cfg.embed_hidden, cfg.d * cfg.mlp_ratio
    shapes: Dict[str, Tuple[int, ...]] = {}
    for pre in ("embed.", "pos."):
        shapes[pre + "fc1.w"] = (3, hid)
        shapes[pre + "fc1.b"] = (hid,)
        shapes[pre + "fc2.w"] = (hid, d)
        shapes[pre + "fc2.b"] = (d,)

    def block(pre):
        shapes[pre + "ln1.g"] = (d,)
        shapes[pre + "ln1.b"] = (d,)
        shapes[pre + "attn.qkv.w"] = (d, 3 * d)
        shapes[pre + "attn.qkv.b"] = (3 * d,)
        shapes[pre + "attn.proj.w"] = (d, d)
        shapes[pre + "attn.proj.b"] = (d,)
        shapes[pre + "ln2.g"] = (d,)
        shapes[pre + "ln2.b"] = (d,)
        shapes[pre + "mlp.fc1.w"] = (d, mlp)
        shapes[pre + "mlp.fc1.b"] = (mlp,)
        shapes[pre + "mlp.fc2.w"] = (mlp, d)
        shapes[pre + "mlp.fc2.b"] = (d,)

    for i in range(cfg.enc_layers):
        block(f"enc.{i}.")
    shapes["enc.norm.g"] = (d,)
    shapes["enc.norm.b"] = (d,)
    shapes["mask_token"] = (d,)
    for i in range(cfg.dec_layers):
        block(f"dec.{i}.")
    shapes["dec.norm.g"] = (d,)
    shapes["dec.norm.b"] = (d,)
    shapes["head.w"] = (d, cfg.k * 3)
    shapes["head.b"] = (cfg.k * 3,)
    return shapes


@dataclass
class ModelParams:
    """Named weight tensors plus the number of optimizer steps taken."""

    config: ModelConfig
    tensors: Dict[str, np.ndarray]
    step: int = 0

    def __post_init__(self):
        expected = param_shapes(self.config)
        if list(self.tensors) != list(expected):
            missing = set(expected) ^ set(self.tensors)
            raise ShapeMismatch(f"parameter names differ from the config: {sorted(missing)[:5]}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {self.tensors[name].shape}")

    @property
    def trained(self) -> bool:
        return self.step > 0

    @property
    def dtype(self):
        return self.tensors["head.w"].dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}, self.step)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.step)

    def n_params(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(cfg: ModelConfig, seed, dtype=np.float32) -> ModelParams:
    """Truncated-normal (std 0.02, cut at 2 std) weights and the mask token,
    zero biases and offsets, unit norm scales."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "mask_token" or leaf == "w":
            t = _trunc_normal(rng, shape, 0.02)
        elif leaf == "g":
            t = np.ones(shape)
        else:
            t = np.zeros(shape)
        tensors[name] = t.astype(dtype)
    return ModelParams(cfg, tensors, 0)


def zeros_like(params: ModelParams) -> Dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def pos_embed(centers, p):
    h, c1 = L.linear_fwd(centers, p["pos.fc1.w"], p["pos.fc1.b"])
    h, cg = L.gelu_fwd(h)
    y, c2 = L.linear_fwd(h, p["pos.fc2.w"], p["pos.fc2.b"])
    return y, (c1, cg, c2)


def _pos_embed_bwd(dy, cache, p, g):
    c1, cg, c2 = cache
    dh, dw, db = L.linear_bwd(dy, c2, p["pos.fc2.w"])
    g["pos.fc2.w"] += dw
    g["pos.fc2.b"] += db
    dh = L.gelu_bwd(dh, cg)
    _, dw, db = L.linear_bwd(dh, c1, p["pos.fc1.w"])
    g["pos.fc1.w"] += dw
    g["pos.fc1.b"] += db


def _take(a, idx):
    """Gather rows ``idx`` (B, m) along axis 1 of ``a`` (B, n, ...)."""
    return np.take_along_axis(a, idx.reshape(idx.shape + (1,) * (a.ndim - 2)), axis=1)


@dataclass
class BatchOutput:
    offsets: np.ndarray             # (B, n_m, k, 3) center-relative predictions
    features: List[np.ndarray]      # per tapped decoder block, (B, n_c, d)
    cache: Optional[tuple] = None


def mask_indices(masked: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Sorted visible and hidden positions per batch row."""
    masked = np.asarray(masked, dtype=bool)
    counts = masked.sum(axis=1)
    if np.any(counts != counts[0]):
        raise ShapeMismatch("every batch row must hide the same number of patches")
    order = np.argsort(masked, axis=1, kind="stable")  # visible first, both ascending
    n_m = int(counts[0])
    n_v = masked.shape[1] - n_m
    return order[:, :n_v], order[:, n_v:]


def forward_batch(params: ModelParams, local: np.ndarray, centers: np.ndarray,
                  masked: np.ndarray, keep_cache: bool = False) -> BatchOutput:
    cfg = params.config
    p = params.tensors
    dt = params.dtype
    local = np.asarray(local, dtype=dt)
    centers = np.asarray(centers, dtype=dt)
    if local.ndim != 4 or local.shape[2:] != (cfg.k, 3):
        raise ShapeMismatch(f"local coords must be (B, n_c, {cfg.k}, 3), got {local.shape}")
    B, n_c = local.shape[:2]
    if centers.shape != (B, n_c, 3) or np.shape(masked) != (B, n_c):
        raise ShapeMismatch("centers / mask do not match the local coordinates")
    vis_idx, mask_idx = mask_indices(masked)
    if vis_idx.shape[1] == 0:
        raise ShapeMismatch("at least one patch must be visible")

    tok, c_emb = L.pointnet_fwd(_take(local, vis_idx), p, "embed.")
    pos, c_pos = pos_embed(centers, p)
    pos_v = _take(pos, vis_idx)
    x = tok
    c_enc = []
    for i in range(cfg.enc_layers):
        x, c = L.block_fwd(x, pos_v, p, f"enc.{i}.", cfg.heads)
        c_enc.append(c)
    x, c_encn = L.layernorm_fwd(x, p["enc.norm.g"], p["enc.norm.b"])

    y = np.empty((B, n_c, cfg.d), dtype=dt)
    np.put_along_axis(y, vis_idx[..., None], x, axis=1)
    if mask_idx.shape[1]:
        np.put_along_axis(y, mask_idx[..., None],
                          np.broadcast_to(p["mask_token"], (B, mask_idx.shape[1], cfg.d)), axis=1)
    taps, c_dec = [], []
    for i in range(cfg.dec_layers):
        y, c = L.block_fwd(y, pos, p, f"dec.{i}.", cfg.heads)
        c_dec.append(c)
        if i < cfg.feature_layers:
            taps.append(y)
    yn, c_decn = L.layernorm_fwd(y, p["dec.norm.g"], p["dec.norm.b"])
    ym = _take(yn, mask_idx)
    off, c_head = L.linear_fwd(ym, p["head.w"], p["head.b"])
    off = off.reshape(B, mask_idx.shape[1], cfg.k, 3)
    cache = None
    if keep_cache:
        cache = (vis_idx, mask_idx, c_emb, c_pos, c_enc, c_encn, c_dec, c_decn, c_head, (B, n_c))
    return BatchOutput(off, taps, cache)


def backward_batch(params: ModelParams, out: BatchOutput, d_offsets: np.ndarray) -> Dict[str, np.ndarray]:
    """Gradients of every tensor given d(loss)/d(offsets)."""
    cfg = params.config
    p = params.tensors
    g = zeros_like(params)
    vis_idx, mask_idx, c_emb, c_pos, c_enc, c_encn, c_dec, c_decn, c_head, (B, n_c) = out.cache
    n_m = mask_idx.shape[1]
    dym, dw, db = L.linear_bwd(d_offsets.reshape(B, n_m, cfg.k * 3), c_head, p["head.w"])
    g["head.w"] += dw
    g["head.b"] += db
    dyn = np.zeros((B, n_c, cfg.d), dtype=dym.dtype)
    np.put_along_axis(dyn, mask_idx[..., None], dym, axis=1)
    dy, dg, db = L.layernorm_bwd(dyn, c_decn)
    g["dec.norm.g"] += dg
    g["dec.norm.b"] += db
    dpos = np.zeros_like(dy)
    for i in reversed(range(cfg.dec_layers)):
        dy, dp = L.block_bwd(dy, c_dec[i], p, f"dec.{i}.", g)
        dpos += dp
    if n_m:
        g["mask_token"] += _take(dy, mask_idx).sum(axis=(0, 1))
    dx = _take(dy, vis_idx)
    dx, dg, db = L.layernorm_bwd(dx, c_encn)
    g["enc.norm.g"] += dg
    g["enc.norm.b"] += db
    dpos_v = np.zeros_like(dx)
    for i in reversed(range(cfg.enc_layers)):
        dx, dp = L.block_bwd(dx, c_enc[i], p, f"enc.{i}.", g)
        dpos_v += dp
    # visible rows are distinct per batch row, so a plain scatter-add is exact
    rows = np.arange(B)[:, None]
    np.add.at(dpos, (rows, vis_idx), dpos_v)
    L.pointnet_bwd(dx, c_emb, p, "embed.", g)
    _pos_embed_bwd(dpos, c_pos, p, g)
    return g


def chamfer_loss(pred: np.ndarray, target: np.ndarray, need_grad: bool = False):
    """Mean over patches of the symmetric l2 Chamfer distance.

    ``pred`` and ``target`` are (..., k, 3) stacks of center-relative patches.
    Returns the loss, plus d(loss)/d(pred) when ``need_grad``.
    """
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape[:-2] != target.shape[:-2]:
        raise CountMismatch(f"{pred.shape[:-2]} predicted vs {target.shape[:-2]} target patches")
    lead = pred.shape[:-2]
    n_patch = int(np.prod(lead)) if lead else 1
    if n_patch == 0:
        return (0.0, np.zeros_like(pred)) if need_grad else 0.0
    a = pred.reshape(n_patch, pred.shape[-2], 3)
    b = target.reshape(n_patch, target.shape[-2], 3)
    diff = a[:, :, None, :] - b[:, None, :, :]
    d2 = np.einsum("pijc,pijc->pij", diff, diff)
    ia = d2.argmin(axis=2)   # nearest target of each prediction
    ib = d2.argmin(axis=1)   # nearest prediction of each target
    da = np.take_along_axis(d2, ia[:, :, None], axis=2)[..., 0]
    db = np.take_along_axis(d2, ib[:, None, :], axis=1)[:, 0, :]
    loss = float((da.mean(axis=1) + db.mean(axis=1)).mean())
    if not need_grad:
        return loss
    ka, kb = a.shape[1], b.shape[1]
    r = np.arange(n_patch)[:, None]
    grad = 2.0 * (a - b[r, ia]) / ka
    gb = 2.0 * (a[r, ib] - b) / kb
    np.add.at(grad, (np.broadcast_to(r, ib.shape), ib), gb)
    grad /= n_patch
    return loss, grad.reshape(pred.shape).astype(pred.dtype)


def loss_and_grad(params: ModelParams, local: np.ndarray, centers: np.ndarray,
                  masked: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    out = forward_batch(params, local, centers, masked, keep_cache=True)
    _, mask_idx = mask_indices(masked)
    target = _take(np.asarray(local, dtype=params.dtype), mask_idx)
    loss, d_off = chamfer_loss(out.offsets, target, need_grad=True)
    return loss, backward_batch(params, out, d_off)


@dataclass
class ForwardResult:
    offsets: np.ndarray            # (n_m, k, 3) center-relative
    centers: np.ndarray            # (n_m, 3) centers of the hidden patches
    features: List[np.ndarray]     # per tapped block, (n_c, d)

    @property
    def absolute(self) -> np.ndarray:
        return self.offsets + self.centers[:, None, :]

    def fused_features(self) -> np.ndarray:
        """Tapped block outputs concatenated along the feature axis."""
        return np.concatenate(self.features, axis=-1)


def forward(params: ModelParams, patchset: PatchSet, maskspec: MaskSpec) -> ForwardResult:
    """Predictions for the hidden patches of one cloud plus decoder features."""
    if len(maskspec.masked) != patchset.n_centers:
        raise ShapeMismatch("mask length differs from the patch count")
    out = forward_batch(params, patchset.local_coords[None], patchset.centers[None],
                        maskspec.masked[None])
    return ForwardResult(out.offsets[0], patchset.centers[maskspec.masked_idx],
                         [f[0] for f in out.features])


def loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Reconstruction loss between predicted and true center-relative patches."""
    return chamfer_loss(pred, target)
