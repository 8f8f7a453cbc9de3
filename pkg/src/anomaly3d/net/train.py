"""Self-supervised training of the masked-patch model on normal clouds.

Every step draws training clouds, picks patch centers with salience-boosted
sampling on a random subset of each cloud's points, hides a fresh random
subset of patches and takes one AdamW step on the Chamfer reconstruction loss.
The subset varies the centers from step to step, which a deterministic
sampler over the full cloud would not.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..errors import EmptyDataset, NonFiniteLoss
from ..geometry import NeighborIndex, PointCloud, as_points
from ..gps import GpsConfig, SalienceField, salience
from ..patching import make_patches, mask_count, select_centers
from .model import ModelConfig, ModelParams, init_params, loss_and_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 1
    subsample: float = 0.5
    checkpoint_every: int = 0
    tau: float = 0.3
    salient_boost: float = 2.0

    def to_dict(self) -> Dict:
        return asdict(self)


def cosine_lr(step: int, total: int, lr: float, lr_min: float) -> float:
    """Learning rate for 0-based ``step`` decaying from ``lr`` to ``lr_min``."""
    if total <= 1:
        return lr
    t = min(step, total - 1) / (total - 1)
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * t))


@dataclass
class TrainState:
    params: ModelParams
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    seed: int
    losses: List[float] = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.params.step

    @classmethod
    def fresh(cls, params: ModelParams, seed: int) -> "TrainState":
        zeros = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        return cls(params, zeros, {k: np.zeros_like(v) for k, v in params.tensors.items()}, seed)

    def optimizer_tensors(self) -> Dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out


def adamw_step(state: TrainState, grads: Dict[str, np.ndarray], lr: float, cfg: TrainConfig) -> None:
    """Decoupled weight decay on matrices only; biases, norms and the mask token are not decayed."""
    t = state.params.step + 1
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in state.params.tensors.items():
        g = grads[name].astype(p.dtype, copy=False)
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if p.ndim >= 2 and cfg.weight_decay:
            p *= p.dtype.type(1.0 - lr * cfg.weight_decay)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype)
    state.params.step = t


class TrainingData:
    """Training clouds with their salience fields and kd-trees, built once."""

    def __init__(self, clouds: Sequence, radius: Optional[float] = None):
        if not clouds:
            raise EmptyDataset("training needs at least one cloud")
        self.points = [as_points(c) for c in clouds]
        self.fields: List[SalienceField] = [salience(p, radius) for p in self.points]
        self.indices = [NeighborIndex(p) for p in self.points]

    def __len__(self) -> int:
        return len(self.points)

    def batch(self, rng: np.random.Generator, mcfg: ModelConfig, tcfg: TrainConfig):
        """Local coords, centers and masks for ``tcfg.batch`` random clouds."""
        local, centers, masked = [], [], []
        n_m = mask_count(mcfg.n_c, mcfg.m)
        gps = GpsConfig(tcfg.tau, tcfg.salient_boost, mcfg.n_c)
        for _ in range(tcfg.batch):
            ci = int(rng.integers(len(self.points)))
            pts = self.points[ci]
            n = len(pts)
            size = max(mcfg.n_c, int(round(tcfg.subsample * n)))
            if size < n:
                sub = np.sort(rng.choice(n, size, replace=False))
                field = self.fields[ci].restrict(sub)
                ctr = sub[select_centers(pts[sub], mcfg.n_c, "gps", field, gps)]
            else:
                ctr = select_centers(pts, mcfg.n_c, "gps", self.fields[ci], gps)
            ps = make_patches(pts, ctr, mcfg.k, self.indices[ci])
            mask = np.zeros(mcfg.n_c, dtype=bool)
            if n_m:
                mask[rng.choice(mcfg.n_c, n_m, replace=False)] = True
            local.append(ps.local_coords)
            centers.append(ps.centers)
            masked.append(mask)
        return np.stack(local), np.stack(centers), np.stack(masked)


def train(clouds, mcfg: ModelConfig, tcfg: TrainConfig, seed: int,
          state: Optional[TrainState] = None,
          on_checkpoint: Optional[Callable[[TrainState], None]] = None,
          data: Optional[TrainingData] = None) -> TrainState:
    """Run ``tcfg.steps`` optimizer steps; returns the final state.

    Raises NonFiniteLoss (after calling ``on_checkpoint`` with nothing new) if
    the loss or the parameters stop being finite.
    """
    data = data or TrainingData(clouds)
    if state is None:
        state = TrainState.fresh(init_params(mcfg, np.random.SeedSequence([seed, 0])), seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    for i in range(tcfg.steps):
        local, centers, masked = data.batch(rng, mcfg, tcfg)
        loss, grads = loss_and_grad(state.params, local, centers, masked)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NonFiniteLoss(f"non-finite loss or gradient at step {state.step + 1}: {loss}")
        lr = cosine_lr(i, tcfg.steps, tcfg.lr, tcfg.lr_min)
        adamw_step(state, grads, lr, tcfg)
        state.losses.append(loss)
        if not state.params.all_finite():
            raise NonFiniteLoss(f"parameters became non-finite at step {state.step}")
        if (i + 1) % 100 == 0:
            log.info("step %d loss %.6f lr %.2e", state.step, np.mean(state.losses[-100:]), lr)
        if on_checkpoint and tcfg.checkpoint_every and (i + 1) % tcfg.checkpoint_every == 0:
            on_checkpoint(state)
    return state
