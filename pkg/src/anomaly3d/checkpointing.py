"""Per-class model directories: ``model.bin``, ``template.bin`` and ``loss.csv``."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .detect import FeatureTemplate, ScoreScale
from .io import atomic_write_text
from .net.checkpoint import read_container, write_container


def save_template(path, template: FeatureTemplate) -> None:
    meta = {"tau_reg": float(template.tau_reg), "diameter": float(template.diameter),
            "scale": template.scale.to_dict() if template.scale is not None else None}
    write_container(path, "template", meta, {
        "features": template.features, "centers": template.centers, "distances": template.distances,
    })


def load_template(path) -> FeatureTemplate:
    _, meta, t = read_container(path, "template")
    scale = meta.get("scale")
    return FeatureTemplate(t["features"].astype(np.float64), t["centers"].astype(np.float64),
                           t["distances"].astype(np.float64), float(meta["tau_reg"]),
                           float(meta["diameter"]), ScoreScale(**scale) if scale else None)


def write_loss_csv(path, losses: Sequence[float], start_step: int = 1) -> None:
    lines = ["step,loss"] + [f"{start_step + i},{float(v)!r}" for i, v in enumerate(losses)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_loss_csv(path):
    rows = Path(path).read_text().splitlines()[1:]
    return [(int(a), float(b)) for a, b in (r.split(",") for r in rows if r)]
