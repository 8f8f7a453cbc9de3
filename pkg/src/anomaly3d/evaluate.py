"""Dataset-level evaluation and ablation sweeps.

Each class has its own model directory ``<ckpt_dir>/<class>/`` holding
``model.bin`` and ``template.bin``. Reports list per-class I-AUROC (object
scores), P-AUROC (all test points) and AUPRO (synthesis regions, one region
per defect per cloud).

Wall-clock timings are kept out of ``report.json`` and ``report.csv`` unless
requested, so identical runs give byte-identical reports; they always go to
the returned report object and the log.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .detect import DetectConfig, Detector, FeatureTemplate
from .errors import InvalidInput, ManifestMismatch, MissingModel
from .io import atomic_write_text, read_ply
from .metrics import aupro, roc_auc
from .net.model import ModelParams
from .synth import class_samples

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("class", "i_auroc", "p_auroc", "aupro", "n_test", "seconds")
GRID_COLUMNS = ("param", "value", "i_auroc", "p_auroc", "aupro")
ABLATION_PARAMS = ("mask_ratio", "iterations", "patch_k", "sampler")


@dataclass
class ClassMetrics:
    i_auroc: float
    p_auroc: float
    aupro: float
    n_test: int
    seconds: float = 0.0


@dataclass
class MetricReport:
    classes: Dict[str, ClassMetrics]
    fingerprint: str
    stage_seconds: Dict[str, float] = field(default_factory=dict)

    @property
    def mean(self) -> Dict[str, float]:
        vals = list(self.classes.values())
        return {k: float(np.mean([getattr(v, k) for v in vals]))
                for k in ("i_auroc", "p_auroc", "aupro")}

    def to_json(self, timings: bool = False) -> Dict:
        cls = {}
        for name, m in self.classes.items():
            d = asdict(m)
            if not timings:
                d.pop("seconds")
            cls[name] = d
        out = {"classes": cls, "mean": self.mean, "fingerprint": self.fingerprint}
        if timings:
            out["stage_seconds"] = dict(self.stage_seconds)
        return out

    @classmethod
    def from_json(cls, data: Dict) -> "MetricReport":
        classes = {k: ClassMetrics(**{"seconds": 0.0, **v}) for k, v in data["classes"].items()}
        return cls(classes, data["fingerprint"], data.get("stage_seconds", {}))

    def to_csv(self, timings: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for name, m in self.classes.items():
            w.writerow([name, repr(m.i_auroc), repr(m.p_auroc), repr(m.aupro), m.n_test,
                        repr(round(m.seconds, 3)) if timings else ""])
        mean = self.mean
        w.writerow(["mean", repr(mean["i_auroc"]), repr(mean["p_auroc"]), repr(mean["aupro"]),
                    sum(m.n_test for m in self.classes.values()), ""])
        return buf.getvalue()

    def write(self, out_dir, timings: bool = False) -> None:
        out = Path(out_dir)
        atomic_write_text(out / "report.json",
                          json.dumps(self.to_json(timings), indent=2, sort_keys=True) + "\n")
        atomic_write_text(out / "report.csv", self.to_csv(timings))


def read_report_csv(path) -> Dict[str, Dict[str, str]]:
    with open(path, newline="") as f:
        return {row["class"]: row for row in csv.DictReader(f)}


def fingerprint(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(json.dumps(p, sort_keys=True, default=str).encode("utf-8"))
    return h.hexdigest()[:16]


@dataclass
class ClassModel:
    params: ModelParams
    template: Optional[FeatureTemplate]


def load_class_models(ckpt_dir, classes: Sequence[str]) -> Dict[str, ClassModel]:
    from .checkpointing import load_template
    from .net.checkpoint import load_model

    missing = [c for c in classes if not (Path(ckpt_dir) / c / "model.bin").exists()]
    if missing:
        raise MissingModel(f"no checkpoint for classes: {', '.join(missing)}")
    out = {}
    for c in classes:
        params, _, _ = load_model(Path(ckpt_dir) / c / "model.bin")
        tpath = Path(ckpt_dir) / c / "template.bin"
        out[c] = ClassModel(params, load_template(tpath) if tpath.exists() else None)
    return out


def _load_test(manifest: Dict, cls: str):
    root = Path(manifest["root"])
    recs = class_samples(manifest, cls, "test")
    if not recs:
        raise ManifestMismatch(f"class {cls!r} has no test samples")
    clouds = []
    for r in recs:
        cloud, _ = read_ply(root / r["path"])
        if len(cloud) != r["point_count"]:
            raise ManifestMismatch(f"{r['path']} holds {len(cloud)} points, manifest says {r['point_count']}")
        if cloud.gt_label is None or cloud.region_id is None:
            raise ManifestMismatch(f"{r['path']} lacks ground truth")
        clouds.append((r, cloud))
    return clouds


def class_metrics(object_scores, labels, point_scores, gts, regions, fpr_limit=0.3) -> Dict[str, float]:
    """Metrics for one class. Region ids are made unique per cloud."""
    keyed, offset = [], 0
    for reg in regions:
        keyed.append(np.where(reg > 0, reg + offset, 0))
        offset += int(reg.max()) if len(reg) else 0
    pts = np.concatenate(point_scores)
    return {
        "i_auroc": roc_auc(object_scores, labels),
        "p_auroc": roc_auc(pts, np.concatenate(gts)),
        "aupro": aupro(pts, np.concatenate(keyed), fpr_limit),
    }


def evaluate(manifest: Dict, models: Optional[Dict[str, ClassModel]], cfg: DetectConfig = DetectConfig(),
             fpr_limit: float = 0.3, oracle: bool = False, classes: Optional[Sequence[str]] = None,
             jobs: int = 1) -> MetricReport:
    """Score every test cloud of every class and compute the metrics.

    With ``oracle`` the ground truth itself is used as the score (a harness
    self-test) and no model is needed.
    """
    classes = list(classes or manifest["classes"])
    if not classes:
        raise ManifestMismatch("manifest lists no classes")
    if not oracle:
        missing = [c for c in classes if models is None or c not in models]
        if missing:
            raise MissingModel(f"no model for classes: {', '.join(missing)}")
    report = MetricReport({}, fingerprint(cfg.to_dict(), fpr_limit, oracle, classes))
    t_all = time.perf_counter()
    for cls in classes:
        t0 = time.perf_counter()
        tests = _load_test(manifest, cls)
        if oracle:
            scored = [(float(r["is_anomalous"]), c.gt_label.astype(np.float64)) for r, c in tests]
        else:
            det = Detector(models[cls].params, models[cls].template, cfg)
            scored = _score_all(det, [c for _, c in tests], jobs)
        m = class_metrics([s for s, _ in scored], [r["is_anomalous"] for r, _ in tests],
                          [p for _, p in scored], [c.gt_label for _, c in tests],
                          [c.region_id for _, c in tests], fpr_limit)
        secs = time.perf_counter() - t0
        report.classes[cls] = ClassMetrics(m["i_auroc"], m["p_auroc"], m["aupro"], len(tests), secs)
        log.info("%s: I-AUROC %.3f P-AUROC %.3f AUPRO %.3f (%.1fs)", cls, m["i_auroc"],
                 m["p_auroc"], m["aupro"], secs)
    report.stage_seconds["evaluate"] = time.perf_counter() - t_all
    return report


def _score_one(args):
    det, cloud = args
    s = det.score(cloud)
    return s.object_score, s.point_scores


def _score_all(det: Detector, clouds, jobs: int):
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_score_one, [(det, c) for c in clouds]))
    return [_score_one((det, c)) for c in clouds]


@dataclass
class AblationGrid:
    param: str
    values: List
    rows: List[Dict[str, float]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for v, r in zip(self.values, self.rows):
            w.writerow([self.param, v, repr(r["i_auroc"]), repr(r["p_auroc"]), repr(r["aupro"])])
        return buf.getvalue()

    def to_dat(self) -> str:
        """Whitespace table for plotting tools."""
        lines = [f"# {self.param} i_auroc p_auroc aupro"]
        for i, (v, r) in enumerate(zip(self.values, self.rows)):
            x = v if isinstance(v, (int, float)) else i
            lines.append(f"{x} {r['i_auroc']:.6f} {r['p_auroc']:.6f} {r['aupro']:.6f}  # {v}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        atomic_write_text(out / f"ablation_{self.param}.csv", self.to_csv())
        atomic_write_text(out / f"ablation_{self.param}.dat", self.to_dat())


def _check_values(param: str, values: Sequence):
    if param not in ABLATION_PARAMS:
        raise InvalidInput(f"unknown ablation parameter {param!r}; choose from {ABLATION_PARAMS}")
    if not values:
        raise InvalidInput("ablation needs at least one value")
    if param != "sampler":
        if any(b <= a for a, b in zip(values, values[1:])):
            raise InvalidInput("ablation values must be strictly increasing")
    elif len(set(values)) != len(values):
        raise InvalidInput("sampler values must be distinct")


def ablate(manifest: Dict, param: str, values: Sequence, models: Optional[Dict[str, ClassModel]] = None,
           cfg: DetectConfig = DetectConfig(), fpr_limit: float = 0.3,
           retrain: Optional[Callable[[str, object], Dict[str, ClassModel]]] = None,
           classes: Optional[Sequence[str]] = None) -> AblationGrid:
    """Evaluate once per value with everything else held fixed.

    Inference-side parameters reuse ``models``; ``retrain(param, value)``
    supplies fresh per-class models when given (required for ``patch_k``,
    which changes the network's output size).
    """
    _check_values(param, list(values))
    rows = []
    for v in values:
        if param == "mask_ratio":
            c = replace(cfg, m=float(v))
        elif param == "iterations":
            c = replace(cfg, iterations=int(v))
        elif param == "sampler":
            c = replace(cfg, sampler=str(v))
        else:
            c = cfg
        use = models
        if retrain is not None:
            use = retrain(param, v)
        elif param == "patch_k":
            raise InvalidInput("patch_k ablation needs per-value retraining")
        rep = evaluate(manifest, use, c, fpr_limit, classes=classes)
        rows.append(rep.mean)
        log.info("%s=%s: %s", param, v, rep.mean)
    return AblationGrid(param, list(values), rows)
