"""Command-line entry point: ``anomaly3d <subcommand> [options]``.

Exit codes: 0 on success, 1 on any runtime error (printed as ``error: ...``),
2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import zlib
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import RunConfig, load_config
from .errors import Anomaly3DError, MissingModel, NonFiniteLoss

log = logging.getLogger("anomaly3d")


def _banner(cfg: RunConfig) -> str:
    d = cfg.effective_detect()
    return (f"T={d.iterations}, m={d.m}, patch={cfg.model.n_c}x{cfg.model.k}, "
            f"sampler={d.sampler}, tau={cfg.gps.tau}, seed={cfg.seed}")


def _csv_list(text: str) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def class_seed(train_seed: int, cls: str) -> int:
    ss = np.random.SeedSequence([train_seed, zlib.crc32(cls.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# ---------------------------------------------------------------- subcommands

def cmd_synth(args, cfg: RunConfig) -> int:
    from .synth import SHAPES, generate_dataset

    scfg = cfg.synth
    if args.classes:
        names = _csv_list(args.classes)
        if len(names) == 1 and names[0].isdigit():
            n = int(names[0])
            if not 1 <= n <= len(SHAPES):
                raise Anomaly3DError(f"--classes must lie in 1..{len(SHAPES)}")
            names = list(SHAPES[:n])
        scfg = replace(scfg, classes=tuple(names))
    if args.points:
        scfg = replace(scfg, n_points=args.points)
    if args.severity is not None:
        scfg = replace(scfg, severity=args.severity)
    scfg.validate()
    manifest = generate_dataset(scfg, args.out, cfg.seed, jobs=args.jobs or cfg.run.jobs)
    path = Path(args.out) / "manifest.json"
    print(f"wrote {path}")
    for cls in manifest["classes"]:
        recs = [r for r in manifest["samples"] if r["class"] == cls]
        tr = sum(r["split"] == "train" for r in recs)
        te = [r for r in recs if r["split"] == "test"]
        bad = [r["anomaly_fraction"] for r in te if r["is_anomalous"]]
        print(f"  {cls}: {tr} train, {len(te)} test ({len(bad)} defected, "
              f"anomaly fraction {min(bad):.3f}-{max(bad):.3f})")
    return 0


def _train_class(cfg: RunConfig, manifest, cls: str, out_dir: Path, steps: int) -> Path:
    from .checkpointing import save_template, write_loss_csv
    from .detect import build_template
    from .io import read_ply
    from .net.checkpoint import save_model
    from .net.train import TrainState, train
    from .net.model import init_params
    from .synth import class_samples

    root = Path(manifest["root"])
    recs = class_samples(manifest, cls, "train")
    if not recs:
        raise Anomaly3DError(f"class {cls!r} has no training samples")
    clouds = [read_ply(root / r["path"])[0].points for r in recs]
    tcfg = replace(cfg.effective_train(), steps=steps)
    seed = class_seed(cfg.stage_seed("train"), cls)
    cdir = out_dir / cls
    cdir.mkdir(parents=True, exist_ok=True)
    meta = {"class": cls, "seed": seed, "train": tcfg.to_dict()}

    def checkpoint(state: TrainState):
        save_model(cdir / "model.bin", state.params, state.optimizer_tensors(), meta)
        write_loss_csv(cdir / "loss.csv", state.losses)

    t0 = time.perf_counter()
    state = TrainState.fresh(init_params(cfg.model, np.random.SeedSequence([seed, 0])), seed)
    try:
        state = train(clouds, cfg.model, tcfg, seed, state=state, on_checkpoint=checkpoint)
    except NonFiniteLoss:
        log.error("%s: training diverged; last good checkpoint kept in %s", cls, cdir)
        raise
    checkpoint(state)
    template = build_template(clouds, state.params, cfg.effective_detect(),
                              allow_untrained=state.step == 0)
    save_template(cdir / "template.bin", template)
    first = np.mean(state.losses[:10]) if state.losses else float("nan")
    last = np.mean(state.losses[-10:]) if state.losses else float("nan")
    print(f"  {cls}: {state.step} steps, loss {first:.5f} -> {last:.5f}, "
          f"tau_reg {template.tau_reg:.4g} ({time.perf_counter() - t0:.0f}s)")
    return cdir / "model.bin"


def cmd_train(args, cfg: RunConfig) -> int:
    from .synth import load_manifest

    manifest = load_manifest(args.manifest)
    classes = _csv_list(args.cls) if args.cls else list(manifest["classes"])
    unknown = [c for c in classes if c not in manifest["classes"]]
    if unknown:
        raise Anomaly3DError(f"classes not in manifest: {', '.join(unknown)}")
    steps = cfg.train.steps if args.steps is None else args.steps
    print(f"training {len(classes)} class(es), {steps} steps each, patch={cfg.model.n_c}x{cfg.model.k}")
    for cls in classes:
        path = _train_class(cfg, manifest, cls, Path(args.out), steps)
        print(f"wrote {path}")
    return 0


def _resolve_checkpoint(path: Path):
    if path.is_dir():
        return path / "model.bin", path / "template.bin"
    return path, path.with_name("template.bin")


def cmd_detect(args, cfg: RunConfig) -> int:
    from .checkpointing import load_template
    from .detect import Detector, export_scores
    from .io import read_ply
    from .net.checkpoint import load_model

    model_path, template_path = _resolve_checkpoint(Path(args.checkpoint))
    if not model_path.exists():
        raise MissingModel(f"checkpoint not found: {model_path}")
    params, _, _ = load_model(model_path)
    cfg = replace(cfg, model=params.config)
    template = load_template(template_path) if template_path.exists() else None
    dcfg = cfg.effective_detect()
    print(_banner(cfg))
    cloud, _ = read_ply(args.input)
    det = Detector(params, template, dcfg, allow_untrained=args.allow_untrained)
    scores = det.score(cloud)
    out = Path(args.out)
    export_scores(out.with_suffix(".ply"), out.with_suffix(".json"), cloud, scores)
    print(f"object score {scores.object_score:.6f}; wrote {out.with_suffix('.ply')} and {out.with_suffix('.json')}")
    return 0


def _print_report(report) -> None:
    print(f"{'class':<12} {'I-AUROC':>8} {'P-AUROC':>8} {'AUPRO':>8} {'n_test':>7}")
    for name, m in report.classes.items():
        print(f"{name:<12} {m.i_auroc:8.3f} {m.p_auroc:8.3f} {m.aupro:8.3f} {m.n_test:7d}")
    mean = report.mean
    print(f"{'mean':<12} {mean['i_auroc']:8.3f} {mean['p_auroc']:8.3f} {mean['aupro']:8.3f}")


def cmd_eval(args, cfg: RunConfig) -> int:
    from .evaluate import evaluate, load_class_models
    from .synth import load_manifest

    manifest = load_manifest(args.manifest)
    if not manifest["classes"]:
        raise Anomaly3DError("manifest lists no classes")
    models = None
    if not args.oracle_gt:
        if not args.checkpoints:
            raise MissingModel("--checkpoints is required unless --oracle-gt is given")
        models = load_class_models(args.checkpoints, manifest["classes"])
        cfg = replace(cfg, model=next(iter(models.values())).params.config)
    print(_banner(cfg))
    report = evaluate(manifest, models, cfg.effective_detect(), cfg.eval.fpr_limit,
                      oracle=args.oracle_gt, jobs=args.jobs or cfg.run.jobs)
    report.write(args.out, timings=args.timings)
    _print_report(report)
    print(f"wrote {Path(args.out) / 'report.json'} and {Path(args.out) / 'report.csv'}")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    from .evaluate import ablate, load_class_models
    from .synth import load_manifest

    manifest = load_manifest(args.manifest)
    raw = _csv_list(args.values)
    if args.param == "sampler":
        values = raw
    elif args.param in ("iterations", "patch_k"):
        values = [int(v) for v in raw]
    else:
        values = [float(v) for v in raw]
    models = None
    if args.checkpoints:
        models = load_class_models(args.checkpoints, manifest["classes"])
        cfg = replace(cfg, model=next(iter(models.values())).params.config)
    retrain = None
    if args.retrain_steps is not None or args.param == "patch_k":
        steps = cfg.train.steps if args.retrain_steps is None else args.retrain_steps

        def retrain(param, value):
            from .evaluate import load_class_models as load
            c = cfg
            if param == "patch_k":
                c = replace(cfg, model=replace(cfg.model, k=int(value)))
            elif param == "mask_ratio":
                c = replace(cfg, model=replace(cfg.model, m=float(value)))
            sub = Path(args.out) / f"models_{param}_{value}"
            for cls in manifest["classes"]:
                _train_class(c, manifest, cls, sub, steps)
            return load(sub, manifest["classes"])
    elif models is None:
        raise MissingModel("--checkpoints is required unless retraining")
    print(_banner(cfg))
    grid = ablate(manifest, args.param, values, models, cfg.effective_detect(),
                  cfg.eval.fpr_limit, retrain=retrain)
    grid.write(args.out)
    print(f"{'value':<10} {'I-AUROC':>8} {'P-AUROC':>8} {'AUPRO':>8}")
    for v, r in zip(grid.values, grid.rows):
        print(f"{str(v):<10} {r['i_auroc']:8.3f} {r['p_auroc']:8.3f} {r['aupro']:8.3f}")
    print(f"wrote {Path(args.out) / f'ablation_{args.param}.csv'}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .net.gradcheck import grad_check

    rep = grad_check(seed=cfg.seed, max_entries=None if args.all_entries else args.entries)
    worst = max(rep.per_tensor, key=rep.per_tensor.get)
    print(f"checked {rep.checked} entries; max relative error {rep.max_rel_error:.3e} ({worst})")
    return 0 if rep.max_rel_error < 1e-4 else 1


def cmd_selftest(args, cfg: RunConfig) -> int:
    """Fast checks of the numerical kernels against brute-force references."""
    from .geometry import chamfer_l2, knn
    from .metrics import aupro, roc_auc
    from .net.gradcheck import grad_check
    from .patching import random_mask

    rng = np.random.default_rng(cfg.seed)
    checks = []
    pts = rng.normal(size=(200, 3))
    q = rng.normal(size=(20, 3))
    d2 = ((q[:, None] - pts[None]) ** 2).sum(-1)
    ref = np.lexsort((np.broadcast_to(np.arange(200), d2.shape), d2), axis=1)[:, :8]
    checks.append(("knn", np.array_equal(knn(pts, q, 8).indices, ref)))
    a, b = rng.normal(size=(30, 3)), rng.normal(size=(40, 3))
    dd = ((a[:, None] - b[None]) ** 2).sum(-1)
    checks.append(("chamfer", abs(chamfer_l2(a, b) - (dd.min(1).mean() + dd.min(0).mean())) < 1e-12))
    y = rng.integers(0, 2, 300)
    y[:2] = [0, 1]
    checks.append(("roc_auc oracle", roc_auc(y.astype(float), y) == 1.0))
    checks.append(("aupro oracle", aupro(y.astype(float), y) == 1.0))
    checks.append(("mask 0.4 x 256", int(random_mask(256, 0.4, 0).masked.sum()) == 102))
    checks.append(("gradcheck", grad_check(seed=cfg.seed, max_entries=8).max_rel_error < 1e-4))
    for name, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return 0 if all(ok for _, ok in checks) else 1


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anomaly3d", description="3D point-cloud anomaly detection by masked reconstruction")
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--seed", type=int, help="global seed (overrides config and ANOMALY3D_SEED)")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (1 = deterministic reference)")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    sub = p.add_subparsers(dest="command", metavar="command")

    s = sub.add_parser("synth", help="generate a procedural anomaly dataset")
    s.add_argument("-o", "--out", required=True, help="output dataset directory")
    s.add_argument("--classes", help="class count (first N built-in shapes) or comma-separated shapes/mesh files")
    s.add_argument("--points", type=int, help="points per cloud")
    s.add_argument("--severity", type=float, help="defect amplitude multiplier (2 = large-magnitude)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train per-class models")
    s.add_argument("--manifest", required=True, help="dataset directory or manifest.json")
    s.add_argument("--class", dest="cls", help="comma-separated classes (default: all)")
    s.add_argument("-o", "--out", required=True, help="checkpoint directory")
    s.add_argument("--steps", type=int, help="optimizer steps per class")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("detect", help="score one cloud")
    s.add_argument("--checkpoint", required=True, help="class checkpoint directory or model.bin")
    s.add_argument("--input", required=True, help="input PLY cloud")
    s.add_argument("-o", "--out", required=True, help="output path prefix (.ply and .json are written)")
    s.add_argument("--iterations", type=int, help="reconstruction passes T")
    s.add_argument("--mask-ratio", type=float, help="mask ratio m")
    s.add_argument("--sampler", choices=["gps", "fps", "rs", "voxel"])
    s.add_argument("--allow-untrained", action="store_true", help="accept a step-0 checkpoint")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("eval", help="evaluate all classes of a dataset")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoints", help="checkpoint directory with one folder per class")
    s.add_argument("-o", "--out", required=True, help="report directory")
    s.add_argument("--oracle-gt", action="store_true", help="score with the ground truth (harness self-test)")
    s.add_argument("--timings", action="store_true", help="include wall-clock seconds in the report files")
    s.add_argument("--iterations", type=int)
    s.add_argument("--mask-ratio", type=float)
    s.add_argument("--sampler", choices=["gps", "fps", "rs", "voxel"])
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="sweep one detection parameter")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoints", help="trained checkpoint directory (inference-only sweeps)")
    s.add_argument("--param", required=True, choices=["mask_ratio", "iterations", "patch_k", "sampler"])
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("-o", "--out", required=True)
    s.add_argument("--retrain-steps", type=int, help="retrain per value with this many steps")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    s.add_argument("--entries", type=int, default=48, help="entries sampled per tensor")
    s.add_argument("--all-entries", action="store_true")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("selftest", help="quick numerical self-test")
    s.set_defaults(func=cmd_selftest)
    return p


def _apply_overrides(args, cfg: RunConfig) -> RunConfig:
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.jobs is not None:
        if args.jobs < 1:
            raise Anomaly3DError("--jobs must be >= 1")
        cfg = replace(cfg, run=replace(cfg.run, jobs=args.jobs))
    det = {}
    if getattr(args, "iterations", None) is not None:
        det["iterations"] = args.iterations
    if getattr(args, "mask_ratio", None) is not None:
        det["m"] = args.mask_ratio
    if getattr(args, "sampler", None) is not None:
        det["sampler"] = args.sampler
    if det:
        cfg = replace(cfg, detect=replace(cfg.detect, **det))
    return cfg


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(args, load_config(args.config))
        if args.print_config:
            sys.stdout.write(cfg.to_ini())
            return 0
        if not args.command:
            parser.print_usage(sys.stderr)
            return 2
        return args.func(args, cfg)
    except (Anomaly3DError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
