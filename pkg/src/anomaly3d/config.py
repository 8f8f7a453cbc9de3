"""Run configuration: an INI file with fixed sections and keys.

Every key has a default, so an empty file is a valid config. Unknown sections
or keys are rejected. ``[run] seed`` is the single global seed; the
``ANOMALY3D_SEED`` environment variable overrides it and command-line flags
override both. Stage seeds (synth, train, detect) are derived from it.

Example::

    [run]
    seed = 0

    [gps]
    tau = 0.3
    salient_boost = 2.0

    [detect]
    m = 0.4
    iterations = 3
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Optional

import numpy as np

from .detect import DetectConfig
from .errors import ConfigError
from .net.model import ModelConfig
from .net.train import TrainConfig
from .synth import SynthConfig

SEED_ENV = "ANOMALY3D_SEED"
STAGES = ("synth", "train", "detect")


@dataclass(frozen=True)
class EvalConfig:
    fpr_limit: float = 0.3


@dataclass(frozen=True)
class GpsSection:
    tau: float = 0.3
    salient_boost: float = 2.0


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    jobs: int = 1


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gps: GpsSection = field(default_factory=GpsSection)
    detect: DetectConfig = field(default_factory=DetectConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # keys that the [gps] section owns; detect/train copies are kept in sync
    _SHADOWED = {"detect": ("tau", "salient_boost", "seed"), "train": ("tau", "salient_boost")}

    @property
    def seed(self) -> int:
        return self.run.seed

    def stage_seed(self, stage: str) -> int:
        """Independent seed for one pipeline stage, derived from the global seed."""
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        ss = np.random.SeedSequence([self.run.seed, STAGES.index(stage)])
        return int(ss.generate_state(1, dtype=np.uint32)[0])

    def effective_detect(self) -> DetectConfig:
        return replace(self.detect, tau=self.gps.tau, salient_boost=self.gps.salient_boost,
                       seed=self.stage_seed("detect"))

    def effective_train(self) -> TrainConfig:
        return replace(self.train, tau=self.gps.tau, salient_boost=self.gps.salient_boost)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, run=replace(self.run, seed=int(seed)))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for sec in _sections():
            obj = getattr(self, sec)
            cp[sec] = {}
            for f in fields(obj):
                if f.name in self._SHADOWED.get(sec, ()):
                    continue
                cp[sec][f.name] = _format(getattr(obj, f.name))
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _sections():
    return [f.name for f in fields(RunConfig) if not f.name.startswith("_")]


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _parse(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    base = RunConfig()
    kwargs = {}
    known = _sections()
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"{source}: unknown section [{sec}]")
    for sec in known:
        obj = getattr(base, sec)
        names = {f.name for f in fields(obj)} - set(RunConfig._SHADOWED.get(sec, ()))
        if not cp.has_section(sec):
            continue
        updates = {}
        for key, raw in cp.items(sec):
            if key not in names:
                raise ConfigError(f"{source}: unknown key {key!r} in [{sec}]")
            updates[key] = _parse(raw, getattr(obj, key), f"{source} [{sec}] {key}")
        try:
            kwargs[sec] = replace(obj, **updates)
            if hasattr(kwargs[sec], "validate"):
                kwargs[sec].validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source} [{sec}]: {exc}") from None
    cfg = replace(base, **kwargs)
    try:
        from .gps import GpsConfig
        GpsConfig(cfg.gps.tau, cfg.gps.salient_boost, cfg.model.n_c)
    except ValueError as exc:
        raise ConfigError(f"{source} [gps]: {exc}") from None
    return cfg


def load_config(path: Optional[str] = None, env: Optional[Dict[str, str]] = None) -> RunConfig:
    """Read ``path`` (or defaults) and apply the seed environment override."""
    if path:
        try:
            with open(path) as f:
                text = f.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = parse_config(text, str(path))
    else:
        cfg = RunConfig()
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg = cfg.with_seed(int(env[SEED_ENV]))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    return cfg
