"""Experiment configuration read from TOML, with seed fan-out."""

from __future__ import annotations

import hashlib
import json
import sys
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .tasks import KINDS, resolve_config

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

PHASES = ("gen", "collect", "estimate", "fit", "metric", "train", "eval", "verify")


def phase_seed(root_seed: int, phase: str) -> int:
    """Seed of ``phase``: the first word of ``SeedSequence([root, crc32(phase)])``."""
    ss = np.random.SeedSequence([int(root_seed), zlib.crc32(phase.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class FamilySpec:
    kind: str = "semicircle_grid"
    params: dict = field(default_factory=dict)
    seed: Optional[int] = None  # None: derived from the root seed


@dataclass(frozen=True)
class CollectSpec:
    meta_episodes: int = 20
    n_episodes: int = 2


@dataclass(frozen=True)
class PipelineSpec:
    weights: tuple = (0.5, 0.5)
    kl_weight: float = 0.1
    d_z: int = 10
    aggregation: str = "max"
    order: int = 2
    smoothing: float = 0.05
    tempering: float = 1e-6
    fit_steps: int = 5000
    step_size: float = 1e-2
    featurizer: str = "moments"
    metric_tol: float = 1e-8
    max_joint_points: int = 400


@dataclass(frozen=True)
class LearnerSpec:
    alpha: float = 0.01
    learning_rate: float = 0.2
    meta_episodes: int = 4000
    eps_start: float = 0.3
    eps_end: float = 0.01


@dataclass(frozen=True)
class EvalSpec:
    n_meta_episodes: int = 20
    n_episodes: int = 2
    ood_radii: tuple = ()
    oracle: bool = True


@dataclass(frozen=True)
class VerifySpec:
    enabled: bool = True
    tol: float = 1e-11


@dataclass(frozen=True)
class ExperimentConfig:
    family: FamilySpec = FamilySpec()
    collect: CollectSpec = CollectSpec()
    pipeline: PipelineSpec = PipelineSpec()
    learner: LearnerSpec = LearnerSpec()
    evaluation: EvalSpec = EvalSpec()
    verify: VerifySpec = VerifySpec()
    root_seed: int = 0
    out: str = "runs/default"

    def seed(self, phase: str) -> int:
        if phase == "gen" and self.family.seed is not None:
            return int(self.family.seed)
        return phase_seed(self.root_seed, phase)

    def as_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        doc = self.as_dict()
        for key, value in changes.items():
            section, _, name = key.partition(".")
            if name:
                doc[section][name] = value
            else:
                doc[section] = value
        return config_from_dict(doc)


_SECTIONS = {
    "family": FamilySpec,
    "collect": CollectSpec,
    "pipeline": PipelineSpec,
    "learner": LearnerSpec,
    "evaluation": EvalSpec,
    "verify": VerifySpec,
}


def _build(cls, doc: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigurationError(f"{section}.{sorted(unknown)[0]}", "unknown key")
    kwargs = {}
    for f in fields(cls):
        if f.name in doc:
            v = doc[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    unknown = set(doc) - set(_SECTIONS) - {"root_seed", "out"}
    if unknown:
        raise ConfigurationError(sorted(unknown)[0], "unknown section")
    parts = {name: _build(cls, dict(doc.get(name) or {}), name) for name, cls in _SECTIONS.items()}
    cfg = ExperimentConfig(**parts, root_seed=int(doc.get("root_seed", 0)), out=str(doc.get("out", "runs/default")))
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    fam = cfg.family
    if fam.kind not in KINDS:
        raise ConfigurationError("family.kind", f"expected one of {KINDS}")
    resolve_config(fam.kind, dict(fam.params))
    p = cfg.pipeline
    if len(p.weights) != 2 or min(p.weights) < 0 or abs(sum(p.weights) - 1.0) > 1e-12:
        raise ConfigurationError("pipeline.weights", "two non-negative weights summing to 1")
    if p.kl_weight < 0:
        raise ConfigurationError("pipeline.kl_weight", "must be non-negative")
    if p.d_z < 1:
        raise ConfigurationError("pipeline.d_z", "must be positive")
    if p.aggregation not in ("max", "mean"):
        raise ConfigurationError("pipeline.aggregation", "max or mean")
    if p.order not in (1, 2):
        raise ConfigurationError("pipeline.order", "1 or 2")
    if p.featurizer not in ("moments", "quantized_posterior"):
        raise ConfigurationError("pipeline.featurizer", "moments or quantized_posterior")
    if p.smoothing < 0 or p.tempering < 0 or p.tempering >= 1:
        raise ConfigurationError("pipeline.tempering", "smoothing >= 0 and 0 <= tempering < 1")
    if p.fit_steps < 1 or p.step_size <= 0:
        raise ConfigurationError("pipeline.fit_steps", "need at least one positive-size step")
    lr = cfg.learner
    if not 0 < lr.learning_rate <= 1 or lr.meta_episodes < 1 or lr.alpha < 0:
        raise ConfigurationError("learner", "learning_rate in (0, 1], meta_episodes >= 1, alpha >= 0")
    if cfg.collect.meta_episodes < 1 or cfg.collect.n_episodes < 1:
        raise ConfigurationError("collect", "meta_episodes and n_episodes must be positive")
    ev = cfg.evaluation
    if ev.n_meta_episodes < 1 or ev.n_episodes < 1:
        raise ConfigurationError("evaluation", "n_meta_episodes and n_episodes must be positive")
    if ev.ood_radii and fam.kind != "semicircle_grid":
        raise ConfigurationError("evaluation.ood_radii", "ring radii apply to semicircle grids only")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigurationError("config", f"{path} does not exist") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError("config", f"{path}: {exc}") from None
    return config_from_dict(doc)


def dump_config(cfg: ExperimentConfig) -> str:
    """TOML text that ``load_config`` reads back to an equal config."""
    lines = [f"root_seed = {cfg.root_seed}", f"out = {json.dumps(cfg.out)}", ""]
    doc = cfg.as_dict()
    for section in _SECTIONS:
        body = doc[section]
        lines.append(f"[{section}]")
        nested = {}
        for key, value in body.items():
            if isinstance(value, dict):
                nested[key] = value
            elif value is not None:
                lines.append(f"{key} = {_toml_value(value)}")
        for key, sub in nested.items():
            lines.append(f"[{section}.{key}]")
            lines.extend(f"{k} = {_toml_value(v)}" for k, v in sub.items() if v is not None)
        lines.append("")
    return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, int):
        return str(v)
    return json.dumps(v)
