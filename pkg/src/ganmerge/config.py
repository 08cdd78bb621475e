"""Experiment configuration: one YAML file drives every pipeline.

Validation reports dotted field paths. Method-specific fields must be present
exactly when the method needs them, and the whole structure round-trips
through serialization.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError
from .training import TrainConfig

METHODS = ("cocktail", "scratch", "transfer", "ewc", "freeze_d", "upper_bound")


def derive_seed(base: int, *tags: object) -> int:
    """Deterministic child seed for a named pipeline stage."""
    material = ":".join([str(base), *map(str, tags)]).encode()
    return int.from_bytes(hashlib.sha256(material).digest()[:8], "little") % (2 ** 63)


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale architecture knobs (free choices the tables depend on)."""

    resolution: int = 32
    latent_dim: int = 16
    embed_dim: int = 8
    mapping_depth: int = 2
    base_width: int = 32
    channels: int = 1


@dataclass(frozen=True)
class DatasetConfig:
    spec: str
    n: int = 1024
    seed: int = 0


@dataclass(frozen=True)
class SourceConfig:
    """Either a trained checkpoint or a procedural dataset to bootstrap from."""

    checkpoint: str | None = None
    dataset: DatasetConfig | None = None


@dataclass(frozen=True)
class EvalConfig:
    num_samples: int = 512
    extractor_seed: int = 1234
    feature_dim: int = 64
    during_training: bool = False
    reference: tuple[DatasetConfig, ...] = ()


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_name: str
    method: str
    sources: tuple[SourceConfig, ...]
    train: TrainConfig
    output_dir: str = "runs"
    seed: int = 0
    root_index: int | None = None
    source_index: int | None = None
    ewc_lambda: float | None = None
    ewc_fisher_samples: int = 1024
    freeze_stages: int | None = None
    rooting_steps: int | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.experiment_name


def _require(condition: bool, fieldpath: str, message: str) -> None:
    if not condition:
        raise ConfigError(fieldpath, message)


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    _require(bool(cfg.experiment_name), "experiment_name", "must be non-empty")
    _require(cfg.method in METHODS, "method", f"must be one of {METHODS}, got {cfg.method!r}")
    _require(len(cfg.sources) >= 1, "sources", "need at least one source")
    for i, src in enumerate(cfg.sources):
        has_ckpt = src.checkpoint is not None
        has_data = src.dataset is not None
        _require(has_ckpt != has_data, f"sources[{i}]",
                 "exactly one of 'checkpoint' or 'dataset' must be set")
    if cfg.method == "cocktail":
        _require(cfg.root_index is not None, "root_index", "required for method 'cocktail'")
        _require(0 <= cfg.root_index < len(cfg.sources), "root_index",
                 f"must index a source in [0, {len(cfg.sources)})")
    if cfg.method in ("transfer", "ewc", "freeze_d"):
        _require(cfg.source_index is not None, "source_index",
                 f"required for method {cfg.method!r}")
        _require(0 <= cfg.source_index < len(cfg.sources), "source_index",
                 f"must index a source in [0, {len(cfg.sources)})")
    if cfg.method == "ewc":
        _require(cfg.ewc_lambda is not None, "ewc_lambda", "required for method 'ewc'")
        _require(cfg.ewc_lambda >= 0, "ewc_lambda", "must be non-negative")
        _require(cfg.ewc_fisher_samples >= 1, "ewc_fisher_samples", "must be >= 1")
    if cfg.method == "freeze_d":
        _require(cfg.freeze_stages is not None, "freeze_stages",
                 "required for method 'freeze_d'")
        _require(cfg.freeze_stages >= 0, "freeze_stages", "must be non-negative")
    if cfg.method == "upper_bound":
        for i, src in enumerate(cfg.sources):
            _require(src.dataset is not None, f"sources[{i}].dataset",
                     "method 'upper_bound' trains on real datasets")
    else:
        for i, src in enumerate(cfg.sources):
            _require(src.checkpoint is not None, f"sources[{i}].checkpoint",
                     f"method {cfg.method!r} consumes trained source checkpoints")
    _require(cfg.eval.num_samples >= 2, "eval.num_samples", "must be >= 2")
    return cfg


# ---------------------------------------------------------------------------
# (De)serialization
# ---------------------------------------------------------------------------

def config_to_dict(cfg: ExperimentConfig) -> dict:
    doc = asdict(cfg)
    doc["sources"] = [
        {k: v for k, v in asdict(s).items() if v is not None} for s in cfg.sources
    ]
    doc["eval"]["reference"] = [asdict(d) for d in cfg.eval.reference]
    return {k: v for k, v in doc.items() if v is not None}


def _build(cls, doc: Mapping[str, Any], fieldpath: str):
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigError(fieldpath, str(exc)) from None


def config_from_dict(doc: Mapping[str, Any]) -> ExperimentConfig:
    data = dict(doc)
    for key in ("experiment_name", "method", "sources", "train"):
        if key not in data:
            raise ConfigError(key, "missing required field")
    sources = []
    for i, entry in enumerate(data["sources"]):
        entry = dict(entry)
        ds = entry.get("dataset")
        sources.append(SourceConfig(
            checkpoint=entry.get("checkpoint"),
            dataset=_build(DatasetConfig, ds, f"sources[{i}].dataset") if ds else None,
        ))
    data["sources"] = tuple(sources)
    data["train"] = _build(TrainConfig, data["train"], "train")
    if "model" in data:
        data["model"] = _build(ModelConfig, data["model"], "model")
    if "eval" in data:
        eval_doc = dict(data["eval"])
        refs = tuple(
            _build(DatasetConfig, r, f"eval.reference[{j}]")
            for j, r in enumerate(eval_doc.get("reference", ()))
        )
        eval_doc["reference"] = refs
        data["eval"] = _build(EvalConfig, eval_doc, "eval")
    cfg = _build(ExperimentConfig, data, "<root>")
    return validate_config(cfg)


def load_config(path: str | Path) -> ExperimentConfig:
    with Path(path).open() as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config file must contain a mapping")
    return config_from_dict(doc)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with Path(path).open("w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)
