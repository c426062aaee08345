"""Run configuration: a JSON document with model / exits / loss / train /
data / output sections. Parsing is strict: unknown keys are rejected by
name, and referenced paths are validated before any training starts.

Overrides use dotted paths (``train.epochs=1``); values parse as JSON
literals with a fallback to plain strings, and the last write wins.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .corpus import DEFAULT_CLASS_NAMES
from .errors import ConfigError
from .exits import ExitSpec
from .losses import LossWeights
from .trainer import TrainConfig

MODES = ("self-distill", "truncated", "layerwise")


def _check_keys(doc: dict, allowed: set[str], section: str) -> None:
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"unknown key {section}.{key!r}; allowed keys: {sorted(allowed)}")


@dataclass
class DataConfig:
    source: str = "synth"                 # synth | wav-manifest | cache
    classes: int = 7
    n_per_class: int = 140
    length: int = 128
    sample_rate: int = 500
    speakers: int = 28
    overlap: float = 1.0
    split: tuple[float, float, float] = (20 / 28, 4 / 28, 4 / 28)
    seed: int = 99
    manifest: str | None = None
    cache: str | None = None
    class_names: list[str] | None = None

    def __post_init__(self):
        if self.source not in ("synth", "wav-manifest", "cache"):
            raise ConfigError(f"data.source must be synth, wav-manifest, or cache, got {self.source!r}")
        if self.class_names is None:
            base = DEFAULT_CLASS_NAMES
            self.class_names = [base[i] if i < len(base) else f"class{i}" for i in range(self.classes)]
        if len(self.class_names) != self.classes:
            raise ConfigError(f"{len(self.class_names)} class names for {self.classes} classes")
        self.split = tuple(self.split)

    def to_dict(self) -> dict:
        return {
            "source": self.source, "classes": self.classes, "n_per_class": self.n_per_class,
            "length": self.length, "sample_rate": self.sample_rate, "speakers": self.speakers,
            "overlap": self.overlap, "split": list(self.split), "seed": self.seed,
            "manifest": self.manifest, "cache": self.cache, "class_names": self.class_names,
        }


@dataclass
class OutputConfig:
    dir: str = "runs/latest"
    checkpoint: str = "model.ckpt"
    log: str = "train_log.jsonl"
    figures: bool = True

    def to_dict(self) -> dict:
        return {"dir": self.dir, "checkpoint": self.checkpoint, "log": self.log, "figures": self.figures}


@dataclass
class RunConfig:
    model: BackboneConfig = field(default_factory=BackboneConfig)
    exits: list[ExitSpec] = field(default_factory=lambda: [ExitSpec(2), ExitSpec(4)])
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    mode: str = "self-distill"
    truncate_at: int | None = None
    student_depth: int | None = None
    predict_layers: list[int] | None = None
    init_checkpoint: str | None = None
    refit_on_train_plus_dev: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.train.weights = self.loss
        if self.model.num_classes != self.data.classes:
            raise ConfigError(
                f"model emits {self.model.num_classes} classes but data declares {self.data.classes}"
            )

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "exits": [s.to_dict() for s in self.exits],
            "loss": self.loss.to_dict(),
            "train": {k: v for k, v in self.train.to_dict().items() if k != "weights"},
            "data": self.data.to_dict(),
            "output": self.output.to_dict(),
            "mode": self.mode,
            "truncate_at": self.truncate_at,
            "student_depth": self.student_depth,
            "predict_layers": self.predict_layers,
            "init_checkpoint": self.init_checkpoint,
            "refit_on_train_plus_dev": self.refit_on_train_plus_dev,
        }

    def validate_paths(self) -> None:
        if self.init_checkpoint and not Path(self.init_checkpoint).is_file():
            raise ConfigError(f"init_checkpoint {self.init_checkpoint!r} does not exist")
        if self.data.source == "wav-manifest":
            if not self.data.manifest:
                raise ConfigError("data.source is wav-manifest but data.manifest is unset")
            if not Path(self.data.manifest).is_file():
                raise ConfigError(f"data.manifest {self.data.manifest!r} does not exist")
        if self.data.source == "cache":
            if not self.data.cache:
                raise ConfigError("data.source is cache but data.cache is unset")
            if not Path(self.data.cache).is_file():
                raise ConfigError(f"data.cache {self.data.cache!r} does not exist")


_MODEL_KEYS = {"num_layers", "hidden", "heads", "ff_dim", "head_dims", "dropout", "encoder_convs"}
_EXIT_KEYS = {"layer_index", "block_kind", "block_width", "head_dims", "sim_level"}
_LOSS_KEYS = {"alpha", "beta", "gamma", "sim_kind", "sim_level", "detach_teacher", "kl_temperature"}
_TRAIN_KEYS = {"lr", "epochs", "batch_size", "seed", "beta1", "beta2", "eps", "freeze_encoder", "grad_clip"}
_DATA_KEYS = {"source", "classes", "n_per_class", "length", "sample_rate", "speakers", "overlap",
              "split", "seed", "manifest", "cache", "class_names"}
_OUTPUT_KEYS = {"dir", "checkpoint", "log", "figures"}
_TOP_KEYS = {"model", "exits", "loss", "train", "data", "output", "mode", "truncate_at",
             "student_depth", "predict_layers", "init_checkpoint", "refit_on_train_plus_dev"}


def config_from_dict(doc: dict) -> RunConfig:
    _check_keys(doc, _TOP_KEYS, "<top>")
    model_doc = dict(doc.get("model", {}))
    _check_keys(model_doc, _MODEL_KEYS, "model")
    exits_doc = doc.get("exits", [{"layer_index": 2}, {"layer_index": 4}])
    specs = []
    for i, e in enumerate(exits_doc):
        e = dict(e)
        _check_keys(e, _EXIT_KEYS, f"exits[{i}]")
        specs.append(ExitSpec(**e))
    loss_doc = dict(doc.get("loss", {}))
    _check_keys(loss_doc, _LOSS_KEYS, "loss")
    train_doc = dict(doc.get("train", {}))
    _check_keys(train_doc, _TRAIN_KEYS, "train")
    data_doc = dict(doc.get("data", {}))
    _check_keys(data_doc, _DATA_KEYS, "data")
    output_doc = dict(doc.get("output", {}))
    _check_keys(output_doc, _OUTPUT_KEYS, "output")
    try:
        return RunConfig(
            model=BackboneConfig(**model_doc),
            exits=specs,
            loss=LossWeights(**loss_doc),
            train=TrainConfig(**train_doc),
            data=DataConfig(**data_doc),
            output=OutputConfig(**output_doc),
            mode=doc.get("mode", "self-distill"),
            truncate_at=doc.get("truncate_at"),
            student_depth=doc.get("student_depth"),
            predict_layers=doc.get("predict_layers"),
            init_checkpoint=doc.get("init_checkpoint"),
            refit_on_train_plus_dev=doc.get("refit_on_train_plus_dev", False),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(doc)


def _parse_override_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings onto a raw config dict, last wins."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, _, raw = item.partition("=")
        keys = dotted.strip().split(".")
        if not all(keys):
            raise ConfigError(f"override path {dotted!r} is malformed")
        target = doc
        for key in keys[:-1]:
            nxt = target.setdefault(key, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override path {dotted!r} descends into a non-object")
            target = nxt
        target[keys[-1]] = _parse_override_value(raw.strip())
    return doc


def load_config_with_overrides(path: str | None, overrides: list[str]) -> RunConfig:
    if path is None:
        doc: dict = {}
    else:
        raw = Path(path)
        if not raw.is_file():
            raise ConfigError(f"config file {path!r} does not exist")
        try:
            doc = json.loads(raw.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    apply_overrides(doc, overrides)
    return config_from_dict(doc)
