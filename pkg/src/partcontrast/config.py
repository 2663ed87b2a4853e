"""Experiment configuration: a nested YAML document mapped onto dataclasses.

Unknown keys are rejected so that typos fail before any compute starts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import AugmentationConfig
from .errors import ConfigError
from .nn.layers import EncoderConfig
from .nn.train import TrainConfig


@dataclass
class DatasetSpec:
    name: str = "synthetic5"
    kind: str = "synthetic"
    points_per_sample: int = 256
    classes: int = 5
    train_per_class: int = 200
    test_per_class: int = 50
    seed: int = 0
    train_manifest: str | None = None
    test_manifest: str | None = None

    def validate(self, where):
        if self.kind not in ("synthetic", "cache"):
            raise ConfigError(f"{where}.kind: expected 'synthetic' or 'cache', got {self.kind!r}")
        if self.points_per_sample < 1:
            raise ConfigError(f"{where}.points_per_sample must be positive")
        if self.kind == "synthetic":
            if not 2 <= self.classes <= 8:
                raise ConfigError(f"{where}.classes must be in [2, 8]")
            if self.train_per_class < 1 or self.test_per_class < 1:
                raise ConfigError(f"{where}.train_per_class and test_per_class must be positive")
        else:
            for key in ("train_manifest", "test_manifest"):
                path = getattr(self, key)
                if not path:
                    raise ConfigError(f"{where}.{key} is required for kind 'cache'")
                if not Path(path).exists():
                    raise ConfigError(f"{where}.{key}: file {path} does not exist")


@dataclass
class SegmenterConfig:
    n_planes: int = 15
    min_points: int = 512
    positive_fraction: float = 0.5
    segment_points: int = 512
    center_segments: bool = True
    heldout_pairs: int = 2000

    def validate(self, where="segmenter"):
        if self.n_planes < 1 or self.min_points < 1 or self.segment_points < 2:
            raise ConfigError(f"{where}: n_planes, min_points and segment_points must be positive")
        if not 0 < self.positive_fraction < 1:
            raise ConfigError(f"{where}.positive_fraction must be in (0, 1)")
        if self.heldout_pairs < 1:
            raise ConfigError(f"{where}.heldout_pairs must be positive")


@dataclass
class HeadConfig:
    hidden: list[int] = field(default_factory=lambda: [1024, 512])
    dropout: float = 0.5

    def validate(self, where="head"):
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError(f"{where}.hidden must be a nonempty list of positive ints")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"{where}.dropout must be in [0, 1)")


@dataclass
class ClusteringConfig:
    k: int = 300
    k_sweep: list[int] = field(default_factory=list)
    restarts: int = 10
    max_iter: int = 300
    tol: float = 1e-6
    l2_normalize: bool = False
    input_mode: str = "full"

    def validate(self, where="clustering"):
        if self.k < 1 or any(k < 1 for k in self.k_sweep):
            raise ConfigError(f"{where}.k and k_sweep entries must be positive")
        if self.restarts < 1 or self.max_iter < 1 or not self.tol >= 0:
            raise ConfigError(f"{where}: restarts, max_iter must be >= 1 and tol >= 0")
        if self.input_mode not in ("full", "part", "perspective"):
            raise ConfigError(f"{where}.input_mode must be full, part or perspective")


@dataclass
class EvaluationConfig:
    stages: list[str] = field(default_factory=lambda: ["contrastnet", "clusternet"])
    modes: list[str] = field(default_factory=lambda: ["full"])
    transfer: list[list[str]] = field(default_factory=list)
    c_values: list[float] = field(default_factory=lambda: [0.1, 1.0, 10.0])
    val_fraction: float = 0.1
    partial_min_points: int = 512
    tsne: bool = True
    tsne_perplexity: float = 30.0
    tsne_iterations: int = 1000
    montage: bool = True
    montage_top_n: int = 6
    montage_clusters: int = 10

    def validate(self, where="evaluation"):
        bad = [s for s in self.stages if s not in ("contrastnet", "clusternet", "untrained")]
        if bad or not self.stages:
            raise ConfigError(f"{where}.stages: unknown stage(s) {bad}")
        bad = [m for m in self.modes if m not in ("full", "part", "perspective")]
        if bad or not self.modes:
            raise ConfigError(f"{where}.modes: unknown mode(s) {bad}")
        if any(len(p) != 2 for p in self.transfer):
            raise ConfigError(f"{where}.transfer entries must be [train_dataset, eval_dataset]")
        if not self.c_values or any(not c > 0 for c in self.c_values):
            raise ConfigError(f"{where}.c_values must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"{where}.val_fraction must be in [0, 1)")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    out: str = "runs"
    seed: int = 0
    datasets: list[DatasetSpec] = field(default_factory=lambda: [DatasetSpec()])
    pretrain_dataset: str | None = None
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    contrast_train: TrainConfig = field(default_factory=TrainConfig)
    cluster_train: TrainConfig = field(default_factory=TrainConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def dataset(self, name: str) -> DatasetSpec:
        for d in self.datasets:
            if d.name == name:
                return d
        raise ConfigError(f"unknown dataset {name!r}")

    @property
    def source_dataset(self) -> DatasetSpec:
        return self.dataset(self.pretrain_dataset) if self.pretrain_dataset else self.datasets[0]

    @property
    def run_dir(self) -> Path:
        return Path(self.out) / self.name

    def validate(self):
        if not self.name or "/" in self.name:
            raise ConfigError("name must be a nonempty string without '/'")
        if not self.datasets:
            raise ConfigError("datasets must list at least one dataset")
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ConfigError("datasets: duplicate dataset names")
        for i, d in enumerate(self.datasets):
            d.validate(f"datasets[{i}]")
        if self.pretrain_dataset is not None:
            self.dataset(self.pretrain_dataset)
        for pair in self.evaluation.transfer:
            for n in pair:
                self.dataset(n)
        self.segmenter.validate()
        self.head.validate()
        self.clustering.validate()
        self.evaluation.validate()
        for key in ("encoder", "augmentation", "contrast_train", "cluster_train"):
            try:
                getattr(self, key).validate()
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        if self.encoder.k_neighbors >= self.segmenter.segment_points:
            raise ConfigError("encoder.k_neighbors must be smaller than segmenter.segment_points")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, data: Any, where: str):
    if dataclasses.is_dataclass(cls):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"{where}: expected a mapping")
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(fields))
        if unknown:
            raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
        kwargs = {}
        for name, value in data.items():
            kwargs[name] = _coerce(fields[name].type, value, f"{where}.{name}" if where else name, cls, name)
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    return data


_NESTED = {
    (ExperimentConfig, "segmenter"): SegmenterConfig,
    (ExperimentConfig, "encoder"): EncoderConfig,
    (ExperimentConfig, "head"): HeadConfig,
    (ExperimentConfig, "augmentation"): AugmentationConfig,
    (ExperimentConfig, "contrast_train"): TrainConfig,
    (ExperimentConfig, "cluster_train"): TrainConfig,
    (ExperimentConfig, "clustering"): ClusteringConfig,
    (ExperimentConfig, "evaluation"): EvaluationConfig,
}


def _coerce(type_hint, value, where, owner, name):
    nested = _NESTED.get((owner, name))
    if nested is not None:
        return _build(nested, value, where)
    if owner is ExperimentConfig and name == "datasets":
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list of dataset specs")
        return [_build(DatasetSpec, v, f"{where}[{i}]") for i, v in enumerate(value)]
    default = next(f for f in dataclasses.fields(owner) if f.name == name)
    ref = default.default if default.default is not dataclasses.MISSING else (
        default.default_factory() if default.default_factory is not dataclasses.MISSING else None)
    if isinstance(ref, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
    elif isinstance(ref, int) and not isinstance(ref, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(ref, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(ref, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
    return value


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "").validate()


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_dict(data)


def synthetic_config(name="synthetic", out="runs", seed=0, **sections) -> ExperimentConfig:
    """Desk-scale configuration on the 5-class procedural dataset."""
    base = {
        "name": name, "out": out, "seed": seed,
        "datasets": [{"name": "synthetic5", "kind": "synthetic", "classes": 5, "train_per_class": 200,
                      "test_per_class": 50, "points_per_sample": 256, "seed": seed}],
        "segmenter": {"n_planes": 15, "min_points": 128, "segment_points": 128, "heldout_pairs": 1000},
        "encoder": {"k_neighbors": 10, "transform_channels": [32, 64, 256], "transform_hidden": [128, 64]},
        "contrast_train": {"epochs": 20, "pairs_per_epoch": 1024, "segment_points": 128},
        "cluster_train": {"epochs": 8},
        "clustering": {"k": 15},
        "evaluation": {"stages": ["contrastnet", "clusternet"], "modes": ["full"],
                       "partial_min_points": 100},
    }
    for key, val in sections.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            base[key] = {**base[key], **val}
        else:
            base[key] = val
    return config_from_dict(base)
