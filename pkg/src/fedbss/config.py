"""Experiment configuration files (YAML) and assembly of runnable pieces.

Unknown keys are rejected everywhere. Defaults follow the reference setup:
100 clients, 10% participation, 10 local epochs, batch 64, lr 1e-3,
momentum 1e-4, weight decay 1e-5, 200 rounds of which 50 are warm-up.
"""
from __future__ import annotations

import copy
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import nn
from .data import ClientPartition, Dataset, PartitionSpec, inject_label_noise, load_idx, partition, synth_gaussian_mixture
from .errors import ConfigError
from .federation import FederationConfig, Stream, stream_seed


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True, frozen=True)


class DatasetConfig(_Strict):
    source: Literal["synthetic", "idx"]
    # synthetic Gaussian mixture
    n_classes: int = Field(10, ge=1)
    n_per_class: int = Field(600, ge=1)
    test_per_class: int = Field(200, ge=1)
    dim: int = Field(20, ge=1)
    spread: float = Field(1.5, gt=0)
    mean_scale: float = Field(1.0, gt=0)
    # IDX files
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_subset: Optional[int] = Field(None, ge=1)
    test_subset: Optional[int] = Field(None, ge=1)
    # label noise on the training set
    noise_ratio: float = Field(0.0, ge=0, le=1)
    noise_before_partition: bool = True

    @model_validator(mode="after")
    def _paths_for_idx(self):
        if self.source == "idx":
            missing = [k for k in ("train_images", "train_labels", "test_images", "test_labels")
                       if getattr(self, k) is None]
            if missing:
                raise ValueError(f"idx source needs {', '.join(missing)}")
        return self


class PartitionConfig(_Strict):
    scheme: Literal["dirichlet", "shards"] = "dirichlet"
    dirichlet_alpha: float = Field(0.5, gt=0)
    shards_per_client: int = Field(2, ge=1)


class FederationSection(_Strict):
    n_clients: int = Field(100, ge=1)
    participation_fraction: float = Field(0.1, gt=0, le=1)
    rounds: int = Field(200, ge=1)
    warmup_rounds: int = Field(50, ge=0)
    local_epochs: int = Field(10, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, ge=0)
    momentum: float = Field(1e-4, ge=0)
    weight_decay: float = Field(1e-5, ge=0)
    weighting: Literal["uniform", "samples"] = "uniform"

    @model_validator(mode="after")
    def _warmup_fits(self):
        if self.warmup_rounds > self.rounds:
            raise ValueError(f"warmup_rounds ({self.warmup_rounds}) exceeds rounds ({self.rounds})")
        return self


class AlgorithmConfig(_Strict):
    name: Literal["fedavg", "fedprox", "fedbss"]
    variant: Literal["filter", "linear", "cosine"] = "cosine"
    mu: float = Field(0.01, ge=0)


class ModelConfig(_Strict):
    kind: Literal["softmax", "mlp", "cnn"] = "mlp"
    hidden: int = Field(128, ge=1)

    @model_validator(mode="before")
    @classmethod
    def _hidden_default(cls, data):
        if isinstance(data, dict) and data.get("kind") == "cnn" and "hidden" not in data:
            return {**data, "hidden": 512}
        return data


class ExperimentConfig(_Strict):
    name: Optional[str] = None
    dataset: DatasetConfig
    algorithm: AlgorithmConfig
    partition: PartitionConfig = PartitionConfig()
    federation: FederationSection = FederationSection()
    model: ModelConfig = ModelConfig()
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    output_dir: str = "runs"
    dump_scores: bool = False

    @field_validator("algorithm", mode="before")
    @classmethod
    def _algorithm_shorthand(cls, v):
        if isinstance(v, str):
            return {"name": v}
        return v

    @field_validator("seeds")
    @classmethod
    def _unique_seeds(cls, v):
        if len(set(v)) != len(v):
            raise ValueError("seeds must be distinct")
        return v

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return self.algorithm.name if self.algorithm.name != "fedbss" else f"fedbss-{self.algorithm.variant}"


def _format_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        key = ".".join(str(p) for p in e["loc"]) or "<root>"
        if e["type"] == "extra_forbidden":
            lines.append(f"{key}: unknown key")
        else:
            lines.append(f"{key}: {e['msg']}")
    return "; ".join(lines)


def config_from_dict(raw: Any) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of keys to values")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as err:
        raise ConfigError(_format_error(err)) from None


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: not valid YAML: {err}") from None
    cfg = config_from_dict(raw)
    # relative data paths are relative to the config file
    ds = cfg.dataset
    if ds.source == "idx":
        fixed = {k: str((path.parent / getattr(ds, k)).resolve())
                 for k in ("train_images", "train_labels", "test_images", "test_labels")}
        cfg = cfg.model_copy(update={"dataset": ds.model_copy(update=fixed)})
    return cfg


def echo_config(cfg: ExperimentConfig) -> str:
    """Fully resolved config as YAML; parsing it back yields an equal config."""
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def apply_override(raw: dict, dotted_key: str, value: Any) -> dict:
    """Return a copy of ``raw`` with ``a.b.c = value`` set."""
    out = copy.deepcopy(raw)
    node = out
    *parents, leaf = dotted_key.split(".")
    for p in parents:
        child = node.get(p)
        if isinstance(child, str) and p == "algorithm":
            child = {"name": child}
        if child is None:
            child = {}
        if not isinstance(child, dict):
            raise ConfigError(f"{dotted_key}: {p} is not a section")
        node[p] = child
        node = child
    node[leaf] = value
    return out


# ---------------------------------------------------------------------------
# assembly


def federation_config(cfg: ExperimentConfig, seed: int) -> FederationConfig:
    fed, alg = cfg.federation, cfg.algorithm
    warmup = fed.warmup_rounds
    return FederationConfig(
        n_clients=fed.n_clients,
        participation_fraction=fed.participation_fraction,
        rounds_stage1=warmup,
        rounds_stage2=fed.rounds - warmup,
        local_epochs=fed.local_epochs,
        batch_size=fed.batch_size,
        lr=fed.lr,
        momentum=fed.momentum,
        weight_decay=fed.weight_decay,
        algorithm=alg.name,
        mu=alg.mu,
        variant=alg.variant,
        weighting=fed.weighting,
        seed=seed,
    )


def load_datasets(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Clean (train, test) pair for one seed."""
    ds = cfg.dataset
    if ds.source == "synthetic":
        full = synth_gaussian_mixture(ds.n_classes, ds.n_per_class + ds.test_per_class, ds.dim, ds.spread,
                                      seed=stream_seed(seed, Stream.DATA), mean_scale=ds.mean_scale)
        # split per class so the test set stays balanced
        train_idx, test_idx = [], []
        for c in range(ds.n_classes):
            idx = np.flatnonzero(full.labels == c)
            train_idx.append(idx[:ds.n_per_class])
            test_idx.append(idx[ds.n_per_class:])
        return full.subset(np.sort(np.concatenate(train_idx))), full.subset(np.sort(np.concatenate(test_idx)))
    train = load_idx(ds.train_images, ds.train_labels)
    test = load_idx(ds.test_images, ds.test_labels, num_classes=train.num_classes)
    rng = np.random.default_rng(stream_seed(seed, Stream.DATA))
    if ds.train_subset is not None and ds.train_subset < len(train):
        train = train.subset(np.sort(rng.choice(len(train), ds.train_subset, replace=False)))
    if ds.test_subset is not None and ds.test_subset < len(test):
        test = test.subset(np.sort(rng.choice(len(test), ds.test_subset, replace=False)))
    return train, test


def build_data(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset, list[ClientPartition]]:
    """Train set (possibly noisy), clean test set and client partitions."""
    train, test = load_datasets(cfg, seed)
    p = cfg.partition
    spec = PartitionSpec(p.scheme, cfg.federation.n_clients, p.dirichlet_alpha, p.shards_per_client,
                         seed=stream_seed(seed, Stream.PARTITION))
    noise_seed = stream_seed(seed, Stream.NOISE)
    ratio = cfg.dataset.noise_ratio
    if cfg.dataset.noise_before_partition:
        train = inject_label_noise(train, ratio, noise_seed)
        parts = partition(train, spec)
    else:
        parts = partition(train, spec)
        train = inject_label_noise(train, ratio, noise_seed)
    return train, test, parts


def build_model(cfg: ExperimentConfig, feature_shape: tuple[int, ...], num_classes: int, seed: int) -> nn.Model:
    m = cfg.model
    init_seed = stream_seed(seed, Stream.INIT)
    if m.kind == "softmax":
        return nn.softmax_regression(feature_shape, num_classes, seed=init_seed)
    if m.kind == "mlp":
        return nn.mlp(feature_shape, num_classes, hidden=m.hidden, seed=init_seed)
    return nn.cnn(feature_shape, num_classes, hidden=m.hidden, seed=init_seed)
