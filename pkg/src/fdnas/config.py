"""Experiment configuration: a YAML tree mapped onto nested dataclasses.

Unknown keys are rejected. ``resolved_json`` renders every field, defaults
included, for the echo written next to each command's outputs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .search_space import DEFAULT_CANDIDATES, SearchSpace


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | raw
    num_classes: int = 10
    per_class: int = 50
    image_size: int = 8
    channels: int = 1
    difficulty: float = 0.8
    images_path: str | None = None
    labels_path: str | None = None


@dataclass
class PartitionConfig:
    kind: str = "label_shards"  # label_shards | dirichlet | iid
    groups: list | None = None  # [[classes], [devices]] pairs; null -> three contiguous blocks
    concentration: float = 0.5
    tags: list | None = None
    val_fraction: float = 0.15
    test_fraction: float = 0.2


@dataclass
class SpaceConfig:
    stem_channels: int = 8
    stem_stride: int = 2
    widths: list = field(default_factory=lambda: [8, 8, 12, 12, 12, 16, 16, 16])
    strides: list = field(default_factory=lambda: [1, 1, 2, 1, 1, 1, 1, 1])
    # zero is left out of the toy default: on a single-path chain it disconnects the net
    candidates: list = field(default_factory=lambda: [c for c in DEFAULT_CANDIDATES if c != "zero"])
    zero_on_downsample: bool = False


@dataclass
class OnlineConfig:
    kind: str = "all"  # all | fraction | fixed
    value: float = 1.0


@dataclass
class FederationConfig:
    num_devices: int = 10
    rounds: int = 30
    local_epochs: int = 5
    online: OnlineConfig = field(default_factory=OnlineConfig)
    hardware_tags: list | None = None  # per device; null -> gpu/cpu/phone by data group
    identical_device_seeds: bool = False


@dataclass
class OptimConfig:
    batch_size: int = 16
    lr_w: float = 0.1
    momentum: float = 0.9
    lr_alpha: float = 0.05
    betas: list = field(default_factory=lambda: [0.0, 0.999])
    eps: float = 1e-8
    interleave: str = "per_epoch"  # per_epoch | per_batch
    rescale: str = "pair"  # pair | global


@dataclass
class LossConfig:
    lambda1: float = 1.5e-4  # weight decay applied to w is 2 * lambda1
    lambda2: float = 0.0
    search_profile: str = "gpu"


@dataclass
class ClusterConfig:
    key: str = "hardware"  # hardware | data
    rounds: int = 6
    # tag -> value, sized to each synthetic table's latency gaps; missing tags use default_lambda2
    lambda2: dict = field(default_factory=lambda: {"gpu": 2.0, "cpu": 0.3, "phone": 0.5})
    default_lambda2: float = 0.5
    tables: dict = field(default_factory=dict)  # tag -> CSV path; missing tags use synthetic profile
    reset_optimizers: bool = True


@dataclass
class FinetuneConfig:
    rounds: int = 50
    local_epochs: int = 3
    lr: float = 0.1
    batch_size: int = 16


@dataclass
class EvalConfig:
    local_epochs: int = 3
    lr: float = 0.05


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    space: SpaceConfig = field(default_factory=SpaceConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        errs = []
        if self.data.source not in ("synthetic", "raw"):
            errs.append(f"data.source must be synthetic or raw, got {self.data.source!r}")
        if self.data.source == "raw":
            for p in (self.data.images_path, self.data.labels_path):
                if not p or not Path(p).exists():
                    errs.append(f"raw data file {p!r} does not exist")
        if self.partition.kind not in ("label_shards", "dirichlet", "iid"):
            errs.append(f"partition.kind {self.partition.kind!r} unknown")
        if self.federation.num_devices < 1 or self.federation.local_epochs < 1 or self.federation.rounds < 0:
            errs.append("federation needs num_devices >= 1, local_epochs >= 1, rounds >= 0")
        if self.federation.online.kind not in ("all", "fraction", "fixed"):
            errs.append(f"federation.online.kind {self.federation.online.kind!r} unknown")
        tags = self.federation.hardware_tags
        if tags is not None and len(tags) != self.federation.num_devices:
            errs.append(f"{len(tags)} hardware tags for {self.federation.num_devices} devices")
        if self.optim.interleave not in ("per_epoch", "per_batch"):
            errs.append(f"optim.interleave {self.optim.interleave!r} unknown")
        if self.optim.rescale not in ("pair", "global"):
            errs.append(f"optim.rescale {self.optim.rescale!r} unknown")
        if self.loss.lambda1 < 0 or self.loss.lambda2 < 0:
            errs.append("loss weights must be non-negative")
        if self.cluster.key not in ("hardware", "data"):
            errs.append(f"unknown cluster key {self.cluster.key!r}")
        for tag, p in self.cluster.tables.items():
            if not Path(p).exists():
                errs.append(f"latency table for cluster {tag!r} not found: {p}")
        if errs:
            raise ValueError("; ".join(errs))
        return self

    def search_space(self) -> SearchSpace:
        s = self.space
        return SearchSpace.build(
            in_channels=self.data.channels, image_size=self.data.image_size,
            num_classes=self.data.num_classes, stem_channels=s.stem_channels,
            widths=list(s.widths), strides=list(s.strides), candidates=list(s.candidates),
            zero_on_downsample=s.zero_on_downsample, stem_stride=s.stem_stride)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def resolved_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _build(cls, data: dict, path: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ValueError(f"{path or 'config'} must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ValueError(f"unknown config keys at {path or 'top level'}: {unknown}")
    kwargs = {}
    for key, value in data.items():
        default = names[key].default_factory() if names[key].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{path}.{key}".lstrip("."))
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "")


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    data = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    cfg = config_from_dict(data)
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg
