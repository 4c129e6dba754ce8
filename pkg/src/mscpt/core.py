"""Domain records, configuration and the bag-label relation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Optional, Sequence

import numpy as np
import yaml

SCALES = ("low", "high")
GRAPH_KINDS = ("sim", "knn-coord", "knn-feat")


class InvalidBagError(ValueError):
    pass


class ConfigError(ValueError):
    """Raised with every violated field, not just the first one."""

    def __init__(self, problems: Mapping[str, str]):
        self.problems = dict(problems)
        msg = "; ".join(f"{k}: {v}" for k, v in self.problems.items())
        super().__init__(f"invalid config ({msg})")

    @property
    def fields(self) -> list[str]:
        return list(self.problems)


def bag_label_from_instances(instance_labels: Sequence[int]) -> int:
    labels = list(instance_labels)
    if not labels:
        raise InvalidBagError("bag has no instances")
    return 0 if sum(int(y) for y in labels) == 0 else 1


@dataclass(frozen=True, eq=False)
class ScaleView:
    instances: np.ndarray  # (M, T, F) token grids; 2-d input is promoted to T=1
    coords: np.ndarray  # (M, 2) integer grid positions
    instance_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        inst = np.asarray(self.instances)
        if inst.ndim == 2:
            inst = inst[:, None, :]
        if inst.ndim != 3 or inst.shape[0] < 1:
            raise InvalidBagError(f"instances must be (M, T, F) with M >= 1, got {inst.shape}")
        coords = np.asarray(self.coords, dtype=np.int64)
        if coords.shape != (inst.shape[0], 2):
            raise InvalidBagError(f"coords shape {coords.shape} does not match {inst.shape[0]} instances")
        if len({tuple(c) for c in coords.tolist()}) != len(coords):
            raise InvalidBagError("duplicate coordinates within a scale")
        inst.setflags(write=False)
        coords.setflags(write=False)
        object.__setattr__(self, "instances", inst)
        object.__setattr__(self, "coords", coords)
        if self.instance_labels is not None:
            y = np.asarray(self.instance_labels, dtype=np.int64)
            if y.shape != (inst.shape[0],) or not np.isin(y, (0, 1)).all():
                raise InvalidBagError("instance_labels must be M binary markers")
            y.setflags(write=False)
            object.__setattr__(self, "instance_labels", y)

    @property
    def n(self) -> int:
        return self.instances.shape[0]


@dataclass(frozen=True, eq=False)
class Bag:
    bag_id: str
    label: int
    scale_views: Mapping[str, ScaleView]
    num_classes: Optional[int] = None

    def __post_init__(self):
        unknown = set(self.scale_views) - set(SCALES)
        if unknown:
            raise InvalidBagError(f"unknown scale tags {sorted(unknown)}")
        if not self.scale_views:
            raise InvalidBagError("bag has no scale views")
        if self.num_classes is not None and not 0 <= self.label < self.num_classes:
            raise InvalidBagError(f"label {self.label} outside [0, {self.num_classes})")
        if self.num_classes == 2:
            for tag, view in self.scale_views.items():
                if view.instance_labels is not None and bag_label_from_instances(view.instance_labels) != self.label:
                    raise InvalidBagError(f"bag {self.bag_id}: {tag} instance labels contradict bag label")
        object.__setattr__(self, "scale_views", MappingProxyType(dict(self.scale_views)))

    @property
    def low(self) -> ScaleView:
        return self.scale_views["low"]

    @property
    def high(self) -> ScaleView:
        return self.scale_views["high"]


@dataclass(frozen=True)
class ModelConfig:
    d_joint: int = 32
    d_model: int = 32
    n_heads: int = 2
    K: int = 2
    C_low: int = 10
    C_high: int = 30
    n_select: int = 30
    tau: float = 0.07
    K_top: int = 5
    L_text: int = 2
    L_img: int = 2
    len_glob: int = 2
    len_vis: int = 2
    gcn_layers: int = 1
    context_len: int = 77
    lr: float = 1e-4
    weight_decay: float = 1e-5
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    loss_weights: tuple = (1.0, 1.0, 1.0)  # overall, high, low
    # component toggles for ablations
    use_mhpt: bool = True
    use_isgpt: bool = True
    use_npcgp: bool = True
    graph: str = "sim"
    knn_k: int = 8
    cross_guidance: bool = True

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d


_COUNT_FIELDS = ("d_joint", "d_model", "n_heads", "K", "C_low", "C_high", "n_select", "K_top",
                 "L_text", "L_img", "gcn_layers", "context_len", "max_epochs", "patience", "knn_k")


def validate_config(cfg: ModelConfig) -> ModelConfig:
    problems: dict[str, str] = {}
    for name in _COUNT_FIELDS:
        value = getattr(cfg, name)
        if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
            problems[name] = f"must be an integer >= 1, got {value!r}"
    for name in ("len_glob", "len_vis"):
        value = getattr(cfg, name)
        if not isinstance(value, int) or value < 0:
            problems[name] = f"must be an integer >= 0, got {value!r}"
    if not cfg.tau > 0:
        problems["tau"] = f"must be > 0, got {cfg.tau!r}"
    if not cfg.lr > 0:
        problems["lr"] = f"must be > 0, got {cfg.lr!r}"
    if cfg.weight_decay < 0:
        problems["weight_decay"] = f"must be >= 0, got {cfg.weight_decay!r}"
    if "patience" not in problems and "max_epochs" not in problems and cfg.patience > cfg.max_epochs:
        problems["patience"] = f"patience {cfg.patience} exceeds max_epochs {cfg.max_epochs}"
    if "d_model" not in problems and "n_heads" not in problems and cfg.d_model % cfg.n_heads:
        problems["n_heads"] = f"d_model {cfg.d_model} not divisible by n_heads {cfg.n_heads}"
    if len(cfg.loss_weights) != 3 or any(w < 0 for w in cfg.loss_weights):
        problems["loss_weights"] = "need three non-negative weights (overall, high, low)"
    if cfg.graph not in GRAPH_KINDS:
        problems["graph"] = f"must be one of {GRAPH_KINDS}, got {cfg.graph!r}"
    if problems:
        raise ConfigError(problems)
    return cfg


def config_from_mapping(values: Mapping) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError({k: "unknown key" for k in unknown})
    values = dict(values)
    if "loss_weights" in values:
        values["loss_weights"] = tuple(values["loss_weights"])
    return validate_config(ModelConfig(**values))


def load_config(path: str | Path) -> ModelConfig:
    """Read a flat YAML mapping of ModelConfig keys. Unknown keys are rejected."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError({"<file>": "expected a flat key-value mapping"})
    return config_from_mapping(data)


def save_config(cfg: ModelConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


@dataclass(frozen=True)
class FewShotSplit:
    shots: int
    train_ids: tuple
    test_ids: tuple
    seed: int
    meta: Mapping = field(default_factory=dict, compare=False)

    def __post_init__(self):
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise ValueError(f"train/test overlap: {sorted(overlap)[:5]}")
