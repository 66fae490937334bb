"""Model, optimiser and run configuration.

Everything serialises to a single JSON document; unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from math import comb
from pathlib import Path

TASKS = ("nlvr", "vqa")
VARIANTS = ("full", "no_smod", "no_xmod", "no_entity", "no_rel")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def n_images_for(task: str) -> int:
    if task == "nlvr":
        return 2
    if task == "vqa":
        return 1
    raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")


@dataclass(frozen=True)
class ModelConfig:
    task: str = "nlvr"
    d: int = 32
    d_raw_t: int = 32
    d_raw_v: int = 32
    vocab_size: int = 24
    n_text: int = 20
    n_visual: int = 36
    n_text_layers: int = 2
    n_visual_layers: int = 5
    n_cross_layers: int = 5
    n_heads: int = 1
    ffn_mult: int = 4
    top_k: int = 10
    relation_hidden: int = 0  # 0 -> d
    symmetric_relations: bool = False
    cnn_channels: tuple[int, int] = (8, 16)
    cnn_kernel: int = 3
    cnn_hidden: int = 32
    head_hidden: int = 64
    n_classes: int = 8
    variant: str = "full"
    frozen_seed: int = 0
    layer_norm_eps: float = 1e-5

    @property
    def n_images(self) -> int:
        return n_images_for(self.task)

    @property
    def rel_hidden(self) -> int:
        return self.relation_hidden or self.d

    @property
    def n_outputs(self) -> int:
        return 1 if self.task == "nlvr" else self.n_classes

    def validate(self) -> "ModelConfig":
        n_images_for(self.task)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        positive = ("d", "d_raw_t", "d_raw_v", "vocab_size", "n_text", "n_visual", "n_heads",
                    "ffn_mult", "top_k", "cnn_kernel", "cnn_hidden", "head_hidden", "n_classes")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("n_text_layers", "n_visual_layers", "n_cross_layers", "relation_hidden"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if len(self.cnn_channels) != 2 or min(self.cnn_channels) <= 0:
            raise ConfigError(f"cnn_channels must be two positive ints, got {self.cnn_channels}")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.top_k > comb(self.n_text, 2) or self.top_k > comb(self.n_visual, 2):
            raise ConfigError(
                f"top_k={self.top_k} exceeds candidate count C(n_text,2)={comb(self.n_text, 2)} "
                f"or C(n_visual,2)={comb(self.n_visual, 2)}"
            )
        if self.task == "vqa" and self.n_classes < 2:
            raise ConfigError("vqa task needs n_classes >= 2")
        return self

    def for_task(self, task: str) -> "ModelConfig":
        return replace(self, task=task).validate()

    def architecture_key(self) -> dict:
        """Fields that must agree between a checkpoint and a model it initialises.

        The task, class count and classifier width only shape the task head.
        """
        skip = {"task", "n_classes", "head_hidden", "variant"}
        return {k: v for k, v in _plain(self).items() if k not in skip}


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    decoupled: bool = True
    decay_norm_params: bool = False

    def validate(self) -> "OptimConfig":
        if self.lr <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("invalid Adam hyperparameters")
        if self.weight_decay < 0 or self.max_grad_norm <= 0:
            raise ConfigError("weight_decay must be >= 0 and max_grad_norm > 0")
        return self


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    threshold: float = 0.8
    sustain: int = 2
    dtype: str = "float64"

    def validate(self) -> "TrainConfig":
        if self.epochs <= 0 or self.batch_size <= 0 or self.sustain <= 0:
            raise ConfigError("epochs, batch_size and sustain must be positive")
        if not 0 < self.threshold <= 1:
            raise ConfigError("threshold must lie in (0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        return self


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.optim.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        return {"model": _plain(self.model), "optim": _plain(self.optim), "train": _plain(self.train)}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        _reject_unknown(data, {"model", "optim", "train"}, "config")
        return cls(
            model=_build(ModelConfig, data.get("model", {}), "model"),
            optim=_build(OptimConfig, data.get("optim", {}), "optim"),
            train=_build(TrainConfig, data.get("train", {}), "train"),
        ).validate()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data)


def _plain(obj) -> dict:
    out = asdict(obj)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


def _reject_unknown(data: dict, allowed: set, where: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def _build(cls, data: dict, where: str):
    names = {f.name for f in fields(cls)}
    _reject_unknown(data, names, where)
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return cls(**kwargs)


def tiny_config(task: str = "nlvr") -> ModelConfig:
    """The gradient-check configuration: d=8, 4 tokens, 4 ROIs per image, K=3, one layer per stack."""
    return ModelConfig(
        task=task, d=8, d_raw_t=6, d_raw_v=5, vocab_size=10, n_text=4, n_visual=4,
        n_text_layers=1, n_visual_layers=1, n_cross_layers=1, top_k=3,
        cnn_channels=(2, 2), cnn_kernel=3, cnn_hidden=4, head_hidden=6, n_classes=3,
    ).validate()


def desk_config(task: str = "nlvr") -> ModelConfig:
    """Sizes used for the learning, ablation and transfer experiments."""
    return ModelConfig(
        task=task, d=16, d_raw_t=16, d_raw_v=32, vocab_size=16, n_text=10, n_visual=6,
        n_text_layers=1, n_visual_layers=1, n_cross_layers=1, top_k=4,
        cnn_channels=(8, 16), cnn_kernel=3, cnn_hidden=32, head_hidden=64, n_classes=8,
    ).validate()
