"""Training configuration, loadable from YAML with flag overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields

import yaml

VARIANTS = ("baseline", "baseline+SA", "OODp", "OODp+SA")


@dataclass(frozen=True)
class AugmentationPolicy:
    """Stochastic augmentation knobs; all draws come from one seeded RNG."""

    crop_scale: tuple[float, float] = (0.6, 1.0)
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    color_strength: float = 0.4
    blur_kernel: int = 3
    blur_sigma: tuple[float, float] = (0.1, 1.5)
    blur_p: float = 0.5
    rotate_degrees: float = 15.0
    seed: int = 0

    def __post_init__(self):
        for p in (self.hflip_p, self.vflip_p, self.blur_p):
            if not 0 <= p <= 1:
                raise ValueError(f"probabilities must be in [0, 1], got {p}")
        if self.blur_kernel % 2 != 1:
            raise ValueError("blur kernel must be odd")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for pretraining and fine-tuning.

    The defaults mirror the reference recipe (SGD, lr 0.001, weight decay
    5e-4, momentum 0.9, mini-batches of 16).  ``pretrain_epochs`` defaults
    to the 50-epoch desk-scale setting; the reference setting is 1000.
    ``encoder`` picks the backbone: "efficientnet_b0" is the reference,
    "small" a fast desk-scale substitute.
    """

    learning_rate: float = 0.001
    weight_decay: float = 5e-4
    batch_size: int = 16
    momentum: float = 0.9
    optimizer: str = "sgd"
    epochs: int = 50
    variant: str = "baseline"
    resolution: int = 128
    temperature: float = 0.5
    pretrain_epochs: int = 50
    encoder: str = "efficientnet_b0"
    grouping: int = 5
    seed: int = 0
    augment: bool = True
    sa_heads: int = 4
    proj_hidden: int = 256
    proj_dim: int = 128
    norm_mean: float = 0.5
    norm_std: float = 0.5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.optimizer != "sgd":
            raise ValueError(f"only sgd is supported, got {self.optimizer!r}")
        for name in ("learning_rate", "batch_size", "temperature", "epochs",
                     "pretrain_epochs", "resolution"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.grouping not in (5, 3):
            raise ValueError(f"grouping must be 5 or 3, got {self.grouping}")

    @property
    def use_sa(self) -> bool:
        return self.variant.endswith("+SA")

    @property
    def needs_pretrained(self) -> bool:
        return self.variant.startswith("OODp")


def load_config(path=None, **overrides) -> TrainConfig:
    """Build a TrainConfig from an optional YAML file plus overrides."""
    data = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**data)
