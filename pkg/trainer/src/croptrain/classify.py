"""Multi-label fine-tuning and prediction emission."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .augment import normalize, supervised_view
from .config import AugmentationPolicy, TrainConfig
from .data import Crop, Split, load_images
from .models import MultiLabelClassifier, build_encoder


@dataclass(frozen=True)
class TrainResult:
    model: nn.Module
    loss_history: list[float]
    train_f1: float
    test_crops: list[Crop]
    test_scores: torch.Tensor  # (N, C) sigmoid outputs


def micro_f1(truth: torch.Tensor, pred: torch.Tensor) -> float:
    """Global 2tp / (2tp + fp + fn) over all label bits."""
    tp = float(((truth == 1) & (pred == 1)).sum())
    fp = float(((truth == 0) & (pred == 1)).sum())
    fn = float(((truth == 1) & (pred == 0)).sum())
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def _targets(crops: list[Crop], grouping: int) -> torch.Tensor:
    return torch.tensor([c.target(grouping) for c in crops], dtype=torch.float32)


def gradient_flow_ok(model: nn.Module, batch: torch.Tensor,
                     targets: torch.Tensor) -> dict[str, bool]:
    """One forward/backward pass; does every parameter get nonzero grad?"""
    model.train()
    model.zero_grad()
    loss = F.binary_cross_entropy_with_logits(model(batch), targets)
    loss.backward()
    return {
        name: p.grad is not None and bool(p.grad.abs().sum() > 0)
        for name, p in model.named_parameters()
    }


def train_classifier(train_crops: list[Crop], test_crops: list[Crop],
                     crops_root, cfg: TrainConfig,
                     backbone: nn.Module | None = None,
                     policy: AugmentationPolicy | None = None) -> TrainResult:
    """Fine-tune a multi-label sigmoid classifier and score the test side.

    ``train_crops`` should be the balanced train sample; ``backbone`` is
    required for the OODp variants and ignored otherwise.  No early
    stopping: exactly ``cfg.epochs`` passes run.
    """
    if cfg.needs_pretrained and backbone is None:
        raise ValueError(f"variant {cfg.variant} requires a pretrained backbone")
    if not train_crops:
        raise ValueError("empty train set")
    if policy is None:
        policy = AugmentationPolicy(seed=cfg.seed)

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(policy.seed)

    encoder = backbone if cfg.needs_pretrained else build_encoder(cfg.encoder)
    model = MultiLabelClassifier(encoder, n_classes=cfg.grouping,
                                 use_sa=cfg.use_sa, heads=cfg.sa_heads)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate,
                          momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    images = load_images(train_crops, crops_root)
    targets = _targets(train_crops, cfg.grouping)

    history: list[float] = []
    model.train()
    for _epoch in range(cfg.epochs):
        order = torch.randperm(len(images), generator=gen)
        for lo in range(0, len(images), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            batch = images[idx]
            if cfg.augment:
                batch = torch.stack([supervised_view(im, policy, gen)
                                     for im in batch])
            batch = normalize(batch, cfg.norm_mean, cfg.norm_std)
            loss = F.binary_cross_entropy_with_logits(model(batch), targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(float(loss.detach()))

    model.eval()
    with torch.no_grad():
        train_in = normalize(images, cfg.norm_mean, cfg.norm_std)
        train_pred = (torch.sigmoid(model(train_in)) > 0.5).to(torch.int64)
        f1 = micro_f1(targets.to(torch.int64), train_pred)

        if test_crops:
            test_in = normalize(load_images(test_crops, crops_root),
                                cfg.norm_mean, cfg.norm_std)
            test_scores = torch.sigmoid(model(test_in))
        else:
            test_scores = torch.zeros((0, cfg.grouping))

    return TrainResult(model=model, loss_history=history, train_f1=f1,
                       test_crops=list(test_crops), test_scores=test_scores)


def select_sides(crops: list[Crop], split: Split) -> tuple[list[Crop], list[Crop]]:
    train = [c for c in crops if c.patient_id in split.train]
    test = [c for c in crops if c.patient_id in split.test]
    return train, test
