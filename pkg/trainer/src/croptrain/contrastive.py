"""Self-supervised contrastive pretraining of the crop encoder."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .augment import contrastive_view, normalize
from .config import AugmentationPolicy, TrainConfig
from .models import ContrastiveNet, build_encoder


def contrastive_loss(z_a: torch.Tensor, z_b: torch.Tensor,
                     temperature: float) -> torch.Tensor:
    """Normalized-temperature cross-entropy over cosine similarities.

    The positive pair for row i of one view is row i of the other view;
    every other embedding in the joint 2B batch is a negative.  Inputs
    are cosine-normalized here, so pre-normalized embeddings pass
    through unchanged.
    """
    if z_a.shape != z_b.shape:
        raise ValueError(f"view shapes differ: {z_a.shape} vs {z_b.shape}")
    b = z_a.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    z = F.normalize(torch.cat([z_a, z_b]), dim=1)
    sim = z @ z.T / temperature
    sim.fill_diagonal_(float("-inf"))  # a sample is not its own negative
    targets = torch.arange(2 * b, device=z.device).roll(b)
    return F.cross_entropy(sim, targets)


def pretrain_backbone(images: torch.Tensor, cfg: TrainConfig,
                      policy: AugmentationPolicy,
                      max_steps: int | None = None) -> tuple[nn.Module, list[float]]:
    """Train an encoder on two augmented views per image.

    Returns the bare encoder (projection head discarded) and the
    per-step loss history.  ``max_steps`` caps the total optimizer steps;
    otherwise ``cfg.pretrain_epochs`` full passes run.
    """
    if len(images) < 2 * cfg.batch_size:
        raise ValueError(
            f"need at least {2 * cfg.batch_size} images, got {len(images)}"
        )
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(policy.seed)

    model = ContrastiveNet(build_encoder(cfg.encoder), cfg.use_sa, cfg.sa_heads,
                           cfg.proj_hidden, cfg.proj_dim)
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate,
                          momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    history: list[float] = []
    steps = 0
    for _epoch in range(cfg.pretrain_epochs):
        order = torch.randperm(len(images), generator=gen)
        for lo in range(0, len(images) - cfg.batch_size + 1, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            batch = images[idx]
            view_a = torch.stack([contrastive_view(im, policy, gen) for im in batch])
            view_b = torch.stack([contrastive_view(im, policy, gen) for im in batch])
            view_a = normalize(view_a, cfg.norm_mean, cfg.norm_std)
            view_b = normalize(view_b, cfg.norm_mean, cfg.norm_std)
            loss = contrastive_loss(model(view_a), model(view_b), cfg.temperature)
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(float(loss.detach()))
            steps += 1
            if max_steps is not None and steps >= max_steps:
                return model.encoder, history
    return model.encoder, history
