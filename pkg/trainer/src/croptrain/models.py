"""Encoders, attention head, projection head, and task networks."""

from __future__ import annotations

import torch
from torch import nn


class SmallConvEncoder(nn.Module):
    """Three stride-2 conv blocks; fast desk-scale backbone.

    Produces a (B, out_channels, H/8, W/8) feature map.
    """

    def __init__(self, width: int = 32):
        super().__init__()
        self.out_channels = 4 * width
        self.net = nn.Sequential(
            nn.Conv2d(1, width, 3, stride=2, padding=1),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.BatchNorm2d(2 * width),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1),
            nn.BatchNorm2d(4 * width),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class EfficientNetEncoder(nn.Module):
    """Compound-scaled reference backbone (randomly initialized).

    Grayscale input is replicated to three channels to keep the stock
    architecture; pretrained weights are not bundled.
    """

    def __init__(self):
        super().__init__()
        from torchvision.models import efficientnet_b0

        self.features = efficientnet_b0(weights=None).features
        self.out_channels = 1280

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x.repeat(1, 3, 1, 1))


def build_encoder(name: str) -> nn.Module:
    if name == "small":
        return SmallConvEncoder()
    if name == "efficientnet_b0":
        return EfficientNetEncoder()
    raise ValueError(f"unknown encoder {name!r}")


class SelfAttention2d(nn.Module):
    """Multihead self-attention over feature-map positions, then ReLU.

    Shape-preserving: (B, C, H, W) in, (B, C, H, W) out, so it can slot
    in front of any pooling + linear head.
    """

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        seq = x.flatten(2).transpose(1, 2)  # (B, HW, C)
        out, _ = self.attn(seq, seq, seq, need_weights=False)
        out = self.act(out)
        return out.transpose(1, 2).reshape(b, c, h, w)


class ProjectionHead(nn.Module):
    """One-hidden-layer MLP mapping pooled features to the contrastive space."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def _pool(features: torch.Tensor) -> torch.Tensor:
    return features.mean(dim=(2, 3))


class ContrastiveNet(nn.Module):
    """Encoder [+ self-attention] + pooling + projection head."""

    def __init__(self, encoder: nn.Module, use_sa: bool, heads: int,
                 proj_hidden: int, proj_dim: int):
        super().__init__()
        self.encoder = encoder
        self.sa = SelfAttention2d(encoder.out_channels, heads) if use_sa else None
        self.head = ProjectionHead(encoder.out_channels, proj_hidden, proj_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.encoder(x)
        if self.sa is not None:
            f = self.sa(f)
        return self.head(_pool(f))


class MultiLabelClassifier(nn.Module):
    """Encoder [+ self-attention] + pooling + linear logits per class."""

    def __init__(self, encoder: nn.Module, n_classes: int, use_sa: bool,
                 heads: int = 4):
        super().__init__()
        self.encoder = encoder
        self.sa = SelfAttention2d(encoder.out_channels, heads) if use_sa else None
        self.fc = nn.Linear(encoder.out_channels, n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.encoder(x)
        if self.sa is not None:
            f = self.sa(f)
        return self.fc(_pool(f))
