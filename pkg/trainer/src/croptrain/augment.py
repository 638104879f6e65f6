"""Seeded image augmentations on (1, H, W) tensors in [0, 1].

All randomness flows through an explicit ``torch.Generator`` so a fixed
seed reproduces the exact same augmented images, batch for batch.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from .config import AugmentationPolicy


def _u(gen: torch.Generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * torch.rand((), generator=gen).item()


def random_resized_crop(img: torch.Tensor, scale: tuple[float, float],
                        gen: torch.Generator) -> torch.Tensor:
    _, h, w = img.shape
    s = _u(gen, *scale)
    side_h = max(int(round(h * s ** 0.5)), 1)
    side_w = max(int(round(w * s ** 0.5)), 1)
    top = int(_u(gen, 0, h - side_h + 1)) if h > side_h else 0
    left = int(_u(gen, 0, w - side_w + 1)) if w > side_w else 0
    patch = img[:, top : top + side_h, left : left + side_w]
    out = F.interpolate(patch[None], size=(h, w), mode="bilinear",
                        align_corners=False)
    return out[0]


def random_flips(img: torch.Tensor, hflip_p: float, vflip_p: float,
                 gen: torch.Generator) -> torch.Tensor:
    if torch.rand((), generator=gen).item() < hflip_p:
        img = torch.flip(img, dims=[2])
    if torch.rand((), generator=gen).item() < vflip_p:
        img = torch.flip(img, dims=[1])
    return img


def color_distort(img: torch.Tensor, strength: float,
                  gen: torch.Generator) -> torch.Tensor:
    brightness = 1.0 + _u(gen, -strength, strength)
    contrast = 1.0 + _u(gen, -strength, strength)
    img = img * brightness
    mean = img.mean()
    img = (img - mean) * contrast + mean
    return img.clamp(0.0, 1.0)


def gaussian_blur(img: torch.Tensor, kernel: int, sigma: tuple[float, float],
                  p: float, gen: torch.Generator) -> torch.Tensor:
    if torch.rand((), generator=gen).item() >= p:
        return img
    s = _u(gen, *sigma)
    return TF.gaussian_blur(img, kernel_size=kernel, sigma=s)


def random_rotate(img: torch.Tensor, degrees: float,
                  gen: torch.Generator) -> torch.Tensor:
    angle = _u(gen, -degrees, degrees)
    return TF.rotate(img, angle,
                     interpolation=TF.InterpolationMode.BILINEAR)


def contrastive_view(img: torch.Tensor, policy: AugmentationPolicy,
                     gen: torch.Generator) -> torch.Tensor:
    """One stochastic view: crop+resize, flips, color distortion, blur."""
    img = random_resized_crop(img, policy.crop_scale, gen)
    img = random_flips(img, policy.hflip_p, policy.vflip_p, gen)
    img = color_distort(img, policy.color_strength, gen)
    img = gaussian_blur(img, policy.blur_kernel, policy.blur_sigma,
                        policy.blur_p, gen)
    return img


def supervised_view(img: torch.Tensor, policy: AugmentationPolicy,
                    gen: torch.Generator) -> torch.Tensor:
    """Fine-tuning augmentation: rotation, flips, crop (no normalization)."""
    img = random_rotate(img, policy.rotate_degrees, gen)
    img = random_flips(img, policy.hflip_p, policy.vflip_p, gen)
    img = random_resized_crop(img, policy.crop_scale, gen)
    return img


def normalize(img: torch.Tensor, mean: float, std: float) -> torch.Tensor:
    return (img - mean) / std
