"""Batched image augmentation on float tensors shaped (B, C, H, W).

The weak policy (resize, center crop, normalize) is deterministic and is the
"original view" used for pseudo-labels. The strong policy draws independent
parameters per image from a seeded ``torch.Generator``; torchvision's
transforms would draw one set of parameters per call, hence the batched
reimplementation of the four transforms here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torchvision.transforms import v2

_GRAY = torch.tensor([0.299, 0.587, 0.114])


@dataclass
class WeakPolicy:
    size: int | None = None
    mean: tuple = (0.0, 0.0, 0.0)
    std: tuple = (1.0, 1.0, 1.0)

    def __call__(self, images):
        x = torch.as_tensor(images, dtype=torch.float32)
        if self.size is not None and (x.shape[-1] != self.size or x.shape[-2] != self.size):
            x = v2.functional.resize(x, [self.size], antialias=True)
            x = v2.functional.center_crop(x, [self.size, self.size])
        mean = torch.tensor(self.mean, dtype=x.dtype)[: x.shape[1], None, None]
        std = torch.tensor(self.std, dtype=x.dtype)[: x.shape[1], None, None]
        return (x - mean) / std


@dataclass
class StrongPolicy:
    """RandomResizedCrop + RandomHorizontalFlip + ColorJitter + RandomGrayscale."""

    crop_scale: tuple = (0.5, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    jitter_p: float = 0.8
    gray_p: float = 0.2
    weak: WeakPolicy = field(default_factory=WeakPolicy)

    def _crop(self, x, gen):
        b = x.shape[0]
        area = torch.empty(b).uniform_(*self.crop_scale, generator=gen)
        log_r = torch.empty(b).uniform_(*torch.log(torch.tensor(self.crop_ratio)).tolist(), generator=gen)
        ratio = torch.exp(log_r)
        sw = torch.sqrt(area * ratio).clamp(max=1.0)
        sh = torch.sqrt(area / ratio).clamp(max=1.0)
        cx = (torch.rand(b, generator=gen) * 2 - 1) * (1 - sw)
        cy = (torch.rand(b, generator=gen) * 2 - 1) * (1 - sh)
        theta = torch.zeros(b, 2, 3)
        theta[:, 0, 0], theta[:, 0, 2] = sw, cx
        theta[:, 1, 1], theta[:, 1, 2] = sh, cy
        grid = F.affine_grid(theta, list(x.shape), align_corners=False)
        return F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)

    def _jitter(self, x, gen):
        b = x.shape[0]

        def factor(amount):
            return torch.empty(b, 1, 1, 1).uniform_(max(0.0, 1 - amount), 1 + amount, generator=gen)

        apply = (torch.rand(b, 1, 1, 1, generator=gen) < self.jitter_p).to(x.dtype)
        out = x * factor(self.brightness)
        mean = out.mean(dim=(1, 2, 3), keepdim=True)
        out = (out - mean) * factor(self.contrast) + mean
        if x.shape[1] == 3:
            gray = (out * _GRAY.to(x.dtype)[None, :, None, None]).sum(1, keepdim=True)
            out = (out - gray) * factor(self.saturation) + gray
        return apply * out + (1 - apply) * x

    def __call__(self, images, generator: torch.Generator):
        x = torch.as_tensor(images, dtype=torch.float32)
        x = self._crop(x, generator)
        flip = torch.rand(x.shape[0], generator=generator) < self.flip_p
        x = torch.where(flip[:, None, None, None], x.flip(-1), x)
        x = self._jitter(x, generator)
        if x.shape[1] == 3:
            gray = (x * _GRAY.to(x.dtype)[None, :, None, None]).sum(1, keepdim=True).expand_as(x)
            to_gray = torch.rand(x.shape[0], generator=generator) < self.gray_p
            x = torch.where(to_gray[:, None, None, None], gray, x)
        return self.weak(x)


@dataclass
class AugmentationPolicy:
    weak: WeakPolicy = field(default_factory=WeakPolicy)
    strong: StrongPolicy = field(default_factory=StrongPolicy)
