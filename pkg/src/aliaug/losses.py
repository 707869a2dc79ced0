"""Multilevel discriminator, perceptual feature pyramid and the composite generator objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .codec import ShapeError

MIN_DISC_SIZE = 16


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    """Defaults follow the reference training table ("Lambda GAN / L2 / LPIPS / CLIPSim")."""

    adv: float = 2.5
    rec: float = 10.0
    lpips: float = 10.0
    promptsim: float = 5.0
    use_promptsim: bool = False


@dataclass
class LossBreakdown:
    adv: torch.Tensor
    rec: torch.Tensor
    lpips: torch.Tensor
    total: torch.Tensor
    promptsim: torch.Tensor | None = None
    weights: LossWeights = field(default_factory=LossWeights)

    def as_floats(self) -> dict[str, float]:
        out = {k: float(getattr(self, k).detach()) for k in ("adv", "rec", "lpips", "total")}
        if self.promptsim is not None:
            out["promptsim"] = float(self.promptsim.detach())
        return out


def _pyramid(channels: Sequence[int], in_channels: int = 3) -> nn.ModuleList:
    chans = [in_channels, *channels]
    return nn.ModuleList(
        nn.Sequential(
            nn.Conv2d(a, b, 4, stride=2, padding=1),
            nn.GroupNorm(min(8, b), b),
            nn.SiLU(),
            nn.Conv2d(b, b, 3, padding=1),
            nn.SiLU(),
        )
        for a, b in zip(chans[:-1], chans[1:])
    )


def _sn_pyramid(channels: Sequence[int], in_channels: int = 3) -> nn.ModuleList:
    chans = [in_channels, *channels]
    return nn.ModuleList(
        nn.Sequential(
            spectral_norm(nn.Conv2d(a, b, 4, stride=2, padding=1)),
            nn.SiLU(),
            spectral_norm(nn.Conv2d(b, b, 3, padding=1)),
            nn.SiLU(),
        )
        for a, b in zip(chans[:-1], chans[1:])
    )


class Discriminator(nn.Module):
    """Conv feature pyramid at strides 2/4/8 with a 1x1 logit head per level.

    Every conv is spectrally normalized.  Without a Lipschitz bound the
    generator-side adversarial gradient grows by orders of magnitude over the
    reconstruction gradient at batch size 1 and stalls learning.  Power
    iteration only advances in train mode, so eval mode is a fixed function.
    """

    def __init__(self, channels: Sequence[int] = (32, 64, 128), seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.levels = _sn_pyramid(channels)
            self.heads = nn.ModuleList(spectral_norm(nn.Conv2d(c, 1, 1)) for c in channels)

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        if min(image.shape[-2:]) < MIN_DISC_SIZE:
            raise ShapeError(f"discriminator needs at least {MIN_DISC_SIZE}x{MIN_DISC_SIZE} input")
        logits = []
        h = image
        for level, head in zip(self.levels, self.heads):
            h = level(h)
            logits.append(head(h))
        return logits


def disc_forward(disc: Discriminator, image: torch.Tensor) -> list[torch.Tensor]:
    return disc(image)


class FeaturePyramid(nn.Module):
    """Frozen, seeded, untrained 3-level conv pyramid used as the perceptual feature map."""

    def __init__(self, channels: Sequence[int] = (16, 32, 64), seed: int = 1234):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.levels = _pyramid(channels)
        self.requires_grad_(False)

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = image
        for level in self.levels:
            h = level(h)
            feats.append(h)
        return feats


def _check_same(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _bce(logits: torch.Tensor, target: float) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, target))


def adversarial_loss_from_logits(real_logits: Sequence[torch.Tensor] | None,
                                 fake_logits: Sequence[torch.Tensor], role: str) -> torch.Tensor:
    """Per-level sigmoid BCE averaged over levels.

    ``disc``: BCE(real, 1) + BCE(fake, 0).  ``gen``: non-saturating BCE(fake, 1).
    """
    if role == "disc":
        terms = [_bce(r, 1.0) + _bce(f, 0.0) for r, f in zip(real_logits, fake_logits)]
    elif role == "gen":
        terms = [_bce(f, 1.0) for f in fake_logits]
    else:
        raise ValueError(f"unknown role {role!r}")
    return torch.stack(terms).mean()


def adversarial_loss(disc: Discriminator, real: torch.Tensor, fake: torch.Tensor, role: str) -> torch.Tensor:
    _check_same(real, fake)
    if role == "disc":
        return adversarial_loss_from_logits(disc(real), disc(fake.detach()), "disc")
    return adversarial_loss_from_logits(None, disc(fake), role)


def reconstruction_loss(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_same(output, target)
    return F.mse_loss(output, target)


def _unit_normalize(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / torch.sqrt((f * f).sum(dim=1, keepdim=True) + eps)


def perceptual_loss(output: torch.Tensor, target: torch.Tensor,
                    extractor: Callable[[torch.Tensor], Sequence[torch.Tensor]]) -> torch.Tensor:
    """Sum over levels of the mean squared difference of channel-normalized features."""
    _check_same(output, target)
    total = output.new_zeros(())
    for fo, ft in zip(extractor(output), extractor(target)):
        total = total + ((_unit_normalize(fo) - _unit_normalize(ft)) ** 2).mean()
    return total


def total_loss(adv: torch.Tensor, rec: torch.Tensor, lpips: torch.Tensor,
               weights: LossWeights = LossWeights(), promptsim: torch.Tensor | None = None) -> LossBreakdown:
    parts = {"adv": adv, "rec": rec, "lpips": lpips}
    if weights.use_promptsim:
        if promptsim is None:
            raise ValueError("promptsim weighting enabled but no promptsim term given")
        parts["promptsim"] = promptsim
    for name, value in parts.items():
        if not math.isfinite(float(value.detach())):
            raise DivergenceError(f"non-finite {name} loss")
    total = weights.adv * adv + weights.rec * rec + weights.lpips * lpips
    if weights.use_promptsim:
        total = total + weights.promptsim * promptsim
    return LossBreakdown(adv=adv, rec=rec, lpips=lpips, total=total,
                         promptsim=parts.get("promptsim"), weights=weights)
