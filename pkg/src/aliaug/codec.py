"""Shared image encoder / skip-connected decoder with zero-conv taps and LoRA adapters."""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

LATENT_CHANNELS = 4
DOWNSAMPLE_FACTOR = 8


class ShapeError(ValueError):
    pass


class ZeroConv(nn.Conv2d):
    """1x1 convolution whose weight and bias start at zero."""

    def __init__(self, in_channels: int, out_channels: int | None = None):
        super().__init__(in_channels, out_channels or in_channels, kernel_size=1)
        nn.init.zeros_(self.weight)
        nn.init.zeros_(self.bias)


class LoRAAdapter(nn.Module):
    """Frozen base weight plus a trainable low-rank delta ``(alpha / r) * B @ A``.

    ``A`` is ``r x d_in`` and ``B`` is ``d_out x r``; ``B`` starts at zero so the
    wrapped layer reproduces its base exactly until the first update.  Conv
    kernels are flattened to ``d_in = C_in * k * k``.
    """

    def __init__(self, weight: torch.Tensor, bias: torch.Tensor | None, rank: int,
                 alpha: float | None = None, seed: int = 0):
        super().__init__()
        d_out = weight.shape[0]
        d_in = weight[0].numel()
        if rank < 1 or rank > min(d_in, d_out):
            raise ValueError(f"LoRA rank {rank} invalid for a {d_out}x{d_in} weight")
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        self.register_buffer("base_weight", weight.detach().clone())
        self.register_buffer("base_bias", None if bias is None else bias.detach().clone())
        gen = torch.Generator().manual_seed(seed)
        a = torch.randn(rank, d_in, generator=gen, dtype=weight.dtype) / math.sqrt(d_in)
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank, dtype=weight.dtype))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def d_in(self) -> int:
        return self.lora_A.shape[1]

    @property
    def d_out(self) -> int:
        return self.lora_B.shape[0]

    def effective_weight(self) -> torch.Tensor:
        delta = (self.lora_B @ self.lora_A) * self.scale
        return self.base_weight + delta.view_as(self.base_weight)


class LoRAConv2d(LoRAAdapter):
    def __init__(self, conv: nn.Conv2d, rank: int, alpha: float | None = None, seed: int = 0):
        super().__init__(conv.weight, conv.bias, rank, alpha, seed)
        self.stride = conv.stride
        self.padding = conv.padding

    def forward(self, x):
        return F.conv2d(x, self.effective_weight(), self.base_bias, self.stride, self.padding)

    def base_forward(self, x):
        return F.conv2d(x, self.base_weight, self.base_bias, self.stride, self.padding)


class LoRALinear(LoRAAdapter):
    def __init__(self, linear: nn.Linear, rank: int, alpha: float | None = None, seed: int = 0):
        super().__init__(linear.weight, linear.bias, rank, alpha, seed)

    def forward(self, x):
        return F.linear(x, self.effective_weight(), self.base_bias)

    def base_forward(self, x):
        return F.linear(x, self.base_weight, self.base_bias)


def wrap_lora(layer: nn.Module, rank: int, alpha: float | None = None, seed: int = 0) -> LoRAAdapter:
    if isinstance(layer, nn.Conv2d):
        return LoRAConv2d(layer, rank, alpha, seed)
    if isinstance(layer, nn.Linear):
        return LoRALinear(layer, rank, alpha, seed)
    raise TypeError(f"cannot wrap {type(layer).__name__}")


def lora_rank_for(layer: nn.Module, rank: int) -> int:
    """Clamp ``rank`` to what the layer's weight admits (e.g. 3-channel outputs)."""
    w = layer.weight
    return min(rank, w.shape[0], w[0].numel())


def inject_lora(module: nn.Module, rank: int, alpha: float | None = None, seed: int = 0,
                skip: Sequence[type] = (ZeroConv,)) -> list[LoRAAdapter]:
    """Replace every Conv2d / Linear below ``module`` with a LoRA-wrapped copy.

    Layers of the types in ``skip`` are left alone.  Adapter seeds are
    ``seed + k`` in module traversal order.
    """
    adapters = []
    counter = [seed]

    def visit(parent: nn.Module):
        for name, child in list(parent.named_children()):
            if isinstance(child, tuple(skip)):
                continue
            if isinstance(child, (nn.Conv2d, nn.Linear)):
                r = lora_rank_for(child, rank)
                if alpha is None:
                    a = None
                else:
                    # keep alpha / r constant when the rank is clamped
                    a = alpha * r / rank
                wrapped = wrap_lora(child, r, a, counter[0])
                counter[0] += 1
                setattr(parent, name, wrapped)
                adapters.append(wrapped)
            else:
                visit(child)

    visit(module)
    return adapters


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class DownBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.down = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
        self.norm = _norm(c_out)
        self.conv = nn.Conv2d(c_out, c_out, 3, padding=1)

    def forward(self, x):
        h = self.down(x)
        return h + self.conv(F.silu(self.norm(h)))


class UpBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.norm1 = _norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_in, 3, padding=1)
        self.norm2 = _norm(c_in)
        self.conv2 = nn.Conv2d(c_in, c_out, 3, padding=1)

    def forward(self, x):
        h = x + self.conv1(F.silu(self.norm1(x)))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        return self.conv2(F.silu(self.norm2(h)))


class Encoder(nn.Module):
    """Three stride-2 blocks then a 1x1 projection to the 4-channel latent."""

    def __init__(self, channels: Sequence[int] = (32, 64, 128), in_channels: int = 3):
        super().__init__()
        chans = [in_channels, *channels]
        self.blocks = nn.ModuleList(DownBlock(a, b) for a, b in zip(chans[:-1], chans[1:]))
        self.norm_out = _norm(channels[-1])
        self.proj = nn.Conv2d(channels[-1], LATENT_CHANNELS, 1)
        self.channels = tuple(channels)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if x.shape[-1] % DOWNSAMPLE_FACTOR or x.shape[-2] % DOWNSAMPLE_FACTOR:
            raise ShapeError(f"image dims {tuple(x.shape[-2:])} not divisible by {DOWNSAMPLE_FACTOR}")
        taps = []
        h = x
        for block in self.blocks:
            h = block(h)
            taps.append(h)
        return self.proj(F.silu(self.norm_out(h))), taps


class Decoder(nn.Module):
    """Mirror of :class:`Encoder`; upsampling block k adds the k-th tap from the deep end."""

    def __init__(self, channels: Sequence[int] = (32, 64, 128), out_channels: int = 3):
        super().__init__()
        rev = list(channels)[::-1]
        self.proj = nn.Conv2d(LATENT_CHANNELS, rev[0], 1)
        outs = rev[1:] + [rev[-1]]
        self.blocks = nn.ModuleList(UpBlock(a, b) for a, b in zip(rev, outs))
        self.norm_out = _norm(rev[-1])
        self.conv_out = nn.Conv2d(rev[-1], out_channels, 3, padding=1)
        self.tap_channels = tuple(rev)

    def forward(self, latent: torch.Tensor, taps: Sequence[torch.Tensor] | None,
                zero_convs: Sequence[nn.Module]) -> torch.Tensor:
        h = self.proj(latent)
        if taps is not None:
            if len(taps) != len(self.blocks) or len(zero_convs) != len(self.blocks):
                raise ShapeError("need one tap and one zero-conv per upsampling block")
        for k, block in enumerate(self.blocks):
            if taps is not None:
                tap = taps[len(taps) - 1 - k]
                if tap.shape[1:] != h.shape[1:]:
                    raise ShapeError(f"tap shape {tuple(tap.shape[1:])} != block input {tuple(h.shape[1:])}")
                h = h + zero_convs[k](tap)
            h = block(h)
        return torch.tanh(self.conv_out(F.silu(self.norm_out(h))))


class Codec(nn.Module):
    """Encoder ``E`` shared by image and mask, decoder ``D``, and the per-tap zero-convs."""

    def __init__(self, channels: Sequence[int] = (32, 64, 128)):
        super().__init__()
        self.encoder = Encoder(channels)
        self.decoder = Decoder(channels)
        self.skip_convs = nn.ModuleList(ZeroConv(c) for c in self.decoder.tap_channels)

    def encode(self, image: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        return self.encoder(image)

    def decode(self, latent: torch.Tensor, taps: Sequence[torch.Tensor] | None) -> torch.Tensor:
        return self.decoder(latent, taps, self.skip_convs)
