"""Single-step U-Net with prompt cross-attention and a fixed-timestep embedding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import LATENT_CHANNELS, ShapeError, _norm

NUM_TIMESTEPS = 1000


@dataclass(frozen=True)
class UNetConfig:
    channels: tuple[int, ...] = (64, 128)
    heads: int = 4
    context_dim: int = 64
    context_len: int = 4
    time_dim: int = 64
    timestep: int = 999


class UnknownPromptError(KeyError):
    pass


class PromptEmbedder(nn.Module):
    """Learned lookup over a closed prompt vocabulary plus positional offsets.

    Row ``vocab_size`` is reserved for unknown prompts; it is only served in
    lenient mode.
    """

    def __init__(self, vocab_size: int, length: int = 4, dim: int = 64, seed: int = 0, strict: bool = True):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.vocab_size = vocab_size
        self.length = length
        self.dim = dim
        self.strict = strict
        self.table = nn.Parameter(torch.randn(vocab_size + 1, length * dim, generator=gen))
        self.positions = nn.Parameter(0.1 * torch.randn(length, dim, generator=gen))

    def forward(self, prompt_ids: torch.Tensor) -> torch.Tensor:
        ids = torch.as_tensor(prompt_ids, dtype=torch.long).reshape(-1)
        bad = (ids < 0) | (ids >= self.vocab_size)
        if bad.any():
            if self.strict:
                raise UnknownPromptError(f"prompt id {int(ids[bad][0])} outside vocabulary")
            ids = torch.where(bad, torch.full_like(ids, self.vocab_size), ids)
        rows = self.table[ids].view(-1, self.length, self.dim)
        return rows + self.positions


def time_embed(t: int | torch.Tensor, dim: int = 64, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal encoding laid out as ``[sin(t f_0..f_k), cos(t f_0..f_k)]``."""
    t = torch.as_tensor(t, dtype=dtype).reshape(-1)
    if ((t < 0) | (t >= NUM_TIMESTEPS)).any():
        raise ValueError(f"timestep outside [0, {NUM_TIMESTEPS})")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = _norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, c_out)
        self.norm2 = _norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, t):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.t_proj(t)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Queries from spatial features, keys and values from the prompt context."""

    def __init__(self, channels: int, context_dim: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ValueError("channels must divide evenly into heads")
        self.heads = heads
        self.norm = _norm(channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(context_dim, channels)
        self.to_v = nn.Linear(context_dim, channels)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x, ctx):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)  # b, hw, c
        q, k, v = self.to_q(tokens), self.to_k(ctx), self.to_v(ctx)

        def split(t):
            return t.view(b, -1, self.heads, c // self.heads).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(c // self.heads), dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, h * w, c)
        return x + self.to_out(out).transpose(1, 2).view(b, c, h, w)


class UNet(nn.Module):
    """Two down blocks, a cross-attention middle block and two up blocks over the latent."""

    def __init__(self, config: UNetConfig = UNetConfig()):
        super().__init__()
        self.config = config
        c0, c1 = config.channels
        t_hidden = 2 * config.time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_dim, t_hidden), nn.SiLU(), nn.Linear(t_hidden, t_hidden)
        )
        self.conv_in = nn.Conv2d(LATENT_CHANNELS, c0, 3, padding=1)
        self.down1 = ResBlock(c0, c0, t_hidden)
        self.downsample = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.down2 = ResBlock(c0, c1, t_hidden)
        self.mid1 = ResBlock(c1, c1, t_hidden)
        self.attn = CrossAttention(c1, config.context_dim, config.heads)
        self.mid2 = ResBlock(c1, c1, t_hidden)
        self.up1 = ResBlock(2 * c1, c1, t_hidden)
        self.upsample = nn.Conv2d(c1, c1, 3, padding=1)
        self.up2 = ResBlock(c1 + c0, c0, t_hidden)
        self.norm_out = _norm(c0)
        self.conv_out = nn.Conv2d(c0, LATENT_CHANNELS, 3, padding=1)

    def forward(self, latent: torch.Tensor, t_emb: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        if latent.dim() != 4 or latent.shape[1] != LATENT_CHANNELS:
            raise ShapeError(f"expected (B, {LATENT_CHANNELS}, h, w) latent, got {tuple(latent.shape)}")
        if ctx.shape[-1] != self.config.context_dim:
            raise ShapeError("context dim mismatch")
        t = self.time_mlp(t_emb.to(latent.dtype))
        if t.shape[0] != latent.shape[0]:
            t = t.expand(latent.shape[0], -1)
        h0 = self.down1(self.conv_in(latent), t)
        h1 = self.down2(self.downsample(h0), t)
        m = self.mid2(self.attn(self.mid1(h1, t), ctx), t)
        u = self.up1(torch.cat([m, h1], dim=1), t)
        u = F.interpolate(u, size=h0.shape[-2:], mode="nearest")
        u = self.up2(torch.cat([self.upsample(u), h0], dim=1), t)
        return self.conv_out(F.silu(self.norm_out(u)))

    def attention_projections(self) -> Sequence[nn.Module]:
        a = self.attn
        return [a.to_q, a.to_k, a.to_v, a.to_out]
