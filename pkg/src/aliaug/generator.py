"""G(I, M, T): shared encoding, latent fusion, one U-Net pass, skip-connected decoding."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .backbone import PromptEmbedder, UNet, UNetConfig, time_embed
from .codec import LATENT_CHANNELS, Codec, LoRAAdapter, ShapeError, ZeroConv, inject_lora
from .data_model import PROMPT_VOCAB, Pairing, SampleRecord, to_model_range
from .pretrain import pretrained_codec_state

MAX_DROP_PROB = 0.3


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class GeneratorConfig:
    drop_prob: float = 0.25
    timestep: int = 999
    mode: Mode = Mode.EVAL

    def __post_init__(self):
        if not 0.0 <= self.drop_prob < MAX_DROP_PROB:
            raise ValueError(f"drop_prob must lie in [0, {MAX_DROP_PROB})")


@dataclass(frozen=True)
class ModelConfig:
    codec_channels: tuple[int, ...] = (32, 64, 128)
    unet: UNetConfig = UNetConfig()
    vocab_size: int = len(PROMPT_VOCAB)
    lora_rank_vae: int = 4
    lora_rank_unet: int = 8
    base_seed: int = 0
    codec_pretrain_steps: int = 1500


def fuse_features(mask_latent: torch.Tensor, image_latent: torch.Tensor, zc: nn.Module) -> torch.Tensor:
    """``F_M + zc(F_I)``."""
    if mask_latent.shape != image_latent.shape:
        raise ShapeError(f"cannot fuse {tuple(mask_latent.shape)} with {tuple(image_latent.shape)}")
    return mask_latent + zc(image_latent)


def draw_drop(drop_prob: float, seed: int) -> bool:
    return bool(np.random.default_rng(seed).random() < drop_prob)


def apply_input_dropout(record: SampleRecord, drop_prob: float, seed: int, mode: Mode | str) -> np.ndarray | None:
    """Return the input image the generator should see, or ``None`` when it is dropped.

    Mask-only records are always dropped; otherwise only train mode drops,
    with probability ``drop_prob`` drawn from ``seed``.
    """
    mode = Mode(mode)
    if record.pairing is Pairing.MASK_ONLY or record.input_image is None:
        return None
    if mode is Mode.TRAIN and draw_drop(drop_prob, seed):
        return None
    return record.input_image


def mask_to_image(mask: torch.Tensor) -> torch.Tensor:
    """(B, 1, H, W) binary mask -> 3-channel model-range image."""
    return (mask * 2.0 - 1.0).expand(-1, 3, -1, -1)


class Generator(nn.Module):
    """Frozen seeded base networks with LoRA adapters, zero-convs and a prompt embedder.

    The codec base is pretrained as an autoencoder (cached) unless
    ``codec_pretrain_steps`` is 0 or ``base_weights`` supplies it.

    Trainable parameters are exactly: LoRA ``A``/``B`` pairs, the skip and
    fusion zero-convs, and the prompt embedder.
    """

    def __init__(self, config: ModelConfig = ModelConfig(), base_weights: dict | None = None):
        super().__init__()
        self.config = config
        with torch.random.fork_rng():
            torch.manual_seed(config.base_seed)
            self.codec = Codec(config.codec_channels)
            self.unet = UNet(config.unet)
        base_weights = dict(base_weights or {})
        if "codec" not in base_weights and config.codec_pretrain_steps > 0:
            base_weights["codec"] = pretrained_codec_state(
                config.codec_channels, config.codec_pretrain_steps, config.base_seed, init=self.codec)
        if base_weights:
            if "codec" in base_weights:
                self.codec.load_state_dict(base_weights["codec"])
            if "unet" in base_weights:
                self.unet.load_state_dict(base_weights["unet"])
        self.fusion_conv = ZeroConv(LATENT_CHANNELS)
        self.embedder = PromptEmbedder(
            config.vocab_size, config.unet.context_len, config.unet.context_dim, seed=config.base_seed + 1
        )
        for p in list(self.codec.parameters()) + list(self.unet.parameters()):
            p.requires_grad_(False)
        for zc in self.codec.skip_convs:
            zc.requires_grad_(True)
        self.codec_adapters = inject_lora(self.codec, config.lora_rank_vae, seed=config.base_seed + 1000)
        self.unet_adapters = inject_lora(self.unet, config.lora_rank_unet, seed=config.base_seed + 2000)
        self.unet_calls = 0

    # -- parameter bookkeeping ------------------------------------------
    @property
    def adapters(self) -> list[LoRAAdapter]:
        return list(self.codec_adapters) + list(self.unet_adapters)

    def zero_convs(self) -> list[ZeroConv]:
        return list(self.codec.skip_convs) + [self.fusion_conv]

    def frozen_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, p in self.named_parameters():
            if not p.requires_grad:
                out[name] = p
        for name, b in self.named_buffers():
            if name.endswith("base_weight") or name.endswith("base_bias"):
                out[name] = b
        return dict(sorted(out.items()))

    def base_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in self.frozen_tensors().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def trainable_state(self) -> dict[str, torch.Tensor]:
        return {n: p.detach().clone() for n, p in self.named_parameters() if p.requires_grad}

    def load_trainable_state(self, state: dict[str, torch.Tensor]) -> None:
        params = dict(self.named_parameters())
        missing = {n for n, p in params.items() if p.requires_grad} - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks trainable tensors {sorted(missing)[:3]}")
        with torch.no_grad():
            for n, t in state.items():
                params[n].copy_(t)

    # -- forward --------------------------------------------------------
    def forward(self, image: torch.Tensor | None, mask: torch.Tensor, prompt_ids: torch.Tensor,
                drop: torch.Tensor | None = None, timestep: int | None = None,
                context: torch.Tensor | None = None) -> torch.Tensor:
        """Model-range image in, model-range image out.

        ``image`` may be ``None`` (mask-only generation).  ``drop`` is a
        per-sample boolean; dropped samples see a zero image and zero taps.
        ``context`` overrides the prompt embedding when given.
        """
        b = mask.shape[0]
        if image is None:
            image = torch.zeros(b, 3, *mask.shape[-2:], dtype=mask.dtype)
            drop = torch.ones(b, dtype=torch.bool)
        if drop is not None and drop.any():
            keep = (~drop).to(image.dtype).view(b, 1, 1, 1)
            image = image * keep
        f_i, taps = self.codec.encode(image)
        if drop is not None and drop.any():
            taps = [t * keep for t in taps]
        f_m, _ = self.codec.encode(mask_to_image(mask))
        fused = fuse_features(f_m, f_i, self.fusion_conv)

        t_star = self.config.unet.timestep if timestep is None else timestep
        t_emb = time_embed(t_star, self.config.unet.time_dim, dtype=fused.dtype)
        ctx = self.embedder(prompt_ids) if context is None else context
        self.unet_calls += 1
        latent = self.unet(fused, t_emb, ctx.to(fused.dtype))
        return self.codec.decode(latent, taps)


def record_tensors(records, drop_flags=None, dtype=torch.float32):
    """Stack records into (image | None, mask, prompt ids, drop) model inputs."""
    masks = torch.from_numpy(np.stack([r.mask for r in records])[:, None]).to(dtype)
    ids = torch.tensor([r.prompt.prompt_id for r in records], dtype=torch.long)
    imgs, drop = [], []
    for k, r in enumerate(records):
        flag = r.input_image is None or (drop_flags is not None and bool(drop_flags[k]))
        drop.append(flag)
        src = r.input_image if r.input_image is not None else np.zeros(r.mask.shape + (3,), np.float32)
        imgs.append(to_model_range(src))
    image = torch.from_numpy(np.stack(imgs)).permute(0, 3, 1, 2).to(dtype).contiguous()
    return image, masks, ids, torch.tensor(drop)


@torch.no_grad()
def generate(model: Generator, record: SampleRecord, cfg: GeneratorConfig = GeneratorConfig(),
             seed: int = 0) -> np.ndarray:
    """Single-step edit of one record; returns an ``H x W x 3`` image in ``[-1, 1]``."""
    if record.mask is None:
        raise ValueError("record has no mask")
    effective = apply_input_dropout(record, cfg.drop_prob, seed, cfg.mode)
    dtype = next(model.parameters()).dtype
    image, mask, ids, _ = record_tensors([record], dtype=dtype)
    drop = torch.tensor([effective is None])
    out = model(image, mask, ids, drop=drop, timestep=cfg.timestep)
    return out[0].permute(1, 2, 0).cpu().numpy()
