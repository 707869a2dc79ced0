"""Desk-scale stand-in for pretrained base weights.

The frozen codec is first trained as a plain autoencoder (no skip taps) on
procedural textures, defect images and bare masks, so the latent actually
carries image content before any adapter is fitted.  Results are cached on
disk, keyed by every input that affects them, so the frozen base (and its
hash) is identical across processes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .codec import Codec
from .synth_corpus import DEFECT_KINDS, TEXTURES, generate_texture, inject_defect, random_defect_spec

log = logging.getLogger(__name__)

PRETRAIN_VERSION = 1
PRETRAIN_BATCH = 8
PRETRAIN_LR = 1e-3
PRETRAIN_SIZE = 64


def cache_dir() -> Path:
    return Path(os.environ.get("ALIAUG_CACHE_DIR", Path.home() / ".cache" / "aliaug"))


def _sample(rng: np.random.Generator, size: int) -> np.ndarray:
    img = generate_texture(TEXTURES[int(rng.integers(len(TEXTURES)))], size, int(rng.integers(2**31)))
    r = rng.random()
    if r < 0.6:
        spec = random_defect_spec(DEFECT_KINDS[int(rng.integers(len(DEFECT_KINDS)))], size, rng)
        img, mask = inject_defect(img, spec)
        if r < 0.25:
            img = np.repeat(mask[..., None], 3, axis=2)
    return img * 2.0 - 1.0


def pretrain_codec(codec: Codec, steps: int, seed: int) -> list[float]:
    """Fit ``codec`` in place as an autoencoder; returns the loss every 100 steps."""
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=PRETRAIN_LR)
    losses = []
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        for step in range(steps):
            x = torch.from_numpy(np.stack([_sample(rng, PRETRAIN_SIZE) for _ in range(PRETRAIN_BATCH)]))
            x = x.permute(0, 3, 1, 2).float()
            z, _ = codec.encode(x)
            y = codec.decode(z, None)
            loss = F.mse_loss(y, x) + 0.5 * F.l1_loss(y, x)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if (step + 1) % 100 == 0:
                losses.append(float(loss.detach()))
    return losses


def _key(channels: Sequence[int], steps: int, seed: int) -> str:
    blob = json.dumps({"v": PRETRAIN_VERSION, "channels": list(channels), "steps": steps, "seed": seed,
                       "torch": torch.__version__.split("+")[0]}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def pretrained_codec_state(channels: Sequence[int], steps: int, seed: int,
                           init: Codec | None = None) -> dict[str, torch.Tensor]:
    """State dict of a pretrained codec, loaded from the cache or computed and stored.

    ``init`` supplies the starting weights (a fresh seeded codec when omitted).
    """
    path = cache_dir() / f"codec-{_key(channels, steps, seed)}.pt"
    if path.exists():
        try:
            return torch.load(path, weights_only=True)
        except Exception as exc:  # noqa: BLE001 - a bad cache entry is rebuilt
            log.warning("ignoring unreadable cache entry %s: %s", path, exc)
    if init is None:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            init = Codec(channels)
    codec = init.float()
    log.info("pretraining codec base (%d steps); cached at %s", steps, path)
    pretrain_codec(codec, steps, seed)
    state = {k: v.detach().clone() for k, v in codec.state_dict().items()}
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(f".{os.getpid()}.tmp")
    torch.save(state, tmp)
    os.replace(tmp, path)
    return state
