"""Alternating discriminator / generator optimization, schedule, checkpoints and the loop."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from PIL import Image as PILImage

from .backbone import UNetConfig
from .data_model import (
    DatasetManifest,
    SampleRecord,
    augment_record,
    to_model_range,
    to_storage_range,
)
from .generator import Generator, ModelConfig, record_tensors
from .losses import (
    DivergenceError,
    Discriminator,
    FeaturePyramid,
    LossBreakdown,
    LossWeights,
    adversarial_loss_from_logits,
    perceptual_loss,
    reconstruction_loss,
    total_loss,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda_gan: float = 2.5
    lambda_lpips: float = 10.0
    lambda_l2: float = 10.0
    lambda_clipsim: float = 5.0
    use_clipsim: bool = False
    gan_disc_type: str = "conv_pyramid"
    gan_loss_type: str = "multilevel_sigmoid_s"
    lora_rank_unet: int = 8
    lora_rank_vae: int = 4
    learning_rate: float = 5e-4
    lr_scheduler: str = "constant"
    warmup_steps: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_weight_decay: float = 1e-2
    max_grad_norm: float = 1.0
    batch_size: int = 1
    gradient_accumulation_steps: int = 1
    max_steps: int = 10000
    checkpointing_steps: int = 500
    eval_frequency: int = 100
    viz_frequency: int = 100
    eval_samples: int = 100
    train_image_prep: str = "resized_crop_64"
    test_image_prep: str = "resized_crop_64"
    drop_prob: float = 0.25
    augment: bool = True
    base_seed: int = 0
    codec_pretrain_steps: int = 1500
    seed: int = 0

    def __post_init__(self):
        for name in ("max_steps", "batch_size", "checkpointing_steps", "eval_frequency",
                     "viz_frequency", "gradient_accumulation_steps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.lr_scheduler != "constant":
            raise ConfigError(f"unsupported lr_scheduler {self.lr_scheduler!r}")
        if self.gan_loss_type != "multilevel_sigmoid_s":
            raise ConfigError(f"unsupported gan_loss_type {self.gan_loss_type!r}")
        if self.gradient_accumulation_steps != 1:
            raise ConfigError("gradient_accumulation_steps other than 1 is not supported")
        if not 0.0 <= self.drop_prob < 0.3:
            raise ConfigError("drop_prob must lie in [0, 0.3)")
        _prep_size(self.train_image_prep)
        _prep_size(self.test_image_prep)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(adv=self.lambda_gan, rec=self.lambda_l2, lpips=self.lambda_lpips,
                           promptsim=self.lambda_clipsim, use_promptsim=self.use_clipsim)

    def model_config(self, **overrides) -> ModelConfig:
        return ModelConfig(lora_rank_vae=self.lora_rank_vae, lora_rank_unet=self.lora_rank_unet,
                           base_seed=self.base_seed, codec_pretrain_steps=self.codec_pretrain_steps,
                           **overrides)


# -- flat key/value config files -------------------------------------------

def _coerce(raw: str, kind, key: str):
    raw = raw.strip()
    if kind is bool or kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw.strip("\"'")


def read_flat_config(path: str | os.PathLike) -> dict[str, str]:
    """``key = value`` (or ``key: value``) lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":"
        if sep not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split(sep, 1))
        out[key] = value
    return out


def parse_train_config(values: dict[str, str], **overrides) -> TrainConfig:
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    kwargs = {}
    for key, raw in values.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[key] = _coerce(raw, fields[key], key)
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def load_train_config(path: str | os.PathLike | None, **overrides) -> TrainConfig:
    values = read_flat_config(path) if path else {}
    return parse_train_config(values, **overrides)


def write_train_config(cfg: TrainConfig, path: str | os.PathLike) -> None:
    lines = [f"{k} = {v}" for k, v in dataclasses.asdict(cfg).items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- schedule and clipping ---------------------------------------------------

def make_schedule(cfg: TrainConfig) -> Callable[[int], float]:
    """Linear warmup from 0 to ``learning_rate`` then constant."""
    lr, warm = cfg.learning_rate, cfg.warmup_steps

    def schedule(step: int) -> float:
        if warm == 0:
            return lr
        return lr * min(1.0, step / warm)

    return schedule


def clip_grad_norm(params: Iterable[torch.nn.Parameter], max_norm: float) -> float:
    """Rescale gradients in place to global L2 norm ``max_norm``; return the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = float(torch.sqrt(sum((g.detach().double() ** 2).sum() for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g.mul_(scale)
    return norm


# -- image prep -------------------------------------------------------------

def _prep_size(prep: str) -> int:
    if not prep.startswith("resized_crop_"):
        raise ConfigError(f"unsupported image prep {prep!r}")
    size = int(prep.rsplit("_", 1)[1])
    if size % 8:
        raise ConfigError("image prep size must be a multiple of 8")
    return size


def _resize_crop(arr: np.ndarray, size: int, nearest: bool) -> np.ndarray:
    h, w = arr.shape[:2]
    if (h, w) == (size, size):
        return arr
    scale = size / min(h, w)
    nh, nw = max(size, round(h * scale)), max(size, round(w * scale))
    if arr.ndim == 2:
        pil = PILImage.fromarray((arr * 255).astype(np.uint8), mode="L")
    else:
        pil = PILImage.fromarray(np.clip(np.round(arr * 255), 0, 255).astype(np.uint8), mode="RGB")
    pil = pil.resize((nw, nh), PILImage.NEAREST if nearest else PILImage.BICUBIC)
    top, left = (nh - size) // 2, (nw - size) // 2
    out = np.asarray(pil.crop((left, top, left + size, top + size)), dtype=np.float32) / 255.0
    return (out > 0.5).astype(np.float32) if nearest else out


def prepare_record(record: SampleRecord, prep: str) -> SampleRecord:
    """Resize shorter side to the prep size, then center crop (images bicubic, mask nearest)."""
    size = _prep_size(prep)
    if record.mask.shape == (size, size):
        return record
    return dataclasses.replace(
        record,
        mask=_resize_crop(record.mask, size, True),
        input_image=None if record.input_image is None else _resize_crop(record.input_image, size, False),
        target_image=None if record.target_image is None else _resize_crop(record.target_image, size, False),
        paths={},
    )


# -- state ------------------------------------------------------------------

def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class TrainState:
    cfg: TrainConfig
    generator: Generator
    discriminator: Discriminator
    perceptual: FeaturePyramid
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0
    history: list = field(default_factory=list)
    promptsim_fn: Callable | None = None

    def generator_params(self) -> list[torch.nn.Parameter]:
        return [p for p in self.generator.parameters() if p.requires_grad]


def init_state(cfg: TrainConfig, model_config: ModelConfig | None = None, dtype=torch.float32) -> TrainState:
    gen = Generator(model_config or cfg.model_config()).to(dtype)
    disc = Discriminator(seed=_seed(cfg.seed, 1)).to(dtype)
    perceptual = FeaturePyramid().to(dtype)
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    opt_g = torch.optim.AdamW([p for p in gen.parameters() if p.requires_grad], lr=0.0, betas=betas,
                              weight_decay=cfg.adam_weight_decay)
    opt_d = torch.optim.AdamW(disc.parameters(), lr=0.0, betas=betas, weight_decay=cfg.adam_weight_decay)
    return TrainState(cfg, gen, disc, perceptual, opt_g, opt_d)


def _target_tensor(records: Sequence[SampleRecord], dtype) -> torch.Tensor:
    arr = np.stack([to_model_range(r.target_image) for r in records])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype).contiguous()


def batch_for_step(records: Sequence[SampleRecord], step: int, cfg: TrainConfig) -> list[SampleRecord]:
    """Records for ``step``: seeded per-epoch shuffle, then per-sample seeded augmentation."""
    n = len(records)
    if n == 0:
        raise ValueError("empty training set")
    out = []
    for k in range(cfg.batch_size):
        flat = step * cfg.batch_size + k
        epoch, pos = divmod(flat, n)
        perm = np.random.default_rng(_seed(cfg.seed, 10, epoch)).permutation(n)
        rec = records[int(perm[pos])]
        if cfg.augment:
            rec = augment_record(rec, _seed(cfg.seed, 11, flat))
        out.append(rec)
    return out


def drop_flags_for_step(step: int, cfg: TrainConfig) -> np.ndarray:
    rng = np.random.default_rng(_seed(cfg.seed, 12, step))
    return rng.random(cfg.batch_size) < cfg.drop_prob


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def train_step(state: TrainState, batch: Sequence[SampleRecord]) -> tuple[TrainState, LossBreakdown]:
    """One discriminator update on (target, detached fake) then one generator update."""
    cfg = state.cfg
    if not batch:
        raise ValueError("empty batch")
    if any(r.target_image is None for r in batch):
        raise ValueError("training records need a target image")
    gen, disc = state.generator, state.discriminator
    dtype = next(gen.parameters()).dtype
    lr = make_schedule(cfg)(state.step)
    _set_lr(state.opt_g, lr)
    _set_lr(state.opt_d, lr)

    image, mask, ids, drop = record_tensors(batch, drop_flags_for_step(state.step, cfg), dtype=dtype)
    target = _target_tensor(batch, dtype)
    fake = gen(image, mask, ids, drop)

    d_loss = adversarial_loss_from_logits(disc(target), disc(fake.detach()), "disc")
    if not torch.isfinite(d_loss):
        raise DivergenceError(f"non-finite discriminator loss at step {state.step}")
    state.opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    clip_grad_norm(disc.parameters(), cfg.max_grad_norm)
    state.opt_d.step()

    disc.requires_grad_(False)
    try:
        adv = adversarial_loss_from_logits(None, disc(fake), "gen")
    finally:
        disc.requires_grad_(True)
    rec = reconstruction_loss(fake, target)
    lp = perceptual_loss(fake, target, state.perceptual)
    promptsim = None
    if cfg.use_clipsim:
        if state.promptsim_fn is None:
            raise ConfigError("use_clipsim is set but no promptsim hook is installed")
        promptsim = state.promptsim_fn(fake, batch)
    try:
        parts = total_loss(adv, rec, lp, cfg.weights, promptsim)
    except DivergenceError as exc:
        raise DivergenceError(f"{exc} at step {state.step}") from None

    state.opt_g.zero_grad(set_to_none=True)
    parts.total.backward()
    clip_grad_norm(state.generator_params(), cfg.max_grad_norm)
    state.opt_g.step()

    state.step += 1
    entry = {"step": state.step, "lr": lr, "disc": float(d_loss.detach()), **parts.as_floats()}
    state.history.append(entry)
    return state, parts


# -- checkpoints --------------------------------------------------------------

def _state_payload(state: TrainState) -> dict:
    return {
        "generator": state.generator.trainable_state(),
        "discriminator": {k: v.clone() for k, v in state.discriminator.state_dict().items()},
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "step": state.step,
        "history": list(state.history),
    }


def _config_snapshot(state: TrainState) -> dict:
    mc = dataclasses.asdict(state.generator.config)
    return {"train": dataclasses.asdict(state.cfg), "model": mc}


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(_state_payload(state), buf)
    payload = buf.getvalue()
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "base_hash": state.generator.base_hash(),
        "step": state.step,
        "dtype": str(next(state.generator.parameters()).dtype),
        "config": _config_snapshot(state),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=2, sort_keys=True))
        zf.writestr("state.pt", payload)
    os.replace(tmp, path)
    return path


def read_checkpoint_meta(path: str | os.PathLike) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            return json.loads(zf.read("meta.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None


def _model_config_from(d: dict) -> ModelConfig:
    d = dict(d)
    d["codec_channels"] = tuple(d["codec_channels"])
    unet = dict(d["unet"])
    unet["channels"] = tuple(unet["channels"])
    d["unet"] = UNetConfig(**unet)
    return ModelConfig(**d)


def load_checkpoint(path: str | os.PathLike) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    meta = read_checkpoint_meta(path)
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {meta.get('format_version')!r} != supported {CHECKPOINT_VERSION}")
    with zipfile.ZipFile(path) as zf:
        payload = zf.read("state.pt")
    if hashlib.sha256(payload).hexdigest() != meta["sha256"]:
        raise CheckpointError(f"checksum mismatch in {path}")

    cfg = TrainConfig(**meta["config"]["train"])
    dtype = getattr(torch, meta.get("dtype", "torch.float32").split(".")[-1])
    state = init_state(cfg, _model_config_from(meta["config"]["model"]), dtype=dtype)
    if state.generator.base_hash() != meta["base_hash"]:
        raise CheckpointError("frozen base weights do not match the checkpoint")
    data = torch.load(io.BytesIO(payload), weights_only=False)
    state.generator.load_trainable_state(data["generator"])
    state.discriminator.load_state_dict(data["discriminator"])
    state.opt_g.load_state_dict(data["opt_g"])
    state.opt_d.load_state_dict(data["opt_d"])
    state.step = int(data["step"])
    state.history = list(data["history"])
    return state


def load_generator(path: str | os.PathLike) -> Generator:
    gen = load_checkpoint(path).generator
    gen.eval()
    return gen


# -- loop -----------------------------------------------------------------------

def checkpoint_name(step: int) -> str:
    return f"checkpoint-{step:06d}.ckpt"


def _sample_grid(state: TrainState, records: Sequence[SampleRecord], path: Path) -> None:
    gen = state.generator
    dtype = next(gen.parameters()).dtype
    rows = []
    with torch.no_grad():
        for rec in records:
            image, mask, ids, drop = record_tensors([rec], dtype=dtype)
            out = gen(image, mask, ids, drop)[0].permute(1, 2, 0).numpy()
            blank = np.zeros_like(rec.mask)[..., None].repeat(3, 2)
            inp = rec.input_image if rec.input_image is not None else blank
            tgt = rec.target_image if rec.target_image is not None else blank
            rows.append(np.concatenate(
                [inp, np.repeat(rec.mask[..., None], 3, 2), to_storage_range(out), tgt], axis=1))
    grid = np.concatenate(rows, axis=0)
    PILImage.fromarray((np.clip(grid, 0, 1) * 255).round().astype(np.uint8)).save(path)


def train_loop(
    train: DatasetManifest | Sequence[SampleRecord],
    cfg: TrainConfig,
    out_dir: str | os.PathLike,
    eval_set: DatasetManifest | Sequence[SampleRecord] | None = None,
    resume_from: str | os.PathLike | None = None,
    state: TrainState | None = None,
    on_step: Callable[[TrainState, LossBreakdown], None] | None = None,
) -> Path:
    """Run to ``cfg.max_steps``; returns the path of the final checkpoint.

    Eval (FID on up to ``eval_samples`` records of ``eval_set``) runs every
    ``eval_frequency`` steps, sample grids every ``viz_frequency`` and
    checkpoints every ``checkpointing_steps``; a final checkpoint is always
    written at ``max_steps``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = [prepare_record(r, cfg.train_image_prep) for r in train]
    if not records:
        raise ValueError("training manifest is empty")
    evals = [prepare_record(r, cfg.test_image_prep) for r in (eval_set or [])][: cfg.eval_samples]

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        state = dataclasses.replace(state, cfg=dataclasses.replace(state.cfg, max_steps=cfg.max_steps))
    elif state is None:
        state = init_state(cfg)
    log_path = out / "train_log.jsonl"

    last_ckpt = None
    while state.step < state.cfg.max_steps:
        batch = batch_for_step(records, state.step, state.cfg)
        state, parts = train_step(state, batch)
        step = state.step
        if on_step is not None:
            on_step(state, parts)
        try:
            with log_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(state.history[-1]) + "\n")
            if evals and step % state.cfg.eval_frequency == 0 and len(evals) >= 2:
                from .evaluation import fid_for_records

                fid = fid_for_records(state.generator, evals)
                with (out / "eval_log.jsonl").open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"step": step, "fid": fid}) + "\n")
            if step % state.cfg.viz_frequency == 0:
                _sample_grid(state, (evals or records)[:4], out / f"samples-{step:06d}.png")
            if step % state.cfg.checkpointing_steps == 0 or step == state.cfg.max_steps:
                last_ckpt = save_checkpoint(state, out / checkpoint_name(step))
        except OSError as exc:
            raise OSError(f"I/O failure at step {step}: {exc}") from exc
    if last_ckpt is None:
        last_ckpt = save_checkpoint(state, out / checkpoint_name(state.step))
    return last_ckpt
