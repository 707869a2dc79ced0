"""Procedural toy defect corpus: textured surfaces, parametric defects, exact masks."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data_model import (
    GOOD_LABEL,
    PROMPT_VOCAB,
    DatasetManifest,
    Pairing,
    Prompt,
    SampleRecord,
    kind_prompt,
    make_unpaired_pairs,
    quantize,
    save_manifest,
    write_vocab,
)

TEXTURES = ("wood_grain", "tile", "plain")
DEFECT_KINDS = ("scratch", "hole", "color_blob", "glue_strip")
INTENSITY_FLOOR = 0.1

_DEFECT_COLORS = {
    "hole": (0.05, 0.04, 0.03),
    "color_blob": (0.80, 0.18, 0.12),
    "glue_strip": (0.95, 0.88, 0.30),
}


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class DefectSpec:
    """Geometry is in pixels, ``(row, col)`` order."""

    kind: str
    intensity: float
    start: tuple[float, float] | None = None  # scratch
    end: tuple[float, float] | None = None
    width: float = 2.0
    center: tuple[float, float] | None = None  # hole, color_blob
    radius: float = 0.0
    blob_seed: int = 0
    rect: tuple[int, int, int, int] | None = None  # glue_strip: top, left, height, width


@dataclass(frozen=True)
class CorpusConfig:
    size: int = 64
    counts: dict = field(default_factory=lambda: {"good": 10, "scratch": 5})
    texture: str = "wood_grain"
    seed: int = 0

    def __post_init__(self):
        if self.size % 8:
            raise CorpusError("image size must be a multiple of 8")
        if self.texture not in TEXTURES + ("mixed",):
            raise CorpusError(f"unsupported texture family {self.texture!r}")
        unknown = set(self.counts) - {"good", *DEFECT_KINDS}
        if unknown:
            raise CorpusError(f"unknown count keys {sorted(unknown)}")
        if any(v < 0 for v in self.counts.values()):
            raise CorpusError("counts must be >= 0")
        if sum(self.counts.values()) == 0:
            raise CorpusError("corpus has zero total count")


def generate_texture(family: str, size: int, seed: int) -> np.ndarray:
    if size % 8:
        raise CorpusError("texture size must be a multiple of 8")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if family == "wood_grain":
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.08, 0.16)
        warp = 2.0 * np.sin(2 * np.pi * (yy * np.sin(theta) - xx * np.cos(theta)) / size * rng.uniform(1, 3))
        phase = 2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta) + warp)
        base = np.array([0.55, 0.38, 0.22]) + rng.uniform(-0.05, 0.05, 3)
        grain = 0.09 * np.sin(phase + rng.uniform(0, 2 * np.pi))
        img = base[None, None, :] + grain[..., None] * np.array([1.0, 0.8, 0.6])
        noise_sd = 0.015
    elif family == "tile":
        period = int(rng.choice([16, 32]))
        off_y, off_x = rng.integers(0, period, size=2)
        grout = ((yy + off_y) % period < 2) | ((xx + off_x) % period < 2)
        tile = np.array([0.78, 0.76, 0.72]) + rng.uniform(-0.06, 0.06, 3)
        img = np.where(grout[..., None], tile * 0.55, tile[None, None, :])
        noise_sd = 0.012
    elif family == "plain":
        base = rng.uniform(0.3, 0.7, 3)
        img = np.broadcast_to(base, (size, size, 3)).copy()
        noise_sd = 0.02
    else:
        raise CorpusError(f"unsupported texture family {family!r}")
    img = img + rng.normal(0.0, noise_sd, size=img.shape)
    return quantize(np.clip(img, 0.0, 1.0))


def _segment_distance(yy, xx, p0, p1):
    p0 = np.asarray(p0, float)
    p1 = np.asarray(p1, float)
    d = p1 - p0
    denom = float(d @ d)
    if denom == 0.0:
        return np.hypot(yy - p0[0], xx - p0[1])
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / denom, 0.0, 1.0)
    return np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))


def _blob_discs(spec: DefectSpec):
    rng = np.random.default_rng(spec.blob_seed)
    n = int(rng.integers(3, 6))
    discs = [(spec.center, spec.radius)]
    for _ in range(n - 1):
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0.2, 0.6) * spec.radius
        c = (spec.center[0] + dist * np.sin(ang), spec.center[1] + dist * np.cos(ang))
        discs.append((c, spec.radius * rng.uniform(0.5, 0.9)))
    return discs


def render_mask(spec: DefectSpec, size: int) -> np.ndarray:
    """Rasterize the defect support. Pixel centers sit at integer coordinates."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if spec.kind == "scratch":
        m = _segment_distance(yy, xx, spec.start, spec.end) <= spec.width / 2.0
    elif spec.kind == "hole":
        m = np.hypot(yy - spec.center[0], xx - spec.center[1]) <= spec.radius
    elif spec.kind == "color_blob":
        m = np.zeros((size, size), bool)
        for c, r in _blob_discs(spec):
            m |= np.hypot(yy - c[0], xx - c[1]) <= r
    elif spec.kind == "glue_strip":
        top, left, h, w = spec.rect
        m = np.zeros((size, size), bool)
        m[top:top + h, left:left + w] = True
    else:
        raise CorpusError(f"unknown defect kind {spec.kind!r}")
    return m.astype(np.float32)


def _in_bounds(spec: DefectSpec, size: int) -> bool:
    def ok(p, margin=0.0):
        return margin <= p[0] <= size - 1 - margin and margin <= p[1] <= size - 1 - margin

    if spec.kind == "scratch":
        return ok(spec.start, spec.width / 2) and ok(spec.end, spec.width / 2)
    if spec.kind == "hole":
        return ok(spec.center, spec.radius)
    if spec.kind == "color_blob":
        return ok(spec.center, 1.6 * spec.radius)
    if spec.kind == "glue_strip":
        top, left, h, w = spec.rect
        return top >= 0 and left >= 0 and h > 0 and w > 0 and top + h <= size and left + w <= size
    return False


def _defect_color(spec: DefectSpec, region: np.ndarray) -> np.ndarray:
    if spec.kind == "scratch":
        bright = region.mean() < 0.6
        return np.array([0.95, 0.94, 0.90]) if bright else np.array([0.06, 0.06, 0.07])
    return np.array(_DEFECT_COLORS[spec.kind])


def inject_defect(image: np.ndarray, spec: DefectSpec) -> tuple[np.ndarray, np.ndarray]:
    """Blend a defect into ``image``; pixels outside the returned mask are untouched."""
    size = image.shape[0]
    if not _in_bounds(spec, size):
        raise CorpusError(f"{spec.kind} geometry outside image bounds")
    mask = render_mask(spec, size)
    sel = mask > 0
    if not sel.any():
        raise CorpusError("rendered defect mask is empty")

    region = image[sel].astype(np.float64)
    color = _defect_color(spec, region)
    gap = np.abs(color[None, :] - region).mean()
    # 1/255 margin keeps the floor after 8-bit quantization
    alpha = max(float(spec.intensity), (INTENSITY_FLOOR + 1.0 / 255) / max(gap, 1e-6))
    if alpha > 1.0:
        raise CorpusError("defect contrast cannot reach the intensity floor")

    out = image.copy()
    out[sel] = quantize((1.0 - alpha) * region + alpha * color[None, :])
    return out, mask


def random_defect_spec(kind: str, size: int, rng: np.random.Generator) -> DefectSpec:
    intensity = float(rng.uniform(0.55, 0.9))
    s = size / 64.0
    for _ in range(100):
        if kind == "scratch":
            width = float(rng.uniform(2.0, 3.0))
            length = rng.uniform(16, 32) * s
            ang = rng.uniform(0, np.pi)
            c = rng.uniform(0.2 * size, 0.8 * size, 2)
            d = 0.5 * length * np.array([np.sin(ang), np.cos(ang)])
            spec = DefectSpec(kind, intensity, start=tuple(c - d), end=tuple(c + d), width=width)
        elif kind == "hole":
            r = rng.uniform(3.0, 6.5) * s
            spec = DefectSpec(kind, intensity, center=tuple(rng.uniform(r, size - 1 - r, 2)), radius=float(r))
        elif kind == "color_blob":
            r = rng.uniform(4.0, 7.0) * s
            c = rng.uniform(1.6 * r, size - 1 - 1.6 * r, 2)
            spec = DefectSpec(kind, intensity, center=tuple(c), radius=float(r),
                              blob_seed=int(rng.integers(0, 2**31)))
        elif kind == "glue_strip":
            long_ = int(rng.integers(int(18 * s), int(36 * s)))
            short = int(rng.integers(max(2, int(4 * s)), max(3, int(7 * s))))
            h, w = (long_, short) if rng.random() < 0.5 else (short, long_)
            top = int(rng.integers(0, size - h + 1))
            left = int(rng.integers(0, size - w + 1))
            spec = DefectSpec(kind, intensity, rect=(top, left, h, w))
        else:
            raise CorpusError(f"unknown defect kind {kind!r}")
        if _in_bounds(spec, size) and render_mask(spec, size).any():
            return spec
    raise CorpusError(f"could not place a {kind} defect in a {size}px image")


def _record_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _family(config: CorpusConfig, rng: np.random.Generator) -> str:
    if config.texture == "mixed":
        return str(rng.choice(TEXTURES))
    return config.texture


def build_corpus(config: CorpusConfig) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Return (paired, unpaired, good) manifests; a pure function of ``config``."""
    size = config.size
    index = 0
    good, paired = [], []
    for i in range(config.counts.get("good", 0)):
        rng = _record_rng(config.seed, index)
        index += 1
        img = generate_texture(_family(config, rng), size, int(rng.integers(0, 2**31)))
        good.append(SampleRecord(
            id=f"good_{i:03d}", mask=np.zeros((size, size), np.float32),
            prompt=Prompt.from_text(PROMPT_VOCAB[0]), label=GOOD_LABEL,
            pairing=Pairing.PAIRED, input_image=img, target_image=img,
        ))
    for kind in DEFECT_KINDS:
        for i in range(config.counts.get(kind, 0)):
            rng = _record_rng(config.seed, index)
            index += 1
            clean = generate_texture(_family(config, rng), size, int(rng.integers(0, 2**31)))
            target, mask = inject_defect(clean, random_defect_spec(kind, size, rng))
            paired.append(SampleRecord(
                id=f"{kind}_{i:03d}", mask=mask, prompt=Prompt.from_text(kind_prompt(kind)),
                label=kind, pairing=Pairing.PAIRED, input_image=clean, target_image=target,
            ))

    if paired:
        pool = [r.input_image for r in good] or [r.input_image for r in paired]
        unpaired = make_unpaired_pairs(paired, pool, seed=config.seed)
    else:
        unpaired = []
    return (
        DatasetManifest(tuple(paired), seed=config.seed),
        DatasetManifest(tuple(unpaired), seed=config.seed),
        DatasetManifest(tuple(good), seed=config.seed),
    )


def write_corpus(
    out_dir: str | os.PathLike,
    manifests: tuple[DatasetManifest, DatasetManifest, DatasetManifest],
) -> dict[str, Path]:
    """Write PNGs, ``paired/unpaired/good.manifest`` and ``prompts.txt`` under ``out_dir``.

    Unpaired records reference the same mask/target files as their paired
    twins and the good images as inputs, so nothing is stored twice.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paired, unpaired, good = manifests
    files = out / "images"
    written = {}

    save_manifest(good, out / "good.manifest", files)
    save_manifest(paired, out / "paired.manifest", files)
    written["good"], written["paired"] = out / "good.manifest", out / "paired.manifest"

    by_input: dict[bytes, str] = {}
    for rec in list(good) + list(paired):
        key = "input" if rec.label == GOOD_LABEL or rec.pairing is Pairing.PAIRED else None
        if key:
            by_input.setdefault(rec.input_image.tobytes(), str(files / f"{rec.id}_input.png"))
    linked = []
    for rec in unpaired:
        paths = {
            "mask": str(files / f"{rec.id}_mask.png"),
            "target": str(files / f"{rec.id}_target.png"),
        }
        src = by_input.get(rec.input_image.tobytes())
        if src is not None:
            paths["input"] = src
        linked.append(replace(rec, paths=paths))
    save_manifest(linked, out / "unpaired.manifest", files / "unpaired")
    written["unpaired"] = out / "unpaired.manifest"
    write_vocab(out / "prompts.txt")
    written["prompts"] = out / "prompts.txt"
    return written
