"""FID, CAS / NAS dataset assembly and the downstream detection harness."""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data_model import (
    GOOD_LABEL,
    PROMPT_VOCAB,
    DatasetManifest,
    Pairing,
    Prompt,
    SampleRecord,
    apply_augment,
    AugmentDraw,
    quantize,
    save_manifest,
    split_dataset,
    to_model_range,
    to_storage_range,
)
from .generator import Generator, record_tensors
from .losses import FeaturePyramid

log = logging.getLogger(__name__)

STRATEGIES = ("D_S", "D_S_AUG", "CAS", "NAS")
METRICS = ("precision", "recall", "accuracy", "mask_iou")
COV_EPS = 1e-6
SHRINKAGE = 0.1


# -- FID -------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class FidResult:
    value: float
    n_real: int
    n_generated: int

    def __float__(self) -> float:
        return self.value


class FidExtractor(nn.Module):
    """Frozen seeded conv pyramid; global-average-pooled deepest level (64-d by default)."""

    def __init__(self, channels: Sequence[int] = (16, 32, 64), seed: int = 2024):
        super().__init__()
        self.pyramid = FeaturePyramid(channels, seed=seed).double()

    @property
    def dim(self) -> int:
        return self.pyramid.levels[-1][0].out_channels

    @torch.no_grad()
    def forward(self, images: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(to_model_range(np.asarray(images, np.float64))).permute(0, 3, 1, 2)
        feats = [self.pyramid(x[i:i + 32])[-1].mean(dim=(2, 3)) for i in range(0, len(x), 32)]
        return torch.cat(feats).numpy()


def feature_stats(features: np.ndarray) -> FeatureStats:
    """Mean and unbiased covariance of an ``n x d`` feature matrix."""
    features = np.asarray(features, np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError("need at least 2 feature vectors")
    mu = features.mean(axis=0)
    centered = features - mu
    centered[:, np.ptp(features, axis=0) == 0] = 0.0  # constant columns: exact zero, not rounding noise
    sigma = centered.T @ centered / (features.shape[0] - 1)
    return FeatureStats(mu, sigma, features.shape[0])


def extract_features(images: Sequence[np.ndarray], extractor: Callable | None = None) -> FeatureStats:
    if len(images) < 2:
        raise ValueError("need at least 2 images for feature statistics")
    extractor = extractor or default_extractor()
    return feature_stats(extractor(np.stack(images)))


_DEFAULT_EXTRACTOR: FidExtractor | None = None


def default_extractor() -> FidExtractor:
    global _DEFAULT_EXTRACTOR
    if _DEFAULT_EXTRACTOR is None:
        _DEFAULT_EXTRACTOR = FidExtractor()
    return _DEFAULT_EXTRACTOR


def _regularized(stats: FeatureStats) -> np.ndarray:
    sigma = 0.5 * (stats.sigma + stats.sigma.T)
    if stats.n < stats.dim + 1:
        # rank-deficient estimate: shrink toward the mean-variance diagonal
        target = np.trace(sigma) / stats.dim
        sigma = (1.0 - SHRINKAGE) * sigma + SHRINKAGE * target * np.eye(stats.dim)
    return sigma + COV_EPS * np.eye(stats.dim)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the product root is taken from the eigenvalues of the
    symmetric matrix ``S_a^(1/2) S_b S_a^(1/2)``, which shares its spectrum
    with ``S_a S_b``.
    """
    if a.dim != b.dim:
        raise ValueError(f"feature dims differ: {a.dim} vs {b.dim}")
    for s in (a, b):
        if not (np.all(np.isfinite(s.mu)) and np.all(np.isfinite(s.sigma))):
            raise ValueError("non-finite feature statistics")
    sa, sb = _regularized(a), _regularized(b)
    root_a = _psd_sqrt(sa)
    inner = root_a @ sb @ root_a
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_root = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mu - b.mu
    value = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * tr_root)
    return max(value, 0.0)


def _images(source) -> list[np.ndarray]:
    if isinstance(source, DatasetManifest):
        return [r.image for r in source]
    out = []
    for item in source:
        out.append(item.image if isinstance(item, SampleRecord) else item)
    return out


def compute_fid(real, generated, extractor: Callable | None = None) -> FidResult:
    """FID between two image sets (manifests, record lists or ``[0, 1]`` arrays)."""
    real_imgs, gen_imgs = _images(real), _images(generated)
    a = extract_features(real_imgs, extractor)
    b = extract_features(gen_imgs, extractor)
    return FidResult(frechet_distance(a, b), len(real_imgs), len(gen_imgs))


@torch.no_grad()
def generate_batch(gen: Generator, records: Sequence[SampleRecord], mask_only: bool = False,
                   batch_size: int = 16) -> list[np.ndarray]:
    """Storage-range outputs for ``records`` (eval mode: no dropout unless ``mask_only``)."""
    dtype = next(gen.parameters()).dtype
    outs = []
    for i in range(0, len(records), batch_size):
        chunk = list(records[i:i + batch_size])
        image, mask, ids, drop = record_tensors(chunk, dtype=dtype)
        if mask_only:
            drop = torch.ones_like(drop)
        y = gen(image, mask, ids, drop)
        outs.extend(to_storage_range(y.permute(0, 2, 3, 1).double().numpy()).astype(np.float32))
    return outs


def fid_for_records(gen: Generator, records: Sequence[SampleRecord], extractor: Callable | None = None) -> float:
    """FID of generator outputs against the records' own target images."""
    outputs = generate_batch(gen, records)
    return float(compute_fid([r.image for r in records], outputs, extractor))


# -- CAS / NAS ---------------------------------------------------------------------

def _as_generator(generator) -> Generator:
    if isinstance(generator, Generator):
        return generator
    from .training import load_generator

    return load_generator(generator)


def _clean_pool(records: Sequence[SampleRecord]) -> list[np.ndarray]:
    pool = [r.image for r in records if not r.is_defect]
    pool += [r.input_image for r in records if r.is_defect and r.input_image is not None
             and r.pairing is Pairing.PAIRED]
    return pool


def build_cas(
    real_train: DatasetManifest | Sequence[SampleRecord],
    generator,
    n_per_record: int = 4,
    seed: int = 0,
    out_path: str | os.PathLike | None = None,
    failures: list | None = None,
) -> DatasetManifest:
    """Synthetic-only training set: ``n_per_record`` generations per real record.

    Every output keeps its source record's mask, prompt and label (the mask is
    the label).  Inputs are drawn from the clean images of the training set;
    with no clean image available the generation is mask-only.  A record whose
    generation fails is logged, counted in ``failures`` and skipped.
    """
    gen = _as_generator(generator)
    records = list(real_train)
    pool = _clean_pool(records)
    rng = np.random.default_rng(seed)
    jobs = []
    for rec in records:
        for k in range(n_per_record):
            if pool:
                src = pool[int(rng.integers(len(pool)))]
                job = dataclasses.replace(rec, input_image=src, pairing=Pairing.UNPAIRED, paths={})
            else:
                job = dataclasses.replace(rec, input_image=None, pairing=Pairing.MASK_ONLY, paths={})
            jobs.append((rec, k, job))

    out = []
    for rec, k, job in jobs:
        try:
            img = generate_batch(gen, [job], mask_only=job.input_image is None)[0]
            if not np.all(np.isfinite(img)):
                raise FloatingPointError("non-finite output")
        except Exception as exc:  # noqa: BLE001 - reported and counted, never fatal
            log.warning("generation failed for %s/%d: %s", rec.id, k, exc)
            if failures is not None:
                failures.append((rec.id, k, str(exc)))
            continue
        paths = {"mask": rec.paths["mask"]} if "mask" in rec.paths else {}
        out.append(SampleRecord(
            id=f"cas_{rec.id}_{k}", mask=rec.mask, prompt=rec.prompt, label=rec.label,
            pairing=Pairing.MASK_ONLY, input_image=None, target_image=quantize(img),
            paths=paths, provenance="synthetic",
        ))
    manifest = DatasetManifest(tuple(out), seed=seed)
    if out_path is not None:
        manifest = save_manifest(manifest, out_path)
    return manifest


def build_nas(
    real_train: DatasetManifest | Sequence[SampleRecord],
    generator,
    n_per_record: int = 4,
    seed: int = 0,
    cas: DatasetManifest | None = None,
    out_path: str | os.PathLike | None = None,
) -> DatasetManifest:
    """Real training records (unchanged) plus the CAS synthetic records."""
    if cas is None:
        cas = build_cas(real_train, generator, n_per_record, seed)
    real = [dataclasses.replace(r, provenance="real") if r.provenance != "real" else r for r in real_train]
    manifest = DatasetManifest(tuple(real) + tuple(cas.records), seed=seed)
    if out_path is not None:
        manifest = save_manifest(manifest, out_path)
    return manifest


# -- downstream model ----------------------------------------------------------------

class DownstreamNet(nn.Module):
    """Shared conv trunk with an image-level defect head and a per-pixel mask head."""

    def __init__(self, width: int = 32):
        super().__init__()
        w = width
        self.trunk = nn.Sequential(
            nn.Conv2d(3, w // 2, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w // 2, w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.SiLU(),
        )
        self.mask_head = nn.Conv2d(2 * w, 1, 1)
        self.image_head = nn.Linear(4 * w, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.trunk(x)
        pooled = torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1)
        mask_logits = F.interpolate(self.mask_head(h), size=x.shape[-2:], mode="bilinear", align_corners=False)
        return self.image_head(pooled)[:, 0], mask_logits[:, 0]


@dataclass
class DownstreamModel:
    net: DownstreamNet
    steps: int
    seed: int
    history: list = field(default_factory=list)

    @torch.no_grad()
    def predict(self, images: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        """(image-level defect probability, per-pixel mask probability)."""
        self.net.eval()
        x = torch.from_numpy(to_model_range(np.stack(images))).permute(0, 3, 1, 2).float()
        cls, seg = self.net(x)
        return torch.sigmoid(cls).numpy(), torch.sigmoid(seg).numpy()


class TrunkExtractor:
    """FID features from a trained downstream trunk (global-average-pooled last stage)."""

    def __init__(self, model: "DownstreamModel"):
        self.trunk = model.net.trunk

    @property
    def dim(self) -> int:
        return self.trunk[-2].out_channels

    @torch.no_grad()
    def __call__(self, images: np.ndarray) -> np.ndarray:
        self.trunk.eval()
        x = torch.from_numpy(to_model_range(np.asarray(images, np.float32))).permute(0, 3, 1, 2)
        feats = [self.trunk(x[i:i + 32]).mean(dim=(2, 3)) for i in range(0, len(x), 32)]
        return torch.cat(feats).double().numpy()


GEOMETRIC_DRAWS = tuple(AugmentDraw(flip, k, 0.0, 0.0) for flip in (False, True) for k in range(4))


def train_downstream(
    manifest: DatasetManifest | Sequence[SampleRecord],
    seed: int = 0,
    steps: int = 1500,
    augment: bool = False,
    batch_size: int = 8,
    lr: float = 1e-3,
    require_both_classes: bool = True,
) -> DownstreamModel:
    """Train the reference two-head detector; ``augment`` adds random flips / quarter turns."""
    records = list(manifest)
    if not records:
        raise ValueError("empty downstream training manifest")
    labels = np.array([r.is_defect for r in records], np.float32)
    if require_both_classes and (labels.all() or not labels.any()):
        raise ValueError("downstream training needs both defect and good records")
    images = np.stack([r.image for r in records]).astype(np.float32)
    masks = np.stack([r.mask for r in records]).astype(np.float32)

    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = DownstreamNet()
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    model = DownstreamModel(net, steps, seed)
    n = len(records)
    net.train()
    for step in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        xb, mb = images[idx], masks[idx]
        if augment:
            pairs = [apply_augment(x, m, GEOMETRIC_DRAWS[int(rng.integers(8))]) for x, m in zip(xb, mb)]
            xb = np.stack([p[0] for p in pairs])
            mb = np.stack([p[1] for p in pairs])
        x = torch.from_numpy(to_model_range(xb)).permute(0, 3, 1, 2).float()
        y = torch.from_numpy(labels[idx])
        m = torch.from_numpy(np.ascontiguousarray(mb))
        cls, seg = net(x)
        loss = F.binary_cross_entropy_with_logits(cls, y) + F.binary_cross_entropy_with_logits(seg, m)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (step + 1) % 100 == 0:
            model.history.append(float(loss.detach()))
    del gen
    return model


@dataclass(frozen=True)
class DownstreamMetrics:
    precision: float
    recall: float
    accuracy: float
    mask_iou: float
    n: int

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRICS}


def binary_metrics(y_true: Sequence[bool], y_pred: Sequence[bool]) -> tuple[float, float, float]:
    """(precision, recall, accuracy) with positive = defect; 0/0 counts as 0."""
    t = np.asarray(y_true, bool)
    p = np.asarray(y_pred, bool)
    tp = int(np.sum(t & p))
    fp = int(np.sum(~t & p))
    fn = int(np.sum(t & ~p))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall, float(np.mean(t == p))


def mask_iou(pred_masks: Sequence[np.ndarray], true_masks: Sequence[np.ndarray]) -> float:
    """Mean IoU over images with a non-empty union; 1.0 when every union is empty."""
    scores = []
    for p, t in zip(pred_masks, true_masks):
        p, t = np.asarray(p) > 0.5, np.asarray(t) > 0.5
        union = np.sum(p | t)
        if union:
            scores.append(np.sum(p & t) / union)
    return float(np.mean(scores)) if scores else 1.0


def eval_downstream(model: DownstreamModel, test: DatasetManifest | Sequence[SampleRecord]) -> DownstreamMetrics:
    records = list(test)
    if not records:
        raise ValueError("empty test set")
    probs, seg = model.predict([r.image for r in records])
    truth = [r.is_defect for r in records]
    precision, recall, accuracy = binary_metrics(truth, probs > 0.5)
    defect = [k for k, r in enumerate(records) if r.is_defect]
    iou = mask_iou([seg[k] for k in defect], [records[k].mask for k in defect]) if defect else 1.0
    return DownstreamMetrics(precision, recall, accuracy, iou, len(records))


# -- protocol ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    fid: float | None
    metrics: dict[str, DownstreamMetrics]
    seeds: list[int]
    counts: dict[str, int] = field(default_factory=dict)

    def to_lines(self) -> list[str]:
        lines = [f"fid = {self.fid:.6f}" if self.fid is not None else "fid = nan"]
        lines.append("seeds = " + ",".join(str(s) for s in self.seeds))
        for name, n in self.counts.items():
            lines.append(f"count.{name} = {n}")
        for strat in STRATEGIES:
            if strat in self.metrics:
                for key, val in self.metrics[strat].as_dict().items():
                    lines.append(f"{strat}.{key} = {val:.6f}")
        return lines

    def write(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")
        return path

    def table(self) -> str:
        """Metric rows by strategy columns."""
        cols = [s for s in STRATEGIES if s in self.metrics]
        head = f"{'metric':<12}" + "".join(f"{c:>10}" for c in cols)
        rows = [head, "-" * len(head)]
        for m in METRICS:
            rows.append(f"{m:<12}" + "".join(f"{getattr(self.metrics[c], m):>10.3f}" for c in cols))
        return "\n".join(rows)


def run_strategies(
    real_train: Sequence[SampleRecord],
    real_test: Sequence[SampleRecord],
    generator,
    seed: int = 0,
    n_per_record: int = 4,
    steps: int = 1500,
    cas: DatasetManifest | None = None,
) -> dict[str, DownstreamMetrics]:
    """Train one downstream model per strategy and evaluate all on the same real test split."""
    real_train = list(real_train)
    if cas is None:
        cas = build_cas(real_train, generator, n_per_record, seed)
    nas = build_nas(real_train, generator, n_per_record, seed, cas=cas)
    sets = {
        "D_S": (real_train, False),
        "D_S_AUG": (real_train, True),
        "CAS": (list(cas), False),
        "NAS": (list(nas), False),
    }
    return {name: eval_downstream(train_downstream(recs, seed=seed, steps=steps, augment=aug), real_test)
            for name, (recs, aug) in sets.items()}


def median_metrics(runs: Sequence[DownstreamMetrics]) -> DownstreamMetrics:
    return DownstreamMetrics(*(float(np.median([getattr(r, k) for r in runs])) for k in METRICS),
                             n=runs[0].n)
