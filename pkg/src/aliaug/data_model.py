"""Dataset records, manifest I/O, splitting, unpaired pairing and basic augmentation.

Images are ``H x W x 3`` float32 arrays in ``[0, 1]``; masks are ``H x W``
float32 arrays holding only 0 and 1.  Conversion to the model range
``[-1, 1]`` happens at the model boundary (:func:`to_model_range`).
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image as PILImage

PROMPT_VOCAB: tuple[str, ...] = (
    "no defect",
    "add scratch",
    "add hole",
    "add color blob",
    "add glue strip",
)
GOOD_LABEL = "good"


class ManifestError(ValueError):
    pass


class Pairing(str, enum.Enum):
    PAIRED = "paired"
    UNPAIRED = "unpaired"
    MASK_ONLY = "mask_only"


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"
    UNSPLIT = "unsplit"


@dataclass(frozen=True)
class Prompt:
    text: str
    prompt_id: int

    @classmethod
    def from_text(cls, text: str, vocab: Sequence[str] = PROMPT_VOCAB) -> "Prompt":
        try:
            return cls(text, list(vocab).index(text))
        except ValueError:
            raise ManifestError(f"prompt {text!r} not in vocabulary") from None


def load_vocab(path: str | os.PathLike) -> tuple[str, ...]:
    """Read a prompt vocabulary file: one prompt per line, index = prompt id."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    vocab = tuple(line.strip() for line in lines if line.strip())
    if not vocab:
        raise ManifestError(f"empty vocabulary file {path}")
    return vocab


def write_vocab(path: str | os.PathLike, vocab: Sequence[str] = PROMPT_VOCAB) -> None:
    Path(path).write_text("".join(v + "\n" for v in vocab), encoding="utf-8")


def kind_prompt(kind: str) -> str:
    return "add " + kind.replace("_", " ")


@dataclass(frozen=True, eq=False)
class SampleRecord:
    """One training / evaluation unit.

    ``paths`` remembers the files a record was loaded from (or written to) so
    that downstream manifests can pass labels through by reference.
    """

    id: str
    mask: np.ndarray
    prompt: Prompt
    label: str
    pairing: Pairing
    input_image: np.ndarray | None = None
    target_image: np.ndarray | None = None
    paths: dict = field(default_factory=dict)
    provenance: str = "real"

    @property
    def is_defect(self) -> bool:
        return self.label != GOOD_LABEL

    @property
    def image(self) -> np.ndarray:
        """The labeled observation: the target if present, else the input."""
        img = self.target_image if self.target_image is not None else self.input_image
        if img is None:
            raise ValueError(f"record {self.id} carries no image")
        return img


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[SampleRecord, ...]
    split: Split = Split.UNSPLIT
    seed: int = 0

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ManifestError(f"duplicate record id {dup!r}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]


def _check_image(img: np.ndarray, name: str) -> str:
    if img.ndim != 3 or img.shape[2] != 3:
        return f"{name} must be HxWx3"
    if img.shape[0] % 8 or img.shape[1] % 8:
        return f"{name} dims must be multiples of 8"
    if not np.all(np.isfinite(img)):
        return f"{name} has non-finite values"
    if img.min() < 0.0 or img.max() > 1.0:
        return f"{name} values outside [0, 1]"
    return ""


def validate_record(record: SampleRecord) -> ValidationResult:
    """Check the record invariants; report the first violation."""
    m = record.mask
    if m.ndim != 2:
        return ValidationResult(False, "mask must be HxW")
    if not np.all((m == 0) | (m == 1)):
        return ValidationResult(False, "mask must be binary")
    if not m.any() and record.is_defect:
        return ValidationResult(False, "empty mask only allowed for good samples")
    if not record.prompt.text:
        return ValidationResult(False, "prompt text empty")
    if record.prompt.prompt_id < 0:
        return ValidationResult(False, "prompt id negative")

    has_in = record.input_image is not None
    has_tgt = record.target_image is not None
    if record.pairing is Pairing.PAIRED and not has_in:
        return ValidationResult(False, "paired requires input")
    if record.pairing is Pairing.PAIRED and not has_tgt:
        return ValidationResult(False, "paired requires target")
    if record.pairing is Pairing.UNPAIRED and not has_tgt:
        return ValidationResult(False, "unpaired requires target")
    if record.pairing is Pairing.MASK_ONLY and has_in:
        return ValidationResult(False, "mask_only forbids input")

    for name, img in (("input_image", record.input_image), ("target_image", record.target_image)):
        if img is None:
            continue
        msg = _check_image(img, name)
        if msg:
            return ValidationResult(False, msg)
        if img.shape[:2] != m.shape:
            return ValidationResult(False, "shape mismatch between images and mask")
    if m.shape[0] % 8 or m.shape[1] % 8:
        return ValidationResult(False, "mask dims must be multiples of 8")
    return ValidationResult(True)


# -- image files -----------------------------------------------------------

def read_image(path: str | os.PathLike) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_mask(path: str | os.PathLike) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.float32)


def write_image(path: str | os.PathLike, img: np.ndarray) -> None:
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path)


def write_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    PILImage.fromarray((mask > 0.5).astype(np.uint8) * 255, mode="L").save(path)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-trip through 8-bit so in-memory records equal their PNG files."""
    return (np.clip(np.round(img * 255.0), 0, 255) / 255.0).astype(np.float32)


def to_model_range(img: np.ndarray) -> np.ndarray:
    return img * 2.0 - 1.0


def to_storage_range(img: np.ndarray) -> np.ndarray:
    return np.clip((img + 1.0) / 2.0, 0.0, 1.0)


# -- manifest I/O ----------------------------------------------------------

def load_manifest(
    path: str | os.PathLike,
    vocab: Sequence[str] = PROMPT_VOCAB,
    split: Split = Split.UNSPLIT,
    seed: int = 0,
) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    records = []
    lines = path.read_text(encoding="utf-8").splitlines()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rec_id = str(obj["id"])
            pairing = Pairing(obj["pairing"])
            prompt = Prompt.from_text(obj["prompt"], vocab)
            label = str(obj["label"])
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise ManifestError(f"{path}:{lineno}: malformed record ({exc})") from None

        files = {}
        for key in ("input", "mask", "target"):
            rel = obj.get(key)
            if rel is None:
                continue
            full = root / rel
            if not full.exists():
                raise ManifestError(f"{path}:{lineno}: missing file {full}")
            files[key] = full
        if "mask" not in files:
            raise ManifestError(f"{path}:{lineno}: record has no mask")

        rec = SampleRecord(
            id=rec_id,
            mask=read_mask(files["mask"]),
            prompt=prompt,
            label=label,
            pairing=pairing,
            input_image=read_image(files["input"]) if "input" in files else None,
            target_image=read_image(files["target"]) if "target" in files else None,
            paths={k: str(v) for k, v in files.items()},
            provenance=str(obj.get("provenance", "real")),
        )
        result = validate_record(rec)
        if not result:
            raise ManifestError(f"{path}:{lineno}: invalid record {rec_id}: {result.reason}")
        records.append(rec)
    if not records:
        raise ManifestError("empty manifest")
    return DatasetManifest(tuple(records), split=split, seed=seed)


def _rel(target: str | os.PathLike, root: Path) -> str:
    return os.path.relpath(target, root)


def save_manifest(
    manifest: DatasetManifest | Iterable[SampleRecord],
    path: str | os.PathLike,
    image_dir: str | os.PathLike | None = None,
) -> DatasetManifest:
    """Write a manifest, materializing any record images that have no file yet.

    Images are written under ``image_dir`` (default: ``<manifest stem>_files``
    next to the manifest).  Records that already point at files keep them.
    Returns the manifest with every record's ``paths`` filled in.
    """
    path = Path(path)
    root = path.parent
    root.mkdir(parents=True, exist_ok=True)
    image_dir = Path(image_dir) if image_dir is not None else root / (path.stem + "_files")

    lines = []
    saved = []
    for rec in manifest:
        entry = {"id": rec.id}
        paths = dict(rec.paths)
        for key, arr, writer in (
            ("input", rec.input_image, write_image),
            ("mask", rec.mask, write_mask),
            ("target", rec.target_image, write_image),
        ):
            if arr is None:
                entry[key] = None
                continue
            src = rec.paths.get(key)
            if src is None:
                image_dir.mkdir(parents=True, exist_ok=True)
                src = image_dir / f"{rec.id}_{key}.png"
                writer(src, arr)
            paths[key] = str(src)
            entry[key] = _rel(src, root)
        entry["prompt"] = rec.prompt.text
        entry["label"] = rec.label
        entry["pairing"] = rec.pairing.value
        if rec.provenance != "real":
            entry["provenance"] = rec.provenance
        lines.append(json.dumps(entry, sort_keys=True))
        saved.append(replace(rec, paths=paths))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    if isinstance(manifest, DatasetManifest):
        return DatasetManifest(tuple(saved), manifest.split, manifest.seed)
    return DatasetManifest(tuple(saved))


def import_mvtec(category_dir: str | os.PathLike, vocab: Sequence[str] = PROMPT_VOCAB) -> DatasetManifest:
    """Build a manifest from an MVTec-AD style category directory.

    ``test/<defect>/<n>.png`` pairs with ``ground_truth/<defect>/<n>_mask.png``;
    ``train/good`` and ``test/good`` become good records with empty masks.
    Defect types outside the vocabulary are prompted with ``"add <defect>"``
    only if that string is in ``vocab``; otherwise the first non-good prompt
    is used.
    """
    root = Path(category_dir)
    if not (root / "test").is_dir():
        raise ManifestError(f"{root} has no test/ directory")
    fallback = next(v for v in vocab if v != PROMPT_VOCAB[0])
    records = []
    for split_dir in ("train", "test"):
        base = root / split_dir
        if not base.is_dir():
            continue
        for defect_dir in sorted(p for p in base.iterdir() if p.is_dir()):
            defect = defect_dir.name
            for img_path in sorted(defect_dir.glob("*.png")):
                img = read_image(img_path)
                files = {"target": str(img_path)}
                if defect == GOOD_LABEL:
                    mask = np.zeros(img.shape[:2], np.float32)
                    prompt = Prompt.from_text(PROMPT_VOCAB[0], vocab)
                    rec = SampleRecord(
                        id=f"{split_dir}_{defect}_{img_path.stem}", mask=mask, prompt=prompt,
                        label=GOOD_LABEL, pairing=Pairing.PAIRED, input_image=img,
                        target_image=img, paths={"input": str(img_path), **files},
                    )
                else:
                    mask_path = root / "ground_truth" / defect / f"{img_path.stem}_mask.png"
                    if not mask_path.exists():
                        raise ManifestError(f"missing ground-truth mask {mask_path}")
                    text = kind_prompt(defect)
                    prompt = Prompt.from_text(text if text in vocab else fallback, vocab)
                    rec = SampleRecord(
                        id=f"{split_dir}_{defect}_{img_path.stem}", mask=read_mask(mask_path),
                        prompt=prompt, label=defect, pairing=Pairing.UNPAIRED,
                        target_image=img, paths={"mask": str(mask_path), **files},
                    )
                records.append(rec)
    if not records:
        raise ManifestError(f"no images found under {root}")
    return DatasetManifest(tuple(records))


# -- splitting and pairing -------------------------------------------------

def _allocate(sizes: list[int], total: int) -> list[int]:
    """Largest-remainder allocation of ``total`` across groups proportional to size."""
    n = sum(sizes)
    exact = [total * s / n for s in sizes]
    alloc = [min(int(np.floor(e)), s) for e, s in zip(exact, sizes)]
    order = sorted(range(len(sizes)), key=lambda i: (-(exact[i] - alloc[i]), i))
    k = 0
    while sum(alloc) < total:
        i = order[k % len(order)]
        if alloc[i] < sizes[i]:
            alloc[i] += 1
        k += 1
    return alloc


def split_dataset(
    manifest: DatasetManifest, train_fraction: float = 0.7, seed: int = 0
) -> tuple[DatasetManifest, DatasetManifest]:
    """Deterministic train/test split, stratified by label when several labels exist."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    n = len(manifest)
    if n == 0:
        raise ManifestError("cannot split an empty manifest")
    n_train = int(np.floor(train_fraction * n + 0.5))
    rng = np.random.default_rng(seed)

    labels = sorted({r.label for r in manifest.records})
    groups = [[i for i, r in enumerate(manifest.records) if r.label == lab] for lab in labels]
    alloc = _allocate([len(g) for g in groups], n_train)
    train_idx: list[int] = []
    for g, k in zip(groups, alloc):
        perm = rng.permutation(len(g))
        train_idx.extend(g[j] for j in perm[:k])
    chosen = set(train_idx)
    test_idx = [i for i in rng.permutation(n) if i not in chosen]
    train_idx = [train_idx[j] for j in rng.permutation(len(train_idx))]

    recs = manifest.records
    return (
        DatasetManifest(tuple(recs[i] for i in train_idx), Split.TRAIN, seed),
        DatasetManifest(tuple(recs[int(i)] for i in test_idx), Split.TEST, seed),
    )


def make_unpaired_pairs(
    defect_records: Sequence[SampleRecord],
    clean_images: Sequence[np.ndarray],
    seed: int = 0,
    clean_paths: Sequence[str] | None = None,
) -> list[SampleRecord]:
    """Give each defect record a randomly chosen clean image as input."""
    if not defect_records:
        raise ValueError("no defect records")
    if not clean_images:
        raise ValueError("no clean images to pair with")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(clean_images), size=len(defect_records))
    out = []
    for rec, k in zip(defect_records, picks):
        paths = {key: v for key, v in rec.paths.items() if key != "input"}
        if clean_paths is not None:
            paths["input"] = clean_paths[k]
        out.append(replace(
            rec, input_image=clean_images[k], pairing=Pairing.UNPAIRED, paths=paths,
        ))
    return out


# -- classical augmentation -----------------------------------------------

@dataclass(frozen=True)
class AugmentDraw:
    flip: bool
    quarter_turns: int
    brightness: float
    contrast: float

    @classmethod
    def sample(cls, seed: int) -> "AugmentDraw":
        rng = np.random.default_rng(seed)
        flip, rotate, jitter = rng.random(3) < 0.5
        k = int(rng.integers(1, 4)) if rotate else 0
        b, c = rng.uniform(-0.1, 0.1, size=2) if jitter else (0.0, 0.0)
        return cls(bool(flip), k, float(b), float(c))


def apply_augment(img: np.ndarray, mask: np.ndarray, draw: AugmentDraw) -> tuple[np.ndarray, np.ndarray]:
    if draw.flip:
        img, mask = img[:, ::-1], mask[:, ::-1]
    if draw.quarter_turns:
        img = np.rot90(img, draw.quarter_turns, axes=(0, 1))
        mask = np.rot90(mask, draw.quarter_turns, axes=(0, 1))
    if draw.brightness or draw.contrast:
        # fixed pivot so paired input/target receive the identical pixel map
        img = np.clip(((img - 0.5) * (1.0 + draw.contrast) + 0.5) * (1.0 + draw.brightness), 0.0, 1.0)
    return np.ascontiguousarray(img, dtype=np.float32), np.ascontiguousarray(mask)


def basic_augment(image: np.ndarray, mask: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded random subset of {h-flip, k*90 degree rotation, brightness/contrast jitter}.

    Geometric ops hit image and mask alike; jitter never touches the mask.
    """
    return apply_augment(image, mask, AugmentDraw.sample(seed))


def augment_record(record: SampleRecord, seed: int) -> SampleRecord:
    """Apply one draw to every image of a record so input, target and mask stay aligned."""
    draw = AugmentDraw.sample(seed)
    mask = record.mask
    imgs = {}
    for key in ("input_image", "target_image"):
        img = getattr(record, key)
        if img is not None:
            imgs[key], mask_out = apply_augment(img, record.mask, draw)
    if imgs:
        mask = mask_out
    else:
        _, mask = apply_augment(np.zeros(mask.shape + (3,), np.float32), mask, draw)
    return replace(record, mask=mask, paths={}, **imgs)
