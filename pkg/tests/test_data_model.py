import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aliaug.data_model import (
    PROMPT_VOCAB,
    AugmentDraw,
    DatasetManifest,
    ManifestError,
    Pairing,
    Prompt,
    apply_augment,
    augment_record,
    basic_augment,
    import_mvtec,
    load_manifest,
    load_vocab,
    make_unpaired_pairs,
    quantize,
    save_manifest,
    split_dataset,
    to_model_range,
    to_storage_range,
    validate_record,
    write_image,
    write_mask,
    write_vocab,
)
from conftest import make_record


def _manifest(n, labels=("scratch",)):
    recs = [make_record(f"r{i}", kind=labels[i % len(labels)], seed=i) for i in range(n)]
    return DatasetManifest(tuple(recs))


# -- records and validation ----------------------------------------------------

def test_valid_paired_record(record):
    assert validate_record(record)


def test_paired_missing_target_is_invalid(record):
    res = validate_record(dataclasses.replace(record, target_image=None))
    assert not res and res.reason == "paired requires target"


def test_non_binary_mask_is_invalid(record):
    mask = record.mask.copy()
    mask[0, 0] = 0.5
    res = validate_record(dataclasses.replace(record, mask=mask))
    assert not res and res.reason == "mask must be binary"


def test_mask_only_forbids_input(record):
    res = validate_record(dataclasses.replace(record, pairing=Pairing.MASK_ONLY))
    assert not res


def test_defect_needs_nonempty_mask(record):
    res = validate_record(dataclasses.replace(record, mask=np.zeros_like(record.mask)))
    assert not res


def test_shape_mismatch_is_invalid(record):
    res = validate_record(dataclasses.replace(record, target_image=np.zeros((8, 8, 3), np.float32)))
    assert not res


def test_unknown_prompt_rejected():
    with pytest.raises(ManifestError):
        Prompt.from_text("add rust")


def test_duplicate_ids_rejected(record):
    with pytest.raises(ManifestError, match="duplicate"):
        DatasetManifest((record, record))


def test_vocab_round_trip(tmp_path):
    write_vocab(tmp_path / "p.txt")
    assert load_vocab(tmp_path / "p.txt") == PROMPT_VOCAB


@given(st.lists(st.floats(0, 1, width=32), min_size=1, max_size=20))
def test_range_conversions_invert(vals):
    x = np.array(vals, np.float32)
    np.testing.assert_allclose(to_storage_range(to_model_range(x)), x, atol=1e-6)


# -- manifest I/O -----------------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    recs = [dataclasses.replace(make_record(f"r{i}", seed=i), input_image=quantize(make_record(seed=i).input_image),
                                target_image=quantize(make_record(seed=i).target_image)) for i in range(15)]
    saved = save_manifest(recs, tmp_path / "m.manifest")
    loaded = load_manifest(tmp_path / "m.manifest")
    assert len(loaded) == 15
    assert all(r.pairing is Pairing.PAIRED for r in loaded)
    for a, b in zip(saved, loaded):
        assert a.id == b.id
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_allclose(a.input_image, b.input_image, atol=1e-7)
        np.testing.assert_allclose(a.target_image, b.target_image, atol=1e-7)


def test_empty_manifest_error(tmp_path):
    (tmp_path / "m.manifest").write_text("")
    with pytest.raises(ManifestError, match="empty manifest"):
        load_manifest(tmp_path / "m.manifest")


def test_missing_mask_file_named(tmp_path, record):
    save_manifest([record], tmp_path / "m.manifest")
    entry = json.loads((tmp_path / "m.manifest").read_text())
    entry["mask"] = "nowhere/missing_mask.png"
    (tmp_path / "m.manifest").write_text(json.dumps(entry) + "\n")
    with pytest.raises(ManifestError, match="missing_mask.png"):
        load_manifest(tmp_path / "m.manifest")


def test_malformed_line_reports_line_number(tmp_path, record):
    save_manifest([record], tmp_path / "m.manifest")
    text = (tmp_path / "m.manifest").read_text()
    (tmp_path / "m.manifest").write_text(text + "{not json\n")
    with pytest.raises(ManifestError, match=":2:"):
        load_manifest(tmp_path / "m.manifest")


def test_provenance_survives_round_trip(tmp_path, record):
    save_manifest([dataclasses.replace(record, provenance="synthetic")], tmp_path / "m.manifest")
    assert load_manifest(tmp_path / "m.manifest").records[0].provenance == "synthetic"


def test_import_mvtec_layout(tmp_path):
    img = np.full((16, 16, 3), 0.5, np.float32)
    mask = np.zeros((16, 16), np.float32)
    mask[2:6, 2:6] = 1
    for d in ("train/good", "test/good", "test/scratch", "ground_truth/scratch"):
        (tmp_path / d).mkdir(parents=True)
    write_image(tmp_path / "train/good/000.png", img)
    write_image(tmp_path / "test/good/000.png", img)
    write_image(tmp_path / "test/scratch/000.png", img)
    write_mask(tmp_path / "ground_truth/scratch/000_mask.png", mask)
    m = import_mvtec(tmp_path)
    assert len(m) == 3
    defect = [r for r in m if r.is_defect]
    assert len(defect) == 1 and defect[0].prompt.text == "add scratch"
    np.testing.assert_array_equal(defect[0].mask, mask)


# -- splitting --------------------------------------------------------------------

def test_split_19_gives_13_6():
    train, test = split_dataset(_manifest(19), 0.7, seed=42)
    assert (len(train), len(test)) == (13, 6)


def test_split_half_is_disjoint_cover():
    m = _manifest(10)
    train, test = split_dataset(m, 0.5, seed=0)
    assert (len(train), len(test)) == (5, 5)
    assert sorted(train.ids + test.ids) == sorted(m.ids)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 40), frac=st.floats(0.05, 0.95), seed=st.integers(0, 1000))
def test_split_properties(n, frac, seed):
    m = _manifest(n, labels=("scratch", "hole", "good"))
    train, test = split_dataset(m, frac, seed)
    assert len(train) == int(np.floor(frac * n + 0.5))
    assert set(train.ids).isdisjoint(test.ids)
    assert sorted(train.ids + test.ids) == sorted(m.ids)
    again = split_dataset(m, frac, seed)
    assert again[0].ids == train.ids and again[1].ids == test.ids


def test_split_is_stratified():
    m = _manifest(20, labels=("scratch", "good"))
    train, _ = split_dataset(m, 0.7, seed=3)
    assert sum(r.label == "good" for r in train) == 7


# -- unpaired pairing ------------------------------------------------------------------

def test_unpaired_inputs_from_clean_set():
    defects = [make_record(f"d{i}", seed=i) for i in range(4)]
    clean = [np.full((16, 16, 3), i / 10, np.float32) for i in range(10)]
    out = make_unpaired_pairs(defects, clean, seed=7)
    assert len(out) == 4
    for r in out:
        assert r.pairing is Pairing.UNPAIRED
        assert any(r.input_image is c for c in clean)
    again = make_unpaired_pairs(defects, clean, seed=7)
    assert [id(r.input_image) for r in again] == [id(r.input_image) for r in out]


def test_single_clean_image_forced():
    clean = np.zeros((16, 16, 3), np.float32)
    out = make_unpaired_pairs([make_record()], [clean], seed=0)
    assert out[0].input_image is clean


# -- augmentation -------------------------------------------------------------------------

def test_flip_is_involution(record):
    draw = AugmentDraw(True, 0, 0.0, 0.0)
    img, mask = apply_augment(record.input_image, record.mask, draw)
    np.testing.assert_array_equal(mask, record.mask[:, ::-1])
    img2, mask2 = apply_augment(img, mask, draw)
    np.testing.assert_array_equal(mask2, record.mask)
    np.testing.assert_array_equal(img2, record.input_image)


def test_jitter_leaves_mask_untouched(record):
    _, mask = apply_augment(record.input_image, record.mask, AugmentDraw(False, 0, 0.08, -0.05))
    np.testing.assert_array_equal(mask, record.mask)


@given(st.integers(0, 2**32 - 1))
def test_augment_preserves_mask_count(seed):
    rec = make_record(size=16)
    img, mask = basic_augment(rec.input_image, rec.mask, seed)
    assert mask.sum() == rec.mask.sum()
    assert img.min() >= 0.0 and img.max() <= 1.0


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_augment_record_keeps_pairing_aligned(seed):
    rec = make_record(size=16)
    out = augment_record(rec, seed)
    diff = np.abs(out.target_image - out.input_image).max(axis=2)
    assert np.all(diff[out.mask == 0] < 1e-6)
