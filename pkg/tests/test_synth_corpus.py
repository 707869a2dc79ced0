import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aliaug.data_model import Pairing, load_manifest, validate_record
from aliaug.synth_corpus import (
    DEFECT_KINDS,
    INTENSITY_FLOOR,
    TEXTURES,
    CorpusConfig,
    CorpusError,
    DefectSpec,
    build_corpus,
    generate_texture,
    inject_defect,
    random_defect_spec,
    render_mask,
    write_corpus,
)


def brute_disc(center, radius, size):
    count = 0
    for y in range(size):
        for x in range(size):
            if (y - center[0]) ** 2 + (x - center[1]) ** 2 <= radius ** 2:
                count += 1
    return count


def brute_segment(p0, p1, half_width, size):
    """Pixels whose center lies within ``half_width`` of the segment, by dense sampling of the segment."""
    ts = np.linspace(0.0, 1.0, 4001)
    pts = np.asarray(p0, float)[None] + ts[:, None] * (np.asarray(p1, float) - np.asarray(p0, float))[None]
    out = np.zeros((size, size), bool)
    for y in range(size):
        for x in range(size):
            d = np.sqrt(((pts - (y, x)) ** 2).sum(1)).min()
            out[y, x] = d <= half_width + 1e-9
    return out


# -- textures --------------------------------------------------------------------

def test_plain_texture_low_variance():
    for seed in range(5):
        img = generate_texture("plain", 64, seed)
        assert img.var(axis=(0, 1)).max() < 0.01


@pytest.mark.parametrize("family", TEXTURES)
def test_texture_deterministic_and_in_range(family):
    a = generate_texture(family, 64, 3)
    np.testing.assert_array_equal(a, generate_texture(family, 64, 3))
    assert a.shape == (64, 64, 3) and a.dtype == np.float32
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_texture_seed_sensitivity():
    assert not np.array_equal(generate_texture("wood_grain", 64, 5), generate_texture("wood_grain", 64, 6))


def test_texture_rejects_bad_inputs():
    with pytest.raises(CorpusError):
        generate_texture("marble", 64, 0)
    with pytest.raises(CorpusError):
        generate_texture("plain", 60, 0)


# -- masks -------------------------------------------------------------------------

def test_scratch_20px_width2_count_band():
    spec = DefectSpec("scratch", 0.8, start=(20.0, 22.0), end=(20.0, 42.0), width=2.0)
    m = render_mask(spec, 64)
    assert 40 <= m.sum() <= 80


@settings(max_examples=15, deadline=None)
@given(y0=st.floats(4, 27), x0=st.floats(4, 27), y1=st.floats(4, 27), x1=st.floats(4, 27),
       width=st.floats(1.0, 4.0))
def test_scratch_matches_brute_force(y0, x0, y1, x1, width):
    spec = DefectSpec("scratch", 0.8, start=(y0, x0), end=(y1, x1), width=width)
    m = render_mask(spec, 32) > 0
    oracle = brute_segment((y0, x0), (y1, x1), width / 2, 32)
    # sampling the segment can only overestimate distances, by under 0.01 px
    assert np.all(oracle <= m)
    assert np.sum(m & ~oracle) <= 2


def test_hole_radius5_matches_disc_count():
    spec = DefectSpec("hole", 0.8, center=(32.0, 32.0), radius=5.0)
    assert render_mask(spec, 64).sum() == brute_disc((32, 32), 5.0, 64)


@given(cy=st.floats(8, 23), cx=st.floats(8, 23), r=st.floats(1.0, 7.5))
def test_hole_matches_disc_oracle(cy, cx, r):
    spec = DefectSpec("hole", 0.8, center=(cy, cx), radius=r)
    assert render_mask(spec, 32).sum() == brute_disc((cy, cx), r, 32)


def test_glue_strip_is_rectangle():
    m = render_mask(DefectSpec("glue_strip", 0.8, rect=(3, 5, 10, 4)), 32)
    assert m.sum() == 40 and m[3:13, 5:9].all()


# -- injection ---------------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(kind=st.sampled_from(DEFECT_KINDS), family=st.sampled_from(TEXTURES), seed=st.integers(0, 10_000))
def test_injection_locality_and_floor(kind, family, seed):
    rng = np.random.default_rng(seed)
    img = generate_texture(family, 64, seed)
    out, mask = inject_defect(img, random_defect_spec(kind, 64, rng))
    sel = mask > 0
    assert set(np.unique(mask)) <= {0.0, 1.0} and sel.any()
    np.testing.assert_array_equal(out[~sel], img[~sel])
    assert np.abs(out[sel] - img[sel]).mean() >= INTENSITY_FLOOR
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_out_of_bounds_spec_rejected():
    img = generate_texture("plain", 32, 0)
    with pytest.raises(CorpusError):
        inject_defect(img, DefectSpec("hole", 0.8, center=(1.0, 1.0), radius=5.0))


# -- corpus ----------------------------------------------------------------------------------

def test_corpus_counts():
    paired, unpaired, good = build_corpus(CorpusConfig(counts={"good": 10, "scratch": 5}, seed=1))
    assert (len(paired), len(unpaired), len(good)) == (5, 5, 10)
    assert all(r.pairing is Pairing.UNPAIRED for r in unpaired)
    for r in list(paired) + list(unpaired) + list(good):
        assert validate_record(r)


def test_paired_difference_inside_mask_only():
    paired, _, _ = build_corpus(CorpusConfig(counts={k: 2 for k in DEFECT_KINDS}, texture="mixed", seed=4))
    for r in paired:
        diff = np.abs(r.target_image - r.input_image).max(axis=2)
        assert np.all(diff[r.mask == 0] == 0)
        assert diff[r.mask > 0].mean() > 0


def test_corpus_deterministic():
    cfg = CorpusConfig(counts={"good": 3, "hole": 3}, seed=9)
    a, b = build_corpus(cfg), build_corpus(cfg)
    for ma, mb in zip(a, b):
        assert ma.ids == mb.ids
        for ra, rb in zip(ma, mb):
            np.testing.assert_array_equal(ra.image, rb.image)
            np.testing.assert_array_equal(ra.mask, rb.mask)


def test_bad_corpus_configs():
    with pytest.raises(CorpusError):
        CorpusConfig(counts={"good": 0})
    with pytest.raises(CorpusError):
        CorpusConfig(counts={"dent": 2})
    with pytest.raises(CorpusError):
        CorpusConfig(size=60)
    with pytest.raises(CorpusError):
        CorpusConfig(counts={"good": -1, "hole": 2})


def test_write_corpus_round_trip(tmp_path):
    manifests = build_corpus(CorpusConfig(counts={"good": 3, "scratch": 2, "hole": 2}, seed=2))
    written = write_corpus(tmp_path, manifests)
    assert (tmp_path / "prompts.txt").exists()
    for name, original in zip(("paired", "unpaired", "good"), manifests):
        loaded = load_manifest(written[name])
        assert loaded.ids == original.ids
        for a, b in zip(original, loaded):
            np.testing.assert_array_equal(a.mask, b.mask)
            np.testing.assert_allclose(a.image, b.image, atol=1e-7)
