"""Data pipeline: file formats, letterbox, augmentation, splits, synthesis."""

import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skim import data
from skim.errors import ConfigError, InputError, ParseError
from skim.tensor import Rng


def checker(h, w):
    img = np.indices((h, w)).sum(axis=0) % 2
    return np.repeat(img[:, :, None], 3, axis=2).astype(np.float32)


def blob_mask(h, w):
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[h // 4:h // 2, w // 4:w // 2] = 1
    return mask


# ---------------------------------------------------------------------------
# pnm io

def test_p6_roundtrip(tmp_path):
    rgb = (Rng(1).uniform(6 * 5 * 3).reshape(6, 5, 3) * 255).astype(np.uint8)
    path = tmp_path / "x.ppm"
    data.write_p6(path, rgb)
    assert np.array_equal(data.read_p6(path), rgb)


def test_p5_roundtrip_and_binary_enforcement(tmp_path):
    mask = (Rng(2).uniform(20).reshape(4, 5) < 0.5).astype(np.uint8) * 255
    path = tmp_path / "m.pgm"
    data.write_p5(path, mask)
    assert np.array_equal(data.read_p5(path), mask)
    raw = bytearray(path.read_bytes())
    raw[-3] = 7
    path.write_bytes(bytes(raw))
    with pytest.raises(ParseError) as err:
        data.read_p5(path)
    assert "byte" in str(err.value)


def test_parse_errors_carry_byte_offsets(tmp_path):
    p = tmp_path / "bad.ppm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
    with pytest.raises(ParseError) as err:
        data.read_p6(p)
    assert "byte 0" in str(err.value)

    p.write_bytes(b"P6\n2 q\n255\n")
    with pytest.raises(ParseError) as err:
        data.read_p6(p)
    assert "byte 5" in str(err.value)

    p.write_bytes(b"P6\n2 2\n254\n" + bytes(12))
    with pytest.raises(ParseError) as err:
        data.read_p6(p)
    assert "maxval" in str(err.value)

    p.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(ParseError) as err:
        data.read_p6(p)
    assert "truncated" in str(err.value)


def test_sample_io_quantizes_once(tmp_path):
    img = Rng(3).uniform(8 * 8 * 3).reshape(8, 8, 3).astype(np.float32)
    mask = (Rng(4).uniform(64).reshape(8, 8) < 0.3).astype(np.uint8)
    s = data.Sample(img, mask, "T", ("stain",))
    ip, mp = tmp_path / "s.ppm", tmp_path / "s.pgm"
    data.write_sample(s, ip, mp)
    s2 = data.read_sample(ip, mp)
    data.write_sample(s2, ip, mp)
    s3 = data.read_sample(ip, mp)
    assert np.array_equal(s2.image, s3.image)   # stable after first quantization
    assert np.array_equal(s2.mask, mask)


# ---------------------------------------------------------------------------
# letterbox

def test_letterbox_upscale_is_pure_padding():
    s = data.Sample(checker(256, 256), blob_mask(256, 256))
    out, geom = data.letterbox(s, 512)
    assert geom.scale == 1.0
    assert (geom.pad_top, geom.pad_left) == (128, 128)
    assert np.array_equal(out.image[128:384, 128:384], s.image)
    assert np.all(out.image[:128] == 0.5)
    assert np.all(out.mask[:128] == 0)
    back = data.invert_letterbox(out.mask, geom)
    assert np.array_equal(back, s.mask)


def test_letterbox_downscale_geometry():
    s = data.Sample(checker(300, 200), blob_mask(300, 200))
    out, geom = data.letterbox(s, 128)
    assert out.image.shape == (128, 128, 3)
    assert geom.scale == pytest.approx(128 / 300)
    nh = 128 - geom.pad_top - geom.pad_bottom
    nw = 128 - geom.pad_left - geom.pad_right
    assert nh == 128 and nw == round(200 * geom.scale)
    assert set(np.unique(out.mask)) <= {0, 1}
    restored = data.invert_letterbox(out.mask, geom)
    assert restored.shape == (300, 200)


def test_letterbox_mask_stays_binary_under_any_content():
    s = data.Sample(Rng(5).uniform(77 * 41 * 3).reshape(77, 41, 3).astype(np.float32),
                    (Rng(6).uniform(77 * 41).reshape(77, 41) < 0.5).astype(np.uint8))
    out, _ = data.letterbox(s, 64)
    assert set(np.unique(out.mask)) <= {0, 1}


def test_invert_rejects_mismatched_geometry():
    s = data.Sample(checker(64, 64), blob_mask(64, 64))
    _, geom = data.letterbox(s, 128)
    with pytest.raises(InputError):
        data.invert_letterbox(np.zeros((32, 32)), geom)


@settings(max_examples=20, deadline=None)
@given(st.integers(9, 150), st.integers(9, 150))
def test_letterbox_roundtrip_shape_property(h, w):
    s = data.Sample(np.full((h, w, 3), 0.4, dtype=np.float32),
                    np.zeros((h, w), dtype=np.uint8))
    out, geom = data.letterbox(s, 64)
    assert out.image.shape == (64, 64, 3)
    assert data.invert_letterbox(out.mask, geom).shape == (h, w)


# ---------------------------------------------------------------------------
# augmentation

def test_augment_deterministic_and_binary():
    s = data.Sample(checker(16, 16), blob_mask(16, 16))
    a = data.augment(s, Rng(9))
    b = data.augment(s, Rng(9))
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.mask, b.mask)
    assert set(np.unique(a.mask)) <= {0, 1}


def test_augment_mask_geometry_only():
    # photometric jitter must never change the mask pixel count
    s = data.Sample(checker(16, 16), blob_mask(16, 16))
    for seed in range(20):
        out = data.augment(s, Rng(seed))
        assert out.mask.sum() == s.mask.sum()
        assert out.image.min() >= 0.0 and out.image.max() <= 1.0


def test_augment_draw_count_is_fixed():
    # stream advances by the same amount regardless of gate outcomes
    s = data.Sample(checker(8, 8), blob_mask(8, 8))
    for seed in (0, 1, 2, 3):
        rng = Rng(seed)
        data.augment(s, rng)
        tail_a = rng.uniform(1)[0]
        rng2 = Rng(seed)
        rng2.uniform(7)
        tail_b = rng2.uniform(1)[0]
        assert tail_a == tail_b


# ---------------------------------------------------------------------------
# splits / few-shot

def make_manifest(n):
    entries = [data.ManifestEntry(f"i{i}.ppm", f"m{i}.pgm", "D", (), None)
               for i in range(n)]
    return data.DatasetManifest({}, 0, entries)


@pytest.mark.parametrize("n,want", [(100, (60, 20, 20)), (10, (6, 2, 2)),
                                    (7, (5, 1, 1)), (1, (1, 0, 0)),
                                    (170, (102, 34, 34))])
def test_split_counts_floor_with_remainder_to_train(n, want):
    man = data.split_dataset(make_manifest(n), seed=3)
    got = tuple(len(man.split_entries(s)) for s in data.SPLITS)
    assert got == want


def test_split_deterministic_and_seed_sensitive():
    a = [e.split for e in data.split_dataset(make_manifest(50), seed=1).samples]
    b = [e.split for e in data.split_dataset(make_manifest(50), seed=1).samples]
    c = [e.split for e in data.split_dataset(make_manifest(50), seed=2).samples]
    assert a == b
    assert a != c


def test_split_fraction_validation():
    with pytest.raises(InputError):
        data.split_dataset(make_manifest(10), fractions=(0.5, 0.2, 0.2))


def test_few_shot_subsets_train_only():
    man = data.split_dataset(make_manifest(100), seed=0)
    sub = data.few_shot_sample(man, 10, seed=5)
    assert len(sub.split_entries("train")) == 10
    assert len(sub.split_entries("val")) == 20
    assert len(sub.split_entries("test")) == 20
    full_train = {e.image for e in man.split_entries("train")}
    assert {e.image for e in sub.split_entries("train")} <= full_train
    assert ([e.image for e in sub.split_entries("test")]
            == [e.image for e in man.split_entries("test")])


def test_few_shot_errors():
    man = data.split_dataset(make_manifest(10), seed=0)
    with pytest.raises(InputError):
        data.few_shot_sample(man, 7, seed=0)   # train split has only 6
    with pytest.raises(InputError):
        data.few_shot_sample(man, 0, seed=0)


def test_few_shot_seed_changes_selection():
    man = data.split_dataset(make_manifest(100), seed=0)
    a = {e.image for e in data.few_shot_sample(man, 10, 1).split_entries("train")}
    b = {e.image for e in data.few_shot_sample(man, 10, 2).split_entries("train")}
    assert a != b


# ---------------------------------------------------------------------------
# manifest io

def test_manifest_roundtrip(tmp_path):
    spec = data.builtin_domain("D1", seed=3, image_size=64)
    man = data.synth_generate(spec, 6, tmp_path)
    data.split_dataset(man, seed=3)
    path = tmp_path / "manifest.json"
    data.save_manifest(man, path)
    back = data.load_manifest(path)
    assert back.seed == 3
    assert [e.split for e in back.samples] == [e.split for e in man.samples]
    s = back.load(back.samples[0])
    gen = data.generate_sample(spec, 0)
    assert np.array_equal(s.mask, gen.mask)


def test_manifest_missing_file_rejected(tmp_path):
    spec = data.builtin_domain("D1", seed=3, image_size=64)
    man = data.synth_generate(spec, 3, tmp_path)
    data.split_dataset(man, seed=3)
    path = tmp_path / "manifest.json"
    data.save_manifest(man, path)
    os.remove(tmp_path / man.samples[1].image)
    with pytest.raises(InputError):
        data.load_manifest(path)


# ---------------------------------------------------------------------------
# synthesis

def test_domain_spec_validation():
    with pytest.raises(ConfigError):
        data.DomainSpec("X", weave_period=100.0).validate()
    with pytest.raises(ConfigError):
        data.DomainSpec("X", defect_mix={"stain": 0.5}).validate()
    with pytest.raises(ConfigError):
        data.DomainSpec("X", defect_mix={"vortex": 1.0}).validate()
    with pytest.raises(ConfigError):
        data.builtin_domain("D9")


def test_generation_deterministic_and_index_independent():
    spec = data.builtin_domain("D3", seed=7, image_size=64)
    a = data.generate_sample(spec, 5)
    b = data.generate_sample(spec, 5)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.mask, b.mask)
    c = data.generate_sample(spec, 6)
    assert not np.array_equal(a.image, c.image)


def test_defect_fraction_band():
    for dom in ("D1", "D2", "D3"):
        spec = data.builtin_domain(dom, seed=11)
        for i in range(30):
            frac = data.generate_sample(spec, i).mask.mean()
            assert 0.001 <= frac <= 0.2, (dom, i, frac)


def test_every_kind_appears_in_mixed_domain():
    spec = data.builtin_domain("D3", seed=21)
    seen = set()
    for i in range(60):
        seen |= set(data.generate_sample(spec, i).defect_kinds)
    assert seen == set(data.DEFECT_KINDS)


def test_single_kind_domains_stay_pure():
    for dom, kind in (("D1", "stain"), ("D2", "broken_yarn")):
        spec = data.builtin_domain(dom, seed=13)
        for i in range(10):
            kinds = set(data.generate_sample(spec, i).defect_kinds)
            assert kinds == {kind}


def test_mask_marks_visible_defects():
    # defect pixels must differ from the same weave rendered without defects
    spec = data.builtin_domain("D1", seed=17)
    s = data.generate_sample(spec, 0)
    inside = s.image[s.mask == 1].mean(axis=0)
    outside = s.image[s.mask == 0].mean(axis=0)
    assert abs(float(inside[0]) - float(outside[0])) > 0.02


def test_domain_histograms_are_separated():
    hists = {}
    for dom in ("D1", "D2", "D3"):
        spec = data.builtin_domain(dom, seed=21, image_size=64)
        hists[dom] = data.gray_histogram(
            [data.generate_sample(spec, i) for i in range(15)])
    for a in ("D1", "D2", "D3"):
        for b in ("D1", "D2", "D3"):
            if a < b:
                assert np.abs(hists[a] - hists[b]).sum() > 0.15, (a, b)


def test_synth_generate_writes_consistent_tree(tmp_path):
    spec = data.builtin_domain("D2", seed=9, image_size=64)
    man = data.synth_generate(spec, 5, tmp_path)
    assert len(man.samples) == 5
    for e in man.samples:
        assert (tmp_path / e.image).exists()
        assert (tmp_path / e.mask).exists()
    with pytest.raises(InputError):
        data.synth_generate(spec, 0, tmp_path)
