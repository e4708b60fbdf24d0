import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from uavpatch.datasets import (IGNORE_CLASS, VISDRONE_CLASS_MAP, AnnotationParseError, Annotation,
                               BoundingBox, ImageSample, SceneConfig, TextureBank, filter_small_objects,
                               generate_toy_dataset, generate_toy_scene, generate_toy_textures,
                               load_annotations, load_samples, load_texture_bank, load_texture_cache,
                               load_visdrone_split, save_samples, save_texture_bank, to_canonical, to_raw)
from uavpatch.errors import ConfigError


def write(tmp_path, text, name="a.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


# ---------------------------------------------------------------- annotations

def test_parse_mapped_category(tmp_path):
    anns = load_annotations(write(tmp_path, "100,120,40,20,1,4,0,0\n"))
    assert anns == [Annotation(BoundingBox(100, 120, 40, 20), VISDRONE_CLASS_MAP[4], False)]
    assert anns[0].class_id == 0  # Car


def test_zero_size_box_dropped(tmp_path):
    assert load_annotations(write(tmp_path, "0,0,0,10,1,4,0,0\n0,0,10,0,1,4,0,0\n")) == []


def test_unmapped_category_becomes_ignore(tmp_path):
    (a,) = load_annotations(write(tmp_path, "10,10,5,5,1,2,0,0\n"))
    assert a.ignore and a.class_id == IGNORE_CLASS


def test_empty_file_is_empty_list(tmp_path):
    assert load_annotations(write(tmp_path, "")) == []


def test_trailing_comma_tolerated(tmp_path):
    assert len(load_annotations(write(tmp_path, "1,2,3,4,1,5,0,0,\n"))) == 1


@pytest.mark.parametrize("line", ["1,2,3,4,1,5,0", "1,2,x,4,1,5,0,0", "1,2,3,4,1,5,0,0,9"])
def test_malformed_line_names_line_number(tmp_path, line):
    p = write(tmp_path, "1,2,3,4,1,4,0,0\n" + line + "\n")
    with pytest.raises(AnnotationParseError) as e:
        load_annotations(p)
    assert e.value.lineno == 2
    assert ":2:" in str(e.value)


# ---------------------------------------------------------------- canonicalisation

def test_canonical_box_scaling():
    raw = np.zeros((1280, 1280, 3), np.uint8)
    s = to_canonical(raw, [Annotation(BoundingBox(200, 200, 100, 50), 0)], 640)
    assert s.annotations[0].box == BoundingBox(100, 100, 50, 25)
    assert s.original_size == (1280, 1280)
    assert s.image.shape == (640, 640, 3)


def test_canonical_range_endpoints():
    assert np.all(to_canonical(np.zeros((20, 30, 3), np.uint8), [], 16).image == -1.0)
    assert np.all(to_canonical(np.full((20, 30, 3), 255, np.uint8), [], 16).image == 1.0)


def test_canonical_clips_boxes():
    s = to_canonical(np.zeros((100, 100, 3), np.uint8), [Annotation(BoundingBox(90, 90, 20, 20), 0),
                                                        Annotation(BoundingBox(120, 5, 5, 5), 0)], 100)
    assert s.annotations == [Annotation(BoundingBox(90, 90, 10, 10), 0)]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_range_roundtrip(seed):
    raw = np.random.default_rng(seed).integers(0, 256, (16, 16, 3)).astype(np.uint8)
    s = to_canonical(raw, [], 16)
    assert s.image.min() >= -1 and s.image.max() <= 1
    assert np.max(np.abs((s.image + 1) * 127.5 - raw)) <= 0.5
    assert np.array_equal(to_raw(s.image), raw)


# ---------------------------------------------------------------- size filter

def _sample_with_box(side, orig=1000):
    img = np.zeros((orig, orig, 3), np.float32)
    return ImageSample(img, [Annotation(BoundingBox(0, 0, side, side), 0)], "s", (orig, orig))


def test_filter_threshold_examples():
    assert filter_small_objects([_sample_with_box(30)]) == []
    kept = filter_small_objects([_sample_with_box(34)])
    assert len(kept) == 1 and len(kept[0].annotations) == 1


def test_filter_uses_original_area_after_resize():
    # 34x34 in a 1000px original is 0.1156%; after canonicalising to 64px it must still pass
    raw = np.zeros((1000, 1000, 3), np.uint8)
    s = to_canonical(raw, [Annotation(BoundingBox(0, 0, 34, 34), 0), Annotation(BoundingBox(100, 100, 30, 30), 0)], 64)
    (kept,) = filter_small_objects([s])
    assert len(kept.annotations) == 1


def test_filter_tie_is_kept():
    s = ImageSample(np.zeros((100, 100, 3), np.float32), [Annotation(BoundingBox(0, 0, 1, 10), 0)])
    assert len(filter_small_objects([s], min_frac=0.001)) == 1


def test_filter_keeps_ignore_regions_but_drops_images_without_targets():
    small_ignore = Annotation(BoundingBox(0, 0, 1, 1), IGNORE_CLASS, True)
    a = ImageSample(np.zeros((100, 100, 3), np.float32), [small_ignore, Annotation(BoundingBox(0, 0, 20, 20), 0)])
    b = ImageSample(np.zeros((100, 100, 3), np.float32), [Annotation(BoundingBox(0, 0, 20, 20), IGNORE_CLASS, True)])
    out = filter_small_objects([a, b])
    assert len(out) == 1 and small_ignore in out[0].annotations


def test_filter_rejects_bad_threshold():
    with pytest.raises(ConfigError):
        filter_small_objects([], min_frac=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_filter_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(5):
        anns = [Annotation(BoundingBox(0, 0, float(rng.uniform(0.5, 8)), float(rng.uniform(0.5, 8))),
                           int(rng.integers(0, 4)), bool(rng.uniform() < 0.2)) for _ in range(4)]
        samples.append(ImageSample(np.zeros((100, 100, 3), np.float32), anns))
    once = filter_small_objects(samples, 0.002)
    assert filter_small_objects(once, 0.002) == once


# ---------------------------------------------------------------- VisDrone split loading

def test_visdrone_split_order_independent(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "annotations").mkdir()
    rng = np.random.default_rng(0)
    for stem in ("b", "a", "c"):
        Image.fromarray(rng.integers(0, 256, (50, 80, 3)).astype(np.uint8)).save(tmp_path / "images" / f"{stem}.png")
        (tmp_path / "annotations" / f"{stem}.txt").write_text("10,10,30,20,1,4,0,0\n0,0,3,3,1,1,0,0\n")
    samples = load_visdrone_split(tmp_path, size=32)
    assert [s.source_id for s in samples] == ["a", "b", "c"]
    assert all(len(s.annotations) == 2 and s.annotations[1].ignore for s in samples)
    assert samples[0].original_size == (50, 80)


# ---------------------------------------------------------------- textures

def test_texture_bank_from_directory(tmp_path):
    d = tmp_path / "dtd" / "banded"
    d.mkdir(parents=True)
    Image.fromarray(np.full((64, 64, 3), 255, np.uint8)).save(d / "x.png")
    Image.fromarray(np.zeros((80, 100, 3), np.uint8)).save(d / "y.jpg")
    (d / "notes.txt").write_text("not an image")
    bank = load_texture_bank(tmp_path)
    assert len(bank) == 2
    assert bank.ids == ["dtd/banded/x.png", "dtd/banded/y.jpg"]
    assert bank.textures[0].max() == 1.0 and bank.textures[1].shape == (80, 80, 3)


def test_single_texture(tmp_path):
    Image.fromarray(np.zeros((64, 64, 3), np.uint8)).save(tmp_path / "t.png")
    assert len(load_texture_bank(tmp_path)) == 1


def test_empty_texture_dir_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_texture_bank(tmp_path)
    with pytest.raises(ConfigError):
        TextureBank([], [])


def test_toy_textures_and_cache_roundtrip(tmp_path):
    bank = generate_toy_textures(0, n=10)
    assert len(bank) == 10
    assert all(t.shape == (64, 64, 3) and t.min() >= 0 and t.max() <= 1 for t in bank.textures)
    save_texture_bank(tmp_path / "t.npz", bank)
    again = load_texture_cache(tmp_path / "t.npz")
    assert again.ids == bank.ids
    assert max(np.abs(a - b).max() for a, b in zip(again.textures, bank.textures)) <= 0.5 / 255 + 1e-7


# ---------------------------------------------------------------- toy scenes

def test_toy_scene_is_deterministic():
    cfg = SceneConfig(n_objects=(3, 3))
    a, b = generate_toy_scene(7, cfg), generate_toy_scene(7, cfg)
    assert np.array_equal(a.image, b.image) and a.annotations == b.annotations
    assert len(a.annotations) == 3


def test_empty_scene():
    s = generate_toy_scene(1, SceneConfig(n_objects=(0, 0), distractors=(0, 0)))
    assert s.annotations == [] and s.image.shape == (128, 128, 3)


def test_size_range_below_filter_is_config_error():
    from uavpatch.datasets import DEFAULT_STYLES, VehicleStyle
    tiny = (VehicleStyle((1, 0, 0), 2.0, (0.0001, 0.0002)),) + DEFAULT_STYLES[1:]
    with pytest.raises(ConfigError):
        generate_toy_scene(0, SceneConfig(styles=tiny))


def test_generated_annotations_survive_filter():
    samples = generate_toy_dataset(0, 500)
    kept = filter_small_objects(samples)
    assert sum(len(s.annotations) for s in kept) == sum(len(s.annotations) for s in samples)


@pytest.mark.parametrize("seed", range(20))
def test_boxes_exactly_bound_vehicles(seed):
    s = generate_toy_scene(seed, SceneConfig(background="flat", distractors=(0, 0)))
    bg = np.float32(0.45 * 2 - 1)
    painted = np.any(np.abs(s.image - bg) > 1e-6, axis=2)
    covered = np.zeros_like(painted)
    for a in s.annotations:
        b = a.box
        x, y, w, h = int(b.x_left), int(b.y_top), int(b.width), int(b.height)
        assert (x, y, w, h) == (b.x_left, b.y_top, b.width, b.height)
        covered[y:y + h, x:x + w] = True
        # a sprite's first and last rows and columns carry body colour
        assert painted[y, x:x + w].any() and painted[y + h - 1, x:x + w].any()
        assert painted[y:y + h, x].any() and painted[y:y + h, x + w - 1].any()
    assert np.array_equal(painted & ~covered, np.zeros_like(painted))


def test_distractors_are_not_annotated():
    plain = generate_toy_scene(3, SceneConfig(background="flat", distractors=(0, 0), n_objects=(0, 0)))
    with_d = generate_toy_scene(3, SceneConfig(background="flat", distractors=(2, 2), n_objects=(0, 0)))
    assert with_d.annotations == [] and plain.annotations == []
    assert not np.array_equal(plain.image, with_d.image)


def test_dataset_scenes_independent_of_length():
    a = generate_toy_dataset(5, 3)
    b = generate_toy_dataset(5, 6)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image)


def test_sample_cache_roundtrip(tmp_path):
    samples = generate_toy_dataset(0, 4)
    samples[0].annotations.append(Annotation(BoundingBox(1.5, 2.5, 3.25, 4.0), IGNORE_CLASS, True))
    save_samples(tmp_path / "s.npz", samples)
    back = load_samples(tmp_path / "s.npz")
    for a, b in zip(samples, back):
        assert a.annotations == b.annotations and a.source_id == b.source_id
        assert a.original_size == b.original_size
        assert np.max(np.abs(a.image - b.image)) <= 1 / 127.5 / 2 + 1e-6
