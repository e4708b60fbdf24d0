import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from uavpatch.datasets import (Annotation, BoundingBox, ImageSample, SceneConfig, generate_toy_scene,
                               generate_toy_textures)
from uavpatch.patching import (Patch, TransformRanges, TransformSample, apply_transform, footprint_mask,
                               footprint_origin, hsv_to_rgb, load_patch, patch_objects, patch_size_for,
                               place_patch, rgb_to_hsv, rotation_mask, sample_transform, save_patch)


def scene(seed=0, n=3):
    return generate_toy_scene(seed, SceneConfig(n_objects=(n, n), distractors=(0, 0)))


# ---------------------------------------------------------------- transform draws

def test_transform_ranges_monte_carlo():
    # draw 10^5 scalar fields at once; noise checked on a sample of full arrays
    rng = np.random.default_rng(0)
    draws = [sample_transform(rng, "train", patch_side=2) for _ in range(100_000)]
    r = TransformRanges()
    hue = np.array([d.hue_shift for d in draws])
    con = np.array([d.contrast for d in draws])
    sat = np.array([d.saturation for d in draws])
    bri = np.array([d.brightness for d in draws])
    rot = np.array([d.rotation_deg for d in draws])
    scale = np.array([d.scale_frac for d in draws])
    off = np.array([d.offset for d in draws])
    noise = np.stack([d.noise for d in draws])
    assert np.abs(hue).max() <= 0.08 and np.abs(hue).max() > 0.079
    assert con.min() >= 0.5 and con.max() <= 1.5
    assert sat.min() >= 0.5 and sat.max() <= 1.5
    assert np.abs(bri).max() <= 0.3 and abs(bri.mean()) <= 0.01
    assert np.abs(rot).max() <= 20.0 and np.abs(rot).max() > 19.9
    assert np.abs(noise).max() <= 0.1
    assert scale.min() >= r.train_scale[0] and scale.max() <= r.train_scale[1]
    assert off.min() >= 0 and off.max() <= 1
    flips = np.array([(d.flip_h, d.flip_v) for d in draws])
    assert abs(flips.mean() - 0.5) < 0.01


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_eval_mode_scale_is_fixed(seed):
    t = sample_transform(np.random.default_rng(seed), "eval", patch_side=4)
    assert t.scale_frac == 0.20 and t.offset == (0.5, 0.5)


def test_same_seed_same_draw():
    a = sample_transform(np.random.default_rng(3))
    b = sample_transform(np.random.default_rng(3))
    assert a.hue_shift == b.hue_shift and a.rotation_deg == b.rotation_deg and np.array_equal(a.noise, b.noise)


def test_bad_mode():
    with pytest.raises(ValueError):
        sample_transform(np.random.default_rng(0), "test")


# ---------------------------------------------------------------- sizes and origins

@pytest.mark.parametrize("w,h,frac,side", [(40, 40, 0.25, 20), (100, 50, 0.20, 31), (3, 3, 0.20, 0)])
def test_patch_size_examples(w, h, frac, side):
    assert patch_size_for(BoundingBox(0, 0, w, h), frac) == side


@settings(max_examples=300, deadline=None)
@given(st.floats(0.5, 200), st.floats(0.5, 200), st.floats(0.01, 0.99))
def test_patch_size_never_exceeds_box(w, h, frac):
    side = patch_size_for(BoundingBox(0, 0, w, h), frac)
    assert side == 0 or 2 <= side <= min(w, h)


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 50), st.floats(0, 50), st.floats(2, 60), st.floats(2, 60), st.integers(2, 60),
       st.floats(0, 1), st.floats(0, 1))
def test_footprint_origin_inside_box(x, y, w, h, side, ox, oy):
    box = BoundingBox(x, y, w, h)
    o = footprint_origin(box, side, (ox, oy))
    if o is not None:
        assert o[0] >= box.x_left and o[1] >= box.y_top
        assert o[0] + side <= box.x_right and o[1] + side <= box.y_bottom


# ---------------------------------------------------------------- photometric ops

def test_hsv_roundtrip():
    x = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(0))
    assert torch.allclose(hsv_to_rgb(rgb_to_hsv(x)), x, atol=1e-6)


def test_identity_transform_is_exact():
    p = Patch(np.random.default_rng(0).uniform(0, 1, (16, 16, 3)).astype(np.float32))
    grid, mask = apply_transform(p, TransformSample.identity(16), 16)
    assert np.array_equal(grid, p.pixels) and mask.all()


def test_identity_transform_resizes():
    p = Patch(np.full((16, 16, 3), 0.3, np.float32))
    grid, _ = apply_transform(p, TransformSample.identity(16), 8)
    assert grid.shape == (8, 8, 3) and np.allclose(grid, 0.3, atol=1e-6)


def test_hue_shift_leaves_gray_unchanged():
    p = Patch.gray(8)
    t = TransformSample.identity(8)
    t.hue_shift = 0.05
    grid, _ = apply_transform(p, t, 8)
    assert np.allclose(grid, 0.5, atol=1e-7)


def test_brightness_closed_form():
    t = TransformSample.identity(8)
    t.brightness = 0.3
    grid, _ = apply_transform(Patch.gray(8), t, 8)
    assert np.allclose(grid, 0.8, atol=1e-6)


def test_contrast_closed_form():
    px = np.zeros((4, 4, 3), np.float32)
    px[:2] = 0.2
    px[2:] = 0.6
    t = TransformSample.identity(4)
    t.contrast = 1.5
    grid, _ = apply_transform(Patch(px), t, 4)
    assert np.allclose(grid[:2], 0.1, atol=1e-6) and np.allclose(grid[2:], 0.7, atol=1e-6)


def test_flip():
    px = np.random.default_rng(1).uniform(0, 1, (8, 8, 3)).astype(np.float32)
    t = TransformSample.identity(8)
    t.flip_h = True
    grid, _ = apply_transform(Patch(px), t, 8)
    assert np.array_equal(grid, px[:, ::-1])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 40))
def test_transform_output_in_unit_range(seed, side):
    rng = np.random.default_rng(seed)
    p = Patch(rng.uniform(0, 1, (16, 16, 3)).astype(np.float32))
    t = sample_transform(rng, "train", 16, TransformRanges(brightness=0.9, noise=0.5))
    grid, mask = apply_transform(p, t, side)
    assert grid.shape == (side, side, 3) and mask.shape == (side, side)
    assert grid.min() >= 0 and grid.max() <= 1


def test_rotation_mask_shape():
    assert rotation_mask(20, 0.0).all()
    m = rotation_mask(20, 20.0)
    assert not m.all() and m[10, 10] and not m[0, 0]


# ---------------------------------------------------------------- placement

def test_place_zero_size_is_identity():
    img = np.random.default_rng(0).uniform(-1, 1, (16, 16, 3)).astype(np.float32)
    out = place_patch(img, np.zeros((0, 0, 3), np.float32), np.zeros((0, 0), bool), BoundingBox(0, 0, 8, 8), (0, 0))
    assert np.array_equal(out, img)


def test_place_full_white():
    img = np.zeros((16, 16, 3), np.float32)
    out = place_patch(img, np.ones((4, 4, 3), np.float32), np.ones((4, 4), bool), BoundingBox(2, 2, 8, 8), (3, 3))
    assert np.all(out[3:7, 3:7] == 1.0)
    out[3:7, 3:7] = 0
    assert np.array_equal(out, img)


def test_place_outside_box_rejected():
    img = np.zeros((16, 16, 3), np.float32)
    with pytest.raises(ValueError):
        place_patch(img, np.ones((4, 4, 3), np.float32), np.ones((4, 4), bool), BoundingBox(2, 2, 4, 4), (3, 3))


def test_rotated_placement_changes_only_footprint():
    img = np.random.default_rng(0).uniform(-1, 1, (32, 32, 3)).astype(np.float32)
    t = TransformSample.identity(16)
    t.rotation_deg = 20.0
    grid, mask = apply_transform(Patch.gray(16), t, 16)
    out = place_patch(img, grid, mask, BoundingBox(4, 4, 24, 24), (8, 8))
    full = np.zeros((32, 32), bool)
    full[8:24, 8:24] = mask
    for y in range(32):
        for x in range(32):
            if full[y, x]:
                assert np.allclose(out[y, x], 0.0, atol=1e-6)
            else:
                assert np.array_equal(out[y, x], img[y, x])


# ---------------------------------------------------------------- per-object patching

def test_no_annotations_unchanged():
    s = ImageSample(np.zeros((32, 32, 3), np.float32), [])
    out, plan = patch_objects(s, "gray", np.random.default_rng(0))
    assert plan == [] and np.array_equal(out.image, s.image)


def test_ignored_objects_not_patched():
    s = scene(1, 2)
    s.annotations[0] = Annotation(s.annotations[0].box, s.annotations[0].class_id, True)
    _, plan = patch_objects(s, "gray", np.random.default_rng(0))
    assert [ap.index for ap in plan] == [1]


def test_gray_three_objects_regions_inside_boxes():
    s = scene(2, 3)
    out, plan = patch_objects(s, "gray", np.random.default_rng(0), "eval")
    assert len(plan) == 3
    changed = np.any(out.image != s.image, axis=2)
    for ap in plan:
        b = s.annotations[ap.index].box
        m = np.zeros_like(changed)
        m[ap.origin[1]:ap.origin[1] + ap.side, ap.origin[0]:ap.origin[0] + ap.side] = True
        assert (changed & m).any()
        assert ap.origin[0] >= b.x_left and ap.origin[0] + ap.side <= b.x_right
    assert not (changed & ~footprint_mask(128, 128, plan)).any()


def test_eval_side_matches_twenty_percent():
    s = scene(4, 3)
    _, plan = patch_objects(s, "gray", np.random.default_rng(0), "eval")
    for ap in plan:
        assert ap.side == patch_size_for(s.annotations[ap.index].box, 0.2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 2 ** 32 - 1), st.sampled_from(["gray", "random", "texture", "patch"]),
       st.sampled_from(["train", "eval"]))
def test_outside_footprints_bit_identical(scene_seed, seed, kind, mode):
    s = scene(scene_seed, 4)
    rng = np.random.default_rng(seed)
    source = {"gray": "gray", "random": "random", "texture": generate_toy_textures(1, n=5),
              "patch": Patch.random(np.random.default_rng(seed), 32)}[kind]
    out, plan = patch_objects(s, source, rng, mode, patch_side=32)
    fp = footprint_mask(128, 128, plan)
    assert np.array_equal(out.image[~fp], s.image[~fp])
    assert out.image.min() >= -1 and out.image.max() <= 1
    for ap in plan:
        b = s.annotations[ap.index].box
        x0, y0 = ap.origin
        assert x0 >= b.x_left and y0 >= b.y_top and x0 + ap.side <= b.x_right and y0 + ap.side <= b.y_bottom


def test_patching_deterministic():
    s = scene(5, 3)
    a, _ = patch_objects(s, "random", np.random.default_rng(9))
    b, _ = patch_objects(s, "random", np.random.default_rng(9))
    assert a.image.tobytes() == b.image.tobytes()


def test_random_source_fresh_per_object():
    s = scene(6, 3)
    _, plan = patch_objects(s, "random", np.random.default_rng(0))
    assert not np.array_equal(plan[0].pixels, plan[1].pixels)


def test_gradient_reaches_shared_patch():
    from uavpatch.patching import image_tensor, plan_patches, render_plan
    s = scene(7, 2)
    patch = torch.rand(3, 16, 16, requires_grad=True)
    plan = plan_patches(s, "shared", np.random.default_rng(0), patch_side=16)
    render_plan(image_tensor(s), plan, patch).sum().backward()
    assert patch.grad is not None and patch.grad.abs().sum() > 0


# ---------------------------------------------------------------- artifacts

def test_patch_clamped_and_validated():
    assert Patch(np.full((4, 4, 3), 2.0)).pixels.max() == 1.0
    with pytest.raises(ValueError):
        Patch(np.zeros((4, 5, 3)))
    with pytest.raises(ValueError):
        Patch(np.zeros((4, 4, 3)), source="sticker")


def test_patch_save_load_exact(tmp_path):
    p = Patch(np.random.default_rng(0).uniform(0, 1, (8, 8, 3)), "adversarial", "abc", {"steps": 3})
    save_patch(p, tmp_path / "p.png")
    q = load_patch(tmp_path / "p.png")
    assert np.array_equal(p.pixels, q.pixels) and q.source == "adversarial" and q.meta == {"steps": 3}
