import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advart import tensorgrad as tg
from advart.imaging import builtin_artwork, ssim
from advart.patchops import (
    IDENTITY,
    BoundingBox,
    EOTConfig,
    PatchError,
    TransformParams,
    apply_patch,
    color_jitter,
    init_patch,
    patch_scene,
    patch_side,
    place_patch,
    sample_transform,
)


def _box_for_side(side_px, hw=(64, 64), cx=0.5, cy=0.5, ratio=0.5):
    """Square box whose ratio*sqrt(area) equals ``side_px``."""
    s = side_px / ratio
    return BoundingBox(cx, cy, s / hw[1], s / hw[0])


# --- init -----------------------------------------------------------------


def test_init_from_target_identity():
    art = builtin_artwork("sunset", 32)
    c = init_patch(art, 32)
    np.testing.assert_array_equal(c.pixels, art)
    assert ssim(c.pixels, c.target) == pytest.approx(1.0, abs=1e-12)


def test_init_random_reproducible():
    a = init_patch(None, 20, "uniform-random", seed=4).pixels
    b = init_patch(None, 20, "uniform-random", seed=4).pixels
    np.testing.assert_array_equal(a, b)
    assert a.shape == (20, 20, 3) and 0 <= a.min() and a.max() <= 1


def test_init_errors():
    with pytest.raises(PatchError, match="16"):
        init_patch(builtin_artwork("waves"), 15)
    with pytest.raises(PatchError):
        init_patch(None, 32, "from-target")
    with pytest.raises(PatchError):
        init_patch(None, 32, "sparkly")


# --- sampling -------------------------------------------------------------


def test_all_disabled_is_identity():
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert sample_transform(rng, EOTConfig.none()) == IDENTITY


def test_angle_statistics():
    rng = np.random.default_rng(11)
    cfg = EOTConfig.from_components(["rotation"])
    angles = np.array([sample_transform(rng, cfg).angle for _ in range(100_000)])
    assert -20 <= angles.min() <= -19 and 19 <= angles.max() <= 20
    assert abs(angles.mean()) < 0.5


def test_ranges_respected():
    rng = np.random.default_rng(2)
    for _ in range(2000):
        p = sample_transform(rng, EOTConfig())
        assert 0.8 <= p.scale_jitter <= 1.2
        assert -20 <= p.angle <= 20
        assert 0.8 <= p.contrast <= 1.2
        assert -0.1 <= p.brightness <= 0.1
        assert p.noise_amp == 0.1


def test_same_seed_same_params():
    a = [sample_transform(np.random.default_rng(5), EOTConfig()) for _ in range(2)]
    assert a[0] == a[1]


def test_from_components_rejects_unknown():
    with pytest.raises(PatchError):
        EOTConfig.from_components(["scale", "blur"])


# --- placement ------------------------------------------------------------


def test_identity_placement_is_pixel_exact(rng):
    patch = rng.uniform(size=(16, 16, 3))
    # box centre on a pixel boundary so the patch lands on whole pixels
    box = _box_for_side(16, cx=0.5, cy=0.5)
    warped, mask = place_patch(tg.Tensor(patch), IDENTITY, box, (64, 64), 0.5)
    np.testing.assert_allclose(warped.data[24:40, 24:40], patch, atol=1e-12)
    m = mask.data[..., 0]
    assert np.all(m[24:40, 24:40] == 1.0)
    m2 = m.copy()
    m2[24:40, 24:40] = 0
    assert np.all(m2 == 0)


def test_mask_area_formula():
    for ratio, (bw, bh), jitter in ((0.3, (0.3, 0.6), 1.0), (0.2, (0.5, 0.5), 1.15), (0.25, (0.2, 0.7), 0.85)):
        box = BoundingBox(0.5, 0.5, bw, bh)
        p = TransformParams(scale_jitter=jitter)
        _, mask = place_patch(tg.Tensor(np.ones((32, 32, 3))), p, box, (128, 128), ratio)
        expect = ratio**2 * bw * bh * 128 * 128 * jitter**2
        assert mask.data.sum() == pytest.approx(expect, rel=0.02)


def test_disjoint_boxes_masks_do_not_overlap():
    a = BoundingBox(0.2, 0.5, 0.2, 0.4)
    b = BoundingBox(0.8, 0.5, 0.2, 0.4)
    patch = tg.Tensor(np.ones((16, 16, 3)))
    _, ma = place_patch(patch, IDENTITY, a, (100, 100), 0.2)
    _, mb = place_patch(patch, IDENTITY, b, (100, 100), 0.2)
    assert np.sum(ma.data * mb.data) == 0.0


def test_patch_side_formula():
    assert patch_side(BoundingBox(0.5, 0.5, 0.25, 0.5), (160, 160), 0.2) == pytest.approx(0.2 * np.sqrt(40 * 80))


def test_off_image_raises():
    with pytest.raises(PatchError):
        place_patch(tg.Tensor(np.ones((16, 16, 3))), IDENTITY, BoundingBox(3.0, 3.0, 0.1, 0.1), (64, 64), 0.3)


def test_mask_in_unit_interval_under_rotation():
    _, mask = place_patch(tg.Tensor(np.ones((16, 16, 3))), TransformParams(angle=17.0), BoundingBox(0.5, 0.5, 0.4, 0.4), (64, 64), 0.5)
    assert mask.data.min() >= 0 and mask.data.max() <= 1 + 1e-12


# --- jitter and compositing -----------------------------------------------


def test_color_jitter_examples():
    mask = tg.Tensor(np.ones((2, 2, 1)))
    x = tg.Tensor(np.full((2, 2, 3), 0.5))
    np.testing.assert_array_equal(color_jitter(x, IDENTITY, mask).data, x.data)
    out = color_jitter(x, TransformParams(contrast=1.2, brightness=0.1), mask)
    np.testing.assert_allclose(out.data, 0.7, atol=1e-15)
    hi = color_jitter(tg.Tensor(np.full((2, 2, 3), 0.95)), TransformParams(contrast=1.2, brightness=0.1), mask)
    assert np.all(hi.data == 1.0)


def test_color_jitter_only_on_support():
    mask = np.zeros((4, 4, 1))
    mask[1:3, 1:3] = 1
    x = tg.Tensor(np.zeros((4, 4, 3)))
    out = color_jitter(x, TransformParams(brightness=0.1, noise_seed=3, noise_amp=0.1), tg.Tensor(mask))
    assert np.all(out.data[mask[..., 0] == 0] == 0)


def test_apply_patch_examples(rng):
    img = rng.uniform(size=(5, 5, 3))
    pw = rng.uniform(size=(5, 5, 3))
    np.testing.assert_array_equal(apply_patch(img, pw, np.zeros((5, 5, 1))).data, img)
    np.testing.assert_array_equal(apply_patch(img, pw, np.ones((5, 5, 1))).data, pw)
    half = apply_patch(np.zeros((3, 3, 3)), np.ones((3, 3, 3)), np.full((3, 3, 1), 0.5)).data
    assert np.all(half == 0.5)


def test_apply_patch_dim_mismatch():
    with pytest.raises(PatchError):
        apply_patch(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)), np.zeros((4, 4, 1)))


def test_no_eot_pipeline_reproduces_patch(rng):
    patch = rng.uniform(size=(16, 16, 3))
    img = rng.uniform(size=(64, 64, 3))
    box = _box_for_side(16, cx=0.5, cy=0.5)
    out = patch_scene(img, tg.Tensor(patch), [box], [IDENTITY], 0.5).data
    np.testing.assert_allclose(out[24:40, 24:40], patch, atol=1e-10)


def test_gradient_locality(rng):
    patch = tg.Tensor(rng.uniform(size=(16, 16, 3)), requires_grad=True)
    img = rng.uniform(size=(48, 48, 3))
    box = BoundingBox(0.5, 0.5, 0.4, 0.5)
    p = TransformParams(1.1, 15.0, 9, 0.1, 1.1, 0.05)
    warped, mask = place_patch(patch, p, box, (48, 48), 0.4)
    out = apply_patch(img, color_jitter(warped, p, mask), mask)
    probe = np.zeros(out.shape)
    outside = mask.data[..., 0] == 0
    probe[outside] = 1.0
    tg.backward(tg.tsum(tg.mul(out, probe)))
    assert np.all(patch.grad == 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(-20, 20), st.floats(0.8, 1.2))
def test_compositing_is_convex(seed, angle, jitter):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(40, 40, 3))
    patch = rng.uniform(size=(16, 16, 3))
    warped, mask = place_patch(tg.Tensor(patch), TransformParams(jitter, angle), BoundingBox(0.5, 0.5, 0.5, 0.6), (40, 40), 0.4)
    out = apply_patch(img, warped, mask).data
    lo = np.minimum(img, warped.data) - 1e-12
    hi = np.maximum(img, warped.data) + 1e-12
    assert np.all((out >= lo) & (out <= hi))


def test_patch_scene_opacity_zero_is_identity(rng):
    img = rng.uniform(size=(32, 32, 3))
    out = patch_scene(img, tg.Tensor(rng.uniform(size=(16, 16, 3))), [BoundingBox(0.5, 0.5, 0.4, 0.6)], [IDENTITY], 0.3, opacity=0.0)
    np.testing.assert_array_equal(out.data, img)


def test_box_round_trip_and_validation():
    b = BoundingBox(0.25, 0.5, 0.1, 0.3, 1)
    assert BoundingBox.from_dict(b.to_dict()) == b
    with pytest.raises(PatchError):
        BoundingBox(0.5, 0.5, 0.0, 0.3)
    with pytest.raises(PatchError):
        BoundingBox(0.5, 0.5, 0.2, 1.5)
