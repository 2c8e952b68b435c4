import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from mixsr.imaging import (
    Augmentation,
    ImageError,
    PlanarImage,
    bicubic_resize,
    cubic_kernel,
    degrade,
    dihedral,
    extract_patch_pairs,
    load_image,
    luminance,
    modcrop,
    resize_weights,
    rgb_to_ycbcr,
    sample_patch_arrays,
    sample_patches,
    save_image,
    shave_border,
    stack_luminance,
    to_uint8,
    ycbcr_to_rgb,
)

import oracles


def test_planar_image_clamps_and_casts():
    img = PlanarImage(np.array([[-0.5, 0.5], [1.5, 1.0]]))
    assert img.data.dtype == np.float32
    np.testing.assert_array_equal(img.data, [[0, 0.5], [1, 1]])
    assert (img.height, img.width, img.channels) == (2, 2, 1)
    with pytest.raises(ValueError):
        PlanarImage(np.zeros((2, 2, 2)))


def test_cubic_kernel_values():
    np.testing.assert_allclose(cubic_kernel(np.array([0.0, 1.0, 2.0, 0.5])), [1.0, 0.0, 0.0, 0.5625])
    for x in np.linspace(-2.5, 2.5, 41):
        assert cubic_kernel(np.array([x]))[0] == pytest.approx(oracles.cubic(x))


@pytest.mark.parametrize("src,dst", [((9, 7), (18, 14)), ((12, 10), (6, 5)), ((10, 12), (4, 5)), ((8, 8), (24, 24)), ((7, 9), (10, 6))])
def test_bicubic_matches_scalar_reference(rng, src, dst):
    img = rng.uniform(size=src)
    got = bicubic_resize(PlanarImage(img), dst[1], dst[0])
    want = np.clip(oracles.bicubic(img, dst[1], dst[0]), 0, 1)
    np.testing.assert_allclose(got.data, want, atol=1e-6)


def test_bicubic_upscale_agrees_with_pillow_interior(rng):
    img = rng.uniform(size=(20, 24)).astype(np.float32)
    ours = bicubic_resize(PlanarImage(img), 48, 40, antialias=True).data
    pil = np.asarray(Image.fromarray(img).resize((48, 40), Image.BICUBIC))
    np.testing.assert_allclose(ours[4:-4, 4:-4], np.clip(pil[4:-4, 4:-4], 0, 1), atol=1e-6)


def test_resize_weights_rows_sum_to_one():
    for n_in, n_out in [(10, 20), (20, 10), (9, 4), (5, 5)]:
        idx, w = resize_weights(n_in, n_out)
        np.testing.assert_allclose(w.sum(axis=1), 1.0)
        assert idx.min() >= 0 and idx.max() < n_in


def test_resize_preserves_constants():
    img = PlanarImage(np.full((11, 13), 0.3))
    for size in [(26, 22), (5, 4), (13, 11)]:
        np.testing.assert_allclose(bicubic_resize(img, *size).data, np.float32(0.3), atol=1e-6)


def test_antialias_widens_support_on_downscale(rng):
    idx_plain, _ = resize_weights(32, 8, antialias=False)
    idx_aa, _ = resize_weights(32, 8, antialias=True)
    assert idx_plain.shape[1] == 4
    assert idx_aa.shape[1] == 16
    img = rng.uniform(size=(40, 48)).astype(np.float32)
    ours = bicubic_resize(PlanarImage(img), 24, 20).data
    pil = np.asarray(Image.fromarray(img).resize((24, 20), Image.BICUBIC))
    np.testing.assert_allclose(ours[3:-3, 3:-3], np.clip(pil[3:-3, 3:-3], 0, 1), atol=1e-6)
    with pytest.raises(ValueError):
        bicubic_resize(PlanarImage(img), 0, 3)


def test_ycbcr_matches_scalar_formula(rng):
    rgb = rng.uniform(size=(4, 5, 3))
    ycc = rgb_to_ycbcr(PlanarImage(rgb)).data * 255
    for i in range(4):
        for j in range(5):
            np.testing.assert_allclose(ycc[i, j], oracles.ycbcr(*rgb[i, j]), atol=1e-4)


def test_luminance_is_studio_swing():
    black = luminance(PlanarImage(np.zeros((2, 2, 3))))
    white = luminance(PlanarImage(np.ones((2, 2, 3))))
    np.testing.assert_allclose(black.data, np.float32(16 / 255))
    np.testing.assert_allclose(white.data, np.float32(235 / 255), atol=1e-6)
    grey = PlanarImage(np.full((2, 2), 0.4))
    assert luminance(grey) is grey


def test_ycbcr_roundtrip(rng):
    rgb = PlanarImage(rng.uniform(size=(6, 6, 3)))
    back = ycbcr_to_rgb(rgb_to_ycbcr(rgb))
    np.testing.assert_allclose(back.data, rgb.data, atol=1e-5)
    with pytest.raises(ValueError):
        rgb_to_ycbcr(PlanarImage(np.zeros((2, 2))))


@pytest.mark.parametrize("ext,channels", [(".png", 1), (".png", 3), (".pgm", 1), (".ppm", 3)])
def test_save_load_roundtrip(tmp_path, rng, ext, channels):
    shape = (5, 7) if channels == 1 else (5, 7, 3)
    img = PlanarImage(rng.integers(0, 256, size=shape) / 255.0)
    path = tmp_path / f"img{ext}"
    save_image(img, path)
    np.testing.assert_array_equal(to_uint8(load_image(path)), to_uint8(img))


def test_load_errors(tmp_path):
    with pytest.raises(ImageError, match="missing.png"):
        load_image(tmp_path / "missing.png")
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(ImageError):
        load_image(tmp_path / "junk.png")
    Image.fromarray(np.zeros((4, 4), np.uint16)).save(tmp_path / "deep.png")
    with pytest.raises(ImageError, match="8-bit"):
        load_image(tmp_path / "deep.png")
    with pytest.raises(ImageError):
        save_image(PlanarImage(np.zeros((2, 2))), tmp_path / "x.jpg")
    with pytest.raises(ImageError):
        save_image(PlanarImage(np.zeros((2, 2))), tmp_path / "x.ppm")


def test_load_palette_and_alpha_images(tmp_path):
    Image.new("RGBA", (3, 3), (10, 20, 30, 40)).save(tmp_path / "a.png")
    assert load_image(tmp_path / "a.png").channels == 3
    Image.new("P", (3, 3)).save(tmp_path / "p.png")
    assert load_image(tmp_path / "p.png").channels == 3


def test_to_uint8_rounds_half_up():
    img = PlanarImage(np.array([[0.5 / 255, 1.5 / 255], [2.4999 / 255, 1.0]]))
    np.testing.assert_array_equal(to_uint8(img), [[1, 2], [2, 255]])


def test_modcrop_degrade_shave():
    hr = PlanarImage(np.random.default_rng(0).uniform(size=(13, 17)))
    assert modcrop(hr, 3).shape == (12, 15)
    lr, up = degrade(hr, 3)
    assert lr.shape == (4, 5) and up.shape == (12, 15)
    assert shave_border(up, 3).shape == (6, 9)
    assert shave_border(up, 0) is up
    with pytest.raises(ValueError):
        shave_border(up, 6)
    with pytest.raises(ValueError):
        modcrop(PlanarImage(np.zeros((2, 2))), 3)


def test_dihedral_group_is_complete():
    a = np.arange(9).reshape(3, 3)
    forms = {dihedral(a, k).tobytes() for k in range(8)}
    assert len(forms) == 8


@settings(max_examples=16, deadline=None)
@given(k=st.integers(0, 7), seed=st.integers(0, 1000))
def test_resize_commutes_with_dihedral(k, seed):
    img = np.random.default_rng(seed).uniform(size=(12, 12))
    a = bicubic_resize(PlanarImage(dihedral(img, k)), 6, 6).data
    b = dihedral(bicubic_resize(PlanarImage(img), 6, 6).data, k)
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_patch_index_counts():
    corpus = [PlanarImage(np.zeros((20, 24)))]
    assert len(extract_patch_pairs(corpus, scale=2, patch_size=8)) == 2 * 3
    assert len(extract_patch_pairs(corpus, scale=2, patch_size=8, stride=4)) == 4 * 5
    assert len(extract_patch_pairs(corpus, scale=2, patch_size=8, augment=Augmentation(dihedral=True))) == 6 * 8
    scaled = extract_patch_pairs(corpus, scale=2, patch_size=8, augment=Augmentation(scales=(0.5,)))
    assert {v for v, *_ in scaled} == {0, 1}


def test_sampled_patches_are_aligned(camera):
    crop = PlanarImage(camera.data[:64, :64])
    lr_full, up = degrade(crop, 2)
    for pair in sample_patches([crop], scale=2, patch_size=16, shuffle=False):
        assert pair.lr.shape == pair.hr.shape == (16, 16)
    lr0, hr0 = next(sample_patch_arrays([crop], scale=2, patch_size=16, shuffle=False))
    np.testing.assert_array_equal(lr0, up.data[:16, :16])
    np.testing.assert_array_equal(hr0, crop.data[:16, :16])


def test_sampler_is_seeded_and_reshuffles_each_epoch():
    corpus = [PlanarImage(np.random.default_rng(1).uniform(size=(32, 32)))]
    take = lambda seed: [hr.tobytes() for _, hr in sample_patch_arrays(corpus, 2, 8, seed=seed, epochs=2)]
    a, b, c = take(3), take(3), take(4)
    assert a == b and a != c
    assert len(a) == 32
    assert sorted(a[:16]) == sorted(a[16:]) and a[:16] != a[16:]


def test_sampler_rejects_small_or_empty_corpus():
    with pytest.raises(ValueError):
        next(sample_patch_arrays([], 2, 8))
    with pytest.raises(ValueError):
        next(sample_patch_arrays([PlanarImage(np.zeros((6, 6)))], 2, 8))


def test_stack_luminance():
    batch = stack_luminance([np.zeros((3, 4)), np.ones((3, 4))])
    assert batch.shape == (2, 1, 3, 4) and batch.dtype == np.float32
