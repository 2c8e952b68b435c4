import math

import numpy as np
import pytest

from mixsr.imaging import PlanarImage
from mixsr.metrics import gaussian_window, psnr, quantize, ssim, ssim_map

import oracles


def synthetic_pairs(n=10, shape=(24, 20)):
    rng = np.random.default_rng(99)
    for _ in range(n):
        a = rng.uniform(size=shape)
        b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.2), size=shape), 0, 1)
        yield a, b


def test_quantize_rounds_half_up_and_clips():
    np.testing.assert_array_equal(quantize(np.array([[0.5 / 255, -1.0, 2.0]])), [[1, 0, 255]])
    with pytest.raises(ValueError):
        quantize(np.zeros((2, 2, 3)))


def test_psnr_uniform_one_level_difference():
    a = np.full((16, 16), 100 / 255)
    b = np.full((16, 16), 101 / 255)
    assert psnr(a, b) == pytest.approx(48.1308, abs=1e-4)


def test_psnr_identical_is_infinite():
    a = np.random.default_rng(0).uniform(size=(8, 8))
    assert psnr(a, a) == math.inf


def test_ssim_identity_is_exactly_one():
    a = np.random.default_rng(0).uniform(size=(20, 20))
    assert ssim(a, a) == 1.0


@pytest.mark.parametrize("pair", list(synthetic_pairs()), ids=[f"pair{i}" for i in range(10)])
def test_metrics_match_scalar_references(pair):
    a, b = pair
    assert psnr(a, b) == pytest.approx(oracles.psnr(a, b), abs=1e-6)
    assert ssim(a, b) == pytest.approx(oracles.ssim(a, b), abs=1e-6)


def test_metrics_accept_planar_images_and_check_shapes():
    a = PlanarImage(np.zeros((12, 12)))
    assert ssim(a, a) == 1.0
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 30)), np.zeros((10, 30)))


def test_gaussian_window():
    g = gaussian_window()
    assert g.size == 11 and g.sum() == pytest.approx(1.0)
    assert np.argmax(g) == 5


def test_ssim_map_shape_is_valid_region():
    assert ssim_map(np.zeros((20, 15)), np.zeros((20, 15))).shape == (10, 5)


def test_ssim_decreases_with_noise():
    rng = np.random.default_rng(1)
    a = rng.uniform(size=(32, 32))
    scores = [ssim(a, np.clip(a + rng.normal(0, s, a.shape), 0, 1)) for s in (0.01, 0.05, 0.2)]
    assert scores[0] > scores[1] > scores[2]
