import math

import numpy as np
import pytest

from aeic import tensor as T
from aeic.decoder import (Denoiser, DenoiserConfig, PixelDecoder, conditional_denoise_wrapper, one_step_denoise,
                          pixel_decode, reparameterize_direct)
from aeic.gradcheck import grad_check
from aeic.tensor import Tensor

from conftest import module_builder


def _perturb(module, rng, scale=0.3):
    for p in module.parameters():
        p.data[...] += (rng.standard_normal(p.shape) * scale).astype(p.dtype)


def test_zero_final_conv_gives_zero(rng):
    den = Denoiser(8, DenoiserConfig(), rng)
    out = one_step_denoise(Tensor(rng.standard_normal((1, 8, 16, 16)).astype(np.float32)), den)
    assert out.shape == (1, 8, 16, 16)
    assert not out.data.any()


def test_denoiser_features(rng):
    den = Denoiser(8, DenoiserConfig(width=16, depth=4), rng)
    l0, feats = den(Tensor(np.ones((1, 8, 4, 4), dtype=np.float32)), return_features=True)
    assert len(feats) == 4 and all(f.shape == (1, 16, 4, 4) for f in feats)


def test_denoiser_gradients(rng):
    den = Denoiser(3, DenoiserConfig(width=4, depth=2), rng)
    _perturb(den.conv_out, rng)
    res = grad_check(module_builder(den, (1, 3, 4, 4)))
    assert res.passed and res.skipped < 0.05 * res.checked, res


def test_wrapper_formula():
    out = conditional_denoise_wrapper(Tensor(np.ones((1, 1, 2, 2))), lambda v: T.scale(v, 0.0), 0.25)
    np.testing.assert_allclose(out.data, 2.0)


def test_wrapper_algebraic_zero(rng):
    a = 0.3
    l = Tensor(rng.standard_normal((1, 4, 3, 3)))
    out = conditional_denoise_wrapper(l, lambda v: T.scale(v, 1.0 / math.sqrt(1.0 - a)), a)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


@pytest.mark.parametrize("a", [0.0, 1.0, -0.1, 1.5])
def test_wrapper_rejects_bad_alpha(a):
    with pytest.raises(ValueError):
        conditional_denoise_wrapper(Tensor(np.ones((1, 1, 1, 1))), lambda v: v, a)
    with pytest.raises(ValueError):
        DenoiserConfig(alpha_bar_T=a)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("a", [0.05, 0.25, 0.9])
def test_reparameterized_direct_map_equals_wrapper(seed, a):
    rng = np.random.default_rng(seed)
    eps = Denoiser(8, DenoiserConfig(width=16, depth=3, alpha_bar_T=a), rng)
    _perturb(eps, rng)
    eps.astype(np.float64)
    direct = reparameterize_direct(eps, a)
    l_T = Tensor(rng.standard_normal((2, 8, 8, 8)))
    ref = conditional_denoise_wrapper(l_T, eps, a).data
    np.testing.assert_allclose(direct(l_T).data, ref, atol=1e-6, rtol=0)


def test_reparameterized_direct_map_float32(rng):
    eps = Denoiser(8, DenoiserConfig(width=16, depth=3), rng)
    _perturb(eps, rng, 0.05)
    direct = reparameterize_direct(eps, 0.25)
    l_T = Tensor(rng.standard_normal((1, 8, 8, 8)).astype(np.float32))
    ref = conditional_denoise_wrapper(l_T, eps, 0.25).data
    np.testing.assert_allclose(direct(l_T).data, ref, rtol=1e-5, atol=1e-5)


def test_pixel_decode_shapes_and_range(rng):
    dec = PixelDecoder(8, 32, True, rng)
    _perturb(dec, rng, 2.0)
    x = pixel_decode(Tensor(rng.standard_normal((1, 8, 16, 16)).astype(np.float32) * 5),
                     Tensor(np.zeros((1, 8, 16, 16), dtype=np.float32)), dec)
    assert x.shape == (1, 3, 64, 64)
    assert x.data.min() >= 0.0 and x.data.max() <= 1.0


def test_pixel_decode_zero_params_is_mid_gray(rng):
    dec = PixelDecoder(8, 32, True, rng)
    for p in dec.parameters():
        p.data[...] = 0
    z = Tensor(np.zeros((1, 8, 4, 4), dtype=np.float32))
    np.testing.assert_array_equal(pixel_decode(z, z, dec).data, 0.5)


def test_pixel_decode_shape_mismatch(rng):
    dec = PixelDecoder(8, 32, True, rng)
    with pytest.raises(T.ShapeError):
        pixel_decode(Tensor(np.zeros((1, 8, 4, 4))), Tensor(np.zeros((1, 8, 4, 5))), dec)


def test_lite_decoder_halves_width(rng):
    assert PixelDecoder(8, 32, True, rng).width == 16
    assert PixelDecoder(8, 32, False, rng).width == 32
    assert PixelDecoder(8, 32, True, rng).num_parameters() < PixelDecoder(8, 32, False, rng).num_parameters()


def test_dual_branch_offset_swap(rng):
    dec = PixelDecoder(4, 16, True, rng)
    _perturb(dec, rng)
    l0 = rng.standard_normal((1, 4, 8, 8))
    lr = rng.standard_normal((1, 4, 8, 8))
    c = 0.75
    a = pixel_decode(Tensor(l0 + c), Tensor(lr), dec).data
    b = pixel_decode(Tensor(l0), Tensor(lr + c), dec).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_pixel_decoder_gradients(rng):
    dec = PixelDecoder(2, 8, True, rng)
    _perturb(dec, rng, 0.2)
    res = grad_check(module_builder(dec, (1, 2, 3, 3)))
    assert res.passed and res.skipped < 0.1 * res.checked, res
