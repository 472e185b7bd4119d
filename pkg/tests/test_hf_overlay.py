import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from ctrlsynth import hf_overlay as H


def stroke_fixture(n=64):
    """Dark 1-px strokes (period-3 stripes) on a bright label inside a gray image."""
    I = np.full((n, n, 3), 0.5, np.float32)
    M = np.zeros((n, n), np.float32)
    M[16:48, 12:52] = 1
    I[16:48, 12:52] = 0.9
    rows = np.arange(18, 46)
    for r in rows[rows % 3 == 0]:
        I[r, 16:48] = 0.1
    J = H.gaussian_blur(I, 17, 2.0)
    return I, J, M


def test_kernel_normalized_and_symmetric():
    k = H.gaussian_kernel1d()
    assert k.size == 17 and k.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_array_equal(k, k[::-1])
    assert H.DEFAULT_SIGMA == pytest.approx(16 / 6)


@pytest.mark.parametrize("size,sigma", [(16, 1.0), (0, 1.0), (5, 0.0)])
def test_kernel_rejects(size, sigma):
    with pytest.raises(ValueError):
        H.gaussian_kernel1d(size, sigma)


def test_constant_unchanged():
    P = np.full((20, 20, 3), 0.37, np.float32)
    np.testing.assert_allclose(H.gaussian_blur(P), P, atol=1e-7)
    assert np.abs(H.hf_decompose(P).high).max() < 1e-6


def test_impulse_gives_outer_product():
    P = np.zeros((41, 41), np.float32)
    P[20, 20] = 1.0
    k = H.gaussian_kernel1d()
    out = H.gaussian_blur(P)
    np.testing.assert_allclose(out[12:29, 12:29], np.outer(k, k), atol=1e-7)
    assert np.all(out[:12] == 0)


def test_matches_scipy_reflect():
    rng = np.random.default_rng(0)
    P = rng.uniform(0, 1, (23, 19, 3))
    k = H.gaussian_kernel1d()
    ref = ndimage.correlate1d(ndimage.correlate1d(P, k, axis=0, mode="reflect"), k, axis=1,
                              mode="reflect")
    np.testing.assert_allclose(H.gaussian_blur(P), ref, atol=1e-6)


def test_semigroup_interior():
    rng = np.random.default_rng(1)
    P = ndimage.gaussian_filter(rng.uniform(0, 1, (64, 64)), 1.0)
    s = 1.5
    twice = H.gaussian_blur(H.gaussian_blur(P, 17, s), 17, s)
    once = H.gaussian_blur(P, 17, s * np.sqrt(2))
    np.testing.assert_allclose(twice[16:-16, 16:-16], once[16:-16, 16:-16], atol=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 24), st.integers(1, 24))
def test_decomposition_identity(seed, h, w):
    P = np.random.default_rng(seed).uniform(0, 1, (h, w, 3)).astype(np.float32)
    fp = H.hf_decompose(P)
    assert np.abs(fp.low + fp.high - P).max() <= 1e-6


def test_frequency_ordering():
    y, x = np.mgrid[:64, :64]
    fine = (((x // 1) + (y // 1)) % 2).astype(np.float32)
    coarse = (((x // 16) + (y // 16)) % 2).astype(np.float32)
    assert np.abs(H.hf_decompose(fine).high).mean() > np.abs(H.hf_decompose(coarse).high).mean()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_zero_mask_is_identity(seed):
    rng = np.random.default_rng(seed)
    I = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
    J = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
    M = np.zeros((16, 16), np.float32)
    assert np.array_equal(H.overlay_raw(I, J, M), J)
    assert np.array_equal(H.overlay(I, J, M), J)


def test_full_mask_formula():
    rng = np.random.default_rng(2)
    I = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
    J = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
    M = np.ones((16, 16), np.float32)
    ref = H.hf_decompose(J).low + H.hf_decompose(I).high
    np.testing.assert_allclose(H.overlay_raw(I, J, M), ref, atol=1e-6)


def test_locality():
    rng = np.random.default_rng(3)
    I = rng.uniform(0, 1, (48, 48, 3)).astype(np.float32)
    J = rng.uniform(0, 1, (48, 48, 3)).astype(np.float32)
    M = np.zeros((48, 48), np.float32)
    M[20:26, 18:30] = 1
    out = H.overlay(I, J, M)
    band = ndimage.binary_dilation(M > 0, iterations=8)
    np.testing.assert_array_equal(out[~band], J[~band])


def test_affine_in_source():
    rng = np.random.default_rng(4)
    I1, I2, J = (rng.uniform(0, 1, (16, 16, 3)).astype(np.float32) for _ in range(3))
    M = (rng.uniform(size=(16, 16)) > 0.5).astype(np.float32)
    a = 0.3
    lhs = H.overlay_raw(a * I1 + (1 - a) * I2, J, M)
    rhs = a * H.overlay_raw(I1, J, M) + (1 - a) * H.overlay_raw(I2, J, M)
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


def test_self_overlay_fixed_point():
    I, _, M = stroke_fixture()
    np.testing.assert_allclose(H.overlay(I, I, M), I, atol=1e-6)


def test_stroke_energy_restored():
    I, J, M = stroke_fixture()
    out = H.overlay(I, J, M)
    region = M > 0
    e_i, e_j, e_o = (H.hf_energy(P, region) for P in (I, J, out))
    assert e_j < 0.5 * e_i
    assert abs(e_o / e_i - 1.0) < 0.05


def test_rejects_bad_inputs():
    I = np.zeros((8, 8, 3), np.float32)
    with pytest.raises(ValueError):
        H.overlay(I, np.zeros((8, 9, 3), np.float32), np.zeros((8, 8)))
    with pytest.raises(ValueError):
        H.overlay(I, I, np.full((8, 8), 0.5))
    with pytest.raises(ValueError):
        H.overlay(I, I, np.zeros((4, 4)))


def test_clamp_logged(caplog):
    I = np.zeros((16, 16, 3), np.float32)
    I[8, 8] = 1.0
    J = np.full((16, 16, 3), 0.98, np.float32)
    M = np.ones((16, 16), np.float32)
    with caplog.at_level(logging.INFO, logger="ctrlsynth.hf_overlay"):
        out = H.overlay(I, J, M)
    assert out.max() <= 1.0 and out.min() >= 0.0
    assert any("clamped" in r.message for r in caplog.records)
