import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import laplacian_4

from splatloc.errors import DegenerateMaskError, InvalidArgumentError
from splatloc.photometry import (
    LUMA,
    ReliabilityMask,
    TauPolicy,
    build_mask,
    downsample,
    laplacian,
    laplacian_scores,
    mask_from_render,
    patch_means,
    photometric_l1,
)


def test_l1_identical_and_full_range():
    rng = np.random.default_rng(0)
    a = rng.random((8, 8, 3))
    loss, w = photometric_l1(a, a)
    assert loss.value == 0.0 and not w.any()
    loss, _ = photometric_l1(np.zeros((4, 5, 3)), np.ones((4, 5, 3)))
    assert loss.value == 1.0 and loss.pixel_count == 20


def test_l1_masked_matches_direct_sum():
    rng = np.random.default_rng(1)
    q, r = rng.random((16, 20, 3)), rng.random((16, 20, 3))
    m = np.zeros((16, 20), dtype=bool)
    m[:, :10] = True
    loss, w = photometric_l1(q, r, ReliabilityMask(m, 4, np.zeros((4, 5)), 0.0))
    total, count = 0.0, 0
    for y in range(16):
        for x in range(10):
            for c in range(3):
                total += abs(r[y, x, c] - q[y, x, c])
                count += 1
    assert abs(loss.value - total / count) < 1e-14
    assert not w[:, 10:].any()


def test_all_ones_mask_equals_unmasked():
    rng = np.random.default_rng(2)
    q, r = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    a, wa = photometric_l1(q, r)
    b, wb = photometric_l1(q, r, ReliabilityMask.all_ones((16, 16)))
    assert a.value == b.value and np.array_equal(wa, wb)


def test_l1_errors():
    with pytest.raises(InvalidArgumentError):
        photometric_l1(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    empty = ReliabilityMask(np.zeros((4, 4), dtype=bool), 4, np.zeros((1, 1)), 1.0)
    with pytest.raises(DegenerateMaskError):
        photometric_l1(np.zeros((4, 4, 3)), np.ones((4, 4, 3)), empty)


def test_residual_weight_is_the_subgradient():
    rng = np.random.default_rng(3)
    q, r = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    base, w = photometric_l1(q, r)
    for _ in range(20):
        y, x, c = rng.integers(8), rng.integers(8), rng.integers(3)
        d = 1e-7 if abs(r[y, x, c] - q[y, x, c]) > 1e-6 else 0.0
        r2 = r.copy()
        r2[y, x, c] += d
        assert abs(photometric_l1(q, r2)[0].value - base.value - w[y, x, c] * d) < 1e-15


def test_laplacian_matches_shift_oracle():
    rng = np.random.default_rng(4)
    g = rng.random((23, 17))
    assert np.abs(laplacian(g) - laplacian_4(g)).max() < 1e-14


def test_scores_constant_and_impulse():
    assert not laplacian_scores(np.full((32, 32, 3), 0.4), 16).any()
    img = np.zeros((32, 32, 3))
    img[5, 6] = 1.0 / LUMA.sum()     # luminance exactly 1
    s = laplacian_scores(img, 16)
    assert abs(s[0, 0] - 8.0 / 256.0) < 1e-12
    assert s[0, 1] == s[1, 0] == s[1, 1] == 0.0


def test_scores_match_direct_convolution_per_patch():
    rng = np.random.default_rng(5)
    img = rng.random((40, 36, 3))     # partial patches on both edges
    s = laplacian_scores(img, 16)
    lap = np.abs(laplacian_4(img @ LUMA))
    for i in range(s.shape[0]):
        for j in range(s.shape[1]):
            block = lap[16 * i:16 * i + 16, 16 * j:16 * j + 16]
            assert abs(s[i, j] - block.mean()) < 1e-10
    with pytest.raises(InvalidArgumentError):
        laplacian_scores(img, 2)


def test_patch_means_partial_patches():
    v = np.ones((5, 7))
    assert np.array_equal(patch_means(v, 4), np.ones((2, 2)))


def test_mask_equal_scores_inclusive():
    scores = np.full((2, 2), 0.3)
    m = build_mask(scores, 16, (32, 32), TauPolicy("absolute", 0.3))
    assert m.mask.all() and m.kept_fraction == 1.0


def test_mask_fallback_with_infinite_tau():
    rng = np.random.default_rng(6)
    scores = rng.permutation(100).reshape(10, 10).astype(float)
    m = build_mask(scores, 16, (160, 160), TauPolicy("absolute", np.inf), 0.10)
    assert m.mask.sum() == 2560 and m.kept_fraction == pytest.approx(0.10)
    # the kept patches are the ten highest-scoring ones
    assert set(np.flatnonzero(scores.ravel() >= 90)) == {
        i * 10 + j for i in range(10) for j in range(10) if m.mask[16 * i, 16 * j]}


def test_mask_textured_half():
    rng = np.random.default_rng(7)
    img = np.full((64, 64, 3), 0.5)
    img[:, :32] = rng.random((64, 32, 3))
    m = mask_from_render(img, 16, TauPolicy("relative", 0.5))
    assert m.mask[:, :31].all()
    # the flat half keeps only the column of patches touching the seam at most
    assert m.mask.sum() <= 64 * 48


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.integers(0, 10_000))
def test_mask_monotone_in_tau(t1, t2, seed):
    lo, hi = sorted((t1, t2))
    scores = np.random.default_rng(seed).random((4, 4))
    a = build_mask(scores, 8, (32, 32), TauPolicy("relative", lo), 0.0)
    b = build_mask(scores, 8, (32, 32), TauPolicy("relative", hi), 0.0)
    assert not (b.mask & ~a.mask).any()


def test_mask_shape_and_policy_validation():
    with pytest.raises(InvalidArgumentError):
        build_mask(np.zeros((3, 3)), 16, (32, 32))
    with pytest.raises(InvalidArgumentError):
        TauPolicy("median")
    with pytest.raises(InvalidArgumentError):
        TauPolicy("quantile", 1.5)
    assert TauPolicy("quantile", 0.5).resolve(np.array([1.0, 2.0, 3.0])) == 2.0


def test_downsample_block_mean_and_bilinear():
    img = np.arange(4 * 4 * 3, dtype=float).reshape(4, 4, 3)
    half = downsample(img, 0.5)
    assert half.shape == (2, 2, 3)
    assert np.allclose(half[0, 0], img[:2, :2].mean(axis=(0, 1)))
    assert downsample(img, 0.75).shape == (3, 3, 3)
    assert np.array_equal(downsample(img, 1.0), img)
