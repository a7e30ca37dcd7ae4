import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from scorecomp.errors import InvalidGrid, LengthMismatch, NonDivisiblePatch
from scorecomp.tensor_core import (
    as_latent,
    batched_cosine,
    channel_mean,
    cosine_similarity,
    kron_upsample,
    latent_from_flat,
    patch_reduce,
    patchify,
    unpatchify,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_channel_mean_small_grid():
    grid = np.stack([[[1, 2], [3, 4]], [[3, 2], [1, 0]]], axis=-1)
    np.testing.assert_array_equal(channel_mean(grid), [[2, 2], [2, 2]])


def test_channel_mean_single_channel_is_verbatim():
    rng = np.random.default_rng(3)
    grid = rng.normal(size=(5, 3, 1))
    np.testing.assert_array_equal(channel_mean(grid), grid[..., 0])


def test_channel_mean_matches_scalar_loop():
    rng = np.random.default_rng(0)
    grid = rng.normal(size=(4, 4, 8))
    expected = np.zeros((4, 4))
    for h in range(4):
        for w in range(4):
            acc = 0.0
            for c in range(8):
                acc += grid[h, w, c]
            expected[h, w] = acc / 8
    np.testing.assert_allclose(channel_mean(grid), expected, rtol=0, atol=1e-15)


def test_latent_from_flat_and_validation():
    g = latent_from_flat(range(12), 2, 3, 2)
    assert g.shape == (2, 3, 2)
    assert g[1, 0, 1] == 7
    with pytest.raises(InvalidGrid):
        latent_from_flat(range(11), 2, 3, 2)
    with pytest.raises(InvalidGrid):
        as_latent(np.full((2, 2, 1), np.nan))
    with pytest.raises(InvalidGrid):
        as_latent(np.zeros((2, 2)))


def test_patchify_row_major():
    m = np.arange(16.0).reshape(4, 4)
    expected = [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]]
    np.testing.assert_array_equal(patchify(m, 2), expected)


def test_patchify_whole_map_is_one_patch():
    m = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(patchify(m, 3), m.reshape(1, 9))


def test_patchify_rectangular_round_trip():
    rng = np.random.default_rng(1)
    m = rng.normal(size=(8, 6))
    p = patchify(m, 2)
    assert p.shape == (12, 4)
    np.testing.assert_array_equal(unpatchify(p, 8, 6, 2), m)


def test_patchify_rejects_non_divisible():
    with pytest.raises(NonDivisiblePatch):
        patchify(np.zeros((6, 4)), 4)
    with pytest.raises(NonDivisiblePatch):
        patch_reduce(np.zeros((5, 5)), 2)


def test_patchify_keeps_batch_axes():
    rng = np.random.default_rng(2)
    m = rng.normal(size=(3, 2, 4, 4))
    p = patchify(m, 2)
    assert p.shape == (3, 2, 4, 4)
    np.testing.assert_array_equal(p[1, 0], patchify(m[1, 0], 2))


def test_cosine_examples():
    v = np.array([0.3, -2.0, 5.0])
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([0, 0, 0], v) == 0.0
    assert cosine_similarity(v, -v) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(LengthMismatch):
        cosine_similarity([1, 2], [1, 2, 3])


def test_batched_cosine_tiny_norm_is_zero():
    a = np.array([[1e-13, 0.0], [1.0, 1.0]])
    b = np.array([1.0, 1.0])
    np.testing.assert_array_equal(batched_cosine(a, b)[0], 0.0)


def test_kron_upsample_examples():
    np.testing.assert_array_equal(kron_upsample([[0.7]], 2), np.full((2, 2), 0.7))
    g = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(kron_upsample(g, 1), g)


def test_kron_upsample_index_oracle():
    rng = np.random.default_rng(4)
    g = rng.normal(size=(3, 2))
    out = kron_upsample(g, 4)
    assert out.shape == (12, 8)
    for h in range(12):
        for w in range(8):
            assert out[h, w] == g[h // 4, w // 4]
    np.testing.assert_array_equal(out, np.kron(g, np.ones((4, 4))))


@st.composite
def map_and_patch(draw):
    d = draw(st.integers(1, 4))
    ph = draw(st.integers(1, 4))
    pw = draw(st.integers(1, 4))
    m = draw(hnp.arrays(np.float64, (ph * d, pw * d), elements=finite))
    return m, d


@given(map_and_patch())
def test_patch_round_trip_is_exact(case):
    m, d = case
    h, w = m.shape
    np.testing.assert_array_equal(unpatchify(patchify(m, d), h, w, d), m)


@given(map_and_patch())
def test_upsampled_reduction_is_constant_per_patch(case):
    m, d = case
    p = patchify(kron_upsample(patch_reduce(m, d), d), d)
    assert np.all(p == p[:, :1])


@given(hnp.arrays(np.float64, 6, elements=finite), hnp.arrays(np.float64, 6, elements=finite),
       st.floats(1e-3, 1e3))
def test_cosine_symmetric_scale_invariant_bounded(a, b, alpha):
    ab = cosine_similarity(a, b)
    assert ab == cosine_similarity(b, a)
    assert -1.0 <= ab <= 1.0
    if np.linalg.norm(a) > 1e-6 and np.linalg.norm(b) > 1e-6:
        assert abs(cosine_similarity(alpha * a, b) - ab) <= 1e-12


@settings(max_examples=50)
@given(hnp.arrays(np.float64, (3, 2, 5), elements=finite), st.floats(-100, 100))
def test_channel_mean_commutes_with_constant(grid, k):
    np.testing.assert_allclose(channel_mean(grid + k), channel_mean(grid) + k, rtol=0, atol=1e-12)
