import math

import numpy as np
import pytest

from tubekit.errors import ShapeMismatch
from tubekit.posemb import EmbeddingParams, add_positions, add_to_tokens, embed_positions, frequencies
from tubekit.tokenizer import TokenBatch


def test_origin_center_gives_zero_one_pattern():
    for d in (6, 12, 26, 64):
        emb = embed_positions(np.zeros((1, 3)), EmbeddingParams(d=d))
        blocks = d // 6
        expected = np.zeros(d)
        expected[: 6 * blocks] = np.tile([0.0, 1.0, 0.0, 1.0, 0.0, 1.0], blocks)
        assert np.array_equal(emb[0], expected)


def test_block_zero_frequency_is_one_in_both_modes():
    for mode in ("raw", "normalized"):
        w = frequencies(EmbeddingParams(d=24, exponent_mode=mode))
        assert w[0] == 1.0


def test_channel_zero_is_sin_t():
    centers = np.array([[2.5, 9.0, 1.0]])
    emb = embed_positions(centers, EmbeddingParams(d=12))
    assert emb[0, 0] == pytest.approx(math.sin(2.5), abs=1e-15)
    assert emb[0, 1] == pytest.approx(math.cos(2.5), abs=1e-15)
    assert emb[0, 2] == pytest.approx(math.sin(9.0), abs=1e-15)


def test_d6_raw_mode_literals():
    # Single block, center (1, 0, 0): [sin 1, cos 1, 0, 1, 0, 1], computed
    # independently at high precision.
    emb = embed_positions(np.array([[1.0, 0.0, 0.0]]), EmbeddingParams(d=6, exponent_mode="raw"))
    expected = [0.8414709848078965, 0.5403023058681398, 0.0, 1.0, 0.0, 1.0]
    np.testing.assert_allclose(emb[0], expected, rtol=0, atol=1e-15)


def test_raw_mode_frequencies_collapse():
    w = frequencies(EmbeddingParams(d=36, exponent_mode="raw", tau=10000.0))
    assert w[1] == pytest.approx(1e-4)
    assert w[2] == pytest.approx(1e-8)


def test_normalized_mode_spreads_frequencies():
    w = frequencies(EmbeddingParams(d=48, exponent_mode="normalized", tau=10000.0))
    assert len(w) == 8
    assert w[1] == pytest.approx(10000.0 ** (-1 / 8))
    assert np.all(np.diff(w) < 0)


def test_sin_cos_identity_on_random_centers():
    rng = np.random.default_rng(0)
    centers = rng.uniform(0, 512, size=(10000, 3))
    params = EmbeddingParams(d=48)
    emb = embed_positions(centers, params)
    blocks = params.d // 6
    for axis in range(3):
        s = emb[:, 2 * axis : 6 * blocks : 6]
        c = emb[:, 2 * axis + 1 : 6 * blocks : 6]
        assert np.max(np.abs(s * s + c * c - 1.0)) < 1e-12


def test_remainder_channels_are_zero():
    emb = embed_positions(np.array([[3.0, 4.0, 5.0]]), EmbeddingParams(d=26))
    assert np.array_equal(emb[0, 24:], np.zeros(2))


def test_embedding_depends_only_on_center_and_params():
    centers = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
    emb = embed_positions(centers, EmbeddingParams(d=30))
    assert np.array_equal(emb[0], emb[1])


def test_injectivity_on_integer_grid_per_axis():
    # Any two distinct centers differ on some axis; it is enough that each
    # axis map v -> (sin(v w_j), cos(v w_j))_j separates integers in range.
    params = EmbeddingParams(d=48, exponent_mode="normalized")
    omega = frequencies(params)
    for axis_range in (64, 256):
        v = np.arange(axis_range, dtype=np.float64)
        ang = v[:, None] * omega[None, :]
        vec = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
        diff = np.abs(vec[:, None, :] - vec[None, :, :]).max(axis=2)
        diff[np.arange(axis_range), np.arange(axis_range)] = np.inf
        assert diff.min() > 1e-6


def test_add_positions_zero_tokens_equals_embedding():
    centers = np.array([[0.0, 7.5, 7.5], [16.0, 7.5, 23.5]])
    params = EmbeddingParams(d=12)
    batch = TokenBatch(
        tokens=np.zeros((2, 12)), centers=centers, tube_id=np.zeros(2, dtype=np.int64)
    )
    out = add_positions(batch, params)
    assert np.array_equal(out.tokens, embed_positions(centers, params))
    assert out.centers is centers


def test_add_positions_twice_adds_twice():
    rng = np.random.default_rng(1)
    centers = rng.uniform(0, 32, size=(5, 3))
    tokens = rng.standard_normal((5, 12))
    params = EmbeddingParams(d=12)
    batch = TokenBatch(tokens=tokens, centers=centers, tube_id=np.zeros(5, dtype=np.int64))
    twice = add_positions(add_positions(batch, params), params)
    np.testing.assert_allclose(
        twice.tokens, tokens + 2 * embed_positions(centers, params), rtol=0, atol=1e-12
    )


def test_identical_centers_get_identical_embeddings():
    centers = np.array([[4.0, 8.0, 8.0], [4.0, 8.0, 8.0]])
    tokens = np.zeros((2, 18))
    batch = TokenBatch(tokens=tokens, centers=centers, tube_id=np.array([0, 1]))
    out = add_positions(batch, EmbeddingParams(d=18))
    assert np.array_equal(out.tokens[0], out.tokens[1])


def test_shape_mismatch():
    batch = TokenBatch(
        tokens=np.zeros((2, 10)), centers=np.zeros((2, 3)), tube_id=np.zeros(2, dtype=np.int64)
    )
    with pytest.raises(ShapeMismatch):
        add_positions(batch, EmbeddingParams(d=12))
    with pytest.raises(ShapeMismatch):
        add_to_tokens(np.zeros((3, 12)), np.zeros((2, 3)), EmbeddingParams(d=12))


def test_non_finite_centers_rejected():
    with pytest.raises(ValueError):
        embed_positions(np.array([[np.nan, 0.0, 0.0]]), EmbeddingParams(d=12))
