import numpy as np
import pytest

from tubekit.errors import BadClipFile, GridNotDivisible, ShapeMismatch
from tubekit.tokenizer import (
    KernelBank,
    VideoClip,
    init_kernels,
    interpolate_kernel,
    merge_s2d,
    read_clip,
    tokenize,
    tokenize_gradient,
    unmerge_s2d,
    write_clip,
)
from tubekit.tube_config import TubeBank, TubeSpec, total_tokens

from oracles import fd_gradient, max_rel_err


def small_bank(s2d=False):
    tubes = [TubeSpec(kernel=(1, 2, 2), stride=(4, 2, 2), image_applicable=True)]
    if s2d:
        tubes.append(TubeSpec(kernel=(2, 2, 2), stride=(4, 4, 4), s2d_group=(2, 1, 1)))
    else:
        tubes.append(TubeSpec(kernel=(2, 2, 2), stride=(2, 4, 4)))
    return TubeBank(tubes=tuple(tubes), hidden_size=8)


def random_clip(rng, dims=(4, 8, 8), channels=1, dtype=np.float64):
    return VideoClip(voxels=rng.uniform(0, 1, size=dims + (channels,)).astype(dtype))


def test_identity_projection_reads_off_voxels():
    # 1-voxel kernel, stride 1, d = C = 1 identity weight: tokens must equal
    # the voxels in t-major, h-major, w-major order.
    bank = TubeBank(
        tubes=(TubeSpec(kernel=(1, 1, 1), stride=(1, 1, 1), image_applicable=True),),
        hidden_size=1,
    )
    rng = np.random.default_rng(0)
    clip = VideoClip(voxels=rng.uniform(0, 1, size=(2, 2, 2, 1)))
    kernels = KernelBank(biases=[np.zeros(1)], kernels=[np.ones((1, 1, 1, 1, 1))])
    batch = tokenize(clip, bank, kernels)
    np.testing.assert_array_equal(batch.tokens.ravel(), clip.voxels.ravel())


def test_zero_clip_zero_bias_gives_zero_tokens():
    bank = small_bank()
    kernels = init_kernels(bank, 1, seed=0, dtype=np.float64)
    clip = VideoClip(voxels=np.zeros((4, 8, 8, 1)))
    batch = tokenize(clip, bank, kernels)
    assert np.array_equal(batch.tokens, np.zeros_like(batch.tokens))


def test_tokenize_is_linear_in_clip():
    bank = small_bank(s2d=True)
    kernels = init_kernels(bank, 1, seed=1, dtype=np.float64)
    rng = np.random.default_rng(2)
    x = random_clip(rng)
    y = random_clip(rng)
    a, b = 0.7, -1.3
    mix = VideoClip(voxels=a * x.voxels + b * y.voxels)
    t_mix = tokenize(mix, bank, kernels).tokens
    t_lin = a * tokenize(x, bank, kernels).tokens + b * tokenize(y, bank, kernels).tokens
    np.testing.assert_allclose(t_mix, t_lin, rtol=0, atol=1e-12)


def test_scaled_clip_scales_tokens():
    bank = small_bank()
    kernels = init_kernels(bank, 1, seed=3, dtype=np.float64)
    rng = np.random.default_rng(4)
    clip = random_clip(rng)
    c = 2.5
    scaled = VideoClip(voxels=c * clip.voxels)
    np.testing.assert_allclose(
        tokenize(scaled, bank, kernels).tokens,
        c * tokenize(clip, bank, kernels).tokens,
        rtol=0,
        atol=1e-12,
    )


def test_token_count_matches_total_tokens():
    rng = np.random.default_rng(5)
    for _ in range(20):
        tubes = [TubeSpec(kernel=(1, 2, 2), stride=(2, 2, 2), image_applicable=True)]
        for _ in range(int(rng.integers(0, 3))):
            tubes.append(
                TubeSpec(
                    kernel=tuple(int(rng.integers(1, 4)) for _ in range(3)),
                    stride=tuple(int(rng.integers(1, 5)) for _ in range(3)),
                )
            )
        bank = TubeBank(tubes=tuple(tubes), hidden_size=6)
        dims = (int(rng.integers(4, 9)), int(rng.integers(6, 13)), int(rng.integers(6, 13)))
        from tubekit.tube_config import validate_bank

        if not validate_bank(bank, dims).valid:
            continue
        kernels = init_kernels(bank, 1, seed=0)
        clip = VideoClip(voxels=rng.uniform(0, 1, size=dims + (1,)).astype(np.float32))
        batch = tokenize(clip, bank, kernels)
        assert batch.tokens.shape[0] == total_tokens(bank, dims, is_video=True)


def test_image_tokens_equal_video_frame0_tokens():
    bank = small_bank()
    kernels = init_kernels(bank, 1, seed=6, dtype=np.float64)
    rng = np.random.default_rng(7)
    video = random_clip(rng, dims=(4, 8, 8))
    image = VideoClip(voxels=video.voxels[:1].copy())
    vb = tokenize(video, bank, kernels)
    ib = tokenize(image, bank, kernels)
    # image tube (index 0) tokens at t-index 0 of the video
    mask = (vb.tube_id == 0) & (vb.centers[:, 0] == 0.0)
    assert np.array_equal(ib.tokens, vb.tokens[mask])
    assert np.array_equal(ib.centers, vb.centers[mask])
    assert np.all(ib.tube_id == 0)


def test_image_input_uses_only_image_tubes():
    bank = small_bank()
    kernels = init_kernels(bank, 1, seed=8)
    image = VideoClip(voxels=np.zeros((1, 8, 8, 1), dtype=np.float32))
    batch = tokenize(image, bank, kernels)
    assert set(batch.tube_id.tolist()) == {0}
    assert batch.tokens.shape[0] == total_tokens(bank, (1, 8, 8), is_video=False)


def test_merge_s2d_identity_group():
    rng = np.random.default_rng(9)
    grid = rng.standard_normal((2, 3, 4, 5))
    assert np.array_equal(merge_s2d(grid, (1, 1, 1)), grid)


def test_merge_s2d_concat_order():
    # 4x1x1 grid of 2-channel tokens [a|b],[c|d],[e|f],[g|h] with group
    # (2,1,1) -> [a,b,c,d],[e,f,g,h]
    grid = np.arange(8, dtype=np.float64).reshape(4, 1, 1, 2)
    merged = merge_s2d(grid, (2, 1, 1))
    assert merged.shape == (2, 1, 1, 4)
    np.testing.assert_array_equal(merged[0, 0, 0], [0, 1, 2, 3])
    np.testing.assert_array_equal(merged[1, 0, 0], [4, 5, 6, 7])


def test_merge_s2d_block_order_is_t_then_h_then_w():
    grid = np.arange(8, dtype=np.float64).reshape(2, 2, 2, 1)
    merged = merge_s2d(grid, (2, 2, 2))
    np.testing.assert_array_equal(merged[0, 0, 0], [0, 1, 2, 3, 4, 5, 6, 7])


def test_merge_s2d_center_mean():
    centers = np.zeros((2, 1, 1, 3))
    centers[0, 0, 0] = [4.0, 1.0, 1.0]
    centers[1, 0, 0] = [12.0, 1.0, 1.0]
    merged = merge_s2d(centers, (2, 1, 1), combine="mean")
    np.testing.assert_array_equal(merged[0, 0, 0], [8.0, 1.0, 1.0])


def test_merge_s2d_grid_not_divisible():
    with pytest.raises(GridNotDivisible):
        merge_s2d(np.zeros((3, 2, 2, 4)), (2, 1, 1))


def test_unmerge_inverts_merge():
    rng = np.random.default_rng(10)
    grid = rng.standard_normal((4, 6, 2, 3))
    merged = merge_s2d(grid, (2, 3, 1))
    back = unmerge_s2d(merged, (2, 3, 1), channels=3)
    np.testing.assert_array_equal(back, grid)


def test_interpolate_identity_is_bit_exact():
    rng = np.random.default_rng(11)
    base = rng.standard_normal((8, 8, 8, 2, 4))
    out = interpolate_kernel(base, (8, 8, 8))
    assert np.array_equal(out, base)


def test_interpolate_preserves_constants():
    base = np.full((8, 8, 8, 1, 2), 3.25)
    for target in [(1, 1, 1), (3, 5, 7), (8, 8, 8), (15, 2, 9), (32, 4, 4)]:
        out = interpolate_kernel(base, target)
        assert out.shape == target + (1, 2)
        np.testing.assert_allclose(out, 3.25, rtol=0, atol=1e-12)


def test_interpolate_linear_ramp_closed_form():
    base = np.zeros((8, 8, 8, 1, 1))
    base[..., 0, 0] = np.arange(8, dtype=np.float64)[:, None, None]
    out = interpolate_kernel(base, (15, 8, 8))
    expected = np.arange(15, dtype=np.float64) * 0.5  # 0, 0.5, ..., 7.0
    np.testing.assert_allclose(out[:, 0, 0, 0, 0], expected, rtol=0, atol=1e-12)


def test_interpolate_size_one_samples_center():
    base = np.zeros((8, 8, 8, 1, 1))
    base[..., 0, 0] = np.arange(8, dtype=np.float64)[:, None, None]
    out = interpolate_kernel(base, (1, 8, 8))
    assert out[0, 0, 0, 0, 0] == pytest.approx(3.5, abs=1e-15)


def test_interpolated_mode_with_base_shape_matches_direct():
    tubes = (
        TubeSpec(kernel=(1, 8, 8), stride=(8, 8, 8), image_applicable=True),
        TubeSpec(kernel=(8, 8, 8), stride=(8, 8, 8)),
    )
    bank = TubeBank(tubes=tubes, hidden_size=4)
    rng = np.random.default_rng(12)
    base = rng.standard_normal((8, 8, 8, 1, 4))
    interp = KernelBank(biases=[np.zeros(4), np.zeros(4)], base_kernel=base)
    direct = KernelBank(
        biases=[np.zeros(4), np.zeros(4)],
        kernels=[interpolate_kernel(base, (1, 8, 8)), base.copy()],
    )
    clip = random_clip(rng, dims=(8, 8, 8))
    a = tokenize(clip, bank, interp)
    b = tokenize(clip, bank, direct)
    # the 8x8x8 tube hits the identity-resize path: bit-identical tokens
    np.testing.assert_array_equal(a.tokens[a.tube_id == 1], b.tokens[b.tube_id == 1])
    np.testing.assert_allclose(a.tokens, b.tokens, rtol=0, atol=1e-12)


def test_zero_upstream_gives_zero_grads():
    bank = small_bank(s2d=True)
    kernels = init_kernels(bank, 1, seed=13, dtype=np.float64)
    rng = np.random.default_rng(14)
    clip = random_clip(rng)
    n = total_tokens(bank, clip.dims)
    grads = tokenize_gradient(np.zeros((n, 8)), clip, bank, kernels, with_clip_grad=True)
    for g in grads.kernels:
        assert not g.any()
    for g in grads.biases:
        assert not g.any()
    assert not grads.clip.any()


def test_single_voxel_kernel_grad_is_outer_product():
    bank = TubeBank(
        tubes=(TubeSpec(kernel=(1, 1, 1), stride=(2, 2, 2), image_applicable=True),),
        hidden_size=3,
    )
    clip = VideoClip(voxels=np.full((1, 1, 1, 1), 2.0))
    kernels = KernelBank(biases=[np.zeros(3)], kernels=[np.zeros((1, 1, 1, 1, 3))])
    upstream = np.array([[1.0, -2.0, 0.5]])
    grads = tokenize_gradient(upstream, clip, bank, kernels)
    np.testing.assert_array_equal(grads.kernels[0][0, 0, 0, 0], 2.0 * upstream[0])
    np.testing.assert_array_equal(grads.biases[0], upstream[0])


def _loss_through_tokens(bank, kernels, clip, probe):
    def loss():
        return float((tokenize(clip, bank, kernels).tokens * probe).sum())

    return loss


@pytest.mark.parametrize("mode", ["plain", "s2d", "interp"])
def test_gradients_match_finite_differences(mode):
    rng = np.random.default_rng(hash(mode) % 2**32)
    if mode == "interp":
        tubes = (
            TubeSpec(kernel=(1, 4, 4), stride=(4, 4, 4), image_applicable=True),
            TubeSpec(kernel=(3, 2, 2), stride=(2, 4, 4)),
        )
        bank = TubeBank(tubes=tubes, hidden_size=4)
        kernels = init_kernels(bank, 1, seed=15, dtype=np.float64, interpolated=True)
        arrays = {"base": kernels.base_kernel, "b0": kernels.biases[0], "b1": kernels.biases[1]}
    elif mode == "s2d":
        bank = small_bank(s2d=True)
        kernels = init_kernels(bank, 1, seed=16, dtype=np.float64)
        arrays = {
            "k0": kernels.kernels[0],
            "k1": kernels.kernels[1],
            "b0": kernels.biases[0],
            "b1": kernels.biases[1],
        }
    else:
        bank = small_bank()
        kernels = init_kernels(bank, 1, seed=17, dtype=np.float64)
        arrays = {
            "k0": kernels.kernels[0],
            "k1": kernels.kernels[1],
            "b0": kernels.biases[0],
            "b1": kernels.biases[1],
        }
    clip = random_clip(rng, dims=(4, 8, 8))
    n = total_tokens(bank, clip.dims)
    probe = rng.standard_normal((n, bank.hidden_size))
    grads = tokenize_gradient(probe, clip, bank, kernels, with_clip_grad=True)
    fd = fd_gradient(_loss_through_tokens(bank, kernels, clip, probe), arrays)
    if mode == "interp":
        assert max_rel_err(grads.base_kernel, fd["base"]) < 1e-6
    else:
        assert max_rel_err(grads.kernels[0], fd["k0"]) < 1e-6
        assert max_rel_err(grads.kernels[1], fd["k1"]) < 1e-6
    assert max_rel_err(grads.biases[0], fd["b0"]) < 1e-6
    assert max_rel_err(grads.biases[1], fd["b1"]) < 1e-6
    # input gradient against finite differences on a few voxels
    flat = clip.voxels.reshape(-1)
    step = 1e-5
    loss = _loss_through_tokens(bank, kernels, clip, probe)
    idxs = rng.choice(flat.size, size=12, replace=False)
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + step
        fp = loss()
        flat[i] = orig - step
        fm = loss()
        flat[i] = orig
        num = (fp - fm) / (2 * step)
        ana = grads.clip.reshape(-1)[i]
        assert abs(ana - num) / max(abs(ana) + abs(num), 1e-6) < 1e-6


def test_gradient_shape_mismatch():
    bank = small_bank()
    kernels = init_kernels(bank, 1, seed=18)
    clip = VideoClip(voxels=np.zeros((4, 8, 8, 1), dtype=np.float32))
    with pytest.raises(ShapeMismatch):
        tokenize_gradient(np.zeros((3, 8)), clip, bank, kernels)


def test_kernel_bank_mismatch_rejected():
    bank = small_bank()
    kernels = init_kernels(bank, 1, seed=19)
    bad = KernelBank(biases=kernels.biases, kernels=[kernels.kernels[0]])
    clip = VideoClip(voxels=np.zeros((4, 8, 8, 1), dtype=np.float32))
    with pytest.raises(ShapeMismatch):
        tokenize(clip, bank, bad)
    wrong_channels = init_kernels(bank, 3, seed=20)
    with pytest.raises(ShapeMismatch):
        tokenize(clip, bank, wrong_channels)


def test_clip_file_round_trip(tmp_path):
    rng = np.random.default_rng(21)
    clip = VideoClip(voxels=rng.uniform(0, 1, size=(3, 4, 5, 2)).astype(np.float32))
    path = tmp_path / "clip.tvt"
    write_clip(path, clip)
    back = read_clip(path)
    np.testing.assert_array_equal(back.voxels, clip.voxels)


def test_clip_file_errors(tmp_path):
    with pytest.raises(BadClipFile):
        read_clip(tmp_path / "missing.tvt")
    bad = tmp_path / "bad.tvt"
    bad.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(BadClipFile):
        read_clip(bad)
    trunc = tmp_path / "trunc.tvt"
    import struct

    trunc.write_bytes(b"TVT0" + struct.pack("<4I", 2, 2, 2, 1) + b"\x00" * 8)
    with pytest.raises(BadClipFile):
        read_clip(trunc)


def test_kernel_init_statistics():
    bank = small_bank()
    kernels = init_kernels(bank, 3, seed=22, dtype=np.float32)
    k = kernels.kernels[1]  # (2,2,2,3,d_tube)
    fan_in = 2 * 2 * 2 * 3
    assert k.dtype == np.float32
    assert np.abs(k).max() <= 2.0 * fan_in**-0.5 + 1e-6
    assert not kernels.biases[0].any()
