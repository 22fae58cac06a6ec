"""Video/image tokenization: strided 3D tube projection, space-to-depth
channel merging, trilinear kernel interpolation, and the exact adjoint of
the whole map for training.

Tokens are ordered tube-major, then t-major, h-major, w-major over each
tube's post-merge grid. This order is the contract for checkpoints, CSV
dumps, and the learned-position baseline.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadClipFile, ConfigError, ShapeMismatch
from .tube_config import (
    Triple,
    TubeBank,
    TubeSpec,
    merged_counts,
    sampling_grid,
    token_grid,
)

CLIP_MAGIC = b"TVT0"
BASE_KERNEL_SHAPE = (8, 8, 8)


@dataclass(frozen=True)
class VideoClip:
    """A dense voxel array (T, H, W, C) with values nominally in [0, 1].

    An image is exactly a clip with T = 1.
    """

    voxels: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 4:
            raise ShapeMismatch(f"clip must be (T, H, W, C), got shape {v.shape}")
        object.__setattr__(self, "voxels", v)

    @property
    def dims(self) -> Triple:
        return self.voxels.shape[:3]

    @property
    def channels(self) -> int:
        return self.voxels.shape[3]

    @property
    def is_image(self) -> bool:
        return self.voxels.shape[0] == 1


@dataclass
class KernelBank:
    """Projection weights for a tube bank.

    Direct mode: one kernel per tube with shape (k_t, k_h, k_w, C, d_tube)
    where d_tube = hidden_size / s2d_factor. Interpolated mode: a single
    (8, 8, 8, C, d) base kernel resampled per tube (and sliced to d_tube
    output channels for s2d tubes). Biases are always per tube.
    """

    biases: list[np.ndarray]
    kernels: list[np.ndarray] | None = None
    base_kernel: np.ndarray | None = None

    @property
    def interpolated(self) -> bool:
        return self.base_kernel is not None


@dataclass
class TokenBatch:
    """A token sequence with per-token centers and originating tube ids."""

    tokens: np.ndarray  # (n, d)
    centers: np.ndarray  # (n, 3) float64, (t, x, y) voxel coordinates
    tube_id: np.ndarray  # (n,) int


@dataclass
class TokenizeGrads:
    """Adjoint outputs of tokenize. Tubes not used by the input (e.g. video
    tubes for an image clip) get zero gradients."""

    kernels: list[np.ndarray] | None
    biases: list[np.ndarray]
    base_kernel: np.ndarray | None = None
    clip: np.ndarray | None = None


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def init_kernels(
    bank: TubeBank,
    in_channels: int,
    seed: int,
    dtype=np.float32,
    interpolated: bool = False,
) -> KernelBank:
    """Truncated-normal kernels with std = fan_in**-0.5 and zero biases."""
    rng = np.random.default_rng(seed)
    d = bank.hidden_size
    biases = []
    for tube in bank.tubes:
        biases.append(np.zeros(d // tube.s2d_factor, dtype=dtype))
    if interpolated:
        kt, kh, kw = BASE_KERNEL_SHAPE
        fan_in = kt * kh * kw * in_channels
        base = trunc_normal(rng, (kt, kh, kw, in_channels, d), fan_in ** -0.5, dtype)
        return KernelBank(biases=biases, base_kernel=base)
    kernels = []
    for tube in bank.tubes:
        kt, kh, kw = tube.kernel
        fan_in = kt * kh * kw * in_channels
        shape = (kt, kh, kw, in_channels, d // tube.s2d_factor)
        kernels.append(trunc_normal(rng, shape, fan_in ** -0.5, dtype))
    return KernelBank(biases=biases, kernels=kernels)


def _interp_matrix(k_out: int, k_in: int) -> np.ndarray:
    """Align-corners linear resampling weights, (k_out, k_in).

    Output index i samples input position i*(k_in-1)/(k_out-1); a size-1
    output samples the center (k_in-1)/2. Identity when k_out == k_in.
    """
    w = np.zeros((k_out, k_in), dtype=np.float64)
    if k_out == 1:
        pos = np.array([(k_in - 1) / 2.0])
    else:
        pos = np.arange(k_out, dtype=np.float64) * (k_in - 1) / (k_out - 1)
    lo = np.floor(pos).astype(int)
    lo = np.minimum(lo, k_in - 2) if k_in > 1 else lo
    frac = pos - lo
    for i in range(k_out):
        if k_in == 1:
            w[i, 0] = 1.0
        else:
            w[i, lo[i]] = 1.0 - frac[i]
            w[i, lo[i] + 1] = frac[i]
    return w


def interpolate_kernel(base: np.ndarray, target: Triple) -> np.ndarray:
    """Separable trilinear resampling of the kernel's three leading axes,
    applied independently per (C, d) pair. Exact identity for the base shape."""
    base = np.asarray(base)
    if base.ndim != 5:
        raise ShapeMismatch(f"base kernel must be 5-D (t, h, w, C, d), got {base.shape}")
    if any(k < 1 for k in target):
        raise ConfigError(f"interpolation target must be positive, got {target}")
    out = base
    for axis in range(3):
        m = _interp_matrix(target[axis], base.shape[axis]).astype(base.dtype)
        out = np.moveaxis(np.tensordot(m, out, axes=([1], [axis])), 0, axis)
    return out


def interpolate_kernel_adjoint(d_kernel: np.ndarray, base_shape, target: Triple) -> np.ndarray:
    """Adjoint of interpolate_kernel: push a (target, C, d) gradient back to
    the base kernel shape."""
    out = np.asarray(d_kernel)
    for axis in range(3):
        m = _interp_matrix(target[axis], base_shape[axis]).astype(out.dtype)
        out = np.moveaxis(np.tensordot(m.T, out, axes=([1], [axis])), 0, axis)
    return out


def resolve_kernel(kernels: KernelBank, bank: TubeBank, index: int) -> tuple[np.ndarray, np.ndarray]:
    """The effective (kernel, bias) for one tube, applying interpolation and
    channel slicing in interpolated mode."""
    tube = bank.tubes[index]
    d_tube = bank.hidden_size // tube.s2d_factor
    bias = kernels.biases[index]
    if bias.shape != (d_tube,):
        raise ShapeMismatch(f"tube {index}: bias shape {bias.shape} != ({d_tube},)")
    if kernels.interpolated:
        kern = interpolate_kernel(kernels.base_kernel, tube.kernel)[..., :d_tube]
        return kern, bias
    if kernels.kernels is None or len(kernels.kernels) != len(bank.tubes):
        raise ShapeMismatch("kernel bank does not match tube bank")
    kern = kernels.kernels[index]
    expect = tube.kernel + (kern.shape[3], d_tube)
    if kern.shape != expect:
        raise ShapeMismatch(f"tube {index}: kernel shape {kern.shape} != {expect}")
    return kern, bias


def _window_matrix(voxels: np.ndarray, tube: TubeSpec, counts: Triple) -> np.ndarray:
    """Gather all sampling windows as rows, flattened (k_t, k_h, k_w, C)."""
    kt, kh, kw = tube.kernel
    st, sh, sw = tube.sampling_stride()
    ot, oh, ow = tube.offset
    view = np.lib.stride_tricks.sliding_window_view(voxels, (kt, kh, kw), axis=(0, 1, 2))
    # view: (T-kt+1, H-kh+1, W-kw+1, C, kt, kh, kw)
    sub = view[
        ot : ot + counts[0] * st : st,
        oh : oh + counts[1] * sh : sh,
        ow : ow + counts[2] * sw : sw,
    ]
    sub = np.transpose(sub, (0, 1, 2, 4, 5, 6, 3))  # -> (..., kt, kh, kw, C)
    n = counts[0] * counts[1] * counts[2]
    return np.ascontiguousarray(sub).reshape(n, kt * kh * kw * voxels.shape[3])


def merge_s2d(grid: np.ndarray, group: Triple, combine: str = "concat") -> np.ndarray:
    """Merge each g_t x g_h x g_w block of a (n_t, n_h, n_w, c) grid.

    "concat" joins member channels in t-major, h-major, w-major order;
    "mean" averages members (used for centers). Group (1,1,1) is the identity.
    """
    nt, nh, nw, c = grid.shape
    gt, gh, gw = group
    for n, g, name in ((nt, gt, "t"), (nh, gh, "h"), (nw, gw, "w")):
        if n % g != 0:
            from .errors import GridNotDivisible

            raise GridNotDivisible(
                f"grid axis {name} of size {n} is not divisible by group {g}"
            )
    blocks = grid.reshape(nt // gt, gt, nh // gh, gh, nw // gw, gw, c)
    blocks = np.transpose(blocks, (0, 2, 4, 1, 3, 5, 6))
    if combine == "concat":
        return blocks.reshape(nt // gt, nh // gh, nw // gw, gt * gh * gw * c)
    if combine == "mean":
        return blocks.mean(axis=(3, 4, 5))
    raise ValueError(f"unknown combine mode {combine!r}")


def unmerge_s2d(merged: np.ndarray, group: Triple, channels: int) -> np.ndarray:
    """Exact inverse of merge_s2d(..., "concat"): split channels back onto the
    pre-merge grid. Used by the adjoint."""
    mt, mh, mw, _ = merged.shape
    gt, gh, gw = group
    blocks = merged.reshape(mt, mh, mw, gt, gh, gw, channels)
    blocks = np.transpose(blocks, (0, 3, 1, 4, 2, 5, 6))
    return blocks.reshape(mt * gt, mh * gh, mw * gw, channels)


def _active_tubes(clip: VideoClip, bank: TubeBank) -> list[int]:
    if clip.is_image:
        active = bank.image_tube_indices()
        if not active:
            raise ConfigError("no image_applicable tube for an image input")
        return active
    return list(range(len(bank.tubes)))


def tokenize(clip: VideoClip, bank: TubeBank, kernels: KernelBank) -> TokenBatch:
    """Project every tube window to a token: flatten(window) . kernel + bias,
    then space-to-depth merge. Image inputs use only image_applicable tubes."""
    voxels = clip.voxels
    all_tokens = []
    all_centers = []
    all_ids = []
    for i in _active_tubes(clip, bank):
        tube = bank.tubes[i]
        kern, bias = resolve_kernel(kernels, bank, i)
        if kern.shape[3] != clip.channels:
            raise ShapeMismatch(
                f"tube {i}: kernel expects {kern.shape[3]} channels, clip has {clip.channels}"
            )
        pre = sampling_grid(tube, clip.dims, tube_index=i)
        post = token_grid(tube, clip.dims, tube_index=i)  # cached merged centers
        d_tube = kern.shape[4]
        wm = _window_matrix(voxels, tube, pre.counts).astype(kern.dtype, copy=False)
        pre_tok = wm @ kern.reshape(-1, d_tube) + bias
        grid = pre_tok.reshape(pre.counts + (d_tube,))
        merged = merge_s2d(grid, tube.s2d_group)
        all_tokens.append(merged.reshape(post.total, bank.hidden_size))
        all_centers.append(post.centers)
        all_ids.append(np.full(post.total, i, dtype=np.int64))
    return TokenBatch(
        tokens=np.concatenate(all_tokens, axis=0),
        centers=np.concatenate(all_centers, axis=0),
        tube_id=np.concatenate(all_ids, axis=0),
    )


def tokenize_gradient(
    upstream: np.ndarray,
    clip: VideoClip,
    bank: TubeBank,
    kernels: KernelBank,
    with_clip_grad: bool = False,
) -> TokenizeGrads:
    """Exact adjoint of tokenize: gradients for kernels and biases, and the
    input voxels when requested. Includes the s2d unmerge and, in interpolated
    mode, the adjoint of the trilinear resampling back to the base kernel."""
    upstream = np.asarray(upstream)
    voxels = clip.voxels
    active = _active_tubes(clip, bank)
    expected = sum(token_grid(bank.tubes[i], clip.dims, tube_index=i).total for i in active)
    if upstream.shape != (expected, bank.hidden_size):
        raise ShapeMismatch(
            f"upstream shape {upstream.shape} != ({expected}, {bank.hidden_size})"
        )
    d_biases = [np.zeros_like(b) for b in kernels.biases]
    d_kernels = None
    d_base = None
    if kernels.interpolated:
        d_base = np.zeros_like(kernels.base_kernel)
    else:
        d_kernels = [np.zeros_like(k) for k in kernels.kernels]
    d_clip = np.zeros_like(voxels) if with_clip_grad else None

    row = 0
    for i in active:
        tube = bank.tubes[i]
        kern, _ = resolve_kernel(kernels, bank, i)
        pre = sampling_grid(tube, clip.dims, tube_index=i)
        post = merged_counts(tube, pre.counts)
        n_post = post[0] * post[1] * post[2]
        du_merged = upstream[row : row + n_post].reshape(post + (bank.hidden_size,))
        row += n_post
        d_tube = kern.shape[4]
        du = unmerge_s2d(du_merged, tube.s2d_group, d_tube).reshape(pre.total, d_tube)
        wm = _window_matrix(voxels, tube, pre.counts).astype(kern.dtype, copy=False)
        dk_flat = wm.T @ du
        d_biases[i] += du.sum(axis=0)
        dk = dk_flat.reshape(kern.shape)
        if kernels.interpolated:
            d = kernels.base_kernel.shape[4]
            if d_tube != d:  # s2d tubes use a channel slice of the base kernel
                pad = np.zeros(kern.shape[:4] + (d,), dtype=dk.dtype)
                pad[..., :d_tube] = dk
                dk = pad
            d_base += interpolate_kernel_adjoint(dk, BASE_KERNEL_SHAPE, tube.kernel)
        else:
            d_kernels[i] += dk
        if with_clip_grad:
            kt, kh, kw = tube.kernel
            st, sh, sw = tube.sampling_stride()
            ot, oh, ow = tube.offset
            kern_flat = kern.reshape(-1, d_tube)
            contrib = du @ kern_flat.T  # (pre_total, kt*kh*kw*C)
            contrib = contrib.reshape(pre.counts + (kt, kh, kw, clip.channels))
            for a in range(pre.counts[0]):
                t0 = ot + a * st
                for b in range(pre.counts[1]):
                    h0 = oh + b * sh
                    for c in range(pre.counts[2]):
                        w0 = ow + c * sw
                        d_clip[t0 : t0 + kt, h0 : h0 + kh, w0 : w0 + kw] += contrib[a, b, c]
    return TokenizeGrads(kernels=d_kernels, biases=d_biases, base_kernel=d_base, clip=d_clip)


def coverage_counts(bank: TubeBank, input_dims: Triple, is_video: bool = True) -> np.ndarray:
    """Per-voxel count of tubes whose sampling windows contain the voxel."""
    dims = input_dims if is_video else (1, input_dims[1], input_dims[2])
    total = np.zeros(dims, dtype=np.int32)
    tube_indices = list(range(len(bank.tubes))) if is_video else bank.image_tube_indices()
    for i in tube_indices:
        tube = bank.tubes[i]
        pre = sampling_grid(tube, dims, tube_index=i)
        covered = np.zeros(dims, dtype=bool)
        kt, kh, kw = tube.kernel
        st, sh, sw = tube.sampling_stride()
        ot, oh, ow = tube.offset
        for a in range(pre.counts[0]):
            for b in range(pre.counts[1]):
                for c in range(pre.counts[2]):
                    covered[
                        ot + a * st : ot + a * st + kt,
                        oh + b * sh : oh + b * sh + kh,
                        ow + c * sw : ow + c * sw + kw,
                    ] = True
        total += covered
    return total


def write_clip(path: str | Path, clip: VideoClip) -> None:
    """Raw clip file: 4-byte magic "TVT0", then T, H, W, C as uint32 LE,
    then float32 LE voxels in C order."""
    t, h, w = clip.dims
    c = clip.channels
    with open(path, "wb") as fh:
        fh.write(CLIP_MAGIC)
        fh.write(struct.pack("<4I", t, h, w, c))
        fh.write(np.ascontiguousarray(clip.voxels, dtype="<f4").tobytes())


def read_clip(path: str | Path) -> VideoClip:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise BadClipFile(f"cannot read clip {path}: {exc}") from exc
    if len(raw) < 20 or raw[:4] != CLIP_MAGIC:
        raise BadClipFile(f"{path}: missing TVT0 header")
    t, h, w, c = struct.unpack("<4I", raw[4:20])
    count = t * h * w * c
    body = raw[20:]
    if len(body) != 4 * count:
        raise BadClipFile(
            f"{path}: expected {4 * count} payload bytes for dims {(t, h, w, c)}, got {len(body)}"
        )
    voxels = np.frombuffer(body, dtype="<f4").reshape(t, h, w, c).astype(np.float32)
    return VideoClip(voxels=voxels)
