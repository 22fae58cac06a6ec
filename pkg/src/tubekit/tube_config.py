"""Tube-bank geometry: token grids, bank validation, and cost estimates.

Everything here is pure arithmetic on immutable inputs, so all functions are
safe to call from any number of threads. Token counting uses valid-window
semantics: a window contributes only if it fits entirely inside the input
(no padding), giving ``n = floor((L - o - k) / s) + 1`` per axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import (
    BadGrouping,
    ConfigError,
    EmptyGrid,
    GridNotDivisible,
    StrideNotDivisible,
)

Triple = tuple[int, int, int]

AXIS_NAMES = ("t", "h", "w")


def _as_triple(value, name: str, minimum: int) -> Triple:
    try:
        items = tuple(int(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a sequence of 3 integers, got {value!r}") from exc
    if len(items) != 3:
        raise ConfigError(f"{name} must have 3 components, got {len(items)}")
    if any(v < minimum for v in items):
        raise ConfigError(f"{name} components must be >= {minimum}, got {items}")
    return items  # type: ignore[return-value]


@dataclass(frozen=True)
class TubeSpec:
    """One sampling tube: kernel shape, strides, start offset, and optional
    space-to-depth grouping.

    ``s2d_group`` of (1,1,1) disables merging. Otherwise the tube samples on a
    denser grid (stride divided by the group) with tokens of reduced channel
    width, and grid-adjacent tokens are concatenated back to full width.
    """

    kernel: Triple
    stride: Triple
    offset: Triple = (0, 0, 0)
    s2d_group: Triple = (1, 1, 1)
    image_applicable: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel", _as_triple(self.kernel, "kernel", 1))
        object.__setattr__(self, "stride", _as_triple(self.stride, "stride", 1))
        object.__setattr__(self, "offset", _as_triple(self.offset, "offset", 0))
        object.__setattr__(self, "s2d_group", _as_triple(self.s2d_group, "s2d_group", 1))
        if self.image_applicable and self.kernel[0] != 1:
            raise ConfigError(
                f"image_applicable tubes need a temporal kernel of 1, got {self.kernel}"
            )

    @property
    def s2d_factor(self) -> int:
        g = self.s2d_group
        return g[0] * g[1] * g[2]

    @property
    def kernel_volume(self) -> int:
        k = self.kernel
        return k[0] * k[1] * k[2]

    def sampling_stride(self) -> Triple:
        """Stride of the pre-merge sampling grid (stride / group per axis)."""
        out = []
        for axis in range(3):
            s, g = self.stride[axis], self.s2d_group[axis]
            if s % g != 0:
                raise StrideNotDivisible(
                    f"s2d group {g} does not divide stride {s} on axis "
                    f"{AXIS_NAMES[axis]} for tube {self.kernel}"
                )
            out.append(s // g)
        return tuple(out)  # type: ignore[return-value]

    def to_dict(self) -> dict:
        return {
            "kernel": list(self.kernel),
            "stride": list(self.stride),
            "offset": list(self.offset),
            "s2d_group": list(self.s2d_group),
            "image_applicable": self.image_applicable,
        }


def s2d_preset(name: str) -> Triple:
    """Map a shorthand like "2x-temporal" or "4x-spatial" to a group triple."""
    if name in ("none", "1x"):
        return (1, 1, 1)
    try:
        factor_s, axis = name.split("-")
        factor = int(factor_s.rstrip("x"))
    except ValueError as exc:
        raise ConfigError(f"unknown s2d preset {name!r}") from exc
    if axis == "temporal":
        return (factor, 1, 1)
    if axis == "spatial":
        root = math.isqrt(factor)
        if root * root != factor:
            raise ConfigError(f"spatial s2d factor must be a perfect square, got {factor}")
        return (1, root, root)
    raise ConfigError(f"unknown s2d preset axis {axis!r}")


@dataclass(frozen=True)
class TubeBank:
    """An ordered collection of tubes sharing one encoder hidden size."""

    tubes: tuple[TubeSpec, ...]
    hidden_size: int
    tau: float = 10000.0

    def __post_init__(self):
        object.__setattr__(self, "tubes", tuple(self.tubes))
        if len(self.tubes) == 0:
            raise ConfigError("a tube bank needs at least one tube")
        if self.hidden_size < 1:
            raise ConfigError(f"hidden_size must be positive, got {self.hidden_size}")
        if not self.tau > 1:
            raise ConfigError(f"tau must be > 1, got {self.tau}")
        if not any(t.image_applicable for t in self.tubes):
            raise ConfigError("a tube bank needs at least one image_applicable tube")

    def image_tube_indices(self) -> list[int]:
        return [i for i, t in enumerate(self.tubes) if t.image_applicable]

    def active_tubes(self, is_video: bool) -> list[int]:
        if is_video:
            return list(range(len(self.tubes)))
        return self.image_tube_indices()

    def to_dict(self) -> dict:
        return {
            "hidden_size": self.hidden_size,
            "tau": self.tau,
            "tubes": [t.to_dict() for t in self.tubes],
        }


def bank_from_dict(data: dict) -> TubeBank:
    tubes = []
    for i, td in enumerate(data.get("tubes", [])):
        try:
            tubes.append(
                TubeSpec(
                    kernel=td["kernel"],
                    stride=td["stride"],
                    offset=td.get("offset", (0, 0, 0)),
                    s2d_group=td.get("s2d_group", (1, 1, 1)),
                    image_applicable=bool(td.get("image_applicable", False)),
                )
            )
        except KeyError as exc:
            raise ConfigError(f"tube {i} is missing field {exc}") from exc
    return TubeBank(
        tubes=tuple(tubes),
        hidden_size=int(data["hidden_size"]),
        tau=float(data.get("tau", 10000.0)),
    )


@dataclass(frozen=True)
class TokenGrid:
    """A per-tube token grid: counts per axis plus flattened center coords.

    Centers are continuous voxel coordinates in the raw input frame, ordered
    t-major then h-major then w-major. ``centers[i] = (c_t, c_h, c_w)``.
    """

    counts: Triple
    centers: np.ndarray  # (n, 3) float64

    @property
    def total(self) -> int:
        return self.counts[0] * self.counts[1] * self.counts[2]


def axis_token_count(length: int, kernel: int, stride: int, offset: int) -> int:
    """Valid-window count on one axis; 0 when no window fits."""
    span = length - offset - kernel
    if span < 0:
        return 0
    return span // stride + 1


def axis_centers(kernel: int, stride: int, offset: int, count: int) -> np.ndarray:
    idx = np.arange(count, dtype=np.float64)
    return offset + idx * stride + (kernel - 1) / 2.0


def _grid_from_axes(counts: Triple, per_axis: list[np.ndarray]) -> TokenGrid:
    ct, ch, cw = np.meshgrid(per_axis[0], per_axis[1], per_axis[2], indexing="ij")
    centers = np.stack([ct.ravel(), ch.ravel(), cw.ravel()], axis=1)
    centers.setflags(write=False)  # cached grids are shared; see lru_cache below
    return TokenGrid(counts=counts, centers=centers)


@lru_cache(maxsize=4096)
def _sampling_grid_cached(tube: TubeSpec, input_dims: Triple) -> TokenGrid:
    strides = tube.sampling_stride()
    counts = []
    axes = []
    for axis in range(3):
        n = axis_token_count(input_dims[axis], tube.kernel[axis], strides[axis], tube.offset[axis])
        if n < 1:
            raise EmptyGrid(
                f"tube {tube.kernel} yields no windows on axis {AXIS_NAMES[axis]}: "
                f"offset {tube.offset[axis]} + kernel {tube.kernel[axis]} exceeds "
                f"input {input_dims[axis]}",
                axis=AXIS_NAMES[axis],
            )
        counts.append(n)
        axes.append(axis_centers(tube.kernel[axis], strides[axis], tube.offset[axis], n))
    return _grid_from_axes(tuple(counts), axes)


def sampling_grid(tube: TubeSpec, input_dims: Triple, tube_index: int | None = None) -> TokenGrid:
    """Pre-merge grid of actual sampling windows (reduced strides for s2d)."""
    try:
        return _sampling_grid_cached(tube, tuple(input_dims))
    except EmptyGrid as err:
        err.tube_index = tube_index
        raise


def merged_counts(tube: TubeSpec, pre_counts: Triple) -> Triple:
    out = []
    for axis in range(3):
        n, g = pre_counts[axis], tube.s2d_group[axis]
        if n % g != 0:
            raise GridNotDivisible(
                f"pre-merge count {n} on axis {AXIS_NAMES[axis]} is not divisible "
                f"by s2d group {g} for tube {tube.kernel}"
            )
        out.append(n // g)
    return tuple(out)  # type: ignore[return-value]


@lru_cache(maxsize=4096)
def _token_grid_cached(tube: TubeSpec, input_dims: Triple) -> TokenGrid:
    pre = _sampling_grid_cached(tube, input_dims)
    post = merged_counts(tube, pre.counts)
    axes = []
    strides = tube.sampling_stride()
    for axis in range(3):
        c = axis_centers(tube.kernel[axis], strides[axis], tube.offset[axis], pre.counts[axis])
        g = tube.s2d_group[axis]
        axes.append(c.reshape(post[axis], g).mean(axis=1))
    return _grid_from_axes(post, axes)


def token_grid(tube: TubeSpec, input_dims: Triple, tube_index: int | None = None) -> TokenGrid:
    """Post-merge token grid: counts and centers after space-to-depth merging.

    Merged centers are arithmetic means of the member window centers.
    """
    try:
        return _token_grid_cached(tube, tuple(input_dims))
    except EmptyGrid as err:
        err.tube_index = tube_index
        raise


@dataclass
class TubeReport:
    index: int
    tube: TubeSpec
    pre_counts: Triple | None = None
    counts: Triple | None = None
    tokens: int | None = None
    error: str | None = None


@dataclass
class ValidationReport:
    input_dims: Triple
    tubes: list[TubeReport]
    errors: list[Exception] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.errors

    @property
    def total_tokens(self) -> int:
        return sum(r.tokens or 0 for r in self.tubes)

    def raise_first(self) -> None:
        if self.errors:
            raise self.errors[0]


def validate_bank(bank: TubeBank, input_dims: Triple) -> ValidationReport:
    """Check every tube against the input: each must yield at least one token
    on every axis, and each s2d factor must divide the hidden size."""
    input_dims = _as_triple(input_dims, "input_dims", 1)
    report = ValidationReport(input_dims=input_dims, tubes=[])
    for i, tube in enumerate(bank.tubes):
        entry = TubeReport(index=i, tube=tube)
        report.tubes.append(entry)
        if bank.hidden_size % tube.s2d_factor != 0:
            err = BadGrouping(
                f"tube {i}: s2d factor {tube.s2d_factor} does not divide "
                f"hidden size {bank.hidden_size}"
            )
            entry.error = str(err)
            report.errors.append(err)
            continue
        try:
            pre = sampling_grid(tube, input_dims, tube_index=i)
            post = merged_counts(tube, pre.counts)
        except (EmptyGrid, StrideNotDivisible, GridNotDivisible) as err:
            entry.error = str(err)
            report.errors.append(err)
            continue
        entry.pre_counts = pre.counts
        entry.counts = post
        entry.tokens = post[0] * post[1] * post[2]
    return report


def total_tokens(bank: TubeBank, input_dims: Triple, is_video: bool = True) -> int:
    """Sum of post-merge token counts over the tubes active for this input.

    Image inputs use only image_applicable tubes on a single-frame grid.
    """
    input_dims = _as_triple(input_dims, "input_dims", 1)
    dims = input_dims if is_video else (1, input_dims[1], input_dims[2])
    total = 0
    for i in bank.active_tubes(is_video):
        tube = bank.tubes[i]
        if bank.hidden_size % tube.s2d_factor != 0:
            raise BadGrouping(
                f"tube {i}: s2d factor {tube.s2d_factor} does not divide "
                f"hidden size {bank.hidden_size}"
            )
        total += token_grid(tube, dims, tube_index=i).total
    return total


@dataclass
class TubeCost:
    index: int
    kernel: Triple
    pre_tokens: int
    tokens: int
    params: int
    # The conventional per-tube size quoted as a multiple of the hidden size:
    # the kernel volume, independent of input channels and s2d reduction.
    param_coeff_of_hidden: int
    macs: int


@dataclass
class CostReport:
    input_dims: Triple
    tokens: int
    per_tube: list[TubeCost]
    tokenizer_params: int
    tokenizer_macs: int
    encoder_params: int
    attn_macs_per_layer: int
    mlp_macs_per_layer: int
    encoder_macs: int
    total_params: int
    total_macs: int

    def to_dict(self) -> dict:
        return {
            "input_dims": list(self.input_dims),
            "tokens": self.tokens,
            "per_tube": [
                {
                    "index": c.index,
                    "kernel": list(c.kernel),
                    "pre_tokens": c.pre_tokens,
                    "tokens": c.tokens,
                    "params": c.params,
                    "param_coeff_of_hidden": c.param_coeff_of_hidden,
                    "macs": c.macs,
                }
                for c in self.per_tube
            ],
            "tokenizer_params": self.tokenizer_params,
            "tokenizer_macs": self.tokenizer_macs,
            "encoder_params": self.encoder_params,
            "attn_macs_per_layer": self.attn_macs_per_layer,
            "mlp_macs_per_layer": self.mlp_macs_per_layer,
            "encoder_macs": self.encoder_macs,
            "total_params": self.total_params,
            "total_macs": self.total_macs,
        }


def encoder_param_count(layers: int, hidden: int, mlp_size: int) -> int:
    d, m = hidden, mlp_size
    per_layer = (
        4 * (d * d + d)  # q, k, v, o projections with biases
        + 2 * (2 * d)  # two layer norms
        + d * m + m + m * d + d  # mlp with biases
    )
    return layers * per_layer + 2 * d  # plus final layer norm


def estimate_cost(
    bank: TubeBank,
    input_dims: Triple,
    encoder_cfg,
    in_channels: int = 3,
    is_video: bool = True,
) -> CostReport:
    """Deterministic parameter and multiply-accumulate estimate.

    Tokenizer MACs: pre-merge windows x kernel volume x C x per-tube width.
    Per layer: attention 4*n*d^2 + 2*n^2*d, MLP 2*n*d*mlp.
    """
    report = validate_bank(bank, input_dims)
    report.raise_first()
    d = bank.hidden_size
    dims = input_dims if is_video else (1, input_dims[1], input_dims[2])
    per_tube: list[TubeCost] = []
    for i in bank.active_tubes(is_video):
        tube = bank.tubes[i]
        pre = sampling_grid(tube, dims, tube_index=i)
        post = merged_counts(tube, pre.counts)
        n_post = post[0] * post[1] * post[2]
        d_tube = d // tube.s2d_factor
        params = tube.kernel_volume * in_channels * d_tube + d_tube
        macs = pre.total * tube.kernel_volume * in_channels * d_tube
        per_tube.append(
            TubeCost(
                index=i,
                kernel=tube.kernel,
                pre_tokens=pre.total,
                tokens=n_post,
                params=params,
                param_coeff_of_hidden=tube.kernel_volume,
                macs=macs,
            )
        )
    n = sum(c.tokens for c in per_tube)
    layers = int(encoder_cfg.layers)
    mlp_size = int(encoder_cfg.mlp_size)
    attn_macs = 4 * n * d * d + 2 * n * n * d
    mlp_macs = 2 * n * d * mlp_size
    enc_params = encoder_param_count(layers, d, mlp_size)
    tok_params = sum(c.params for c in per_tube)
    tok_macs = sum(c.macs for c in per_tube)
    enc_macs = layers * (attn_macs + mlp_macs)
    return CostReport(
        input_dims=dims,
        tokens=n,
        per_tube=per_tube,
        tokenizer_params=tok_params,
        tokenizer_macs=tok_macs,
        encoder_params=enc_params,
        attn_macs_per_layer=attn_macs,
        mlp_macs_per_layer=mlp_macs,
        encoder_macs=enc_macs,
        total_params=tok_params + enc_params,
        total_macs=tok_macs + enc_macs,
    )


@dataclass(frozen=True)
class FileConfig:
    """Parsed contents of a JSON config file."""

    bank: TubeBank
    encoder: dict  # layers, heads, mlp_size
    heads: dict[str, int]  # name -> classes
    expected_tokens: int | None = None

    @property
    def hidden_size(self) -> int:
        return self.bank.hidden_size


def _require(data: dict, key: str, kind, where: str):
    if key not in data:
        raise ConfigError(f"{where}: missing required key {key!r}")
    value = data[key]
    if kind is int and isinstance(value, bool):
        raise ConfigError(f"{where}: key {key!r} must be {kind.__name__}")
    if not isinstance(value, kind):
        raise ConfigError(f"{where}: key {key!r} must be {kind.__name__}, got {type(value).__name__}")
    return value


def config_from_dict(data: dict, where: str = "config") -> FileConfig:
    _require(data, "hidden_size", int, where)
    tubes = _require(data, "tubes", list, where)
    if not tubes:
        raise ConfigError(f"{where}: 'tubes' must be non-empty")
    enc = _require(data, "encoder", dict, where)
    for key in ("layers", "heads", "mlp_size"):
        _require(enc, key, int, f"{where}.encoder")
    heads = _require(data, "heads", list, where)
    head_map: dict[str, int] = {}
    for i, h in enumerate(heads):
        name = _require(h, "name", str, f"{where}.heads[{i}]")
        classes = _require(h, "classes", int, f"{where}.heads[{i}]")
        if classes < 2:
            raise ConfigError(f"{where}.heads[{i}]: classes must be >= 2")
        head_map[name] = classes
    bank = bank_from_dict(data)
    d = bank.hidden_size
    if d % int(enc["heads"]) != 0:
        raise ConfigError(f"{where}: hidden_size {d} not divisible by encoder heads {enc['heads']}")
    expected = data.get("expected_tokens")
    if expected is not None:
        expected = int(expected)
    return FileConfig(bank=bank, encoder=dict(enc), heads=head_map, expected_tokens=expected)


def load_config(path: str | Path) -> FileConfig:
    path = Path(path)
    try:
        raw = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top-level JSON value must be an object")
    return config_from_dict(data, where=str(path))
