"""Minimal pre-norm transformer encoder with exact hand-derived gradients.

Blocks follow y = MSA(LN(z)) + z and z' = MLP(LN(y)) + y, with softmax
attention scaled by (d/h)**-0.5. When a gate layer s is configured the block
output becomes z' = MLP(LN(y)) + y + tanh(alpha) * z0, where z0 is the token
matrix after positional embedding (the encoder input) and alpha starts at 0,
so enabling the gate changes nothing until alpha moves.

Parameters live in a flat dict[str, np.ndarray] so the optimizer, freezing,
and checkpoints can treat them uniformly. Key layout:

    enc.{l}.ln1.g / .b          enc.{l}.attn.{wq,bq,wk,bk,wv,bv,wo,bo}
    enc.{l}.ln2.g / .b          enc.{l}.mlp.{w1,b1,w2,b2}
    enc.final_ln.g / .b         heads.{name}.w / .b
    gate.alpha                  relbias.table (optional)
    tubes.{i}.kernel / .bias    tubes.base_kernel (interpolated mode)
    cls_token (pool_mode=cls)   pos.learned.{n} (learned-position baseline)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConfigError,
    IncompatibleWidths,
    MissingTrace,
    NonFinite,
    ShapeMismatch,
    UnknownHead,
)
from .posemb import EmbeddingParams, add_to_tokens, embed_positions
from .tokenizer import (
    KernelBank,
    TokenBatch,
    VideoClip,
    init_kernels,
    tokenize,
    tokenize_gradient,
    trunc_normal,
)
from .tube_config import Triple, TubeBank, TubeSpec, token_grid

Params = dict[str, np.ndarray]

# Fixed tanh-GELU coefficients; pinned so golden files stay stable.
GELU_C0 = 0.7978845608
GELU_C1 = 0.044715
LN_EPS = 1e-6
INIT_STD = 0.02

# Signed log2 distance buckets for the optional relative attention bias.
REL_BUCKETS = 5  # per sign, plus zero -> table side 2 * REL_BUCKETS + 1


@dataclass(frozen=True)
class EncoderConfig:
    layers: int
    hidden: int
    heads: int
    mlp_size: int
    pool_mode: str = "mean"  # "mean" | "cls"
    gate_layer: int | None = None
    freeze_below: int = 0
    relative_bias: bool = False
    ln_eps: float = LN_EPS

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.gate_layer is not None and not (0 <= self.gate_layer < self.layers):
            raise ConfigError(f"gate_layer {self.gate_layer} out of range [0, {self.layers})")
        if not (0 <= self.freeze_below <= self.layers):
            raise ConfigError(f"freeze_below {self.freeze_below} out of range [0, {self.layers}]")
        if self.pool_mode not in ("mean", "cls"):
            raise ConfigError(f"pool_mode must be 'mean' or 'cls', got {self.pool_mode!r}")


@dataclass
class LayerTrace:
    x: np.ndarray
    xhat1: np.ndarray
    inv1: np.ndarray
    ln1: np.ndarray
    qh: np.ndarray
    kh: np.ndarray
    vh: np.ndarray
    attn: np.ndarray
    ctx: np.ndarray
    y: np.ndarray
    yhat2: np.ndarray
    inv2: np.ndarray
    ln2: np.ndarray
    h1: np.ndarray
    tnh: np.ndarray
    act: np.ndarray


@dataclass
class ForwardTrace:
    z0: np.ndarray
    layers: list[LayerTrace]
    final_in: np.ndarray
    final_xhat: np.ndarray
    final_inv: np.ndarray
    rel_idx: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None


def init_encoder_params(
    cfg: EncoderConfig,
    heads: dict[str, int],
    seed: int,
    dtype=np.float32,
) -> Params:
    """LN at identity, truncated-normal projections, zero-initialized heads,
    gate alpha exactly 0."""
    rng = np.random.default_rng(seed)
    d, m = cfg.hidden, cfg.mlp_size
    p: Params = {}
    for l in range(cfg.layers):
        p[f"enc.{l}.ln1.g"] = np.ones(d, dtype=dtype)
        p[f"enc.{l}.ln1.b"] = np.zeros(d, dtype=dtype)
        for name in ("wq", "wk", "wv", "wo"):
            p[f"enc.{l}.attn.{name}"] = trunc_normal(rng, (d, d), INIT_STD, dtype)
        for name in ("bq", "bk", "bv", "bo"):
            p[f"enc.{l}.attn.{name}"] = np.zeros(d, dtype=dtype)
        p[f"enc.{l}.ln2.g"] = np.ones(d, dtype=dtype)
        p[f"enc.{l}.ln2.b"] = np.zeros(d, dtype=dtype)
        p[f"enc.{l}.mlp.w1"] = trunc_normal(rng, (d, m), INIT_STD, dtype)
        p[f"enc.{l}.mlp.b1"] = np.zeros(m, dtype=dtype)
        p[f"enc.{l}.mlp.w2"] = trunc_normal(rng, (m, d), INIT_STD, dtype)
        p[f"enc.{l}.mlp.b2"] = np.zeros(d, dtype=dtype)
    p["enc.final_ln.g"] = np.ones(d, dtype=dtype)
    p["enc.final_ln.b"] = np.zeros(d, dtype=dtype)
    for name, classes in heads.items():
        p[f"heads.{name}.w"] = np.zeros((d, classes), dtype=dtype)
        p[f"heads.{name}.b"] = np.zeros(classes, dtype=dtype)
    if cfg.gate_layer is not None:
        p["gate.alpha"] = np.zeros((), dtype=dtype)
    if cfg.relative_bias:
        side = 2 * REL_BUCKETS + 1
        p["relbias.table"] = np.zeros((side, side, side), dtype=dtype)
    if cfg.pool_mode == "cls":
        p["cls_token"] = trunc_normal(rng, (d,), INIT_STD, dtype)
    return p


def _ln_forward(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float):
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return g * xhat + b, xhat, inv


def _ln_backward(dy: np.ndarray, xhat: np.ndarray, inv: np.ndarray, g: np.ndarray):
    dxhat = dy * g
    mu1 = dxhat.mean(axis=-1, keepdims=True)
    mu2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mu1 - xhat * mu2)
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    return dx, dg, db


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _gelu(h: np.ndarray):
    tnh = np.tanh(GELU_C0 * (h + GELU_C1 * h * h * h))
    return 0.5 * h * (1.0 + tnh), tnh


def _gelu_backward(dact: np.ndarray, h: np.ndarray, tnh: np.ndarray) -> np.ndarray:
    inner = GELU_C0 * (1.0 + 3.0 * GELU_C1 * h * h)
    return dact * (0.5 * (1.0 + tnh) + 0.5 * h * (1.0 - tnh * tnh) * inner)


def _split_heads(x: np.ndarray, h: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, h, d // h).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def _rel_bucket(delta: np.ndarray) -> np.ndarray:
    mag = np.abs(delta)
    idx = np.zeros(delta.shape, dtype=np.int64)
    nz = mag > 0
    idx[nz] = np.minimum(np.ceil(np.log2(mag[nz] + 1.0)), REL_BUCKETS).astype(np.int64)
    return np.sign(delta).astype(np.int64) * idx + REL_BUCKETS


def _rel_indices(centers: np.ndarray):
    delta = centers[:, None, :] - centers[None, :, :]
    b = _rel_bucket(delta)
    return b[:, :, 0], b[:, :, 1], b[:, :, 2]


def encode(
    tokens: np.ndarray,
    cfg: EncoderConfig,
    params: Params,
    training: bool = False,
    centers: np.ndarray | None = None,
) -> tuple[np.ndarray, ForwardTrace | None]:
    """Run the encoder; with training=True, return the trace needed by
    backward(). Raises NonFinite if any block output diverges."""
    z = np.asarray(tokens)
    if z.ndim != 2 or z.shape[1] != cfg.hidden:
        raise ShapeMismatch(f"tokens must be (n, {cfg.hidden}), got {z.shape}")
    if z.shape[0] < 1:
        raise ShapeMismatch("need at least one token")
    if not np.all(np.isfinite(z)):
        raise NonFinite("non-finite input tokens")
    z0 = z
    rel_idx = None
    if cfg.relative_bias:
        if centers is None:
            raise ConfigError("relative_bias needs token centers")
        rel_idx = _rel_indices(np.asarray(centers))
    alpha = params.get("gate.alpha")
    # divergence is reported via NonFinite from the explicit checks below,
    # not as numpy warnings mid-computation
    with np.errstate(over="ignore", invalid="ignore"):
        return _encode_body(z, z0, cfg, params, training, rel_idx, alpha)


def _encode_body(z, z0, cfg, params, training, rel_idx, alpha):
    eps = cfg.ln_eps
    scale = 1.0 / math.sqrt(cfg.hidden // cfg.heads)
    layers: list[LayerTrace] = []
    for l in range(cfg.layers):
        x = z
        ln1, xhat1, inv1 = _ln_forward(x, params[f"enc.{l}.ln1.g"], params[f"enc.{l}.ln1.b"], eps)
        q = ln1 @ params[f"enc.{l}.attn.wq"] + params[f"enc.{l}.attn.bq"]
        k = ln1 @ params[f"enc.{l}.attn.wk"] + params[f"enc.{l}.attn.bk"]
        v = ln1 @ params[f"enc.{l}.attn.wv"] + params[f"enc.{l}.attn.bv"]
        qh, kh, vh = (_split_heads(a, cfg.heads) for a in (q, k, v))
        scores = (qh @ kh.transpose(0, 2, 1)) * scale
        if rel_idx is not None:
            scores = scores + params["relbias.table"][rel_idx][None, :, :]
        attn = _softmax_rows(scores)
        ctx = _merge_heads(attn @ vh)
        attn_out = ctx @ params[f"enc.{l}.attn.wo"] + params[f"enc.{l}.attn.bo"]
        y = attn_out + x
        ln2, yhat2, inv2 = _ln_forward(y, params[f"enc.{l}.ln2.g"], params[f"enc.{l}.ln2.b"], eps)
        h1 = ln2 @ params[f"enc.{l}.mlp.w1"] + params[f"enc.{l}.mlp.b1"]
        act, tnh = _gelu(h1)
        m = act @ params[f"enc.{l}.mlp.w2"] + params[f"enc.{l}.mlp.b2"]
        z = m + y
        if cfg.gate_layer == l:
            z = z + np.tanh(alpha) * z0
        if not np.all(np.isfinite(z)):
            raise NonFinite(f"non-finite activations after block {l}")
        if training:
            layers.append(
                LayerTrace(x, xhat1, inv1, ln1, qh, kh, vh, attn, ctx, y, yhat2, inv2, ln2, h1, tnh, act)
            )
    features, fxhat, finv = _ln_forward(z, params["enc.final_ln.g"], params["enc.final_ln.b"], eps)
    if not np.all(np.isfinite(features)):
        raise NonFinite("non-finite activations after final layer norm")
    trace = None
    if training:
        trace = ForwardTrace(z0=z0, layers=layers, final_in=z, final_xhat=fxhat, final_inv=finv, rel_idx=rel_idx)
    return features, trace


def backward(
    d_features: np.ndarray,
    trace: ForwardTrace | None,
    cfg: EncoderConfig,
    params: Params,
) -> tuple[Params, np.ndarray]:
    """Exact adjoint of encode. Returns (gradients, d_tokens). Parameters in
    blocks below freeze_below get zero gradients (the final layer norm counts
    as frozen only when every block is frozen)."""
    if trace is None:
        raise MissingTrace("backward needs the trace from a training-mode encode")
    grads: Params = {}
    scale = 1.0 / math.sqrt(cfg.hidden // cfg.heads)
    dz, dg, db = _ln_backward(
        np.asarray(d_features), trace.final_xhat, trace.final_inv, params["enc.final_ln.g"]
    )
    grads["enc.final_ln.g"] = dg
    grads["enc.final_ln.b"] = db
    dz0_gate = None
    if cfg.relative_bias:
        grads["relbias.table"] = np.zeros_like(params["relbias.table"])
    for l in reversed(range(cfg.layers)):
        tr = trace.layers[l]
        if cfg.gate_layer == l:
            alpha = params["gate.alpha"]
            th = np.tanh(alpha)
            grads["gate.alpha"] = np.asarray(
                (dz * trace.z0).sum() * (1.0 - th * th), dtype=alpha.dtype
            )
            dz0_gate = th * dz
        # MLP branch: z = act @ w2 + b2 + y
        dm = dz
        dy = dz.copy()
        grads[f"enc.{l}.mlp.w2"] = tr.act.T @ dm
        grads[f"enc.{l}.mlp.b2"] = dm.sum(axis=0)
        dact = dm @ params[f"enc.{l}.mlp.w2"].T
        dh1 = _gelu_backward(dact, tr.h1, tr.tnh)
        grads[f"enc.{l}.mlp.w1"] = tr.ln2.T @ dh1
        grads[f"enc.{l}.mlp.b1"] = dh1.sum(axis=0)
        dln2 = dh1 @ params[f"enc.{l}.mlp.w1"].T
        dy_ln, dg2, db2 = _ln_backward(dln2, tr.yhat2, tr.inv2, params[f"enc.{l}.ln2.g"])
        dy += dy_ln
        grads[f"enc.{l}.ln2.g"] = dg2
        grads[f"enc.{l}.ln2.b"] = db2
        # attention branch: y = ctx @ wo + bo + x
        dao = dy
        dx = dy.copy()
        grads[f"enc.{l}.attn.wo"] = tr.ctx.T @ dao
        grads[f"enc.{l}.attn.bo"] = dao.sum(axis=0)
        dctxh = _split_heads(dao @ params[f"enc.{l}.attn.wo"].T, cfg.heads)
        dattn = dctxh @ tr.vh.transpose(0, 2, 1)
        dvh = tr.attn.transpose(0, 2, 1) @ dctxh
        dscores = tr.attn * (dattn - (dattn * tr.attn).sum(axis=-1, keepdims=True))
        if cfg.relative_bias:
            bt, bh, bw = trace.rel_idx
            np.add.at(grads["relbias.table"], (bt, bh, bw), dscores.sum(axis=0))
        dqh = (dscores @ tr.kh) * scale
        dkh = (dscores.transpose(0, 2, 1) @ tr.qh) * scale
        dq, dk, dv = (_merge_heads(a) for a in (dqh, dkh, dvh))
        grads[f"enc.{l}.attn.wq"] = tr.ln1.T @ dq
        grads[f"enc.{l}.attn.bq"] = dq.sum(axis=0)
        grads[f"enc.{l}.attn.wk"] = tr.ln1.T @ dk
        grads[f"enc.{l}.attn.bk"] = dk.sum(axis=0)
        grads[f"enc.{l}.attn.wv"] = tr.ln1.T @ dv
        grads[f"enc.{l}.attn.bv"] = dv.sum(axis=0)
        dln1 = (
            dq @ params[f"enc.{l}.attn.wq"].T
            + dk @ params[f"enc.{l}.attn.wk"].T
            + dv @ params[f"enc.{l}.attn.wv"].T
        )
        dx_ln, dg1, db1 = _ln_backward(dln1, tr.xhat1, tr.inv1, params[f"enc.{l}.ln1.g"])
        dx += dx_ln
        grads[f"enc.{l}.ln1.g"] = dg1
        grads[f"enc.{l}.ln1.b"] = db1
        dz = dx
    if dz0_gate is not None:
        dz = dz + dz0_gate
    for name in frozen_encoder_names(cfg):
        if name in grads:
            grads[name] = np.zeros_like(grads[name])
    return grads, dz


def frozen_encoder_names(cfg: EncoderConfig) -> set[str]:
    frozen: set[str] = set()
    for l in range(min(cfg.freeze_below, cfg.layers)):
        frozen.update(
            {f"enc.{l}.ln1.g", f"enc.{l}.ln1.b", f"enc.{l}.ln2.g", f"enc.{l}.ln2.b"}
        )
        frozen.update(f"enc.{l}.attn.{n}" for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"))
        frozen.update(f"enc.{l}.mlp.{n}" for n in ("w1", "b1", "w2", "b2"))
    if cfg.freeze_below >= cfg.layers:
        frozen.update({"enc.final_ln.g", "enc.final_ln.b"})
    return frozen


def pool(features: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    if cfg.pool_mode == "cls":
        return features[0]
    return features.mean(axis=0)


def classify(features: np.ndarray, head_name: str, params: Params, cfg: EncoderConfig) -> np.ndarray:
    key = f"heads.{head_name}.w"
    if key not in params:
        raise UnknownHead(f"no classification head named {head_name!r}")
    return pool(features, cfg) @ params[key] + params[f"heads.{head_name}.b"]


def classify_backward(
    d_logits: np.ndarray,
    features: np.ndarray,
    head_name: str,
    params: Params,
    cfg: EncoderConfig,
) -> tuple[Params, np.ndarray]:
    key = f"heads.{head_name}.w"
    if key not in params:
        raise UnknownHead(f"no classification head named {head_name!r}")
    pooled = pool(features, cfg)
    grads = {
        key: np.outer(pooled, d_logits).astype(params[key].dtype),
        f"heads.{head_name}.b": d_logits.astype(params[key].dtype),
    }
    d_pooled = params[key] @ d_logits
    d_features = np.zeros_like(features)
    if cfg.pool_mode == "cls":
        d_features[0] = d_pooled
    else:
        d_features[:] = d_pooled / features.shape[0]
    return grads, d_features


# ---------------------------------------------------------------------------
# Full model: tube bank + kernels + positional embedding + encoder + heads.
# ---------------------------------------------------------------------------

POS_MODES = ("fixed", "none", "learned", "fixed_nostride")


@dataclass
class Model:
    bank: TubeBank
    cfg: EncoderConfig
    emb: EmbeddingParams
    heads: dict[str, int]
    params: Params
    input_dims: Triple
    in_channels: int = 1
    interpolated: bool = False
    pos_mode: str = "fixed"
    frozen_tubes: bool = False

    def kernel_bank(self) -> KernelBank:
        biases = [self.params[f"tubes.{i}.bias"] for i in range(len(self.bank.tubes))]
        if self.interpolated:
            return KernelBank(biases=biases, base_kernel=self.params["tubes.base_kernel"])
        kernels = [self.params[f"tubes.{i}.kernel"] for i in range(len(self.bank.tubes))]
        return KernelBank(biases=biases, kernels=kernels)

    def frozen_names(self) -> set[str]:
        frozen = frozen_encoder_names(self.cfg)
        if self.frozen_tubes:
            frozen.update(k for k in self.params if k.startswith("tubes."))
        return frozen

    def param_count(self) -> int:
        return sum(int(np.asarray(v).size) for v in self.params.values())


def build_model(
    bank: TubeBank,
    cfg: EncoderConfig,
    heads: dict[str, int],
    input_dims: Triple,
    in_channels: int = 1,
    seed: int = 0,
    dtype=np.float32,
    interpolated: bool = False,
    pos_mode: str = "fixed",
    exponent_mode: str = "normalized",
    learned_pos_lengths: tuple[int, ...] = (),
) -> Model:
    if pos_mode not in POS_MODES:
        raise ConfigError(f"pos_mode must be one of {POS_MODES}, got {pos_mode!r}")
    if cfg.hidden != bank.hidden_size:
        raise ConfigError(f"encoder hidden {cfg.hidden} != bank hidden {bank.hidden_size}")
    params = init_encoder_params(cfg, heads, seed, dtype)
    kb = init_kernels(bank, in_channels, seed + 1, dtype, interpolated=interpolated)
    for i, b in enumerate(kb.biases):
        params[f"tubes.{i}.bias"] = b
    if interpolated:
        params["tubes.base_kernel"] = kb.base_kernel
    else:
        for i, k in enumerate(kb.kernels):
            params[f"tubes.{i}.kernel"] = k
    if pos_mode == "learned":
        rng = np.random.default_rng(seed + 2)
        if not learned_pos_lengths:
            raise ConfigError("pos_mode='learned' needs learned_pos_lengths")
        for n in learned_pos_lengths:
            params[f"pos.learned.{n}"] = trunc_normal(rng, (n, cfg.hidden), INIT_STD, dtype)
    emb = EmbeddingParams(d=cfg.hidden, tau=bank.tau, exponent_mode=exponent_mode)
    return Model(
        bank=bank,
        cfg=cfg,
        emb=emb,
        heads=dict(heads),
        params=params,
        input_dims=tuple(input_dims),
        in_channels=in_channels,
        interpolated=interpolated,
        pos_mode=pos_mode,
    )


def add_head(model: Model, name: str, classes: int) -> None:
    dtype = model.params["enc.final_ln.g"].dtype
    model.heads[name] = classes
    model.params[f"heads.{name}.w"] = np.zeros((model.cfg.hidden, classes), dtype=dtype)
    model.params[f"heads.{name}.b"] = np.zeros(classes, dtype=dtype)


def grid_index_coords(bank: TubeBank, dims: Triple, is_video: bool) -> np.ndarray:
    """Per-token post-merge grid indices (the stride/offset-blind coordinates
    used by the fixed_nostride baseline)."""
    out = []
    for i in bank.active_tubes(is_video):
        counts = token_grid(bank.tubes[i], dims if is_video else (1, dims[1], dims[2]), i).counts
        it, ih, iw = np.meshgrid(
            np.arange(counts[0]), np.arange(counts[1]), np.arange(counts[2]), indexing="ij"
        )
        out.append(np.stack([it.ravel(), ih.ravel(), iw.ravel()], axis=1).astype(np.float64))
    return np.concatenate(out, axis=0)


def _positioned_tokens(model: Model, batch: TokenBatch, clip: VideoClip) -> np.ndarray:
    x = batch.tokens
    if model.pos_mode == "fixed":
        return add_to_tokens(x, batch.centers, model.emb)
    if model.pos_mode == "fixed_nostride":
        coords = grid_index_coords(model.bank, clip.dims, not clip.is_image)
        return add_to_tokens(x, coords, model.emb)
    if model.pos_mode == "learned":
        key = f"pos.learned.{x.shape[0]}"
        if key not in model.params:
            raise ConfigError(f"no learned position table for {x.shape[0]} tokens")
        return x + model.params[key]
    return x


@dataclass
class ApplyResult:
    batch: TokenBatch
    tokens: np.ndarray  # encoder input after positions (and cls token)
    features: np.ndarray
    trace: ForwardTrace | None
    centers: np.ndarray


def model_apply(model: Model, clip: VideoClip, training: bool = False) -> ApplyResult:
    batch = tokenize(clip, model.bank, model.kernel_bank())
    x = _positioned_tokens(model, batch, clip)
    centers = batch.centers
    if model.cfg.pool_mode == "cls":
        x = np.vstack([model.params["cls_token"][None, :], x])
        centers = np.vstack([np.zeros((1, 3)), centers])
    features, trace = encode(x, model.cfg, model.params, training=training, centers=centers)
    return ApplyResult(batch=batch, tokens=x, features=features, trace=trace, centers=centers)


def model_logits(model: Model, clip: VideoClip, head: str) -> np.ndarray:
    res = model_apply(model, clip, training=False)
    return classify(res.features, head, model.params, model.cfg)


def softmax_xent(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    shifted = logits - logits.max()
    log_z = np.log(np.exp(shifted).sum())
    loss = float(log_z - shifted[label])
    probs = np.exp(shifted - log_z)
    d_logits = probs
    d_logits[label] -= 1.0
    return loss, d_logits


def model_grads(model: Model, clip: VideoClip, label: int, head: str):
    """Full-chain loss and gradients: tokenize -> positions -> encode ->
    classify -> softmax cross-entropy. Frozen tube kernels get zero grads."""
    res = model_apply(model, clip, training=True)
    logits = classify(res.features, head, model.params, model.cfg)
    loss, d_logits = softmax_xent(logits, label)
    grads, d_feat = classify_backward(d_logits, res.features, head, model.params, model.cfg)
    enc_grads, d_tokens = backward(d_feat, res.trace, model.cfg, model.params)
    grads.update(enc_grads)
    if model.cfg.pool_mode == "cls":
        grads["cls_token"] = d_tokens[0].copy()
        d_tokens = d_tokens[1:]
    if model.pos_mode == "learned":
        grads[f"pos.learned.{d_tokens.shape[0]}"] = d_tokens.copy()
    tok = tokenize_gradient(d_tokens, clip, model.bank, model.kernel_bank())
    for i in range(len(model.bank.tubes)):
        grads[f"tubes.{i}.bias"] = tok.biases[i]
        if not model.interpolated:
            grads[f"tubes.{i}.kernel"] = tok.kernels[i]
    if model.interpolated:
        grads["tubes.base_kernel"] = tok.base_kernel
    if model.frozen_tubes:
        for k in list(grads):
            if k.startswith("tubes."):
                grads[k] = np.zeros_like(grads[k])
    return loss, grads, logits


def scale_up(
    small_bank: TubeBank,
    small_params: Params,
    large: Model,
    lift_group: Triple,
    freeze_below: int | None = None,
    gate_layer: int | None = None,
) -> Model:
    """Compose a large image model with a small model's video tubes.

    Small video-tube tokens of width d_small are lifted to d_large by
    space-to-depth channel concatenation of d_large/d_small grid-adjacent
    tokens: each lifted tube's s2d group is multiplied by lift_group, so the
    unchanged small kernels produce full-width tokens on the large model.
    Layers below freeze_below are frozen; the gate is inserted at gate_layer.
    """
    d_small = small_bank.hidden_size
    d_large = large.bank.hidden_size
    if d_large % d_small != 0:
        raise IncompatibleWidths(f"small width {d_small} does not divide large width {d_large}")
    ratio = d_large // d_small
    gt, gh, gw = lift_group
    if gt * gh * gw != ratio:
        raise IncompatibleWidths(
            f"lift group {lift_group} product {gt * gh * gw} != width ratio {ratio}"
        )
    tubes: list[TubeSpec] = [t for t in large.bank.tubes if t.image_applicable]
    n_image = len(tubes)
    lifted_src: list[int] = []
    for i, tube in enumerate(small_bank.tubes):
        if tube.image_applicable:
            continue
        group = tuple(g * lg for g, lg in zip(tube.s2d_group, lift_group))
        tubes.append(replace(tube, s2d_group=group))
        lifted_src.append(i)
    bank = TubeBank(tubes=tuple(tubes), hidden_size=d_large, tau=large.bank.tau)
    cfg = replace(
        large.cfg,
        freeze_below=large.cfg.freeze_below if freeze_below is None else freeze_below,
        gate_layer=gate_layer,
    )
    params: Params = {k: v.copy() for k, v in large.params.items() if not k.startswith("tubes.")}
    image_src = [i for i, t in enumerate(large.bank.tubes) if t.image_applicable]
    for new_i, old_i in enumerate(image_src):
        params[f"tubes.{new_i}.kernel"] = large.params[f"tubes.{old_i}.kernel"].copy()
        params[f"tubes.{new_i}.bias"] = large.params[f"tubes.{old_i}.bias"].copy()
    for off, old_i in enumerate(lifted_src):
        new_i = n_image + off
        params[f"tubes.{new_i}.kernel"] = small_params[f"tubes.{old_i}.kernel"].copy()
        params[f"tubes.{new_i}.bias"] = small_params[f"tubes.{old_i}.bias"].copy()
    if gate_layer is not None and "gate.alpha" not in params:
        params["gate.alpha"] = np.zeros((), dtype=params["enc.final_ln.g"].dtype)
    return Model(
        bank=bank,
        cfg=cfg,
        emb=replace(large.emb),
        heads=dict(large.heads),
        params=params,
        input_dims=large.input_dims,
        in_channels=large.in_channels,
        interpolated=False,
        pos_mode=large.pos_mode,
        frozen_tubes=True,
    )


# --- Model (de)serialization helpers for checkpoints and run manifests -----


def model_manifest(model: Model) -> dict:
    return {
        "bank": model.bank.to_dict(),
        "encoder": {
            "layers": model.cfg.layers,
            "hidden": model.cfg.hidden,
            "heads": model.cfg.heads,
            "mlp_size": model.cfg.mlp_size,
            "pool_mode": model.cfg.pool_mode,
            "gate_layer": model.cfg.gate_layer,
            "freeze_below": model.cfg.freeze_below,
            "relative_bias": model.cfg.relative_bias,
        },
        "emb": {"tau": model.emb.tau, "exponent_mode": model.emb.exponent_mode},
        "heads": dict(model.heads),
        "input_dims": list(model.input_dims),
        "in_channels": model.in_channels,
        "interpolated": model.interpolated,
        "pos_mode": model.pos_mode,
        "frozen_tubes": model.frozen_tubes,
    }


def model_from_manifest(manifest: dict, params: Params) -> Model:
    from .tube_config import bank_from_dict

    bank = bank_from_dict(manifest["bank"])
    enc = manifest["encoder"]
    cfg = EncoderConfig(
        layers=enc["layers"],
        hidden=enc["hidden"],
        heads=enc["heads"],
        mlp_size=enc["mlp_size"],
        pool_mode=enc.get("pool_mode", "mean"),
        gate_layer=enc.get("gate_layer"),
        freeze_below=enc.get("freeze_below", 0),
        relative_bias=enc.get("relative_bias", False),
    )
    emb = EmbeddingParams(
        d=cfg.hidden,
        tau=manifest["emb"]["tau"],
        exponent_mode=manifest["emb"]["exponent_mode"],
    )
    return Model(
        bank=bank,
        cfg=cfg,
        emb=emb,
        heads={k: int(v) for k, v in manifest["heads"].items()},
        params=params,
        input_dims=tuple(manifest["input_dims"]),
        in_channels=manifest["in_channels"],
        interpolated=manifest["interpolated"],
        pos_mode=manifest["pos_mode"],
        frozen_tubes=manifest["frozen_tubes"],
    )
