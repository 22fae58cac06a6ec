"""Fixed sine/cosine positional embedding anchored at tube centers.

Each block of 6 channels holds, for one frequency ``w_j``, the values
``[sin(t*w_j), cos(t*w_j), sin(x*w_j), cos(x*w_j), sin(y*w_j), cos(y*w_j)]``
where (t, x, y) is the token's center in raw voxel coordinates. Channels
beyond ``6 * (d // 6)`` are left at zero.

Two frequency schedules are provided. "raw" uses ``w_j = tau**(-j)``, whose
frequencies underflow to zero after the first few blocks when tau is large.
"normalized" (the default) spreads exponents over the blocks,
``w_j = tau**(-j / (d // 6))``, giving distinct wavelengths per block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch

EXPONENT_MODES = ("normalized", "raw")


@dataclass(frozen=True)
class EmbeddingParams:
    d: int
    tau: float = 10000.0
    exponent_mode: str = "normalized"

    def __post_init__(self):
        if self.d < 6:
            raise ValueError(f"hidden size must be >= 6 for positional blocks, got {self.d}")
        if not self.tau > 1:
            raise ValueError(f"tau must be > 1, got {self.tau}")
        if self.exponent_mode not in EXPONENT_MODES:
            raise ValueError(f"exponent_mode must be one of {EXPONENT_MODES}")


def frequencies(params: EmbeddingParams) -> np.ndarray:
    """Per-block frequencies w_j for j in [0, d // 6)."""
    blocks = params.d // 6
    j = np.arange(blocks, dtype=np.float64)
    if params.exponent_mode == "raw":
        exponents = -j
    else:
        exponents = -j / blocks
    return np.power(params.tau, exponents)


def embed_positions(centers: np.ndarray, params: EmbeddingParams) -> np.ndarray:
    """Embed (n, 3) center coordinates into an (n, d) float64 matrix."""
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[1] != 3:
        raise ShapeMismatch(f"centers must have shape (n, 3), got {centers.shape}")
    if not np.all(np.isfinite(centers)):
        raise ValueError("centers must be finite")
    n = centers.shape[0]
    blocks = params.d // 6
    omega = frequencies(params)
    angles = centers[:, :, None] * omega[None, None, :]  # (n, 3, blocks)
    out = np.zeros((n, params.d), dtype=np.float64)
    used = 6 * blocks
    for axis in range(3):
        out[:, 2 * axis:used:6] = np.sin(angles[:, axis, :])
        out[:, 2 * axis + 1:used:6] = np.cos(angles[:, axis, :])
    return out


def add_to_tokens(tokens: np.ndarray, centers: np.ndarray, params: EmbeddingParams) -> np.ndarray:
    """Return tokens + embedding(centers); the gradient w.r.t. tokens is the
    identity, so no backward counterpart is needed."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != params.d:
        raise ShapeMismatch(
            f"tokens must have shape (n, {params.d}), got {tokens.shape}"
        )
    if tokens.shape[0] != np.asarray(centers).shape[0]:
        raise ShapeMismatch(
            f"tokens ({tokens.shape[0]}) and centers ({np.asarray(centers).shape[0]}) disagree"
        )
    emb = embed_positions(centers, params)
    return tokens + emb.astype(tokens.dtype, copy=False)


def add_positions(batch, params: EmbeddingParams):
    """TokenBatch -> TokenBatch with the center embedding added to each token;
    centers and tube ids pass through unchanged."""
    from .tokenizer import TokenBatch

    return TokenBatch(
        tokens=add_to_tokens(batch.tokens, batch.centers, params),
        centers=batch.centers,
        tube_id=batch.tube_id,
    )
