"""tubekit: sparse video-tube tokenization and joint image/video transformer
training at desk scale, with exact hand-derived gradients throughout."""

from .errors import (
    BadClipFile,
    BadGrouping,
    ConfigError,
    CorruptManifest,
    EmptyGrid,
    GridNotDivisible,
    IncompatibleWidths,
    MissingTrace,
    NonFinite,
    ShapeMismatch,
    StrideNotDivisible,
    TubekitError,
    UnknownHead,
)
from .tube_config import (
    TokenGrid,
    TubeBank,
    TubeSpec,
    estimate_cost,
    load_config,
    token_grid,
    total_tokens,
    validate_bank,
)
from .tokenizer import (
    KernelBank,
    TokenBatch,
    VideoClip,
    init_kernels,
    interpolate_kernel,
    merge_s2d,
    tokenize,
    tokenize_gradient,
)
from .posemb import EmbeddingParams, add_positions, embed_positions
from .encoder import (
    EncoderConfig,
    Model,
    backward,
    build_model,
    classify,
    encode,
    model_grads,
    model_logits,
    scale_up,
)
from .trainer import (
    EvalSpec,
    SyntheticTask,
    TrainConfig,
    ablation_matrix,
    evaluate,
    make_dataset,
    train_joint,
)

__version__ = "0.1.0"
