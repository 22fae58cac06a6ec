"""Desk-scale training: synthetic image/video tasks, an interleaved joint
training loop with per-task heads, Adam with warmup + cosine decay,
multi-crop evaluation with optional eval-time stride overrides, and the
ablation harness.

Everything is deterministic given (seed, config): sample i of a task is a
pure function of (task seed, stream, i), the task schedule is a fixed
round-robin, and Adam runs in a fixed order over sorted parameter names.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .encoder import (
    Model,
    model_from_manifest,
    model_grads,
    model_logits,
    model_manifest,
)
from .errors import ConfigError, NonFinite
from .tokenizer import VideoClip, tokenize
from .tube_config import Triple, TubeBank, estimate_cost, total_tokens

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8

TRAIN_STREAM = 0
EVAL_STREAM = 1

TASK_KINDS = ("motion-direction", "static-shape")

# Unit displacement per frame for each motion label, in (h, w) voxels.
MOTION_DIRS = [(-1.0, 0.0), (1.0, 0.0), (0.0, -1.0), (0.0, 1.0),
               (-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)]


@dataclass(frozen=True)
class SyntheticTask:
    kind: str
    dims: tuple[int, int, int, int]  # (T, H, W, C)
    classes: int
    head: str
    noise_std: float = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.kind == "motion-direction" and not 2 <= self.classes <= len(MOTION_DIRS):
            raise ConfigError(f"motion-direction supports 2..{len(MOTION_DIRS)} classes")
        if self.kind == "static-shape":
            if self.dims[0] != 1:
                raise ConfigError("static-shape is a single-frame task (T must be 1)")
            if not 2 <= self.classes <= 4:
                raise ConfigError("static-shape supports 2..4 classes")

    @property
    def is_video(self) -> bool:
        return self.dims[0] > 1


def _toroidal_blob_frames(h: int, w: int, chs: np.ndarray, cws: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blob per frame, wrapping around the frame borders."""
    ih = np.arange(h, dtype=np.float64)[None, :, None]
    iw = np.arange(w, dtype=np.float64)[None, None, :]
    dh = np.abs(ih - chs[:, None, None])
    dh = np.minimum(dh, h - dh)
    dw = np.abs(iw - cws[:, None, None])
    dw = np.minimum(dw, w - dw)
    return np.exp(-(dh * dh + dw * dw) / (2.0 * sigma * sigma))


def _motion_clip(task: SyntheticTask, rng: np.random.Generator, label: int) -> np.ndarray:
    t, h, w, c = task.dims
    sigma = h / 10.0
    speed = 2.0  # voxels per frame; never zero, so every clip has motion
    start_h = rng.uniform(0.0, h)
    start_w = rng.uniform(0.0, w)
    dh, dw = MOTION_DIRS[label]
    f = np.arange(t, dtype=np.float64)
    frames = _toroidal_blob_frames(h, w, (start_h + f * speed * dh) % h, (start_w + f * speed * dw) % w, sigma)
    clip = np.repeat(frames[..., None], c, axis=3)
    clip += rng.normal(0.0, task.noise_std, size=clip.shape)
    return np.clip(clip, 0.0, 1.0)


def _shape_mask(kind: int, h: int, w: int, ch: int, cw: int, r: int) -> np.ndarray:
    ih = np.arange(h)[:, None] - ch
    iw = np.arange(w)[None, :] - cw
    if kind == 0:  # square
        return (np.abs(ih) <= r) & (np.abs(iw) <= r)
    if kind == 1:  # disk
        return ih * ih + iw * iw <= r * r
    if kind == 2:  # plus
        return ((np.abs(ih) <= r // 2) & (np.abs(iw) <= r)) | (
            (np.abs(iw) <= r // 2) & (np.abs(ih) <= r)
        )
    return np.abs(ih) + np.abs(iw) <= r  # diamond


def _shape_image(task: SyntheticTask, rng: np.random.Generator, label: int) -> np.ndarray:
    _, h, w, c = task.dims
    r = h // 5
    ch = int(rng.integers(r, h - r))
    cw = int(rng.integers(r, w - r))
    mask = _shape_mask(label, h, w, ch, cw, r).astype(np.float64)
    img = np.repeat(mask[None, :, :, None], c, axis=3)
    img += rng.normal(0.0, task.noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def sample(task: SyntheticTask, index: int, stream: int = TRAIN_STREAM) -> tuple[VideoClip, int]:
    """Deterministic sample i of a task stream. Labels cycle through the
    classes, so any window of k*classes samples is exactly balanced.

    Motion-direction labels depend only on inter-frame displacement; the blob
    start position is uniform, so any single frame carries no label signal.
    """
    label = index % task.classes
    rng = np.random.default_rng((task.rng_seed, stream, index))
    if task.kind == "motion-direction":
        voxels = _motion_clip(task, rng, label)
    else:
        voxels = _shape_image(task, rng, label)
    return VideoClip(voxels=voxels.astype(np.float32)), label


def make_dataset(task: SyntheticTask, stream: int = TRAIN_STREAM):
    """Infinite reproducible stream of (clip, label)."""
    index = 0
    while True:
        yield sample(task, index, stream)
        index += 1


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 8
    base_lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.0
    mix_ratio: tuple[int, ...] = (1,)
    seed: int = 0
    checkpoint_interval: int = 200

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if any(r < 1 for r in self.mix_ratio):
            raise ConfigError("mix_ratio entries must be positive")


def schedule_lr(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at cfg.steps."""
    if step < cfg.warmup_steps:
        return cfg.base_lr * (step + 1) / cfg.warmup_steps
    span = max(cfg.steps - cfg.warmup_steps, 1)
    progress = (step - cfg.warmup_steps) / span
    return cfg.base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


@dataclass
class TrainState:
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int
    seed: int
    loss_log: list[tuple[int, str, float, float]] = field(default_factory=list)


def _task_schedule(tasks: list[SyntheticTask], mix_ratio: tuple[int, ...]) -> list[int]:
    if len(mix_ratio) != len(tasks):
        raise ConfigError(f"mix_ratio has {len(mix_ratio)} entries for {len(tasks)} tasks")
    order = []
    for i, r in enumerate(mix_ratio):
        order.extend([i] * r)
    return order


def adam_step(
    model: Model,
    grads: dict[str, np.ndarray],
    state: TrainState,
    lr: float,
    weight_decay: float,
    frozen: set[str],
) -> None:
    t = state.step + 1
    c1 = 1.0 - ADAM_B1 ** t
    c2 = 1.0 - ADAM_B2 ** t
    for name in sorted(model.params):
        if name in frozen or name not in grads:
            continue
        g = grads[name]
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= ADAM_B1
        m += (1.0 - ADAM_B1) * g
        v *= ADAM_B2
        v += (1.0 - ADAM_B2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p = model.params[name]
        p -= lr * (update + weight_decay * p)


def _snapshot(model: Model, state: TrainState):
    return (
        {k: v.copy() for k, v in model.params.items()},
        {k: v.copy() for k, v in state.adam_m.items()},
        {k: v.copy() for k, v in state.adam_v.items()},
        state.step,
    )


def train_joint(
    model: Model,
    tasks: list[SyntheticTask],
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: TrainState | None = None,
    log_fn=None,
) -> TrainState:
    """Interleaved training over the task list per the mix ratio. Each step
    draws one batch from one task, backpropagates the task head's loss, and
    applies one Adam update. On divergence the last good snapshot is written
    (when out_dir is given) and NonFinite is raised.
    """
    for task in tasks:
        if task.head not in model.heads:
            raise ConfigError(f"model has no head for task {task.head!r}")
        if model.heads[task.head] != task.classes:
            raise ConfigError(
                f"head {task.head!r} has {model.heads[task.head]} classes, task has {task.classes}"
            )
    schedule = _task_schedule(tasks, cfg.mix_ratio)
    if resume is None:
        state = TrainState(
            adam_m={k: np.zeros_like(v) for k, v in model.params.items()},
            adam_v={k: np.zeros_like(v) for k, v in model.params.items()},
            step=0,
            seed=cfg.seed,
        )
    else:
        state = resume
    frozen = model.frozen_names()
    last_good = _snapshot(model, state)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_lines = []
    for step in range(state.step, cfg.steps):
        task = tasks[schedule[step % len(schedule)]]
        g_sum: dict[str, np.ndarray] = {}
        loss_sum = 0.0
        diverged = False
        for b in range(cfg.batch_size):
            clip, label = sample(task, step * cfg.batch_size + b, TRAIN_STREAM)
            try:
                loss, grads, _ = model_grads(model, clip, label, task.head)
            except NonFinite:
                diverged = True
                break
            if not np.isfinite(loss):
                diverged = True
                break
            loss_sum += loss
            for k, g in grads.items():
                if k in g_sum:
                    g_sum[k] += g
                else:
                    g_sum[k] = g.copy()
        if diverged:
            if out_dir is not None:
                _write_abort_checkpoint(out_dir, model, last_good)
            raise NonFinite(f"training diverged at step {step} (task {task.head})")
        inv_b = 1.0 / cfg.batch_size
        for k in g_sum:
            g_sum[k] *= inv_b
        loss = loss_sum * inv_b
        lr = float(schedule_lr(cfg, step))
        adam_step(model, g_sum, state, lr, cfg.weight_decay, frozen)
        state.step = step + 1
        state.loss_log.append((step, task.head, loss, lr))
        line = f"step {step} task {task.head} loss {loss:.6f} lr {lr:.8f}"
        log_lines.append(line)
        if log_fn is not None:
            log_fn(line)
        if state.step % cfg.checkpoint_interval == 0:
            last_good = _snapshot(model, state)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "train.log").write_text("\n".join(log_lines) + "\n")
    return state


def _write_abort_checkpoint(out_dir: Path, model: Model, snap) -> None:
    params, m, v, step = snap
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        out_dir / "checkpoint-lastgood.ckpt",
        params,
        m,
        v,
        step,
        seed=0,
        model=model_manifest(model),
        extra={"aborted": True},
    )


def save_model(path: str | Path, model: Model, state: TrainState, extra: dict | None = None) -> None:
    save_checkpoint(
        path,
        model.params,
        state.adam_m,
        state.adam_v,
        state.step,
        state.seed,
        model=model_manifest(model),
        extra=extra,
    )


def load_model(path: str | Path) -> tuple[Model, TrainState]:
    ck = load_checkpoint(path)
    model = model_from_manifest(ck.model, ck.params)
    state = TrainState(adam_m=ck.adam_m, adam_v=ck.adam_v, step=ck.step, seed=ck.seed)
    return model, state


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalSpec:
    temporal_crops: int = 1
    spatial_crops: int = 1
    stride_overrides: dict = field(default_factory=dict)  # tube index -> stride triple

    def __post_init__(self):
        if self.temporal_crops < 1 or self.spatial_crops < 1:
            raise ConfigError("crop counts must be >= 1")


def apply_stride_overrides(bank: TubeBank, overrides: dict) -> TubeBank:
    if not overrides:
        return bank
    tubes = list(bank.tubes)
    for idx, stride in overrides.items():
        idx = int(idx)
        tubes[idx] = replace(tubes[idx], stride=tuple(int(s) for s in stride))
    return TubeBank(tubes=tuple(tubes), hidden_size=bank.hidden_size, tau=bank.tau)


def _crop_offsets(margin: int, crops: int) -> list[int]:
    if crops == 1:
        return [margin // 2]
    return [round(i * margin / (crops - 1)) for i in range(crops)]


@dataclass
class EvalResult:
    top1: float
    top5: float
    per_crop_top1: list[list[float]]  # temporal x spatial grid
    tokens: int
    n_samples: int


def evaluate(model: Model, task: SyntheticTask, spec: EvalSpec, n_samples: int = 200) -> EvalResult:
    """Average logits over temporal x spatial crops (deterministic evenly
    spaced offsets), then argmax. Stride overrides rebuild the token grid at
    eval time with unchanged kernels."""
    bank = apply_stride_overrides(model.bank, spec.stride_overrides)
    eval_model = replace(model, bank=bank)
    t_in, h_in, w_in = model.input_dims
    is_video = task.is_video
    if not is_video:
        t_in = 1  # image tasks always feed single frames
    t_full, h_full, w_full, _ = task.dims
    if t_full < t_in or h_full < h_in or w_full < w_in:
        raise ConfigError(f"task dims {task.dims[:3]} smaller than model input {model.input_dims}")
    t_offs = _crop_offsets(t_full - t_in, spec.temporal_crops) if is_video else [0]
    hw_offs = list(
        zip(
            _crop_offsets(h_full - h_in, spec.spatial_crops),
            _crop_offsets(w_full - w_in, spec.spatial_crops),
        )
    )
    n_t = len(t_offs)
    n_x = len(hw_offs)
    crop_correct = np.zeros((n_t, n_x), dtype=np.int64)
    top1_hits = 0
    top5_hits = 0
    tokens = total_tokens(bank, (t_in, h_in, w_in), is_video=is_video)
    k5 = min(5, task.classes)
    for i in range(n_samples):
        clip, label = sample(task, i, EVAL_STREAM)
        logit_sum = None
        for ti, t0 in enumerate(t_offs):
            for xi, (h0, w0) in enumerate(hw_offs):
                window = clip.voxels[t0 : t0 + t_in, h0 : h0 + h_in, w0 : w0 + w_in]
                logits = model_logits(eval_model, VideoClip(voxels=window), task.head)
                crop_correct[ti, xi] += int(np.argmax(logits) == label)
                logit_sum = logits if logit_sum is None else logit_sum + logits
        avg = logit_sum / (n_t * n_x)
        top1_hits += int(np.argmax(avg) == label)
        top5_hits += int(label in np.argsort(avg)[::-1][:k5])
    return EvalResult(
        top1=top1_hits / n_samples,
        top5=top5_hits / n_samples,
        per_crop_top1=(crop_correct / n_samples).tolist(),
        tokens=tokens,
        n_samples=n_samples,
    )


# ---------------------------------------------------------------------------
# Experiments and the ablation harness
# ---------------------------------------------------------------------------

RESULT_COLUMNS = [
    "run_id",
    "config_hash",
    "task",
    "top1",
    "top5",
    "tokens",
    "params",
    "macs",
    "wall_seconds",
]


def config_hash(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Experiment:
    """One train+eval cell: a model factory plus training and eval settings."""

    name: str
    build: "callable"
    tasks: list[SyntheticTask]
    train: TrainConfig
    eval_spec: EvalSpec = field(default_factory=EvalSpec)
    n_eval: int = 200
    describe: dict = field(default_factory=dict)


def run_experiment(exp: Experiment) -> list[dict]:
    start = time.perf_counter()
    model = exp.build()
    train_joint(model, exp.tasks, exp.train)
    rows = []
    for task in exp.tasks:
        res = evaluate(model, task, exp.eval_spec, n_samples=exp.n_eval)
        mac = estimate_cost(
            model.bank,
            model.input_dims,
            model.cfg,
            in_channels=model.in_channels,
            is_video=task.is_video,
        )
        rows.append(
            {
                "run_id": exp.name,
                "config_hash": config_hash(exp.describe or exp.name),
                "task": task.head,
                "top1": round(res.top1, 6),
                "top5": round(res.top5, 6),
                "tokens": res.tokens,
                "params": model.param_count(),
                "macs": mac.total_macs,
                "wall_seconds": round(time.perf_counter() - start, 3),
            }
        )
    return rows


def worker_count(n_cells: int) -> int:
    env = os.environ.get("TUBEKIT_THREADS")
    if env:
        try:
            return max(1, min(int(env), n_cells))
        except ValueError:
            raise ConfigError(f"TUBEKIT_THREADS must be an integer, got {env!r}")
    return 1


def ablation_matrix(cells: list[Experiment], out_csv: str | Path | None = None) -> list[dict]:
    """Run every cell under a shared seed protocol and collect one row per
    (cell, task). Cells may fan out to worker threads; output order is always
    the cell order."""
    workers = worker_count(len(cells))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_experiment, cells))
    else:
        results = [run_experiment(c) for c in cells]
    rows = [row for cell_rows in results for row in cell_rows]
    if out_csv is not None:
        write_results_csv(out_csv, rows)
    return rows


def write_results_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in RESULT_COLUMNS})
