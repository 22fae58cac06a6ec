"""Command-line entry point: plan, inspect, train, eval, ablate, scale.

Reports are written both as human-readable text on stdout and as JSON/CSV
files under --out so they can be consumed without scraping. Given the same
config and seed every command reproduces identical outputs, except for the
wall_seconds column of results.csv, which records real elapsed time.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import trainer
from .encoder import EncoderConfig, build_model, scale_up
from .errors import BadClipFile, ConfigError, NonFinite, TubekitError
from .posemb import EmbeddingParams, embed_positions
from .tokenizer import VideoClip, coverage_counts, read_clip, tokenize
from .trainer import (
    EvalSpec,
    Experiment,
    SyntheticTask,
    TrainConfig,
    ablation_matrix,
    evaluate,
    load_model,
    save_model,
    train_joint,
    write_results_csv,
)
from .tube_config import FileConfig, estimate_cost, load_config, token_grid, total_tokens, validate_bank

EXIT_INVALID = 2

TASK_SHORTHAND = {"motion": "motion-direction", "shape": "static-shape"}

COUNT_NOTE = (
    "computed with valid-window counting (a window only counts when it fits "
    "entirely inside the input); see README section 'Token counting convention'"
)


def _parse_triple(text: str, name: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"{name} must be T,H,W")
    return tuple(int(p) for p in parts)  # type: ignore[return-value]


def _parse_crops(text: str) -> tuple[int, int]:
    try:
        t, x = text.lower().split("x")
        return int(t), int(x)
    except ValueError as exc:
        raise ConfigError(f"--eval-crops must look like 4x3, got {text!r}") from exc


def _parse_stride_overrides(text: str | None, divisor: int, bank) -> dict:
    overrides: dict[int, tuple[int, int, int]] = {}
    if divisor > 1:
        for i, tube in enumerate(bank.tubes):
            if any(s % divisor != 0 for s in tube.stride):
                raise ConfigError(
                    f"--eval-stride-div {divisor} does not divide stride of tube {i}"
                )
            overrides[i] = tuple(s // divisor for s in tube.stride)
    if text:
        for item in text.split(";"):
            idx, stride = item.split("=")
            overrides[int(idx)] = _parse_triple(stride, f"stride override {item!r}")
    return overrides


def _build_tasks(args, fc: FileConfig) -> list[SyntheticTask]:
    t, h, w = args.input_dims
    tasks = []
    for item in args.tasks.split(","):
        if ":" in item:
            kind_short, head = item.split(":", 1)
        else:
            kind_short = head = item
        kind = TASK_SHORTHAND.get(kind_short, kind_short)
        if head not in fc.heads:
            raise ConfigError(f"config has no head named {head!r} for task {item!r}")
        dims = (1, h, w, args.channels) if kind == "static-shape" else (t, h, w, args.channels)
        tasks.append(
            SyntheticTask(
                kind=kind,
                dims=dims,
                classes=fc.heads[head],
                head=head,
                noise_std=args.noise,
                rng_seed=args.seed,
            )
        )
    return tasks


def _encoder_config(fc: FileConfig, args) -> EncoderConfig:
    return EncoderConfig(
        layers=fc.encoder["layers"],
        hidden=fc.hidden_size,
        heads=fc.encoder["heads"],
        mlp_size=fc.encoder["mlp_size"],
        gate_layer=args.gate_layer,
        freeze_below=args.freeze_below or 0,
        relative_bias=getattr(args, "relative_bias", False),
    )


def _build_model(fc: FileConfig, args, tasks) -> "object":
    learned_lengths = ()
    if args.pos_mode == "learned":
        lengths = set()
        for task in tasks:
            lengths.add(total_tokens(fc.bank, args.input_dims, is_video=task.is_video))
        learned_lengths = tuple(sorted(lengths))
    return build_model(
        fc.bank,
        _encoder_config(fc, args),
        fc.heads,
        input_dims=args.input_dims,
        in_channels=args.channels,
        seed=args.seed,
        interpolated=args.interpolated,
        pos_mode=args.pos_mode,
        learned_pos_lengths=learned_lengths,
    )


def _write_run_manifest(out: Path, command: str, args, extra: dict) -> None:
    payload = {
        "command": command,
        "seed": getattr(args, "seed", None),
        "config": str(getattr(args, "config", "")) or None,
        "config_hash": extra.pop("config_hash", None),
        **extra,
    }
    (out / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_plan(args) -> int:
    fc = load_config(args.config)
    report = validate_bank(fc.bank, args.input_dims)
    if not report.valid:
        for entry in report.tubes:
            if entry.error:
                print(f"tube {entry.index}: {entry.error}", file=sys.stderr)
        return EXIT_INVALID
    cost = estimate_cost(fc.bank, args.input_dims, _encoder_config(fc, args), in_channels=args.channels)
    video_total = total_tokens(fc.bank, args.input_dims, is_video=True)
    image_total = total_tokens(fc.bank, args.input_dims, is_video=False)
    lines = [f"plan for {args.config} on input {args.input_dims}"]
    tube_entries = []
    for entry in report.tubes:
        tube = entry.tube
        grid = token_grid(tube, args.input_dims, entry.index)
        first = grid.centers[0].tolist()
        lines.append(
            f"  tube {entry.index}: kernel {tube.kernel} stride {tube.stride} "
            f"offset {tube.offset} s2d {tube.s2d_group} -> grid {entry.counts} "
            f"= {entry.tokens} tokens, first center {tuple(first)}"
        )
        tube_entries.append(
            {
                "index": entry.index,
                "kernel": list(tube.kernel),
                "stride": list(tube.stride),
                "offset": list(tube.offset),
                "s2d_group": list(tube.s2d_group),
                "image_applicable": tube.image_applicable,
                "pre_counts": list(entry.pre_counts),
                "counts": list(entry.counts),
                "tokens": entry.tokens,
                "first_center": first,
            }
        )
    lines.append(f"total tokens (video): {video_total}")
    lines.append(f"total tokens (image): {image_total}")
    note = None
    if fc.expected_tokens is not None and fc.expected_tokens != video_total:
        note = (
            f"config expects {fc.expected_tokens} tokens but {COUNT_NOTE}; "
            f"this tool counts {video_total}"
        )
        lines.append(f"note: {note}")
    lines.append(
        f"params: tokenizer {cost.tokenizer_params} + encoder {cost.encoder_params} "
        f"= {cost.total_params}"
    )
    lines.append(f"MACs: tokenizer {cost.tokenizer_macs} + encoder {cost.encoder_macs} = {cost.total_macs}")
    print("\n".join(lines))
    payload = {
        "input_dims": list(args.input_dims),
        "valid": True,
        "tubes": tube_entries,
        "total_tokens_video": video_total,
        "total_tokens_image": image_total,
        "expected_tokens": fc.expected_tokens,
        "count_note": note,
        "cost": cost.to_dict(),
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "plan.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return 0


def _write_pgm(path: Path, volume: np.ndarray) -> None:
    """Plain P2 PGM with frames tiled left to right: width T*W, height H."""
    t, h, w = volume.shape
    tiled = np.concatenate([volume[i] for i in range(t)], axis=1)
    maxval = max(1, int(tiled.max()))
    rows = [" ".join(str(int(v)) for v in row) for row in tiled]
    path.write_text(f"P2\n{t * w} {h}\n{maxval}\n" + "\n".join(rows) + "\n")


def cmd_inspect(args) -> int:
    fc = load_config(args.config)
    clip = read_clip(args.clip)
    report = validate_bank(fc.bank, clip.dims)
    if not report.valid:
        for entry in report.tubes:
            if entry.error:
                print(f"tube {entry.index}: {entry.error}", file=sys.stderr)
        return EXIT_INVALID
    kernels = __import__("tubekit.tokenizer", fromlist=["init_kernels"]).init_kernels(
        fc.bank, clip.channels, args.seed
    )
    batch = tokenize(clip, fc.bank, kernels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = fc.bank.hidden_size
    header = "tube_id,t,x,y," + ",".join(f"v{i}" for i in range(d))
    rows = [header]
    for i in range(batch.tokens.shape[0]):
        c = batch.centers[i]
        vals = ",".join(f"{v:.9g}" for v in batch.tokens[i])
        rows.append(f"{int(batch.tube_id[i])},{c[0]:.9g},{c[1]:.9g},{c[2]:.9g},{vals}")
    (out / "tokens.csv").write_text("\n".join(rows) + "\n")
    if args.posemb:
        emb = embed_positions(batch.centers, EmbeddingParams(d=d, tau=fc.bank.tau))
        lines = [",".join(f"{v:.17g}" for v in row) for row in emb]
        (out / "posemb.csv").write_text("\n".join(lines) + "\n")
    cov = coverage_counts(fc.bank, clip.dims, is_video=not clip.is_image)
    _write_pgm(out / "coverage.pgm", cov)
    print(
        f"inspect: {batch.tokens.shape[0]} tokens, coverage min {cov.min()} max {cov.max()}"
    )
    return 0


def _results_for_model(model, tasks, eval_spec, n_eval, run_id, cfg_hash, wall):
    rows = []
    for task in tasks:
        res = evaluate(model, task, eval_spec, n_samples=n_eval)
        cost = estimate_cost(
            model.bank, model.input_dims, model.cfg, in_channels=model.in_channels,
            is_video=task.is_video,
        )
        rows.append(
            {
                "run_id": run_id,
                "config_hash": cfg_hash,
                "task": task.head,
                "top1": round(res.top1, 6),
                "top5": round(res.top5, 6),
                "tokens": res.tokens,
                "params": model.param_count(),
                "macs": cost.total_macs,
                "wall_seconds": wall,
            }
        )
    return rows


def cmd_train(args) -> int:
    import time

    fc = load_config(args.config)
    tasks = _build_tasks(args, fc)
    model = _build_model(fc, args, tasks)
    cfg = TrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        base_lr=args.lr,
        warmup_steps=args.warmup,
        weight_decay=args.weight_decay,
        mix_ratio=tuple([1] * len(tasks)),
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    state = train_joint(model, tasks, cfg, out_dir=out)
    task_dicts = [
        {
            "kind": t.kind,
            "dims": list(t.dims),
            "classes": t.classes,
            "head": t.head,
            "noise_std": t.noise_std,
            "rng_seed": t.rng_seed,
        }
        for t in tasks
    ]
    save_model(out / "checkpoint.ckpt", model, state, extra={"tasks": task_dicts})
    cfg_hash = trainer.config_hash(
        {"config": Path(args.config).read_text(), "seed": args.seed, "steps": args.steps}
    )
    wall = round(time.perf_counter() - start, 3)
    spec = EvalSpec(temporal_crops=args.eval_crops[0], spatial_crops=args.eval_crops[1])
    rows = _results_for_model(model, tasks, spec, args.n_eval, f"train-s{args.seed}", cfg_hash, wall)
    write_results_csv(out / "results.csv", rows)
    _write_run_manifest(out, "train", args, {"config_hash": cfg_hash, "steps": args.steps, "tasks": task_dicts})
    for row in rows:
        print(f"task {row['task']}: top1 {row['top1']} top5 {row['top5']} tokens {row['tokens']}")
    return 0


def _tasks_from_checkpoint(extra: dict, seed: int) -> list[SyntheticTask]:
    tasks = []
    for td in extra.get("tasks", []):
        tasks.append(
            SyntheticTask(
                kind=td["kind"],
                dims=tuple(td["dims"]),
                classes=td["classes"],
                head=td["head"],
                noise_std=td["noise_std"],
                rng_seed=td["rng_seed"] if seed is None else seed,
            )
        )
    return tasks


def cmd_eval(args) -> int:
    import time

    from .checkpoint import load_checkpoint

    ck = load_checkpoint(args.checkpoint)
    model, _ = load_model(args.checkpoint)
    tasks = _tasks_from_checkpoint(ck.extra, args.seed)
    if args.head:
        tasks = [t for t in tasks if t.head == args.head]
    if not tasks:
        raise ConfigError("no matching task recorded in the checkpoint; use --head")
    if args.task_dims:
        tasks = [
            replace(t, dims=(t.dims[0] if t.kind == "static-shape" else args.task_dims[0],) + tuple(args.task_dims[1:]) + (t.dims[3],))
            if t.is_video
            else replace(t, dims=(1, args.task_dims[1], args.task_dims[2], t.dims[3]))
            for t in tasks
        ]
    overrides = _parse_stride_overrides(args.eval_strides, args.eval_stride_div, model.bank)
    spec = EvalSpec(
        temporal_crops=args.eval_crops[0],
        spatial_crops=args.eval_crops[1],
        stride_overrides=overrides,
    )
    start = time.perf_counter()
    cfg_hash = trainer.config_hash({"checkpoint": str(args.checkpoint), "crops": list(args.eval_crops)})
    rows = _results_for_model(
        model, tasks, spec, args.n_eval, f"eval-s{args.seed}", cfg_hash,
        round(time.perf_counter() - start, 3),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_results_csv(out / "results.csv", rows)
    per_crop = {}
    for task in tasks:
        res = evaluate(model, task, spec, n_samples=args.n_eval)
        per_crop[task.head] = res.per_crop_top1
    (out / "per_crop.json").write_text(json.dumps(per_crop, indent=2, sort_keys=True) + "\n")
    _write_run_manifest(out, "eval", args, {"config_hash": cfg_hash, "crops": list(args.eval_crops)})
    for row in rows:
        print(f"task {row['task']}: top1 {row['top1']} top5 {row['top5']} tokens {row['tokens']}")
    return 0


def _posemb_grid_cells(fc: FileConfig, args, tasks) -> list[Experiment]:
    cells = []
    variants = [
        ("none", {"pos_mode": "none", "relative_bias": False}),
        ("learned", {"pos_mode": "learned", "relative_bias": False}),
        ("relative", {"pos_mode": "none", "relative_bias": True}),
        ("fixed-nostride", {"pos_mode": "fixed_nostride", "relative_bias": False}),
        ("fixed", {"pos_mode": "fixed", "relative_bias": False}),
    ]
    for name, overrides in variants:
        cells.append(_make_cell(fc, args, tasks, f"posemb-{name}", overrides))
    return cells


def _make_cell(fc: FileConfig, args, tasks, name: str, overrides: dict, bank=None) -> Experiment:
    bank = bank or fc.bank
    pos_mode = overrides.get("pos_mode", "fixed")
    relative = overrides.get("relative_bias", False)
    interpolated = overrides.get("interpolated", False)
    stride_div = overrides.get("eval_stride_div", 1)

    def build(bank=bank, pos_mode=pos_mode, relative=relative, interpolated=interpolated):
        cfg = EncoderConfig(
            layers=fc.encoder["layers"],
            hidden=bank.hidden_size,
            heads=fc.encoder["heads"],
            mlp_size=fc.encoder["mlp_size"],
            relative_bias=relative,
        )
        lengths = ()
        if pos_mode == "learned":
            lengths = tuple(
                sorted({total_tokens(bank, args.input_dims, is_video=t.is_video) for t in tasks})
            )
        return build_model(
            bank,
            cfg,
            fc.heads,
            input_dims=args.input_dims,
            in_channels=args.channels,
            seed=args.seed,
            interpolated=interpolated,
            pos_mode=pos_mode,
            learned_pos_lengths=lengths,
        )

    overrides_desc = dict(overrides)
    spec = EvalSpec(
        stride_overrides=_parse_stride_overrides(None, stride_div, bank) if stride_div > 1 else {}
    )
    return Experiment(
        name=name,
        build=build,
        tasks=tasks,
        train=TrainConfig(
            steps=args.steps,
            batch_size=args.batch_size,
            base_lr=args.lr,
            warmup_steps=args.warmup,
            mix_ratio=tuple([1] * len(tasks)),
            seed=args.seed,
        ),
        eval_spec=spec,
        n_eval=args.n_eval,
        describe={"cell": name, "seed": args.seed, **{k: str(v) for k, v in overrides_desc.items()}},
    )


def _grid_cells(fc: FileConfig, args, tasks) -> list[Experiment]:
    from .tube_config import TubeBank

    if args.grid == "posemb":
        return _posemb_grid_cells(fc, args, tasks)
    if args.grid == "tubes":
        cells = []
        for k in range(1, len(fc.bank.tubes) + 1):
            sub = TubeBank(tubes=fc.bank.tubes[:k], hidden_size=fc.bank.hidden_size, tau=fc.bank.tau)
            cells.append(_make_cell(fc, args, tasks, f"tubes-{k}", {}, bank=sub))
        return cells
    if args.grid == "s2d":
        stripped = TubeBank(
            tubes=tuple(replace(t, s2d_group=(1, 1, 1)) for t in fc.bank.tubes),
            hidden_size=fc.bank.hidden_size,
            tau=fc.bank.tau,
        )
        return [
            _make_cell(fc, args, tasks, "s2d-off", {}, bank=stripped),
            _make_cell(fc, args, tasks, "s2d-on", {}, bank=fc.bank),
        ]
    if args.grid == "interp":
        return [
            _make_cell(fc, args, tasks, "kernels-direct", {"interpolated": False}),
            _make_cell(fc, args, tasks, "kernels-interpolated", {"interpolated": True}),
        ]
    if args.grid == "tokens":
        return [
            _make_cell(fc, args, tasks, "tokens-base", {"eval_stride_div": 1}),
            _make_cell(fc, args, tasks, "tokens-dense", {"eval_stride_div": 2}),
        ]
    raise ConfigError(f"unknown grid {args.grid!r}")


def cmd_ablate(args) -> int:
    fc = load_config(args.config)
    tasks = _build_tasks(args, fc)
    cells = _grid_cells(fc, args, tasks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ablation_matrix(cells, out_csv=out / "results.csv")
    _write_run_manifest(
        out,
        "ablate",
        args,
        {"config_hash": trainer.config_hash({"grid": args.grid, "seed": args.seed}), "grid": args.grid},
    )
    for row in rows:
        print(f"{row['run_id']} task {row['task']}: top1 {row['top1']} tokens {row['tokens']}")
    return 0


def cmd_scale(args) -> int:
    import time

    from .checkpoint import load_checkpoint

    small_model, _ = load_model(args.small_checkpoint)
    large_model, _ = load_model(args.large_checkpoint)
    composed = scale_up(
        small_model.bank,
        small_model.params,
        large_model,
        lift_group=args.lift,
        freeze_below=args.freeze_below,
        gate_layer=args.gate_layer,
    )
    ck = load_checkpoint(args.small_checkpoint)
    tasks = _tasks_from_checkpoint(ck.extra, args.seed)
    video_tasks = [t for t in tasks if t.is_video]
    if args.head:
        video_tasks = [t for t in video_tasks if t.head == args.head]
    if not video_tasks:
        raise ConfigError("no video task recorded in the small checkpoint")
    task = video_tasks[0]
    from .encoder import add_head

    if task.head not in composed.heads:
        add_head(composed, task.head, task.classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    cfg = TrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        base_lr=args.lr,
        warmup_steps=args.warmup,
        seed=args.seed,
    )
    state = train_joint(composed, [task], cfg, out_dir=out) if args.steps > 0 else None
    if state is None:
        from .trainer import TrainState

        state = TrainState(
            adam_m={k: np.zeros_like(v) for k, v in composed.params.items()},
            adam_v={k: np.zeros_like(v) for k, v in composed.params.items()},
            step=0,
            seed=args.seed,
        )
    save_model(out / "checkpoint.ckpt", composed, state, extra={"tasks": ck.extra.get("tasks", [])})
    cfg_hash = trainer.config_hash(
        {"small": str(args.small_checkpoint), "large": str(args.large_checkpoint), "seed": args.seed}
    )
    wall = round(time.perf_counter() - start, 3)
    spec = EvalSpec(temporal_crops=args.eval_crops[0], spatial_crops=args.eval_crops[1])
    rows = _results_for_model(composed, [task], spec, args.n_eval, f"scale-s{args.seed}", cfg_hash, wall)
    write_results_csv(out / "results.csv", rows)
    _write_run_manifest(
        out,
        "scale",
        args,
        {
            "config_hash": cfg_hash,
            "lift": list(args.lift),
            "freeze_below": args.freeze_below,
            "gate_layer": args.gate_layer,
        },
    )
    for row in rows:
        print(f"task {row['task']}: top1 {row['top1']} tokens {row['tokens']}")
    return 0


def _add_common(sub, config_required=True):
    if config_required:
        sub.add_argument("--config", required=True, help="JSON config path")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--out", default=None, help="output directory")
    sub.add_argument(
        "--input-dims",
        type=lambda s: _parse_triple(s, "--input-dims"),
        default=(16, 32, 32),
        help="model input T,H,W",
    )
    sub.add_argument("--channels", type=int, default=1)


def _add_train_flags(sub):
    sub.add_argument("--steps", type=int, default=500)
    sub.add_argument("--batch-size", type=int, default=8)
    sub.add_argument("--lr", type=float, default=1e-3)
    sub.add_argument("--warmup", type=int, default=100)
    sub.add_argument("--weight-decay", type=float, default=0.0)
    sub.add_argument("--n-eval", type=int, default=200)
    sub.add_argument("--eval-crops", type=_parse_crops, default=(1, 1), help="TxX crop grid")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tubekit")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("plan", help="token/parameter/MAC report for a config")
    _add_common(p)
    p.set_defaults(func=cmd_plan, gate_layer=None, freeze_below=0, input_dims=(32, 224, 224), channels=3)

    p = subs.add_parser("inspect", help="dump tokens, embeddings, and coverage for a clip")
    _add_common(p)
    p.add_argument("--clip", required=True, help="raw TVT0 clip file")
    p.add_argument("--posemb", action="store_true", help="also dump the positional embedding")
    p.set_defaults(func=cmd_inspect)

    p = subs.add_parser("train", help="train on synthetic tasks")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--tasks", default="motion", help="comma list: motion, shape, or kind:head")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--pos-mode", default="fixed", choices=["fixed", "none", "learned", "fixed_nostride"])
    p.add_argument("--interpolated", action="store_true")
    p.add_argument("--freeze-below", type=int, default=0)
    p.add_argument("--gate-layer", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--head", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--n-eval", type=int, default=200)
    p.add_argument("--eval-crops", type=_parse_crops, default=(1, 1))
    p.add_argument("--eval-stride-div", type=int, default=1)
    p.add_argument("--eval-strides", default=None, help="per-tube overrides i=t,h,w;j=t,h,w")
    p.add_argument(
        "--task-dims",
        type=lambda s: _parse_triple(s, "--task-dims"),
        default=None,
        help="generate eval clips at these dims (larger than input for crops)",
    )
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("ablate", help="run a named ablation grid")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--grid", required=True, choices=["posemb", "tubes", "s2d", "interp", "tokens"])
    p.add_argument("--tasks", default="motion")
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_ablate)

    p = subs.add_parser("scale", help="compose small tubes with a large frozen model")
    p.add_argument("--small-checkpoint", required=True)
    p.add_argument("--large-checkpoint", required=True)
    p.add_argument("--lift", type=lambda s: _parse_triple(s, "--lift"), default=(1, 1, 1))
    p.add_argument("--freeze-below", type=int, default=0)
    p.add_argument("--gate-layer", type=int, default=None)
    p.add_argument("--head", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_scale)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, BadClipFile) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NonFinite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TubekitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
