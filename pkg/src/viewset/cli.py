"""Operator entry point: train, eval, retrieve, export-attention, synth.

Configuration precedence is command line > config file > defaults; the
effective configuration is echoed into the training log so runs can be
reproduced. Exit codes: 0 success, 1 usage/config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data as dio
from . import retrieval as ret
from . import training as tr
from .model import Model, ModelConfig
from .training import SEED_INIT, TrainConfig


class UsageError(Exception):
    """Bad flags or configuration; exits with status 1."""


@dataclass
class RunConfig:
    """Union of model + training knobs read from a key=value file."""
    # model
    dim_view: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    mlp_ratio: int = 2
    dropout_rate: float = 0.1
    decoder_depth: int = 2
    use_position_encoding: bool = False
    use_class_token: bool = False
    max_views: int = 0        # 0: size the position table from the data
    num_classes: int = 0      # 0: derive from the manifest
    # training
    epochs: int = 100
    peak_lr: float = 1e-3
    restart_interval: int = 100
    warmup_epochs: int = 5
    peak_decay: float = 0.4
    weight_decay: float = 1e-2
    batch_size: int = 32
    seed: int = 0
    views: int = 0            # 0: use every stored view
    freeze_adapter: bool = False
    target: str = "category"  # or "subcategory"
    eval_split: str = "test"


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def load_run_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    known = {f.name: f.type for f in fields(RunConfig)}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        current = getattr(cfg, key)
        try:
            if isinstance(current, bool):
                setattr(cfg, key, _parse_bool(value))
            elif isinstance(current, int):
                setattr(cfg, key, int(value))
            elif isinstance(current, float):
                setattr(cfg, key, float(value))
            else:
                setattr(cfg, key, value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    if cfg.target not in ("category", "subcategory"):
        raise UsageError(f"config target must be category|subcategory, "
                         f"got {cfg.target!r}")
    if cfg.eval_split not in dio.SPLITS:
        raise UsageError(f"config eval_split must be one of {dio.SPLITS}")
    return cfg


def echo_config(cfg: RunConfig) -> list[str]:
    return [f"# config\t{f.name}\t{getattr(cfg, f.name)}"
            for f in sorted(fields(RunConfig), key=lambda f: f.name)]


# ---------------------------------------------------------------- commands

def _load_dataset(args) -> dio.Dataset:
    return dio.load_dataset(args.features, args.manifest)


def _resolve_classes(cfg: RunConfig, dataset: dio.Dataset) -> int:
    if cfg.num_classes:
        return cfg.num_classes
    if cfg.target == "subcategory":
        if not dataset.has_subcategories:
            raise UsageError("target=subcategory but the manifest carries no "
                             "subcategory column")
        return dataset.num_subclasses
    return dataset.num_classes


def _train_label(shape: dio.ViewFeatureSet, target: str) -> int:
    return shape.label if target == "category" else shape.sublabel


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.views is not None:
        cfg.views = args.views
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.freeze_adapter = cfg.freeze_adapter or args.freeze_adapter
    cfg.use_position_encoding = cfg.use_position_encoding or args.pos_enc
    cfg.use_class_token = cfg.use_class_token or args.cls_token
    if args.views is not None and args.views < 1:
        raise UsageError("--views must be >= 1")

    dataset = _load_dataset(args)
    shapes = dataset.all_shapes()
    if not shapes:
        raise UsageError("dataset is empty")
    min_views = min(s.num_views for s in shapes)
    if cfg.views and cfg.views > min_views:
        raise UsageError(f"--views {cfg.views} exceeds the smallest shape's "
                         f"view count ({min_views}) in the manifest")
    max_views = cfg.max_views or max(s.num_views for s in shapes)

    model_cfg = ModelConfig(
        dim_in=dataset.dim, num_classes=_resolve_classes(cfg, dataset),
        dim_view=cfg.dim_view, num_blocks=cfg.num_blocks,
        num_heads=cfg.num_heads, mlp_ratio=cfg.mlp_ratio,
        dropout_rate=cfg.dropout_rate, decoder_depth=cfg.decoder_depth,
        use_position_encoding=cfg.use_position_encoding,
        use_class_token=cfg.use_class_token, max_views=max_views)
    try:
        model_cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    train_cfg = TrainConfig(
        epochs=cfg.epochs, peak_lr=cfg.peak_lr,
        restart_interval=cfg.restart_interval, warmup_epochs=cfg.warmup_epochs,
        peak_decay=cfg.peak_decay, weight_decay=cfg.weight_decay,
        batch_size=cfg.batch_size, seed=cfg.seed,
        views_per_shape=cfg.views or None, freeze_adapter=cfg.freeze_adapter)
    try:
        train_cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = Model.build(model_cfg, np.random.default_rng(
        (cfg.seed + SEED_INIT) * 0x1_0000_0000))

    header = echo_config(cfg)
    header.append("# columns\tepoch\tlr\ttrain_loss\teval_instance\teval_class")
    log_lines = list(header)
    for line in header:
        print(line)

    def progress(rec):
        line = rec.as_line()
        log_lines.append(line)
        print(line)

    target = "label" if cfg.target == "category" else "sublabel"
    result = tr.train(dataset, model, train_cfg, eval_split=cfg.eval_split,
                      target=target, progress=progress)

    (out_dir / "train_log.tsv").write_text("\n".join(log_lines) + "\n",
                                           encoding="utf-8")
    meta = {"target": cfg.target, "seed": cfg.seed,
            "best_epoch": result.best_epoch,
            "best_instance": result.best_instance,
            "best_class": result.best_class}
    dio.save_checkpoint(out_dir / "checkpoint_best.vsc", model_cfg,
                        result.best_state[0], result.best_state[1],
                        {**meta, "state": "best"})
    dio.save_checkpoint(out_dir / "checkpoint_final.vsc", model_cfg,
                        result.final_state[0], result.final_state[1],
                        {**meta, "state": "final"})
    print(f"best_epoch\t{result.best_epoch}")
    print(f"best_instance_accuracy\t{result.best_instance:.4f}")
    print(f"best_class_accuracy\t{result.best_class:.4f}")
    return 0


def _load_model(path) -> tuple[Model, dict]:
    cfg, params, buffers, meta = dio.load_checkpoint(path)
    model = Model.build(cfg, np.random.default_rng(0))
    model.load_state(params, buffers)
    return model, meta


def cmd_eval(args) -> int:
    model, meta = _load_model(args.checkpoint)
    dataset = _load_dataset(args)
    if dataset.dim != model.config.dim_in:
        raise UsageError(f"checkpoint expects feature width "
                         f"{model.config.dim_in}, dataset has {dataset.dim}")
    shapes = dataset.splits.get(args.split, [])
    if not shapes:
        raise UsageError(f"split {args.split!r} is empty")
    target = "label" if meta.get("target", "category") == "category" else "sublabel"
    report = tr.evaluate(shapes, model, views_per_shape=args.views or None,
                         seed=meta.get("seed", 0), target=target)
    print(f"instance_accuracy\t{report.instance_accuracy:.4f}")
    print(f"class_accuracy\t{report.class_accuracy:.4f}")
    return 0


def cmd_retrieve(args) -> int:
    model, _ = _load_model(args.class_checkpoint)
    dataset = _load_dataset(args)
    if dataset.dim != model.config.dim_in:
        raise UsageError(f"checkpoint expects feature width "
                         f"{model.config.dim_in}, dataset has {dataset.dim}")
    shapes = dataset.splits.get(args.split, [])
    if not shapes:
        raise UsageError(f"split {args.split!r} is empty")

    predictions = [(s.shape_id, model.predict(s.features)) for s in shapes]

    sub_predictions: dict[str, int] | None = None
    if args.subclass_checkpoint is None:
        print("warning: no subclass checkpoint given; emitting first-stage "
              "lists only", file=sys.stderr)
    elif not dataset.has_subcategories:
        print("warning: manifest has no subcategory column; emitting "
              "first-stage lists only", file=sys.stderr)
    else:
        sub_model, _ = _load_model(args.subclass_checkpoint)
        sub_predictions = {s.shape_id: sub_model.predict(s.features).predicted_class
                           for s in shapes}

    gt = ret.GroundTruth(
        category={s.shape_id: s.label for s in shapes},
        subcategory={s.shape_id: s.sublabel for s in shapes
                     if s.sublabel is not None})

    ranks, scores = [], []
    for shape_id, pred in predictions:
        l1 = ret.build_l1(shape_id, pred, predictions)
        final = l1
        if sub_predictions is not None:
            final = ret.rerank_l2(l1, sub_predictions[shape_id], sub_predictions)
        ranks.append(final)
        scores.append(ret.score_query(final, gt))

    ret.write_rank_file(args.out, ranks)
    report = ret.aggregate(scores)
    print(ret.format_table(report))
    print()
    print(ret.format_key_values(report))
    if not args.no_figure:
        from .report import render_metrics_figure
        figure_path = Path(args.out).with_suffix(".metrics.png")
        render_metrics_figure(report.micro, report.macro, figure_path)
        print(f"figure\t{figure_path}", file=sys.stderr)
    return 0


def cmd_export_attention(args) -> int:
    model, _ = _load_model(args.checkpoint)
    dataset = _load_dataset(args)
    if dataset.dim != model.config.dim_in:
        raise UsageError(f"checkpoint expects feature width "
                         f"{model.config.dim_in}, dataset has {dataset.dim}")
    match = [s for s in dataset.all_shapes() if s.shape_id == args.shape_id]
    if not match:
        raise dio.DataFormatError(f"shape id {args.shape_id!r} not found in manifest")
    shape = match[0]
    maps = model.export_attention(shape.features)

    lines = [f"# shape\t{shape.shape_id}",
             f"# views\t{shape.num_views}",
             f"# blocks\t{len(maps)}"]
    for i, m in enumerate(maps):
        lines.append(f"# block\t{i}")
        for row in m:
            lines.append(" ".join(f"{v:.6f}" for v in row))
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if not args.no_figure:
        from .report import render_attention_figure
        figure_path = Path(args.out).with_suffix(".png")
        render_attention_figure(maps, figure_path, f"shape {shape.shape_id}")
        print(f"figure\t{figure_path}", file=sys.stderr)
    return 0


def cmd_synth(args) -> int:
    if args.classes < 2:
        raise UsageError("--classes must be >= 2")
    try:
        dataset = dio.generate_synthetic(
            num_classes=args.classes, shapes_per_class=args.shapes_per_class,
            views=args.views, dim=args.dim, noise=args.noise, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    dio.save_dataset(dataset, args.out_features, args.out_manifest)
    total = len(dataset.all_shapes())
    print(f"shapes\t{total}")
    print(f"train\t{len(dataset.splits['train'])}")
    print(f"test\t{len(dataset.splits['test'])}")
    return 0


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; usage errors are 1
        self.exit(1, f"error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="viewset",
                     description="Permutation-invariant multi-view shape "
                                 "recognition and retrieval")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data_args(p):
        p.add_argument("--features", required=True, help="binary feature file")
        p.add_argument("--manifest", required=True, help="manifest text file")

    p = sub.add_parser("train", parents=[], help="train a classifier")
    p.add_argument("--config", help="key=value config file")
    add_data_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--views", type=int, help="views sampled per shape")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--freeze-adapter", action="store_true",
                   help="do not update the input adapter")
    p.add_argument("--pos-enc", action="store_true",
                   help="enable learned position encodings (ablation)")
    p.add_argument("--cls-token", action="store_true",
                   help="enable a learned class token (ablation)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="report accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    add_data_args(p)
    p.add_argument("--split", default="test", choices=dio.SPLITS)
    p.add_argument("--views", type=int, default=0,
                   help="views per shape at evaluation (0: all)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retrieve", help="rank lists plus retrieval metrics")
    p.add_argument("--class-checkpoint", required=True)
    p.add_argument("--subclass-checkpoint")
    add_data_args(p)
    p.add_argument("--split", default="test", choices=dio.SPLITS)
    p.add_argument("--out", required=True, help="rank-list output file")
    p.add_argument("--no-figure", action="store_true",
                   help="skip the metrics figure")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("export-attention",
                       help="write per-block attention maps for one shape")
    p.add_argument("--checkpoint", required=True)
    add_data_args(p)
    p.add_argument("--shape-id", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figure", action="store_true",
                   help="skip the heatmap figure")
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("synth", help="generate the synthetic multi-view task")
    p.add_argument("--out-features", required=True)
    p.add_argument("--out-manifest", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--shapes-per-class", type=int, default=50)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (dio.DataFormatError, tr.TrainingDiverged, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
