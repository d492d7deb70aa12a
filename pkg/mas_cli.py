"""
Command line for registration, multi-atlas segmentation and the experiment grid.

Run: mas <command> [--config cfg.json] [--preset desk|full] [--set key=value ...] [--seed N]

  synth-data   generate the synthetic population and its manifest
  train-reg    train a registration network
  train-seg    train the segmentation baseline
  register     register one moving image to a fixed image
  segment-mas  multi-atlas segmentation of a target image
  segment-net  segment a target image with a trained segmentation network
  evaluate     Dice / surface distance of a prediction against ground truth
  experiment   run (or resume) the comparative grid
  plot         figures from a results table
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from config import DATA_DIR, MANIFEST_NAME, RESULTS_NAME
from core.configs import ExperimentConfig, load_config
from core.experiment import gallery_predictions, run_experiment
from core.fusion import mas_segment
from core.metrics import evaluate
from core.plots import emit_plots
from core.regnet import reg_forward
from core.segnet import seg_forward_full
from core.synthetic import synth_population
from core.trainer import train_registration, train_segmentation
from core.volume import argmax_labels, make_one_hot
from core.warp import warp_probmap, warp_scalar
from ingest.checkpoint_store import load_regnet, load_segnet, write_checkpoint, write_history
from ingest.manifest import load_atlases, load_dataset, load_unlabeled, write_dataset
from ingest.metrics_csv import append_metrics_csv, read_metrics_csv, report_rows
from ingest.nifti_io import (
    read_labelmap, read_volume, write_field, write_labelmap, write_volume,
)

DIVIDER = "─" * 60


def _config(args) -> ExperimentConfig:
    return load_config(args.config, args.preset, args.set or (), args.seed)


def _history_path(model_path: str) -> Path:
    p = Path(model_path)
    return p.with_name(p.stem + ".history.jsonl")


def _atlases(args, data_dir: str):
    ids = args.ids.split(",") if getattr(args, "ids", None) else None
    atlases = load_atlases(data_dir, split="train", ids=ids)
    n = getattr(args, "n_atlases", None)
    if ids is None and n is not None:
        if n > len(atlases):
            raise ValueError(f"--n-atlases {n} exceeds the {len(atlases)} training atlases")
        atlases = atlases[:n]
    return atlases


# ─── Commands ─────────────────────────────────────────────

def cmd_synth_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.data_dir)
    ds = synth_population(cfg.data, verbose=True)
    path = write_dataset(ds, out)
    print(f"[synth] manifest: {path}")
    return 0


def cmd_train_reg(args) -> int:
    cfg = _config(args)
    data = args.data or cfg.data_dir
    atlases = _atlases(args, data)
    unlabeled = load_unlabeled(data)
    validation = load_atlases(data, split="val")
    update = {"use_augment": not args.no_augment}
    if args.p_supervised is not None:
        update["p_supervised"] = args.p_supervised
    train_cfg = cfg.registration.model_copy(update=update)
    net, history = train_registration(train_cfg, atlases, unlabeled, validation, model_cfg=cfg.regnet)
    write_checkpoint(args.out, net, history)
    write_history(history, _history_path(args.out))
    print(f"[train] saved {args.out} (best validation dice {history.best_dice})")
    return 0


def cmd_train_seg(args) -> int:
    cfg = _config(args)
    data = args.data or cfg.data_dir
    atlases = _atlases(args, data)
    validation = load_atlases(data, split="val")
    net, history = train_segmentation(
        cfg.segmentation, atlases, validation, use_augment=args.augment, model_cfg=cfg.segnet,
    )
    write_checkpoint(args.out, net, history)
    write_history(history, _history_path(args.out))
    print(f"[train] saved {args.out} (best validation dice {history.best_dice})")
    return 0


def cmd_register(args) -> int:
    net = load_regnet(args.model)
    moving = read_volume(args.moving)
    fixed = read_volume(args.fixed)
    field = reg_forward(net, moving, fixed)
    write_field(field, args.out_field, spacing=fixed.spacing)
    print(f"[register] field -> {args.out_field}")
    if args.out_warped:
        write_volume(warp_scalar(moving, field), args.out_warped)
        print(f"[register] warped image -> {args.out_warped}")
    if args.moving_labels:
        if not args.out_labels:
            raise ValueError("--moving-labels needs --out-labels")
        labels = read_labelmap(args.moving_labels)
        warped = argmax_labels(warp_probmap(make_one_hot(labels), field), spacing=fixed.spacing)
        write_labelmap(warped, args.out_labels)
        print(f"[register] warped labels -> {args.out_labels}")
    return 0


def cmd_segment_mas(args) -> int:
    cfg = _config(args)
    net = load_regnet(args.model)
    atlases = _atlases(args, args.atlases)
    target = read_volume(args.target)
    fusion_cfg = cfg.fusion
    if args.n_augment is not None:
        fusion_cfg = fusion_cfg.model_copy(update={"n_augmented": args.n_augment})
    labels = mas_segment(net, atlases, target, fusion_cfg, verbose=True)
    write_labelmap(labels, args.out)
    print(f"[mas] {len(atlases)} atlases -> {args.out}")
    return 0


def cmd_segment_net(args) -> int:
    net = load_segnet(args.model)
    target = read_volume(args.target)
    labels = argmax_labels(seg_forward_full(net, target), spacing=target.spacing)
    write_labelmap(labels, args.out)
    print(f"[segnet] -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    pred = read_labelmap(args.pred)
    truth = read_labelmap(args.truth)
    included = [int(l) for l in args.labels.split(",")] if args.labels else None
    report = evaluate(pred, truth, spacing=truth.spacing, included_labels=included)
    print(DIVIDER)
    print(json.dumps(report.to_dict(), indent=2))
    print(DIVIDER)
    if report.missing_surface:
        print(f"[evaluate] warning: labels {report.missing_surface} are empty in exactly one map")
    if args.csv:
        subject = args.subject or Path(args.pred).name
        append_metrics_csv(args.csv, report_rows(report, args.method, args.n_atlases, args.repeat, subject))
        print(f"[evaluate] rows appended to {args.csv}")
    return 0


def _plot(cfg: ExperimentConfig, results_path: Path, out_dir: Path) -> None:
    rows = read_metrics_csv(results_path)
    image = truth = predictions = None
    data_manifest = Path(cfg.data_dir) / MANIFEST_NAME
    if data_manifest.exists():
        ds = load_dataset(cfg.data_dir)
        predictions = gallery_predictions(cfg, ds)
        image, truth = ds.test[0].image, ds.test[0].labels
    written = emit_plots(rows, out_dir, image=image, truth=truth, predictions=predictions)
    for p in written:
        print(f"[plot] {p}")


def cmd_experiment(args) -> int:
    cfg = _config(args)
    if args.methods:
        cfg = ExperimentConfig.model_validate({**cfg.model_dump(by_alias=True), "methods": args.methods.split(",")})
    if not (Path(cfg.data_dir) / MANIFEST_NAME).exists():
        raise FileNotFoundError(f"no dataset manifest in {cfg.data_dir}; run `mas synth-data` first")
    rows = run_experiment(cfg)
    if rows and not args.no_plots:
        _plot(cfg, Path(cfg.output_dir) / RESULTS_NAME, Path(cfg.output_dir) / "figures")
    return 0


def cmd_plot(args) -> int:
    cfg = _config(args)
    results = Path(args.results or Path(cfg.output_dir) / RESULTS_NAME)
    run_cfg = results.parent / "config.json"
    if args.config is None and run_cfg.exists():
        cfg = load_config(str(run_cfg))
    _plot(cfg, results, Path(args.out or results.parent / "figures"))
    return 0


# ─── Parser ───────────────────────────────────────────────

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--preset", default=None, choices=["desk", "full"])
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
    p.add_argument("--seed", type=int, default=None, help="overrides every rng_seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mas", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic population")
    _common(p)
    p.add_argument("--out", default=None, help=f"output directory (default {DATA_DIR})")
    p.set_defaults(func=cmd_synth_data)

    for name, func in (("train-reg", cmd_train_reg), ("train-seg", cmd_train_seg)):
        p = sub.add_parser(name)
        _common(p)
        p.add_argument("--data", default=None, help="dataset directory or manifest")
        p.add_argument("--n-atlases", type=int, default=None)
        p.add_argument("--ids", default=None, help="comma-separated training atlas ids")
        p.add_argument("--out", required=True, help="checkpoint path")
        if name == "train-reg":
            p.add_argument("--p-supervised", type=float, default=None)
            p.add_argument("--no-augment", action="store_true")
        else:
            p.add_argument("--augment", action="store_true", help="SegNet-DA")
        p.set_defaults(func=func)

    p = sub.add_parser("register")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--out-field", required=True)
    p.add_argument("--out-warped", default=None)
    p.add_argument("--moving-labels", default=None)
    p.add_argument("--out-labels", default=None)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("segment-mas")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--atlases", required=True, help="dataset directory or manifest")
    p.add_argument("--ids", default=None)
    p.add_argument("--n-atlases", type=int, default=None)
    p.add_argument("--target", required=True)
    p.add_argument("--n-augment", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment_mas)

    p = sub.add_parser("segment-net")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment_net)

    p = sub.add_parser("evaluate")
    _common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--labels", default=None, help="comma-separated labels to include")
    p.add_argument("--csv", default=None, help="append rows to this results table")
    p.add_argument("--method", default="external")
    p.add_argument("--n-atlases", type=int, default=0)
    p.add_argument("--repeat", type=int, default=0)
    p.add_argument("--subject", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment")
    _common(p)
    p.add_argument("--methods", default=None, help="comma-separated subset of methods")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("plot")
    _common(p)
    p.add_argument("--results", default=None, help=f"results table (default <output_dir>/{RESULTS_NAME})")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, KeyError, ValueError, RuntimeError) as e:
        print(f"[mas] error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
