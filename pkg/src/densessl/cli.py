"""Command-line entry points tying the modules into runnable experiments.

Exit codes: 0 success, 1 usage/config error, 2 numeric failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dumps
from .assignment import assign_box_baseline, assign_tsa, assignment_to_records
from .config import config_echo, load_config, parse_config
from .data import generate_dataset, load_dataset, save_dataset
from .diagnostics import (assignment_ambiguity_report, confidence_histogram,
                          selection_report, threshold_sweep, ambiguity_counts)
from .errors import CheckpointError, ConfigError, DumpFormatError, NumericError
from .metrics import evaluate
from .model import forward, load_checkpoint
from .pipeline import Trainer, pseudo_boxes_from_dense


def _load_cfg(args, overrides=None):
    if getattr(args, "threads", 1) < 1:
        raise ConfigError("--threads must be >= 1")
    overrides = dict(overrides or {})
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "assigner", None):
        overrides["assigner"] = args.assigner
    if getattr(args, "head", None):
        overrides["head"] = args.head
    if getattr(args, "mining", None):
        overrides["mining"] = args.mining == "on"
    if args.config:
        return load_config(args.config, overrides)
    return parse_config("", overrides)


def _echo_config(cfg, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_echo.txt").write_text(config_echo(cfg))


def cmd_gen_data(args):
    cfg = _load_cfg(args)
    dataset = generate_dataset(cfg.n_scenes, cfg.labeled_fraction, cfg.data_seed)
    save_dataset(dataset, args.out)
    _echo_config(cfg, args.out)
    print(f"wrote {cfg.n_scenes} scenes "
          f"({len(dataset.labeled)} labeled / {len(dataset.unlabeled)} unlabeled) "
          f"to {args.out}")
    return 0


def cmd_train(args):
    cfg = _load_cfg(args)
    if args.data:
        dataset = load_dataset(args.data)
    else:
        dataset = generate_dataset(cfg.n_scenes, cfg.labeled_fraction, cfg.data_seed)
    _echo_config(cfg, args.out)
    trainer = Trainer(cfg.train, dataset, out_dir=args.out)
    trainer.run(progress=args.progress)
    print(f"trained {trainer.iteration} iterations; "
          f"checkpoints and train_log.jsonl in {args.out}")
    return 0


def _val_dataset(args, cfg):
    if args.data:
        return load_dataset(args.data)
    # held-out scenes: ids beyond the training set, all labeled for oracle use
    base = cfg.data_seed * 1_000_003 + cfg.n_scenes
    from .data import Dataset, generate_scene
    return Dataset([generate_scene(base + i) for i in range(cfg.val_scenes)])


def cmd_eval(args):
    cfg = _load_cfg(args)
    params = load_checkpoint(args.checkpoint)
    dataset = _val_dataset(args, cfg)
    report = evaluate(params, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out)
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(f"AP50 {report.ap50:.4f}  AP50:95 {report.ap50_95:.4f}")
    for c, ap in sorted(report.per_class_ap50.items()):
        print(f"  class {c}: AP50 {'-' if ap is None else f'{ap:.4f}'}")
    return 0


def cmd_diagnose(args):
    cfg = _load_cfg(args)
    params = load_checkpoint(args.checkpoint)
    dataset = _val_dataset(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out)

    sel = selection_report(params, dataset)
    dense_maps = [forward(params, s.image) for s in dataset.samples]
    centers = dense_maps[0].centers

    from .assignment import Verdict, assign_boxes
    joint_max, oracle_pos = [], []
    for dense, sample in zip(dense_maps, dataset.samples):
        joint_max.append(dense.joint.max(axis=1))
        oracle = assign_boxes(sample.boxes, sample.classes, centers, soft=False)
        oracle_pos.append(oracle.verdict == Verdict.POSITIVE)
    hist = confidence_histogram(joint_max, oracle_pos)

    tsa_cfg = cfg.train.tsa
    assignments_tsa = [assign_tsa(d, tsa_cfg, mining=cfg.train.mining)[0]
                       for d in dense_maps]
    tsa_counts = assignment_ambiguity_report(assignments_tsa, dataset.samples, centers)
    assignments_box = [
        assign_box_baseline(
            pseudo_boxes_from_dense(d, cfg.train.sigma, cfg.train.nms_iou),
            centers, soft=False)
        for d in dense_maps
    ]
    box_counts = assignment_ambiguity_report(assignments_box, dataset.samples, centers)

    sigmas = [round(s, 2) for s in np.arange(0.1, 1.0, 0.1)]
    sweep = threshold_sweep(params, dataset, sigmas, nms_thr=cfg.train.nms_iou)

    report = {
        "selection": sel.to_dict(),
        "confidence_histogram": hist.to_dict(),
        "ambiguity": {
            "tsa": tsa_counts.to_dict(),
            "box_baseline": box_counts.to_dict(),
        },
        "threshold_sweep": {str(s): c.to_dict() for s, c in sweep.items()},
    }
    (out / "diagnostics.json").write_text(json.dumps(report, indent=2) + "\n")

    # companion plot-data series (x = sigma, y = counts) for external plotting
    with open(out / "sweep_series.txt", "w") as fh:
        fh.write("# sigma true_positives false_positives false_negatives\n")
        for s in sigmas:
            c = sweep[float(s)]
            fh.write(f"{s} {c.true_positives} {c.false_positives} "
                     f"{c.false_negatives}\n")

    lines = [
        "selection report:",
        f"  detections {sel.num_detections}  mean IoU {sel.mean_iou:.4f}  "
        f"top-5 IoU {sel.topk_iou:.4f}  PCC "
        + ("n/a" if sel.pcc is None else f"{sel.pcc:.4f}"),
        "assignment ambiguity (TP / FP / FN):",
        f"  box baseline  {box_counts.true_positives} / "
        f"{box_counts.false_positives} / {box_counts.false_negatives}",
        f"  tsa           {tsa_counts.true_positives} / "
        f"{tsa_counts.false_positives} / {tsa_counts.false_negatives}",
    ]
    (out / "diagnostics.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_dump_preds(args):
    cfg = _load_cfg(args)
    params = load_checkpoint(args.checkpoint)
    dataset = _val_dataset(args, cfg)
    dense_maps = [forward(params, s.image) for s in dataset.samples]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(dumps.predictions_to_jsonl(dense_maps))
    gt_path = Path(args.out).with_suffix(".gt.jsonl")
    gt_path.write_text(dumps.ground_truth_to_jsonl(dataset.samples))
    print(f"wrote {len(dense_maps)} prediction records to {args.out} "
          f"and ground truth to {gt_path}")
    return 0


def cmd_assign_sim(args):
    cfg = _load_cfg(args)
    dense_maps = dumps.jsonl_to_predictions(Path(args.predictions).read_text())
    gt = dumps.jsonl_to_ground_truth(Path(args.gt).read_text())
    if len(gt) != len(dense_maps):
        raise ConfigError(
            f"{len(dense_maps)} prediction records but {len(gt)} ground-truth records")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out)
    mode = args.assigner or cfg.train.assigner
    mining = cfg.train.mining

    from .diagnostics import AmbiguityCounts
    total = AmbiguityCounts()
    with open(out / "assignments.jsonl", "w") as fh:
        for image_id, (dense, (boxes, classes)) in enumerate(zip(dense_maps, gt)):
            if mode == "tsa":
                assignment, _ = assign_tsa(dense, cfg.train.tsa, mining=mining)
            else:
                pseudo = pseudo_boxes_from_dense(dense, cfg.train.sigma,
                                                 cfg.train.nms_iou)
                assignment = assign_box_baseline(pseudo, dense.centers,
                                                 soft=cfg.train.head == "jce")
            for line in assignment_to_records(assignment).splitlines():
                rec = json.loads(line)
                rec["image_id"] = image_id
                fh.write(json.dumps(rec) + "\n")
            total += ambiguity_counts(assignment, boxes, classes, dense.centers)

    report = {"assigner": mode, "mining": mining, "ambiguity": total.to_dict()}
    (out / "ambiguity.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"{mode} (mining={'on' if mining else 'off'}): "
          f"TP {total.true_positives}  FP {total.false_positives}  "
          f"FN {total.false_negatives}")
    return 0


def cmd_bench(args):
    from .bench import run_benchmark
    run_benchmark()
    return 0


def _add_common(p, config=True):
    if config:
        p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, default=1,
                   help="worker cap (1 = fully deterministic; compute is "
                        "single-threaded regardless)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="densessl",
        description="Semi-supervised dense detection lab on synthetic scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and dump a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run burn-in plus self-training")
    _add_common(p)
    p.add_argument("--data", help="dataset directory (default: generate from config)")
    p.add_argument("--out", required=True)
    p.add_argument("--assigner", choices=["box", "tsa"])
    p.add_argument("--head", choices=["centerness", "jce"])
    p.add_argument("--mining", choices=["on", "off"])
    p.add_argument("--progress", type=int, default=0,
                   help="print a status line every N iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="ambiguity diagnostics for a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--mining", choices=["on", "off"])
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("dump-preds",
                       help="serialize teacher predictions for assign-sim")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_preds)

    p = sub.add_parser("assign-sim",
                       help="run an assigner on serialized predictions")
    _add_common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--assigner", choices=["box", "tsa"])
    p.add_argument("--head", choices=["centerness", "jce"])
    p.add_argument("--mining", choices=["on", "off"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_assign_sim)

    p = sub.add_parser("bench", help="benchmark numba vs numpy kernels")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigError, DumpFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
