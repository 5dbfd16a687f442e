"""Command-line interface: train, refine, eval, schedule.

Usage errors exit 2 (argparse convention); runtime failures print a
message to stderr and exit 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .aspp import dilation_schedule
from .checkpoint import read_arrays, write_arrays
from .config import TrainConfig, load_config
from .decoder import PseudoLabelMask
from .metrics import confusion_matrix, report_from_confusion
from .netpbm import read_pgm, read_ppm, write_pgm
from .par import ParParams, par_refine
from .train import run_training


def _parse_epoch_range(text: str) -> range:
    lo, sep, hi = text.partition("..")
    if not sep:
        lo = hi = text
    try:
        start, stop = int(lo), int(hi)
    except ValueError:
        raise argparse.ArgumentTypeError(f"epoch range must look like A..B, got {text!r}")
    if start < 1 or stop < start:
        raise argparse.ArgumentTypeError(f"need 1 <= A <= B, got {text!r}")
    return range(start, stop + 1)


def _cmd_schedule(args) -> int:
    for epoch in args.epochs:
        rates = dilation_schedule(epoch)
        print(f"{epoch} [{','.join(str(r) for r in rates)}]")
    return 0


def _load_mask(path: Path) -> PseudoLabelMask:
    if path.suffix == ".pgm":
        labels, maxval = read_pgm(path)
        return PseudoLabelMask.from_labels(labels.astype(np.int64), maxval + 1)
    arrays, _ = read_arrays(path)
    if "probs" not in arrays:
        raise ValueError(f"{path}: probability checkpoint must contain a 'probs' tensor")
    return PseudoLabelMask(arrays["probs"])


def _cmd_refine(args) -> int:
    image = read_ppm(args.image).astype(np.float64) / 255.0
    mask = _load_mask(Path(args.mask))
    params = ParParams(
        dilation_list=tuple(args.dilations),
        w1=args.w1,
        w2=args.w2,
        omega3=args.omega3,
        iterations=args.iters,
    )
    refined = par_refine(mask, image, params)
    write_pgm(args.out, refined.labels(), mask.num_classes - 1)
    if args.probs_out:
        write_arrays(args.probs_out, {"probs": refined.probs}, {})
    return 0


def _label_pairs(pred: Path, gt: Path) -> list[tuple[Path, Path]]:
    if pred.is_dir() != gt.is_dir():
        raise ValueError("--pred and --gt must both be files or both be directories")
    if not pred.is_dir():
        return [(pred, gt)]
    pred_names = sorted(p.name for p in pred.glob("*.pgm"))
    gt_names = sorted(p.name for p in gt.glob("*.pgm"))
    if pred_names != gt_names:
        raise ValueError(
            f"directory contents differ: {len(pred_names)} prediction vs {len(gt_names)} "
            "ground-truth masks (names must match)"
        )
    return [(pred / n, gt / n) for n in pred_names]


def _cmd_eval(args) -> int:
    conf = np.zeros((args.classes, args.classes), dtype=np.int64)
    for pred_path, gt_path in _label_pairs(Path(args.pred), Path(args.gt)):
        pred, _ = read_pgm(pred_path)
        gt, _ = read_pgm(gt_path)
        if pred.shape != gt.shape:
            raise ValueError(f"{pred_path.name}: shape {pred.shape} vs gt {gt.shape}")
        conf += confusion_matrix(pred.astype(np.int64), gt.astype(np.int64), args.classes)
    report = report_from_confusion(conf, use_matching=args.match)
    print(json.dumps(report.to_dict()))
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    result = run_training(cfg, out_dir=args.out, on_step=_progress if args.verbose else None)
    if result.final_report is not None:
        print(json.dumps(result.final_report.to_dict()))
    return 0


def _progress(metrics: dict) -> None:
    print(
        f"step {metrics['step']:4d} epoch {metrics['epoch']:3d} "
        f"total {metrics['total']:.4f} miou {metrics['miou']:.3f}",
        file=sys.stderr,
    )


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynaseg",
        description="Desk-scale unsupervised segmentation: training, PAR refinement, scoring.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the teacher-student training loop")
    p_train.add_argument("--config", help="JSON config file (defaults used when omitted)")
    p_train.add_argument("--out", required=True, help="output directory for CSV/checkpoints/masks")
    p_train.add_argument("--verbose", action="store_true", help="per-step progress on stderr")
    p_train.set_defaults(fn=_cmd_train)

    p_refine = sub.add_parser("refine", help="standalone pixel-adaptive refinement")
    p_refine.add_argument("--image", required=True, help="input PPM (P6) image")
    p_refine.add_argument("--mask", required=True, help="input PGM labels or probability checkpoint")
    p_refine.add_argument("--out", required=True, help="output PGM labels")
    p_refine.add_argument("--iters", type=int, default=10)
    p_refine.add_argument("--omega3", type=float, default=0.01)
    p_refine.add_argument("--w1", type=float, default=0.3)
    p_refine.add_argument("--w2", type=float, default=0.01)
    p_refine.add_argument("--dilations", type=_csv_ints, default=[1, 2, 4, 8])
    p_refine.add_argument("--probs-out", help="also write refined probabilities (checkpoint format)")
    p_refine.set_defaults(fn=_cmd_refine)

    p_eval = sub.add_parser("eval", help="score predictions against ground truth")
    p_eval.add_argument("--pred", required=True, help="PGM file or directory")
    p_eval.add_argument("--gt", required=True, help="PGM file or directory")
    p_eval.add_argument("--classes", type=int, required=True)
    p_eval.add_argument("--match", action="store_true", help="Hungarian class matching")
    p_eval.set_defaults(fn=_cmd_eval)

    p_sched = sub.add_parser("schedule", help="print dilation rates for an epoch range")
    p_sched.add_argument("--epochs", type=_parse_epoch_range, required=True, help="range A..B")
    p_sched.set_defaults(fn=_cmd_schedule)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # runtime failures -> exit 1 with a message
        print(f"dynaseg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
