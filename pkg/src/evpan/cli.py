"""Command-line entry point: ``evpan {synth,fuse,evaluate,gradcheck}``.

Exit codes: 0 success, 1 invalid input or failed check, 2 I/O failure
(argparse also uses 2 for usage errors).  ``EVPAN_THREADS`` caps the number
of images processed concurrently.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from functools import reduce
from pathlib import Path

import numpy as np

from . import tensorio
from .evidential import dirichlet_from_logits, predictive_uncertainty
from .fusion import fuse
from .gradcheck import check_loss, random_problem
from .grid import ClassConfig
from .metrics import DEFAULT_BINS, EvalAccumulator, merge_accumulators
from .report import dumps, report_document
from .synthdata import SceneConfig, generate_scene, synthesize_predictions

log = logging.getLogger("evpan")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
PANOPTIC_SUFFIX = ".panoptic.upst"
UNCERTAINTY_SUFFIX = ".uncertainty.upst"
DEFAULT_TOL = {"lovasz": 1e-4, "total": 1e-4}


class CliError(Exception):
    def __init__(self, msg, code=EXIT_INVALID):
        super().__init__(msg)
        self.code = code


def _threads() -> int:
    raw = os.environ.get("EVPAN_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise CliError(f"EVPAN_THREADS must be an integer, got {raw!r}")
    return min(8, os.cpu_count() or 1)


def _parallel_map(fn, items):
    n = _threads()
    if n == 1 or len(items) < 2:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _int_list(text: str) -> list[int]:
    if not text.strip():
        return []
    try:
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _shape(text: str) -> tuple[int, int, int]:
    try:
        h, w, c = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must look like HxWxC, got {text!r}")
    if min(h, w) < 1 or c < 2:
        raise argparse.ArgumentTypeError("shape needs H, W >= 1 and C >= 2")
    return h, w, c


def load_class_config(path) -> ClassConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise CliError(f"{path}: {e.strerror or e}", EXIT_IO)
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: invalid class config ({e})")
    if isinstance(doc, dict) and "classes" in doc:
        doc = doc["classes"]
    try:
        return ClassConfig.from_dict(doc)
    except ValueError as e:
        raise CliError(f"{path}: invalid class config ({e})")


# -- synth ------------------------------------------------------------------


def cmd_synth(args) -> int:
    base = SceneConfig(
        height=args.height,
        width=args.width,
        n_stuff=args.n_stuff,
        n_thing=args.n_thing,
        n_instances=args.n_instances,
        noise_level=args.noise_level,
        target_confidence=args.target_confidence,
        seed=args.seed,
        calibrated=args.calibrated,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = [(f"scene_{k:04d}", base.seed + k) for k in range(args.count)]
    if scenes:
        (out / "gt").mkdir(exist_ok=True)
        (out / "pred").mkdir(exist_ok=True)

    def one(item):
        stem, seed = item
        cfg = base.with_seed(seed)
        gt, labels = generate_scene(cfg)
        logits, instances = synthesize_predictions(gt, cfg)
        tensorio.write_tensor(out / "gt" / f"{stem}{PANOPTIC_SUFFIX}", gt.astype(np.uint32))
        tensorio.write_tensor(out / "gt" / f"{stem}.labels.upst", labels.astype(np.uint32))
        tensorio.write_tensor(out / "pred" / f"{stem}.logits.upst", logits)
        u = predictive_uncertainty(dirichlet_from_logits(logits))[..., 0]
        tensorio.write_tensor(out / "pred" / f"{stem}{UNCERTAINTY_SUFFIX}", u)
        tensorio.write_instance_set(out / "pred" / f"{stem}.instances.json", stem, cfg.height, cfg.width, instances)

    _parallel_map(one, scenes)
    manifest = {
        "config": base.to_dict(),
        "classes": base.classes.to_dict(),
        "scenes": [{"stem": s, "seed": seed} for s, seed in scenes],
    }
    tensorio.atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(scenes)} scene(s) to {out}")
    return EXIT_OK


# -- fuse -------------------------------------------------------------------


def cmd_fuse(args) -> int:
    try:
        classes = ClassConfig.from_lists(args.stuff, args.thing)
    except ValueError as e:
        raise CliError(f"invalid class lists: {e}")
    logits = tensorio.read_tensor(args.semantic_logits).astype(np.float64)
    if logits.ndim != 3:
        raise CliError(f"{args.semantic_logits}: expected an (H, W, C) tensor, got shape {logits.shape}")
    meta, instances = tensorio.read_instance_set(args.instance_set)
    if (meta["height"], meta["width"]) != logits.shape[:2]:
        raise CliError(f"{args.instance_set}: image size {meta['height']}x{meta['width']} "
                       f"does not match logits {logits.shape[0]}x{logits.shape[1]}")
    try:
        result = fuse(
            logits,
            instances,
            classes,
            prob_threshold=args.prob_threshold,
            overlap_threshold=args.overlap_threshold,
            activation=args.activation,
        )
    except ValueError as e:
        raise CliError(f"{args.instance_set}: {e}")
    prefix = str(args.out)
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    tensorio.write_tensor(prefix + PANOPTIC_SUFFIX, result.panoptic.astype(np.uint32))
    tensorio.write_tensor(prefix + UNCERTAINTY_SUFFIX, result.uncertainty.astype(np.float64))
    print(f"fused {len(result.instances_kept)} instance(s) -> {prefix}{PANOPTIC_SUFFIX}")
    return EXIT_OK


# -- evaluate ---------------------------------------------------------------


def _stems(directory: Path) -> set[str]:
    if not directory.is_dir():
        raise CliError(f"{directory}: not a directory", EXIT_IO)
    return {p.name[: -len(PANOPTIC_SUFFIX)] for p in directory.glob(f"*{PANOPTIC_SUFFIX}")}


def _read_grid(path: Path, ndim_ok=(2,)) -> np.ndarray:
    if not path.exists():
        raise CliError(f"{path}: missing file")
    arr = tensorio.read_tensor(path)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim not in ndim_ok:
        raise CliError(f"{path}: expected a 2-D grid, got shape {arr.shape}")
    return arr


def cmd_evaluate(args) -> int:
    classes = load_class_config(args.classes)
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    pred_stems, gt_stems = _stems(pred_dir), _stems(gt_dir)
    if pred_stems != gt_stems:
        missing = sorted(gt_stems - pred_stems)
        extra = sorted(pred_stems - gt_stems)
        if missing:
            raise CliError(f"{pred_dir / (missing[0] + PANOPTIC_SUFFIX)}: missing prediction for ground truth")
        raise CliError(f"{gt_dir / (extra[0] + PANOPTIC_SUFFIX)}: missing ground truth for prediction")
    stems = sorted(gt_stems)
    if not stems:
        raise CliError(f"{gt_dir}: no *{PANOPTIC_SUFFIX} files")

    def one(stem):
        pred = _read_grid(pred_dir / f"{stem}{PANOPTIC_SUFFIX}").astype(np.int64)
        unc_path = pred_dir / f"{stem}{UNCERTAINTY_SUFFIX}"
        unc = _read_grid(unc_path).astype(np.float64)
        gt = _read_grid(gt_dir / f"{stem}{PANOPTIC_SUFFIX}").astype(np.int64)
        if not (pred.shape == gt.shape == unc.shape):
            raise CliError(f"{pred_dir / stem}: shape mismatch (pred {pred.shape}, gt {gt.shape}, uncertainty {unc.shape})")
        try:
            return EvalAccumulator(classes, args.bins).update(pred, gt, unc)
        except ValueError as e:
            raise CliError(f"{pred_dir / stem}: {e}")

    accs = _parallel_map(one, stems)
    report = reduce(merge_accumulators, accs).report()
    if args.per_image:
        for stem, acc in zip(stems, accs):
            r = acc.report()
            report.per_image.append(
                {"stem": stem, "pq": r.all.pq, "pece": r.all.pece, "upq": r.all.upq, "uece": r.uece}
            )
    doc = report_document(report, {"pred_dir": str(pred_dir), "gt_dir": str(gt_dir), "images": len(stems)})
    text = dumps(doc)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        tensorio.atomic_write_text(args.report, text)
    s = report.all
    print(f"images={len(stems)} PQ={s.pq:.4f} SQ={s.sq:.4f} RQ={s.rq:.4f} pECE={s.pece:.4f} uPQ={s.upq:.4f}"
          + (f" uECE={report.uece:.4f}" if report.uece is not None else ""))
    if s.pece_undefined:
        print("warning: no matched segments, pECE set to 1", file=sys.stderr)
    return EXIT_OK


# -- gradcheck --------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    tol = args.tol if args.tol is not None else DEFAULT_TOL.get(args.loss, 1e-5)
    logits, labels = random_problem(args.seed, args.shape)
    res = check_loss(args.loss, logits, labels, args.activation)
    ok = res.max_rel_error < tol
    print(f"{'loss':<8} {'value':>14} {'max_rel_err':>12} {'tol':>8}  result")
    print(f"{res.loss:<8} {res.value:>14.8g} {res.max_rel_error:>12.3e} {tol:>8.1e}  {'PASS' if ok else 'FAIL'}")
    if res.min_sort_gap is not None and res.min_sort_gap < 10 * 1e-5:
        print(f"note: closest error pair {res.min_sort_gap:.2e} apart; sorting ties may affect the check")
    return EXIT_OK if ok else EXIT_INVALID


# -- wiring -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evpan", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic scenes and predictions")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--n-stuff", type=int, default=3)
    p.add_argument("--n-thing", type=int, default=2)
    p.add_argument("--n-instances", type=int, default=4)
    p.add_argument("--noise-level", type=float, default=0.0)
    p.add_argument("--target-confidence", type=float, default=0.9)
    p.add_argument("--calibrated", action="store_true", help="sample correctness with probability = confidence")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fuse", help="fuse semantic logits and an instance set")
    p.add_argument("semantic_logits")
    p.add_argument("instance_set")
    p.add_argument("--stuff", type=_int_list, required=True, help="comma-separated stuff class ids")
    p.add_argument("--thing", type=_int_list, required=True, help="comma-separated thing class ids")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--prob-threshold", type=float, default=0.5)
    p.add_argument("--overlap-threshold", type=float, default=0.5)
    p.add_argument("--activation", choices=["softplus", "relu"], default="softplus")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", help="compute PQ, uECE, pECE and uPQ")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--classes", required=True, help="JSON with 'stuff' and 'thing' lists")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--per-image", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="compare analytic loss gradients with finite differences")
    p.add_argument("--loss", choices=["log", "digamma", "mse", "kl", "lovasz", "total"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", type=_shape, default=(4, 4, 3))
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--activation", choices=["softplus", "relu"], default="softplus")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if getattr(args, "bins", 1) < 1:
        parser.error("--bins must be at least 1")
    try:
        return args.func(args)
    except CliError as e:
        print(f"evpan: error: {e}", file=sys.stderr)
        return e.code
    except tensorio.FormatError as e:
        print(f"evpan: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as e:
        print(f"evpan: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        where = f"{e.filename}: " if e.filename else ""
        print(f"evpan: error: {where}{e.strerror or e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
