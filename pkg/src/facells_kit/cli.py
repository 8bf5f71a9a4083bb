"""Command-line interface: the full pipeline as composable subcommands.

    vectorize  raster image -> traced stroke drawing (jsonl)
    order      reorder strokes to minimize pen-up travel
    encode     drawings -> (a, b, p) triple sequences (jsonl)
    make-toy   synthetic labeled face sketches for desk-scale runs
    train      run one experiment plan; writes metrics/checkpoint/eligible
    eval       score a checkpoint on a labeled dataset
    compare    run several plans differing in format/ordering/config
    score      per-drawing (and optionally per-point) attribute logits
    facell     composite image of threshold-passing points
    gradcheck  finite-difference audit of the BPTT gradients

Every subcommand ends stdout with one machine-readable line:
`STATUS key=value ...`. Exit codes: 0 success, 1 usage error, 2 bad data,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import facells, model, ordering, sketch, training, vectorize
from .errors import DataError, NumericError


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _status(pairs: dict) -> None:
    print("STATUS " + " ".join(f"{k}={_fmt(v)}" for k, v in pairs.items()))


class _Log:
    def __init__(self, verbosity: int):
        self.verbosity = verbosity

    def __call__(self, msg: str, level: int = 1) -> None:
        if self.verbosity >= level:
            print(msg, file=sys.stderr)


def _read_drawings(path) -> list:
    try:
        return list(sketch.read_jsonl(path))
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e


def _encode_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--format", choices=training.FORMATS,
                        default=sketch.ABSOLUTE,
                        help="triple format (default absolute)")
    parser.add_argument("--ordering", choices=training.ORDERINGS,
                        default=ordering.MIN_LENGTH,
                        help="stroke order applied before encoding")
    parser.add_argument("--raw-coords", action="store_true",
                        help="keep canvas units instead of normalizing "
                             "to [-1, 1]")


def _encode_one(d, args, k: int):
    od = ordering.reorder(d, args.ordering, seed=args.seed + k)
    encode = (sketch.encode_absolute if args.format == sketch.ABSOLUTE
              else sketch.encode_relative)
    return od, encode(od, normalized=not args.raw_coords).triples


def _load_scoring_model(path):
    cfg, params, extras = model.load_checkpoint(path)
    attributes = extras.get("attributes") or None
    return cfg, params, attributes


def _attribute_column(attributes, name, outputs) -> int:
    if attributes:
        if name not in attributes:
            raise DataError(f"checkpoint has no attribute {name!r}; "
                            f"trained on {attributes}")
        return attributes.index(name)
    if outputs == 1:
        return 0
    raise DataError("checkpoint lacks attribute names; cannot pick a column")


# ---------------------------------------------------------------------------
# subcommands


def cmd_vectorize(args, log) -> dict:
    img = vectorize.read_pgm(args.image)
    cfg = vectorize.VectorizeConfig(
        blur_sigma=args.sigma, canny_low=args.low, canny_high=args.high,
        min_stroke_points=args.min_points, simplify_epsilon=args.epsilon)
    edges = vectorize.canny_edges(img, cfg)
    drawing_id = args.id or os.path.splitext(os.path.basename(args.image))[0]
    d = vectorize.trace_strokes(edges, cfg, id=drawing_id)
    log(f"{img.width}x{img.height} image -> {len(d.strokes)} strokes")
    sketch.write_jsonl([d], args.out)
    return {"ok": 1, "strokes": len(d.strokes), "points": d.n_points,
            "out": args.out}


def cmd_order(args, log) -> dict:
    drawings = _read_drawings(args.data)
    before = after = 0.0
    out = []
    for k, d in enumerate(drawings):
        od = ordering.reorder(d, args.method, seed=args.seed + k,
                              exact_max=args.exact_max)
        before += sketch.pen_up_length(d)
        after += sketch.pen_up_length(od)
        out.append(od)
    sketch.write_jsonl(out, args.out)
    log(f"pen-up travel {before:.1f} -> {after:.1f}")
    return {"ok": 1, "drawings": len(out), "penup_before": before,
            "penup_after": after, "out": args.out}


def cmd_encode(args, log) -> dict:
    drawings = _read_drawings(args.data)
    points = 0
    with open(args.out, "w", encoding="utf-8") as f:
        for k, d in enumerate(drawings):
            _, triples = _encode_one(d, args, k)
            points += len(triples)
            f.write(json.dumps({
                "id": d.id, "format": args.format,
                "normalized": not args.raw_coords,
                "triples": triples.tolist(),
            }) + "\n")
    return {"ok": 1, "sequences": len(drawings), "points": points,
            "out": args.out}


def cmd_make_toy(args, log) -> dict:
    drawings, table = training.make_toy_dataset(args.n, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    data_path = os.path.join(args.out, "drawings.jsonl")
    attrs_path = os.path.join(args.out, "attributes.txt")
    sketch.write_jsonl(drawings, data_path)
    training.write_attributes(table, attrs_path)
    positives = int(sum(v[0] for v in table.targets.values()))
    return {"ok": 1, "n": args.n, "positives": positives,
            "data": data_path, "attrs": attrs_path}


def _read_plan(path) -> training.ExperimentPlan:
    try:
        with open(path, encoding="utf-8") as f:
            return training.parse_plan(f.read())
    except OSError as e:
        raise DataError(f"cannot read plan {path}: {e}") from e


def cmd_train(args, log) -> dict:
    plan = _read_plan(args.plan)
    if args.seed_override is not None:
        from dataclasses import replace
        plan = replace(plan, seed=args.seed_override)
    drawings = _read_drawings(args.data)
    table = training.load_attributes(args.attrs)
    start = None
    if args.init_checkpoint:
        ckpt_cfg, start, _ = model.load_checkpoint(args.init_checkpoint)
        if ckpt_cfg != plan.model_config():
            raise DataError("init checkpoint config does not match the plan")
    result = training.run_stage(plan, drawings, table, out_dir=args.out,
                                log=log, start_params=start)
    final_train = result.epoch_losses("train")[-1]
    final_test = result.epoch_losses("test")[-1]
    return {"ok": 1, "epochs": plan.epochs, "train_loss": final_train,
            "test_loss": final_test,
            "eligible": ",".join(result.eligible) or "-", "out": args.out}


def cmd_eval(args, log) -> dict:
    cfg, params, attributes = _load_scoring_model(args.checkpoint)
    drawings = _read_drawings(args.data)
    table = training.load_attributes(args.attrs)
    if attributes is None:
        raise DataError("checkpoint lacks attribute names; cannot evaluate")
    ids = [d.id for d in drawings]
    y = table.columns(ids, attributes)
    sequences = [_encode_one(d, args, k)[1] for k, d in enumerate(drawings)]
    probs = training.predict_probs(cfg, params, sequences)
    if not np.isfinite(probs).all():
        raise NumericError("model produced non-finite probabilities")
    kv = {"ok": 1, "n": len(ids), "loss": model.bce_loss(probs, y)}
    for k, name in enumerate(attributes):
        try:
            kv[f"bacc_{name}"] = model.balanced_accuracy(probs[:, k], y[:, k])
        except DataError:
            kv[f"bacc_{name}"] = float("nan")
    return kv


def cmd_compare(args, log) -> dict:
    plans = [_read_plan(p) for p in args.plans]
    drawings = _read_drawings(args.data)
    table = training.load_attributes(args.attrs)
    report = training.compare_matrix(plans, drawings, table, log=log)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(report.to_csv())
    return {"ok": 1, "plans": len(plans),
            "ranking": ">".join(report.ranking), "out": args.out}


def cmd_score(args, log) -> dict:
    cfg, params, attributes = _load_scoring_model(args.checkpoint)
    col = _attribute_column(attributes, args.attribute, cfg.outputs)
    drawings = _read_drawings(args.data)
    with open(args.out, "w", encoding="utf-8") as f:
        for k, d in enumerate(drawings):
            _, triples = _encode_one(d, args, k)
            ps = facells.per_point_scores(cfg, params, triples, id=d.id)
            doc = {"id": d.id, "attribute": args.attribute,
                   "logit": float(ps.logits[col])}
            if args.per_point:
                doc["points"] = [float(s) for s in ps.scores[:, col]]
            f.write(json.dumps(doc) + "\n")
    return {"ok": 1, "drawings": len(drawings), "out": args.out}


def cmd_facell(args, log) -> dict:
    cfg, params, attributes = _load_scoring_model(args.checkpoint)
    col = _attribute_column(attributes, args.attribute, cfg.outputs)
    drawings = _read_drawings(args.data)
    spec = facells.FaCellSpec(
        attribute=args.attribute, count=args.count, threshold=args.threshold,
        polarity="negative" if args.negate else "positive")
    items = []
    for k, d in enumerate(drawings):
        od, triples = _encode_one(d, args, k)
        ps = facells.per_point_scores(
            cfg, params, triples, id=d.id,
            attributes=attributes if attributes else None)
        items.append((od, ps))
    img = facells.compose_facell(items, spec)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(img.to_svg())
    kv = {"ok": 1, "used": len(img.used_ids), "points": len(img.points),
          "out": args.out}
    if args.png:
        with open(args.png, "wb") as f:
            f.write(img.to_pgm())
        kv["png"] = args.png
    return kv


def cmd_gradcheck(args, log) -> dict:
    results = model.gradient_check_suite(cells=args.cells,
                                         batches=args.batches,
                                         seed=args.seed)
    worst = 0.0
    for name, err in results:
        print(f"{name:12s} max_rel_err={err:.3e}")
        worst = max(worst, err)
    if worst >= args.tolerance:
        raise NumericError(f"gradient check failed: max relative error "
                           f"{worst:.3e} >= {args.tolerance:g}")
    return {"ok": 1, "configs": len(results), "max_rel_err": worst}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=42,
                        help="base random seed (default 42)")
    common.add_argument("--threads", type=int,
                        default=max(1, os.cpu_count() or 1),
                        help="worker cap for parallel sections")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("-q", "--quiet", action="count", default=0)

    parser = argparse.ArgumentParser(
        prog="facells-kit",
        description="stroke-sketch pipeline: vectorize, order, encode, "
                    "train, score, compose")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("vectorize", parents=[common],
                       help="trace a raster image into strokes")
    p.add_argument("--image", required=True, help="binary PGM (P5) input")
    p.add_argument("--out", required=True, help="output drawings jsonl")
    p.add_argument("--id", default=None, help="drawing id (default: stem)")
    p.add_argument("--sigma", type=float, default=1.4)
    p.add_argument("--low", type=float, default=50.0)
    p.add_argument("--high", type=float, default=120.0)
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--min-points", type=int, default=4)
    p.set_defaults(handler=cmd_vectorize)

    p = sub.add_parser("order", parents=[common],
                       help="reorder strokes to cut pen-up travel")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=training.ORDERINGS,
                   default=ordering.MIN_LENGTH)
    p.add_argument("--exact-max", type=int, default=ordering.EXACT_MAX,
                   help="largest stroke count solved exactly")
    p.set_defaults(handler=cmd_order)

    p = sub.add_parser("encode", parents=[common],
                       help="drawings to (a, b, p) triples")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _encode_args(p)
    p.set_defaults(handler=cmd_encode)

    p = sub.add_parser("make-toy", parents=[common],
                       help="synthetic labeled face sketches")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_make_toy)

    p = sub.add_parser("train", parents=[common],
                       help="run one experiment plan")
    p.add_argument("--plan", required=True, help="key=value plan file")
    p.add_argument("--data", required=True)
    p.add_argument("--attrs", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--init-checkpoint", default=None,
                   help="continue from existing weights")
    p.add_argument("--seed-override", type=int, default=None,
                   help="replace the plan's seed")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="loss and balanced accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--attrs", required=True)
    _encode_args(p)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("compare", parents=[common],
                       help="run plans differing in format/ordering/config")
    p.add_argument("--plans", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--attrs", required=True)
    p.add_argument("--out", required=True, help="aligned CSV path")
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("score", parents=[common],
                       help="attribute logits per drawing (and per point)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--attribute", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-point", action="store_true")
    _encode_args(p)
    p.set_defaults(handler=cmd_score)

    p = sub.add_parser("facell", parents=[common],
                       help="composite threshold-passing points")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--attribute", required=True)
    p.add_argument("--count", type=int, required=True,
                   help="number of qualifying drawings to overlay (X)")
    p.add_argument("--threshold", type=float, required=True,
                   help="per-point logit threshold (Y)")
    p.add_argument("--negate", action="store_true",
                   help="compose the contrary attribute (score < -Y)")
    p.add_argument("--out", required=True, help="SVG output path")
    p.add_argument("--png", default=None, help="optional PGM raster path")
    _encode_args(p)
    p.set_defaults(handler=cmd_facell)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference audit of BPTT gradients")
    p.add_argument("--cells", type=int, default=8)
    p.add_argument("--batches", type=int, default=4,
                   help="random batches per config")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(handler=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        _status({"ok": 0, "error": "usage"})
        return 1
    log = _Log(1 + args.verbose - args.quiet)
    try:
        kv = args.handler(args, log)
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        _status({"ok": 0, "error": "data"})
        return 2
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        _status({"ok": 0, "error": "numeric"})
        return 3
    _status(kv)
    return 0


if __name__ == "__main__":
    sys.exit(main())
