"""``tbedge`` command line: train, eval, predict, quantize.

Machine-readable output (JSON lines) goes to stdout, diagnostics to stderr.
Exit codes: 0 success, 1 usage, 2 data error, 3 model/format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path
from typing import List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as D
from . import fp16, metrics, modelio
from .nn import CLASS_NAMES, SpecError, build_model, preset, softmax
from .training import TrainConfig, predict_scores, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3

log = logging.getLogger("tbedge")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class ModelError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ratios(text: str):
    try:
        r = tuple(Fraction(v.strip()) for v in text.split(","))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"expected three comma-separated fractions, got {text!r}")
    if len(r) != 3 or any(v < 0 for v in r) or sum(r) != 1:
        raise argparse.ArgumentTypeError(f"ratios must be three non-negative fractions summing to 1, got {text!r}")
    return tuple(float(v) for v in r)


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def _add_source(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--data", metavar="DIR", help="corpus root with Normal/ and Tuberculosis/ subdirectories")
    g.add_argument("--synth", metavar="N", type=_positive, help="synthetic blob corpus with N images per class")
    p.add_argument("--synth-size", type=_positive, default=64, help="side length of synthetic images")
    p.add_argument("--ratios", type=_ratios, default=(0.8, 0.1, 0.1), help="train,val,test fractions")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tbedge", description="Train and run the tuberculosis screening classifier.")
    p.add_argument("--threads", type=_positive, default=1, help="BLAS threads (1 keeps runs deterministic)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model and write a container")
    _add_source(t)
    t.add_argument("--preset", choices=("tiny", "large"), default="tiny")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch", type=_positive, default=32)
    t.add_argument("--lr", type=float, default=0.001)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--no-augment", action="store_true", help="disable crop/flip augmentation")
    t.add_argument("--checkpoint-every", type=int, default=0, metavar="K")
    t.add_argument("--out", required=True, metavar="FILE")

    e = sub.add_parser("eval", help="evaluate a model on one split")
    _add_source(e)
    e.add_argument("--model", required=True, metavar="FILE")
    e.add_argument("--split", choices=D.SPLITS, default="test")
    e.add_argument("--batch", type=_positive, default=32)
    e.add_argument("--fp16", action="store_true", help="run half-precision inference")
    e.add_argument("--report", metavar="FILE", help="write the report JSON here")
    e.add_argument("--roc", metavar="FILE", help="write ROC points as CSV")
    e.add_argument("--svg-dir", metavar="DIR", help="write confusion, ROC and heatmap SVGs")
    e.add_argument("--pretty", action="store_true", help="print a table instead of JSON")

    r = sub.add_parser("predict", help="classify single images")
    r.add_argument("--model", required=True, metavar="FILE")
    r.add_argument("--input", required=True, nargs="+", metavar="IMG")
    r.add_argument("--fp16", action="store_true", help="run half-precision inference")
    r.add_argument("--pretty", action="store_true", help="print a table instead of JSON")

    q = sub.add_parser("quantize", help="convert a container to half precision")
    q.add_argument("--model", required=True, metavar="FILE")
    q.add_argument("--out", required=True, metavar="FILE")
    q.add_argument("--check-n", type=int, default=0, metavar="N",
                   help="report divergence on N random inputs")
    q.add_argument("--seed", type=int, default=0)
    return p


def _load_dataset(args) -> D.DatasetIndex:
    try:
        if args.synth is not None:
            return D.synth_blob_dataset(args.synth, size=args.synth_size, seed=args.seed, ratios=args.ratios)
        return D.load_corpus(args.data, ratios=args.ratios, seed=args.seed)
    except (D.CorpusError, OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc


def _load_model(path):
    try:
        return modelio.load(path)
    except FileNotFoundError as exc:
        raise ModelError(f"model file {str(path)!r} not found") from exc
    except (modelio.ContainerError, OSError) as exc:
        raise ModelError(f"cannot load {str(path)!r}: {exc}") from exc


def _save(model, path, optimizer=None):
    try:
        modelio.save(model, path, optimizer=optimizer)
    except OSError as exc:
        raise ModelError(str(exc)) from exc


def _emit_line(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def cmd_train(args) -> int:
    try:
        config = TrainConfig(epochs=args.epochs, batch_size=args.batch, seed=args.seed, preset=args.preset,
                             augment=not args.no_augment, lr=args.lr, momentum=args.momentum,
                             checkpoint_every=args.checkpoint_every,
                             checkpoint_dir=str(Path(args.out).parent) if args.checkpoint_every else None)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"config {json.dumps(config.to_dict(), sort_keys=True)}", file=sys.stderr)
    ds = _load_dataset(args)
    print(f"data {json.dumps({s: ds.class_counts(s) for s in D.SPLITS}, sort_keys=True)}", file=sys.stderr)
    model = build_model(preset(args.preset), seed=args.seed)
    try:
        model, _ = train(model, ds, config, on_epoch=_emit_line)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    _save(model, args.out)
    print(f"wrote {args.out} ({model.num_parameters} parameters)", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    ds = _load_dataset(args)
    if not ds.indices(args.split):
        raise DataError(f"split {args.split!r} is empty")
    use_fp16 = args.fp16 or model.is_half
    if use_fp16 and not model.is_half:
        print("notice: quantizing single-precision model for --fp16", file=sys.stderr)
        model = fp16.quantize_model(model)
    probs, labels = predict_scores(model, ds, args.split, args.batch, fp16=use_fp16)
    report, roc = metrics.evaluate(probs, labels)
    if roc is None:
        print(f"warning: split {args.split!r} has a single class; ROC and AUC omitted", file=sys.stderr)
    try:
        if args.report:
            metrics.emit(report, "json", args.report)
        if args.roc:
            if roc is None:
                print("warning: --roc ignored without both classes", file=sys.stderr)
            else:
                metrics.emit(roc, "csv", args.roc)
        if args.svg_dir:
            out = Path(args.svg_dir)
            out.mkdir(parents=True, exist_ok=True)
            metrics.emit(report.confusion, "svg", out / "confusion.svg")
            metrics.emit(report, "svg", out / "heatmap.svg")
            if roc is not None:
                metrics.emit(roc, "svg", out / "roc.svg")
    except OSError as exc:
        raise DataError(str(exc)) from exc
    if args.pretty:
        print(report.summary())
    else:
        sys.stdout.write(report.to_json())
    return EXIT_OK


def cmd_predict(args) -> int:
    model = _load_model(args.model)
    use_fp16 = args.fp16 or model.is_half
    if args.fp16 and not model.is_half:
        print("notice: quantizing single-precision model on the fly for --fp16", file=sys.stderr)
        model = fp16.quantize_model(model)
    elif model.is_half and not args.fp16:
        print("notice: half-precision container, using mixed inference", file=sys.stderr)
    rows = []
    for path in args.input:
        try:
            x = D.prepare(D.load_image(path), augment=False)[None, None]
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot decode {path!r}: {exc}") from exc
        logits = fp16.infer_mixed(model, x) if use_fp16 else model.forward(x)
        p = softmax(logits)[0]
        k = int(np.argmax(p))
        row = {"input": str(path), "label": CLASS_NAMES[k], "confidence": float(p[k]),
               "precision": "fp16" if use_fp16 else "fp32"}
        rows.append(row)
        if not args.pretty:
            _emit_line(row)
    if args.pretty:
        for row in rows:
            print(f"{row['label']:<13} {row['confidence']:.4f}  {row['precision']}  {row['input']}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    model = _load_model(args.model)
    if model.is_half:
        print("notice: input is already half precision; writing it unchanged", file=sys.stderr)
        half = model
    else:
        try:
            half = fp16.quantize_model(model)
        except fp16.HalfOverflowError as exc:
            raise ModelError(str(exc)) from exc
    _save(half, args.out)
    if args.check_n > 0:
        if model.is_half:
            print("notice: --check-n needs a single-precision input; skipped", file=sys.stderr)
        else:
            rep = fp16.divergence(model, args.check_n, seed=args.seed, quantized=half)
            sys.stdout.write(rep.to_json() + "\n")
            print(f"agreement {rep.agreement:.4f} over {rep.n} inputs", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "quantize": cmd_quantize}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"tbedge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"tbedge: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ModelError, SpecError) as exc:
        print(f"tbedge: model error: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
