"""Command-line entry point: ``emcad analyze|forward|verify|loss``.

Exit codes: 0 success, 1 tolerance or property failure, 2 usage or format error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from . import cost as C
from . import decoder as D
from . import io as IO
from . import losses as L
from . import verify as V
from .tensor import ConfigError, ShapeError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

DEFAULT_TOLERANCE = {"params": 0.02, "flops": 0.10}


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"emcad: error: {msg}", file=sys.stderr)


def _resolution(args, run: IO.RunSettings) -> tuple[int, int]:
    return tuple(args.res) if args.res else (run.input_h, run.input_w)


def check_expectations(report: C.CostReport, expect: dict) -> list[str]:
    """Deviations of ``report`` from an expectation document.

    The document maps block paths to ``{"params": .., "flops": ..}`` under
    ``"entries"``; relative tolerances come from ``"tolerance"`` and may be
    overridden per entry.
    """
    if not isinstance(expect, dict) or not isinstance(expect.get("entries"), dict):
        raise UsageError("expectation file needs an 'entries' mapping")
    tol = {**DEFAULT_TOLERANCE, **expect.get("tolerance", {})}
    failures = []
    for path, want in expect["entries"].items():
        try:
            node = report.find(path)
        except KeyError:
            raise UsageError(f"expectation names unknown block {path!r}") from None
        for key in ("params", "flops"):
            if key not in want:
                continue
            limit = want.get(f"{key}_tolerance", tol[key])
            got = getattr(node, key)
            dev = abs(got - want[key]) / abs(want[key]) if want[key] else float(got != 0)
            if dev > limit:
                failures.append(f"{path} {key}: got {got:,} expected {want[key]:,} "
                                f"(off {dev:.1%}, tolerance {limit:.0%})")
    return failures


def cmd_analyze(args) -> int:
    cfg, run = IO.load_config(args.config)
    h, w = _resolution(args, run)
    mode = "full" if args.full else "mac"
    report = C.config_cost(cfg, h, w, mode)
    sys.stdout.write(C.render_table(report, args.format))
    if args.format == "text":
        print(C.summary_line(report, h, w, mode))
    if args.expect:
        try:
            expect = json.loads(Path(args.expect).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read expectation file: {e}") from None
        failures = check_expectations(report, expect)
        for f in failures:
            print(f"FAIL {f}", file=sys.stderr)
        if failures:
            return EXIT_FAIL
    return EXIT_OK


def cmd_forward(args) -> int:
    cfg, run = IO.load_config(args.config)
    seed = run.seed if args.seed is None else args.seed
    dec = IO.load_decoder(args.weights, cfg) if args.weights else D.build_decoder(cfg, seed)
    if args.features:
        feats = IO.load_features(args.features)
    else:
        feats = D.synth_features(cfg, run.input_h, run.input_w, seed, batch=run.batch)
    maps = D.decoder_forward(dec, feats)
    h, w = feats[0].shape[2] * 4, feats[0].shape[3] * 4
    if args.aggregate == "sum":
        agg = D.aggregate_predictions(maps, h, w, cfg.num_classes)
    else:
        agg = D.final_map(maps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(maps, start=1):
        IO.write_tensor(out / f"p{i}.emct", p)
    IO.write_tensor(out / "aggregate.emct", agg)
    print(f"wrote p1..p4 and aggregate {tuple(agg.shape)} to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    status = EXIT_OK
    for check in V.run(args.suite):
        mark = "PASS" if check.passed else "FAIL"
        detail = f": {check.detail}" if check.detail else ""
        print(f"{mark} [{check.suite}] {check.name}{detail}")
        if not check.passed:
            status = EXIT_FAIL
    print("all checks passed" if status == EXIT_OK else "verification failed")
    return status


LOSSES = {"bce_iou": L.bce_iou_weighted, "ce_dice": L.ce_dice_loss}


def compute_loss(kind: str, preds: Sequence, target, base: str = "bce_iou") -> float:
    if kind in LOSSES:
        if len(preds) != 1:
            raise UsageError(f"--loss {kind} takes exactly one prediction")
        return LOSSES[kind](preds[0], target)
    if kind == "additive":
        return L.additive_loss(preds, target, base=LOSSES[base])
    return L.mutation_loss(preds, target, base=LOSSES[base])


def cmd_loss(args) -> int:
    if len(args.tensors) < 2:
        raise UsageError("need at least one prediction and a target")
    *pred_paths, target_path = args.tensors
    preds = [IO.read_tensor(p) for p in pred_paths]
    target = IO.read_tensor(target_path)
    value = compute_loss(args.loss, preds, target, args.base)
    print(f"loss {args.loss}: {value!r}")
    if args.metrics:
        th, tw = target.shape[-2:]
        prob = D.aggregate_predictions(preds, th, tw)
        m = L.segmentation_metrics(prob, target)
        hd = "nan" if math.isnan(m["hd95"]) else f"{m['hd95']:.4f}"
        print(f"dice {m['dice']:.4f}  iou {m['iou']:.4f}  hd95 {hd}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="emcad", description="Multi-scale cascaded decoder toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="parameter and FLOP report for a config")
    a.add_argument("config")
    a.add_argument("--res", nargs=2, type=int, metavar=("H", "W"))
    a.add_argument("--format", choices=("text", "csv"), default="text")
    a.add_argument("--full", action="store_true", help="layer-level FLOPs instead of conv MACs")
    a.add_argument("--expect", metavar="JSON", help="fail with exit 1 if totals deviate")
    a.set_defaults(func=cmd_analyze)

    f = sub.add_parser("forward", help="run the decoder and write prediction maps")
    f.add_argument("config")
    src = f.add_mutually_exclusive_group()
    src.add_argument("--features", metavar="PATH", help="feature bundle with x1..x4")
    src.add_argument("--seed", type=int, help="synthesize features and weights from this seed")
    f.add_argument("--weights", metavar="PATH", help="weight bundle (default: seeded init)")
    f.add_argument("--out", required=True, metavar="DIR")
    f.add_argument("--aggregate", choices=("final", "sum"), default="sum")
    f.set_defaults(func=cmd_forward)

    v = sub.add_parser("verify", help="run the randomized property suites")
    v.add_argument("--suite", choices=("kernels", "blocks", "graph", "cost", "loss", "all"), default="all")
    v.set_defaults(func=cmd_verify)

    lo = sub.add_parser("loss", help="evaluate a loss on tensor files")
    lo.add_argument("tensors", nargs="+", metavar="PRED... TARGET")
    lo.add_argument("--loss", choices=("bce_iou", "ce_dice", "additive", "mutation"), default="bce_iou")
    lo.add_argument("--base", choices=tuple(LOSSES), default="bce_iou",
                    help="per-map loss for additive and mutation")
    lo.add_argument("--metrics", action="store_true", help="also print DICE, IoU and HD95")
    lo.set_defaults(func=cmd_loss)
    return ap


def _thread_limit() -> Optional[int]:
    raw = os.environ.get("EMCAD_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"EMCAD_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("EMCAD_THREADS must be >= 0")
    return n or None


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=_thread_limit()):
            return args.func(args)
    except (UsageError, ConfigError, ShapeError, IO.FormatError, OSError, KeyError, ValueError) as e:
        _err(str(e))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
