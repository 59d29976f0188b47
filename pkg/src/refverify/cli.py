"""Command-line entry point: ``refverify {run,eval,simulate,analyze,overlay,convert}``.

Exit codes: 0 success, 1 usage/config error, 2 backend/transport error,
3 abstention (``run`` only). Machine-readable output goes to stdout, logs to
stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from refverify import analysis
from refverify.cache import ResponseCache
from refverify.config import load_settings, build_backends
from refverify.errors import BackendError, ConfigError, RefVerifyError
from refverify.evalharness import (
    VARIANT_ALIASES,
    ingest_dataset,
    refcoco_to_jsonl,
    resolve_variant,
    run_eval,
    run_variant,
    write_report,
)
from refverify.geometry import BoundingBox
from refverify.render import load_image, render_indexed_boxes, render_single_box, save_png

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND, EXIT_ABSTAIN = 0, 1, 2, 3

logger = logging.getLogger("refverify")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit with 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--fixtures", metavar="DIR", help="scripted backends: DIR/detections.json + DIR/vlm_script.json")
    p.add_argument("--cache-dir", help="VLM response cache root")
    p.add_argument("--workers", type=int, help="parallel verifications / items")
    p.add_argument("--variant", default="verify", choices=sorted(VARIANT_ALIASES) + sorted(VARIANT_ALIASES.values()))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="refverify", description="Locate referring expressions by checking detector boxes one at a time.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="locate one referring expression in one image")
    p.add_argument("--image", required=True)
    p.add_argument("--expr", required=True)
    _backend_flags(p)

    p = sub.add_parser("eval", help="evaluate a pipeline variant over a JSONL dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--box-format", default="xywh", choices=["xywh", "xyxy"])
    p.add_argument("--out", help="report JSON path (a .txt summary is written next to it)")
    _backend_flags(p)

    p = sub.add_parser("simulate", help="Monte Carlo check of the two-candidate model")
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--q1", type=float, required=True)
    p.add_argument("--q2", type=float, required=True)
    p.add_argument("--trials", type=int, default=200_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-proposals", type=int, default=2)

    p = sub.add_parser("analyze", help="emit threshold / gain curves as CSV + SVG")
    p.add_argument("--kind", required=True, choices=analysis.KINDS)
    p.add_argument("--grid-step", type=float, default=0.01)
    p.add_argument("--q2", type=float, action="append", help="q2 series for threshold_vs_q1 (repeatable)")
    p.add_argument("--out", help="output prefix; writes PREFIX.csv and PREFIX.svg (CSV to stdout if omitted)")

    p = sub.add_parser("overlay", help="draw boxes onto an image (debugging)")
    p.add_argument("--image", required=True)
    p.add_argument("--box", action="append", required=True, help="x0,y0,x1,y1 (repeatable)")
    p.add_argument("--box-format", default="xyxy", choices=["xywh", "xyxy"])
    p.add_argument("--indexed", action="store_true", help="label boxes even when there is only one")
    p.add_argument("--out", required=True)

    p = sub.add_parser("convert", help="RefCOCO refs + COCO instances (JSON) to dataset JSONL")
    p.add_argument("--refs", required=True)
    p.add_argument("--instances", required=True)
    p.add_argument("--split")
    p.add_argument("--image-dir", default="")
    p.add_argument("--out", required=True)
    return parser


def _settings(args: argparse.Namespace):
    return load_settings(
        args.config,
        {"fixtures_dir": args.fixtures, "cache_dir": args.cache_dir, "workers": args.workers},
    )


def _cmd_run(args: argparse.Namespace) -> int:
    if not Path(args.image).is_file():
        raise ConfigError(f"image not found: {args.image}")
    if not args.expr.strip():
        raise ConfigError("expression must be nonempty")
    settings = _settings(args)
    detector, vlm = build_backends(settings)
    if settings.cache_dir:
        from refverify.cache import CachedVlm

        vlm = CachedVlm(vlm, ResponseCache(settings.cache_dir))
    image = load_image(args.image)
    outcome = run_variant(resolve_variant(args.variant), image, args.expr, detector, vlm, settings.pipeline_config())
    print(json.dumps(outcome.to_dict(), indent=2, sort_keys=True))
    return EXIT_ABSTAIN if outcome.box is None else EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    variant = resolve_variant(args.variant)
    dataset = ingest_dataset(args.dataset, args.box_format)
    settings = _settings(args)
    detector, vlm = build_backends(settings)
    cache = ResponseCache(settings.cache_dir) if settings.cache_dir else None
    report = run_eval(dataset, variant, detector, vlm, settings.pipeline_config(), cache, workers=settings.workers)
    if args.out:
        write_report(report, args.out)
        sys.stderr.write(report.summary())
    else:
        sys.stdout.write(report.to_json())
    return EXIT_OK


def _check_prob(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"--{name} must lie in [0, 1], got {value}")


def _cmd_simulate(args: argparse.Namespace) -> int:
    for name in ("p", "q1", "q2"):
        _check_prob(name, getattr(args, name))
    if args.trials < 1 or args.n_proposals < 2:
        raise ConfigError("--trials must be >= 1 and --n-proposals >= 2")
    params = analysis.TwoCandidateParams(args.p, args.q1, args.q2)
    print(f"params:      p={args.p:g} q1={args.q1:g} q2={args.q2:g} n={args.n_proposals} trials={args.trials} seed={args.seed}")
    print(f"A_sel:       {analysis.a_sel(params):.6f}")
    if args.n_proposals == 2:
        closed = analysis.a_ver(params)
        mc = analysis.mc_two_candidate(params, args.trials, args.seed)
        z = (mc.accuracy - closed) / mc.stderr if mc.stderr > 0 else 0.0
        print(f"A_ver:       {closed:.6f}")
        print(f"monte carlo: {mc.accuracy:.6f} +/- {mc.stderr:.6f} (SE)")
        print(f"deviation:   {z:+.3f} SE")
        try:
            print(f"p threshold: {analysis.p_threshold(args.q1, args.q2):.6f}")
        except ValueError:
            print("p threshold: undefined")
    else:
        mc = analysis.mc_multi_candidate(params, args.n_proposals, args.trials, args.seed)
        print(f"monte carlo: {mc.accuracy:.6f} +/- {mc.stderr:.6f} (SE)")
    return EXIT_OK


def _cmd_analyze(args: argparse.Namespace) -> int:
    if not 0 < args.grid_step <= 0.1:
        raise ConfigError("--grid-step must lie in (0, 0.1]")
    fixed = {}
    if args.q2:
        for q2 in args.q2:
            _check_prob("q2", q2)
        fixed["q2"] = args.q2
    samples = analysis.emit_curves(args.kind, args.grid_step, fixed)
    if not args.out:
        sys.stdout.write(analysis.curves_csv(samples))
        return EXIT_OK
    csv_path, svg_path = analysis.write_curves(samples, args.out, title=args.kind)
    print(f"wrote {csv_path} and {svg_path} ({len(samples)} samples)")
    if args.kind == "gain_vs_q":
        peak = analysis.series_argmax(samples, "gain")
        print(f"max gain {peak.y:.6f} at q={peak.x:.6f}")
    return EXIT_OK


def _cmd_overlay(args: argparse.Namespace) -> int:
    if not Path(args.image).is_file():
        raise ConfigError(f"image not found: {args.image}")
    try:
        boxes = [BoundingBox.from_list([float(v) for v in b.split(",")], args.box_format) for b in args.box]
    except ValueError as exc:
        raise ConfigError(f"bad --box: {exc}") from exc
    image = load_image(args.image)
    if len(boxes) == 1 and not args.indexed:
        out = render_single_box(image, boxes[0])
    else:
        out = render_indexed_boxes(image, boxes)
    save_png(out, args.out)
    return EXIT_OK


def _cmd_convert(args: argparse.Namespace) -> int:
    try:
        refs = json.loads(Path(args.refs).read_text())
        instances = json.loads(Path(args.instances).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read annotations: {exc}") from exc
    with open(args.out, "w", encoding="utf-8") as fh:
        n = refcoco_to_jsonl(refs, instances, fh, args.split, args.image_dir)
    print(f"wrote {n} items to {args.out}")
    return EXIT_OK


COMMANDS = {
    "run": _cmd_run,
    "eval": _cmd_eval,
    "simulate": _cmd_simulate,
    "analyze": _cmd_analyze,
    "overlay": _cmd_overlay,
    "convert": _cmd_convert,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except BackendError as exc:
        print(f"refverify: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (RefVerifyError, ValueError) as exc:
        print(f"refverify: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
