"""Command-line entry point: ``yolo-slim <command> ...``.

Exit codes: 0 success, 1 usage or I/O error, 2 dataset without objects.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import archgraph, costmodel, interp, labelset, prune
from .archgraph import VARIANTS, TensorShape

log = logging.getLogger("yolo_slim")

EXIT_OK, EXIT_USAGE, EXIT_EMPTY = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _variant(value: str) -> str:
    v = value.lower().removeprefix("yolov11-")
    if v not in VARIANTS:
        raise argparse.ArgumentTypeError(f"unknown variant {value!r}; choose from {', '.join(VARIANTS)}")
    return v


def _resolution(value: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {value!r}") from None
    if n < 32 or n % 32:
        raise argparse.ArgumentTypeError(f"input resolution must be a positive multiple of 32, got {n}")
    return n


def _theta(value: str) -> float:
    t = float(value)
    if not 0 < t <= 1:
        raise argparse.ArgumentTypeError("theta must be in (0, 1]")
    return t


def _policy(args) -> labelset.ImageSizePolicy:
    if getattr(args, "images", None):
        return labelset.SidecarImages(Path(args.images))
    if args.img_w or args.img_h:
        if not (args.img_w and args.img_h):
            raise UsageError("--img-w and --img-h must be given together")
        return labelset.FixedSize(args.img_w, args.img_h)
    return labelset.FixedSize(args.img_size, args.img_size)


def _profile(args) -> labelset.DatasetProfile:
    labels = args.labels
    if labels is None and getattr(args, "interactive", False):
        labels = input("training label directory: ").strip()
    if not labels:
        raise UsageError("--labels is required")
    return labelset.profile_directory(labels, _policy(args), strict=args.strict, workers=args.workers)


def _emit(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _graph(args) -> archgraph.ArchGraph:
    if getattr(args, "graph_file", None):
        return archgraph.from_json(Path(args.graph_file).read_text(encoding="utf-8"))
    base = archgraph.build_yolov11n(args.num_classes)
    return prune.prune(base, getattr(args, "variant", "full") or "full")


# ---------------------------------------------------------------------------
# commands


def cmd_profile(args) -> int:
    p = _profile(args)
    _emit(p.to_json(theta=args.theta))
    if p.empty:
        print(f"no objects found in {args.labels}", file=sys.stderr)
        return EXIT_EMPTY
    return EXIT_OK


def cmd_recommend(args) -> int:
    p = _profile(args)
    if p.empty:
        print(f"no objects found in {args.labels}", file=sys.stderr)
        return EXIT_EMPTY
    _emit(labelset.recommend_variant(p, args.theta).value)
    return EXIT_OK


def _graph_output(g, fmt: str, input_res: int, extra: dict | None = None) -> str:
    shape = TensorShape(3, input_res, input_res)
    if fmt == "dot":
        return archgraph.to_dot(g, shape)
    d = archgraph.to_dict(g, archgraph.propagate_shapes(g, shape))
    if extra:
        d.update(extra)
    return json.dumps(d, indent=2)


def cmd_build(args) -> int:
    g = archgraph.build_yolov11n(args.num_classes)
    _emit(_graph_output(g, args.format, args.input))
    return EXIT_OK


def cmd_prune(args) -> int:
    base = archgraph.build_yolov11n(args.num_classes)
    g, spec = prune.plan(base, args.variant, repair=not args.no_repair)
    rep = archgraph.validate(g)
    if not rep.valid:
        print(f"warning: {args.variant} graph does not validate:\n{rep}", file=sys.stderr)
        if args.format == "dot":
            _emit(archgraph.to_dot(g, None))
        else:
            _emit(json.dumps({**archgraph.to_dict(g), "prune_spec": spec.to_dict()}, indent=2))
        return EXIT_OK
    _emit(_graph_output(g, args.format, args.input, {"prune_spec": spec.to_dict()}))
    return EXIT_OK


def cmd_analyze(args) -> int:
    g = _graph(args)
    r = costmodel.cost_graph(g, TensorShape(3, args.input, args.input), args.bytes_per_param, args.overhead_bytes)
    if args.format == "table":
        _emit(costmodel.format_table(r, [r]))
    else:
        _emit(r.to_json())
    return EXIT_OK


def _summary(r: costmodel.CostReport) -> dict:
    d = r.to_dict()
    del d["per_node"]
    return d


def cmd_compare(args) -> int:
    names = [_variant(v.strip()) for v in args.variants.split(",") if v.strip()]
    base = archgraph.build_yolov11n(args.num_classes)
    shape = TensorShape(3, args.input, args.input)
    baseline = costmodel.cost_graph(base, shape, args.bytes_per_param, args.overhead_bytes)
    reports = [
        costmodel.cost_graph(prune.prune(base, v), shape, args.bytes_per_param, args.overhead_bytes) for v in names
    ]
    if args.format == "json":
        _emit(
            json.dumps(
                {
                    "schema_version": archgraph.SCHEMA_VERSION,
                    "baseline": _summary(baseline),
                    "variants": [{**_summary(r), **costmodel.compare(baseline, r).to_dict()} for r in reports],
                },
                indent=2,
            )
        )
    else:
        _emit(costmodel.format_table(baseline, reports))
    return EXIT_OK


def cmd_run(args) -> int:
    g = _graph(args)
    w = interp.instantiate(g, args.seed)
    x = interp.random_input(args.input, seed=args.seed)
    out = interp.forward(g, w, x)
    result = {
        "schema_version": archgraph.SCHEMA_VERSION,
        "variant": g.variant,
        "input": [3, args.input, args.input],
        "seed": args.seed,
        "heads": {k: list(v.shape) for k, v in out.items()},
        "checksum": interp.checksum(out),
    }
    if args.format == "json":
        _emit(json.dumps(result, indent=2))
    else:
        for k, v in out.items():
            _emit(f"{k}: {v.shape[0]}x{v.shape[1]}x{v.shape[2]}")
        _emit(f"checksum: {result['checksum']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> Parser:
    p = Parser(prog="yolo-slim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def labels_opts(sp):
        sp.add_argument("--labels", help="directory of YOLO *.txt label files")
        sp.add_argument("--img-size", type=int, default=640, help="square image size for denormalization")
        sp.add_argument("--img-w", type=int)
        sp.add_argument("--img-h", type=int)
        sp.add_argument("--images", help="read true sizes from images with matching stems")
        sp.add_argument("--theta", type=_theta, default=labelset.DEFAULT_THETA)
        sp.add_argument("--strict", action="store_true", help="fail on the first malformed line")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--interactive", action="store_true", help="prompt for the label directory")

    def graph_opts(sp, variant=True, fmt=("json", "dot"), default_fmt="json"):
        if variant:
            sp.add_argument("--variant", type=_variant, default="full")
        sp.add_argument("--num-classes", type=int, default=80)
        sp.add_argument("--input", type=_resolution, default=640)
        sp.add_argument("--format", choices=fmt, default=default_fmt)

    def cost_opts(sp):
        sp.add_argument("--bytes-per-param", type=int, default=costmodel.DEFAULT_BYTES_PER_PARAM)
        sp.add_argument("--overhead-bytes", type=int, default=0)

    sp = sub.add_parser("profile", help="count small/medium/large objects")
    labels_opts(sp)
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("recommend", help="print the variant suited to a dataset")
    labels_opts(sp)
    sp.set_defaults(func=cmd_recommend)

    sp = sub.add_parser("build", help="export the unpruned graph")
    graph_opts(sp, variant=False)
    sp.set_defaults(func=cmd_build)

    sp = sub.add_parser("prune", help="export a pruned variant")
    graph_opts(sp)
    sp.add_argument("--no-repair", action="store_true", help="skip shape repair (sl only)")
    sp.set_defaults(func=cmd_prune)

    sp = sub.add_parser("analyze", help="parameters, FLOPs and size of one graph")
    graph_opts(sp, fmt=("json", "table"))
    sp.add_argument("--graph-file", help="graph JSON from build/prune")
    cost_opts(sp)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("compare", help="cost table of variants against full")
    graph_opts(sp, variant=False, fmt=("table", "json"), default_fmt="table")
    sp.add_argument("--variants", default=",".join(VARIANTS))
    cost_opts(sp)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("run", help="forward pass with seeded random weights")
    graph_opts(sp, fmt=("text", "json"), default_fmt="text")
    sp.add_argument("--graph-file", help="graph JSON from build/prune")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_run)
    return p


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("YOLO_SLIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, labelset.LabelError, archgraph.GraphError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
