"""Command-line wrapper: ``model-export model ...`` and ``model-export labels ...``."""

from __future__ import annotations

import argparse
import logging
import sys

from .export import ExportError, ExportSpec, Target, export_model
from .labels import LabelConversionError, convert_labels

logger = logging.getLogger(__name__)


def _model_command(args: argparse.Namespace) -> int:
    spec = ExportSpec(
        checkpoint_path=args.checkpoint,
        target=Target(args.target),
        output_path=args.out,
        input_size=args.input_size,
        scale=args.scale,
        smoke_size=args.smoke_size,
    )
    try:
        report = export_model(spec)
    except ExportError as exc:
        print(f"export failed: {exc}", file=sys.stderr)
        return 2
    print(
        f"exported {report.output_path}: input {report.input_shape} -> "
        f"output {report.output_shape}, max abs deviation {report.max_abs_deviation:.3e}",
        file=sys.stderr,
    )
    if not report.passed:
        print("parity check FAILED; model file removed", file=sys.stderr)
        return 1
    return 0


def _labels_command(args: argparse.Namespace) -> int:
    try:
        result = convert_labels(args.annotations, args.images_root, args.out)
    except LabelConversionError as exc:
        print(f"conversion failed: {exc}", file=sys.stderr)
        return 2
    print(
        f"wrote {result.label_count} box(es) over {result.image_count} image(s) "
        f"to {result.manifest_path} ({result.clamped_boxes} clamped)",
        file=sys.stderr,
    )
    for rel, reason in result.skipped:
        print(f"skipped {rel}: {reason}", file=sys.stderr)
    return 1 if result.skipped else 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    parser = argparse.ArgumentParser(prog="model-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    model = sub.add_parser("model", help="export a checkpoint to a TorchScript model file")
    model.add_argument("--checkpoint", required=True)
    model.add_argument("--target", choices=[t.value for t in Target], required=True)
    model.add_argument("--out", required=True)
    model.add_argument("--input-size", type=int, default=640,
                       help="detector input side (square)")
    model.add_argument("--scale", type=int, default=4, help="upscaler factor")
    model.add_argument("--smoke-size", type=int, default=64,
                       help="upscaler smoke-test input side")
    model.set_defaults(func=_model_command)

    labels = sub.add_parser("labels", help="convert an annotation export to labels + manifest")
    labels.add_argument("--annotations", required=True)
    labels.add_argument("--images-root", required=True)
    labels.add_argument("--out", required=True)
    labels.set_defaults(func=_labels_command)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
