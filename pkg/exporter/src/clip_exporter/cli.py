"""Command-line entry: embed an image directory and a prompt list into one file.

    clip-export export --model <id-or-path> --images <dir> --prompts <file> --out <path>

``--prompts`` is a JSON object of prompt name -> prompt text.  Exit codes:
0 ok, 2 configuration error, 3 model/image I/O error.
"""

from __future__ import annotations

import argparse
import sys

from .export import ConfigError, ExportError, ExportJob, run_export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clip-export",
                                     description="export patch-grid and prompt "
                                                 "embeddings to a TMEB file")
    subs = parser.add_subparsers(dest="command", required=True)
    p = subs.add_parser("export", help="embed images and prompts with one model")
    p.add_argument("--model", required=True, help="model id or local checkpoint path")
    p.add_argument("--images", required=True, help="directory of images to embed")
    p.add_argument("--prompts", required=True, help="JSON file of name -> prompt text")
    p.add_argument("--out", required=True, help="output embedding file")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse already printed its message
        return int(exc.code or 0)
    try:
        report = run_export(ExportJob(model_id=args.model, images_dir=args.images,
                                      prompts_path=args.prompts, out_path=args.out))
    except ConfigError as exc:
        return _fail(2, exc)
    except (ExportError, OSError) as exc:
        return _fail(3, exc)
    print(f"wrote {report['out']} ({report['images']} grids of "
          f"{report['grid'][0]}x{report['grid'][1]}x{report['d_c']}, "
          f"{report['prompts']} prompts); metadata in {report['sidecar']}")
    return 0


def _fail(code: int, exc: Exception) -> int:
    print(f"error: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
