"""Command-line surface: hpexport export --images DIR --backbone NAME --out DIR."""

from __future__ import annotations

import argparse
import logging
import sys

from .export import ExportJob, export
from .vit import BACKBONES


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="hpexport", description="Frozen ViT patch-feature exporter (HPFS shards)")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="export a directory of images to HPFS shards")
    p.add_argument("--images", required=True, help="directory of input images")
    p.add_argument("--backbone", required=True, choices=sorted(BACKBONES))
    p.add_argument("--out", required=True, help="output directory for *.hpfs shards")
    p.add_argument("--labels", help="directory of per-image label maps (<image stem>.png, 255 = unlabeled)")
    p.add_argument("--seed", type=int, default=0, help="augmentation (and fallback init) seed")
    p.add_argument("--weights", help=".npz weights file; omit for seeded random stand-in weights")
    return parser


def cli(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        job = ExportJob(
            image_dir=args.images,
            backbone=args.backbone,
            out_dir=args.out,
            label_dir=args.labels,
            weights_path=args.weights,
            seed=args.seed,
        )
        written = export(job)
        print(f"wrote {len(written)} shards to {args.out}")
        return 0
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
