"""Token-export command line: `vpr-extract extract --images LIST --res 322 --out DIR`."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .extract import ExtractorConfig, extract_manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vpr-extract", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("extract", help="export token files plus an engine manifest")
    p.add_argument("--images", type=Path, required=True, help="image list JSON")
    p.add_argument("--res", type=int, default=322)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--dino-model", default="dinov2")
    p.add_argument("--clip-model", default="clip")
    p.add_argument("--device", default="cpu")
    p.add_argument("--name", default="extracted")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = ExtractorConfig(
        dino_model=args.dino_model,
        clip_model=args.clip_model,
        resolution=args.res,
        out_dir=args.out,
        device=args.device,
    )
    try:
        manifest_path = extract_manifest(args.images, config, manifest_name=args.name)
    except (ValueError, RuntimeError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"wrote {manifest_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
