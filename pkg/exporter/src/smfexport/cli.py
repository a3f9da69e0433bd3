"""Command line front end: smf-export --checkpoint m.pt --arch a.json --out dir/."""

import argparse
import json
import sys
from pathlib import Path

from .core import ExportError, ExportPlan, export


def build_parser():
    p = argparse.ArgumentParser(
        prog="smf-export",
        description="Convert a trained dense/conv checkpoint into an SMF "
                    "model directory.")
    p.add_argument("--checkpoint", required=True, type=Path,
                   help="source weights: torch state_dict (.pt/.pth) or .npz")
    p.add_argument("--arch", required=True, type=Path,
                   help="architecture JSON; same schema as an SMF manifest")
    p.add_argument("--out", required=True, type=Path,
                   help="SMF directory to create")
    p.add_argument("--map", action="append", default=[], metavar="NAME=SLOT",
                   help="map checkpoint tensor NAME to parameter SLOT "
                        "(e.g. fc1.weight=0.weight); repeatable; omit to "
                        "map by name identity")
    p.add_argument("--golden", type=Path, default=None,
                   help=".npz with `inputs`/`outputs` recorded from the "
                        "source model; export fails if predictions drift")
    p.add_argument("--skip-check", action="store_true",
                   help="skip the rebuilt-source self-check")
    return p


def parse_mapping(pairs):
    mapping = []
    for item in pairs:
        name, sep, slot = item.partition("=")
        if not sep or not name or not slot:
            raise ExportError(f"--map needs NAME=SLOT, got {item!r}")
        mapping.append((name, slot))
    return mapping


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        plan = ExportPlan(checkpoint=args.checkpoint, arch=args.arch,
                          out_dir=args.out, mapping=parse_mapping(args.map),
                          golden=args.golden, skip_check=args.skip_check)
        out = export(plan)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    manifest = json.loads((Path(out) / "manifest.json").read_text())
    print(f"wrote {out} (sha256 {manifest['sha256']})")
    return 0


def entry():
    sys.exit(main())
