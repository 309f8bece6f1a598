"""Shared argument handling for the experiment scripts."""

import argparse
import logging
import sys
from pathlib import Path

from divnorm.config import load_config, manifest_text


def parse(description: str):
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--config", help="flat key = value config file")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", help="write the CSV here (default: stdout)")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    overrides = dict(item.split("=", 1) for item in args.set)
    cfg = load_config(args.config, overrides).resolved()
    cfg.validate()
    return cfg, args


def emit(text: str, out, cfg, name: str) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    path.with_suffix(".manifest").write_text(manifest_text(cfg, name))
