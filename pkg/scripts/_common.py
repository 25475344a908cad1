"""Shared argument handling for the experiment scripts."""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from veronica import config as C

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def parser(description, default_config):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", default=str(CONFIGS / default_config))
    p.add_argument("--out", help="write the metrics as JSON here")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def setup(args):
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")
    return C.load_config(args.config)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items() if k != "params"}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def emit(metrics, out=None):
    text = json.dumps(_plain(metrics), indent=2)
    print(text)
    if out:
        Path(out).write_text(text + "\n")
