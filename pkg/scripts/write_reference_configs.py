#!/usr/bin/env python3
"""Regenerate the shipped JSON files in configs/ from the named builders."""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from lego.config import REFERENCE_NAMES, reference_config


def main():
    out_dir = os.path.join(os.path.dirname(__file__), "..", "configs")
    os.makedirs(out_dir, exist_ok=True)
    for name in REFERENCE_NAMES:
        cfg = reference_config(name)
        path = os.path.join(out_dir, f"{name}.json")
        cfg.save(path)
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
