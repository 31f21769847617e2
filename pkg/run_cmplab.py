#!/usr/bin/env python3
"""
Entry script for the cmplab command line.

Usage:
  python run_cmplab.py gen --task cls --seed 7 --n 2000 --out data/
  python run_cmplab.py train --config cfg.json --data data/cls-seed7-n2000.jsonl --out runs/cls-cmp
"""

import sys
from pathlib import Path

app_dir = Path(__file__).parent / "app"
sys.path.insert(0, str(app_dir))

from cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
