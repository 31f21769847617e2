from __future__ import annotations

import os
import sys
from datetime import datetime


def env_flag(name: str, default: bool = False) -> bool:
    raw = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() in ("1", "true", "yes", "on")


def log(verbose: bool, msg: str) -> None:
    if verbose:
        ts = datetime.now().isoformat(timespec="seconds")
        print(f"[{ts}] {msg}")


def say(quiet: bool, msg: str) -> None:
    if not quiet:
        print(msg)


def fail(msg: str) -> None:
    print(f"❌ {msg}", file=sys.stderr)
