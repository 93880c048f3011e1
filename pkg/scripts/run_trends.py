#!/usr/bin/env python3
"""Reproduce the performance-trend figures at desk scale.

Emits four CSVs (TTFB vs size with/without the oblivious path, completion
vs size, TTFB/completion under injected client-to-exit latency, and the
per-operation overhead breakdown) from deterministic virtual-clock runs.

    python scripts/run_trends.py --out figures/ --seed 7
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from ocdn.cli import _sim_plotdata  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="figures")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    return _sim_plotdata(args)


if __name__ == "__main__":
    sys.exit(main())
