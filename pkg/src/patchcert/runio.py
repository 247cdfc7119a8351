"""Run artifacts: atomic file writes, CSV emission, and the per-run manifest."""

from __future__ import annotations

import csv
import io
import json
import os
import time
from typing import Dict, Iterable, Optional, Sequence

from . import __version__

MANIFEST_VERSION = 1
CSV_SCHEMA_VERSION = 1


def atomic_write_text(path, text: str) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())


def write_manifest(out_dir, subcommand: str, config: Dict, seed: int) -> None:
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "version": __version__,
        "subcommand": subcommand,
        "seed": seed,
        "config": config,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    atomic_write_text(os.path.join(out_dir, "manifest.json"),
                      json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def worker_count(requested: Optional[int] = None) -> int:
    """Parallelism cap: min(requested, PATCHCERT_THREADS, cpu count)."""
    cap = os.cpu_count() or 1
    env = os.environ.get("PATCHCERT_THREADS")
    if env:
        try:
            cap = min(cap, max(1, int(env)))
        except ValueError:
            raise ValueError(f"PATCHCERT_THREADS must be an integer, got {env!r}")
    if requested is not None:
        cap = min(cap, max(1, requested))
    return cap
