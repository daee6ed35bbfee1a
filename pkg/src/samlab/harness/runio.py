"""Deterministic artifact emission: CSV, JSON, and run manifests.

Reproducibility contract: identical config + seed must produce byte-identical
files.  Floats are rendered with 17 significant digits ('.'-decimal), line
endings are LF on every platform, JSON keys are sorted, and nothing derived
from wall-clock time or absolute paths is ever written.  Volatile quantities
(per-check runtimes) go into a separate sidecar that is excluded from
byte-identity comparisons.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence


def format_cell(value) -> str:
    """Render one CSV cell: floats at 17 significant digits, ints plain."""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (int,)):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return "%.17g" % value
    return str(value)


def write_csv(path: Path, header: Sequence[str],
              rows: Iterable[Sequence]) -> Path:
    """Write a CSV with a fixed header order and LF line endings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([format_cell(c) for c in row])
    return path


def _sanitize(obj):
    """Make a payload JSON-safe and deterministic (non-finite floats become
    strings; numpy scalars become Python scalars)."""
    if isinstance(obj, Mapping):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        obj = obj.item()
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
    return obj


def json_bytes(payload) -> bytes:
    """Canonical JSON encoding: sorted keys, two-space indent, LF."""
    text = json.dumps(_sanitize(payload), sort_keys=True, indent=2,
                      allow_nan=False)
    return (text + "\n").encode("utf-8")


def write_json(path: Path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json_bytes(payload))
    return path


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def write_manifest(out_dir: Path, tag: str, seeds: Sequence[int],
                   config_digest: str, artifacts: Sequence[Path],
                   version: str) -> Path:
    """Record what a run produced: config hash, seeds, artifact digests."""
    out_dir = Path(out_dir)
    payload = {
        "tag": tag,
        "seeds": list(seeds),
        "config_sha256": config_digest,
        "version": version,
        "artifacts": {
            Path(p).name: sha256_file(p) for p in sorted(artifacts)
        },
    }
    return write_json(out_dir / "manifest.json", payload)
