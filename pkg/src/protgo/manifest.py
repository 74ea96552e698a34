"""Run manifests: every CLI command records its config, seed, input file
digests, and outputs, written atomically at run end."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from pathlib import Path

ARTIFACT_VERSION = "0.1.0"


class ManifestError(ValueError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, config: dict, seed, inputs, outputs,
                   started: float, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifact_version": ARTIFACT_VERSION,
        "threads": os.environ.get("PROTGO_THREADS"),
        "input_digests": {str(p): sha256_file(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "started": started,
        "finished": time.time(),
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".manifest", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def verify_manifest(manifest_path) -> list:
    """Re-hash the recorded inputs; return a list of drift descriptions."""
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    problems = []
    for path, digest in manifest.get("input_digests", {}).items():
        if not os.path.exists(path):
            problems.append(f"missing input: {path}")
        elif sha256_file(path) != digest:
            problems.append(f"digest drift: {path}")
    return problems
