"""Run manifests: every CLI invocation records enough to replay itself."""
from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

TOOL_VERSION = "0.1.0"


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_inputs(paths) -> dict[str, str]:
    """Content hashes for input files; directories are hashed file-by-file."""
    digests: dict[str, str] = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file():
                    digests[str(f)] = file_digest(f)
        elif p.is_file():
            digests[str(p)] = file_digest(p)
    return digests


class RunManifest:
    def __init__(self, command: str, config_snapshot: dict, seed: int,
                 input_paths=()):
        self.command = command
        self.config_snapshot = config_snapshot
        self.seed = seed
        self.input_digests = digest_inputs(input_paths)
        self.output_paths: list[str] = []
        self._start = time.time()

    def add_output(self, path) -> None:
        self.output_paths.append(str(path))

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({
            "command": self.command,
            "config_snapshot": self.config_snapshot,
            "seed": self.seed,
            "input_digests": self.input_digests,
            "output_paths": self.output_paths,
            "tool_version": TOOL_VERSION,
            "wall_time": time.time() - self._start,
        }, indent=2, sort_keys=True))
