"""Run manifests: every CLI invocation records what it read, wrote, and resolved.

A manifest pins the subcommand, the fully resolved parameters (seeds
included), SHA-256 hashes of all input and output files, the toolkit
version, and wall time. Identical inputs and seeds reproduce identical
keep-sets and reports, so the manifest is sufficient to re-run and verify
any artifact's lineage.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


class ManifestWriter:
    def __init__(self, subcommand: str, params: dict):
        from . import __version__

        self.started = time.monotonic()
        self.data = {
            "subcommand": subcommand,
            "toolkit_version": __version__,
            "params": params,
            "inputs": {},
            "outputs": {},
        }

    def add_input(self, *paths: str | Path) -> None:
        for p in paths:
            if p is not None:
                self.data["inputs"][str(p)] = sha256_file(p)

    def add_output(self, *paths: str | Path) -> None:
        for p in paths:
            if p is not None:
                self.data["outputs"][str(p)] = sha256_file(p)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        self.data["wall_time_s"] = round(time.monotonic() - self.started, 6)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path
