"""Data-file access with an environment override.

Files ship inside the package; MFSCREEN_DATA_DIR points the loaders at an
external directory instead (same file names), for swapping in site tables
without reinstalling.
"""

from __future__ import annotations

import os
from importlib import resources
from pathlib import Path

ENV_DATA_DIR = "MFSCREEN_DATA_DIR"


def read_data_bytes(name: str) -> bytes:
    override = os.environ.get(ENV_DATA_DIR)
    if override:
        candidate = Path(override) / name
        if candidate.exists():
            return candidate.read_bytes()
    return resources.files("mfscreen.data").joinpath(name).read_bytes()


def read_data_text(name: str) -> str:
    return read_data_bytes(name).decode()
