"""Versioned JSON parameter containers shared by the HGM and CNN models.

Floats are serialized at full repr precision, so a save/load round trip is
bit-exact. Files are written atomically (temp file + rename).
"""

from __future__ import annotations

import json
import os
from pathlib import Path

FORMAT = "hgm-ehr-checkpoint"
VERSION = 1


def write_json_atomic(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def save_container(path, kind: str, payload: dict) -> None:
    obj = {"format": FORMAT, "version": VERSION, "kind": kind}
    obj.update(payload)
    write_json_atomic(path, obj)


def load_container(path, kind: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    obj = json.loads(path.read_text(encoding="utf-8"))
    if obj.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} file")
    if obj.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {obj.get('version')}")
    if obj.get("kind") != kind:
        raise ValueError(f"{path}: expected kind {kind!r}, found {obj.get('kind')!r}")
    return obj
