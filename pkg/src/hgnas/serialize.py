"""JSON header + flat binary blob files for named float64 arrays.

Layout: ``<stem>.json`` holds the caller's header plus a ``tensors`` table of
``{name, shape, offset, count}`` entries, offsets counted in float64 elements
from the start of ``<stem>.bin`` (little-endian, row-major).
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np


def save_arrays(stem, header: Mapping, arrays: Mapping[str, np.ndarray]) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    table = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        table.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes(order="C"))
        offset += a.size
    meta = dict(header)
    meta["dtype"] = "<f8"
    meta["blob"] = stem.name + ".bin"
    meta["tensors"] = table
    json_path = stem.with_name(stem.name + ".json")
    bin_path = stem.with_name(stem.name + ".bin")
    bin_path.write_bytes(b"".join(chunks))
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return json_path, bin_path


def load_arrays(stem) -> tuple[dict, dict[str, np.ndarray]]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    meta = json.loads(stem.with_name(stem.name + ".json").read_text())
    raw = np.frombuffer(stem.with_name(meta["blob"]).read_bytes(), dtype="<f8")
    arrays = {}
    for t in meta["tensors"]:
        lo, n = t["offset"], t["count"]
        if lo + n > raw.size:
            raise ValueError(f"tensor {t['name']!r} runs past the end of the blob")
        arrays[t["name"]] = raw[lo : lo + n].reshape(t["shape"]).astype(np.float64)
    return meta, arrays
