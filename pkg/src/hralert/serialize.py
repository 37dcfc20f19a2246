"""Checkpoint format: ``params.bin`` + ``manifest.txt`` + ``meta.json``.

``params.bin`` is every parameter flattened (C order) as little-endian float64,
concatenated.  Each manifest line is ``name<TAB>shape<TAB>offset`` where shape
is comma-separated and offset counts float64 elements.
"""

import hashlib
import json
from pathlib import Path

import numpy as np

PARAMS_FILE = "params.bin"
MANIFEST_FILE = "manifest.txt"
META_FILE = "meta.json"


def save_params(directory, named_arrays, meta=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    chunks = []
    offset = 0
    for name, array in named_arrays.items():
        if "\t" in name or "\n" in name:
            raise ValueError(f"parameter name {name!r} contains a separator")
        array = np.asarray(array, dtype="<f8")
        lines.append(f"{name}\t{','.join(str(n) for n in array.shape)}\t{offset}\n")
        chunks.append(array.ravel())
        offset += array.size
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    (directory / PARAMS_FILE).write_bytes(flat.astype("<f8").tobytes())
    (directory / MANIFEST_FILE).write_text("".join(lines))
    if meta is not None:
        (directory / META_FILE).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_params(directory):
    """Return ``(named_arrays, meta)``; meta is ``None`` if absent."""
    directory = Path(directory)
    flat = np.frombuffer((directory / PARAMS_FILE).read_bytes(), dtype="<f8")
    out = {}
    for lineno, line in enumerate((directory / MANIFEST_FILE).read_text().splitlines(), 1):
        name, shape_text, offset_text = line.split("\t")
        shape = tuple(int(s) for s in shape_text.split(",")) if shape_text else ()
        offset = int(offset_text)
        size = int(np.prod(shape)) if shape else 1
        if offset + size > flat.size:
            raise ValueError(f"{MANIFEST_FILE}:{lineno}: {name} overruns {PARAMS_FILE}")
        out[name] = flat[offset:offset + size].astype(np.float64).reshape(shape)
    meta_path = directory / META_FILE
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else None
    return out, meta


def sha256_text(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
