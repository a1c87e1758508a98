"""Checkpoint format: manifest.json plus a flat weights.bin.

The manifest carries array names, shapes, and byte offsets; weights.bin
is the concatenation of all arrays as little-endian IEEE-754 float64 in
manifest order. Nothing time- or host-dependent is written, so the same
model state always produces the same bytes, and a load followed by a
save is a byte-level no-op.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError

FORMAT_NAME = "sassl-checkpoint"
FORMAT_VERSION = 1

MANIFEST_FILE = "manifest.json"
WEIGHTS_FILE = "weights.bin"


def save_checkpoint(ckpt_dir: str | Path, arrays: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    """Write arrays (sorted by name) and metadata under ``ckpt_dir``."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset, "count": int(arr.size)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "dtype": "<f8",
        "total_bytes": offset,
        "arrays": entries,
        "meta": meta or {},
    }
    (ckpt_dir / WEIGHTS_FILE).write_bytes(b"".join(blobs))
    with open(ckpt_dir / MANIFEST_FILE, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(ckpt_dir: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back; returns (arrays, meta)."""
    ckpt_dir = Path(ckpt_dir)
    man_path = ckpt_dir / MANIFEST_FILE
    bin_path = ckpt_dir / WEIGHTS_FILE
    if not man_path.is_file() or not bin_path.is_file():
        raise DataError(f"no checkpoint at {ckpt_dir}")
    try:
        manifest = json.loads(man_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{man_path}: invalid JSON: {e}") from e
    if manifest.get("format") != FORMAT_NAME:
        raise DataError(f"{man_path}: not a {FORMAT_NAME} manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise DataError(f"{man_path}: unsupported version {manifest.get('version')}")
    raw = bin_path.read_bytes()
    if len(raw) != manifest.get("total_bytes"):
        raise DataError(f"{bin_path}: expected {manifest.get('total_bytes')} bytes, "
                        f"found {len(raw)}")
    arrays = {}
    for entry in manifest["arrays"]:
        name, shape = entry["name"], tuple(entry["shape"])
        count, offset = entry["count"], entry["offset"]
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise DataError(f"{bin_path}: array '{name}' extends past end of file")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        if int(np.prod(shape, dtype=np.int64)) != count:
            raise DataError(f"{man_path}: array '{name}' shape {shape} != count {count}")
        arrays[name] = arr.reshape(shape).copy()
    return arrays, manifest.get("meta", {})


def split_by_prefix(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """Sub-dict of arrays under ``prefix.``, with the prefix stripped."""
    head = prefix + "."
    out = {name[len(head):]: arr for name, arr in arrays.items() if name.startswith(head)}
    if not out:
        raise DataError(f"checkpoint has no arrays under '{prefix}.'")
    return out


def prefixed(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{name}": arr for name, arr in arrays.items()}
