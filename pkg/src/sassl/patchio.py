"""Disk format for patch datasets.

A dataset directory holds one subdirectory per split (train/test), each
with binary PPM images, PGM masks, and an index.csv tying files to
slide/class labels. Plain netpbm keeps the format inspectable with
standard image viewers and trivially diffable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .synth import Patch

INDEX_FIELDS = ["path", "slide_id", "class_id", "content_fraction", "mask_path"]


def write_ppm(path: Path, image: np.ndarray) -> None:
    """Write a [3,H,W] float image in (0,1] as binary 8-bit PPM."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"PPM writer expects [3,H,W], got {image.shape}")
    if image.min() <= 0.0 or image.max() > 1.0:
        raise DataError("PPM writer expects pixel values in (0,1]")
    H, W = image.shape[1], image.shape[2]
    raw = np.rint(image * 255.0).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        f.write(raw.tobytes())


def write_pgm(path: Path, mask: np.ndarray) -> None:
    """Write a binary [H,W] mask as 8-bit PGM (0 / 255)."""
    if mask.ndim != 2:
        raise DataError(f"PGM writer expects [H,W], got {mask.shape}")
    H, W = mask.shape
    raw = (np.asarray(mask, dtype=np.uint8) * 255)
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        f.write(raw.tobytes())


def _read_netpbm(path: Path, magic: bytes) -> tuple[np.ndarray, int, int]:
    data = path.read_bytes()
    if not data.startswith(magic):
        raise DataError(f"{path}: expected {magic.decode()} file")
    # header is magic, width, height, maxval as whitespace-separated tokens
    tokens: list[bytes] = []
    i = 2
    while len(tokens) < 3:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise DataError(f"{path}: truncated header")
        tokens.append(data[start:i])
    i += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DataError(f"{path}: malformed header") from None
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit files supported, maxval={maxval}")
    channels = 3 if magic == b"P6" else 1
    body = data[i:]
    expected = w * h * channels
    if len(body) != expected:
        raise DataError(f"{path}: expected {expected} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).copy(), w, h


def read_ppm(path: Path) -> np.ndarray:
    raw, w, h = _read_netpbm(path, b"P6")
    img = raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0
    return img


def read_pgm(path: Path) -> np.ndarray:
    raw, w, h = _read_netpbm(path, b"P5")
    mask = raw.reshape(h, w)
    if not np.all((mask == 0) | (mask == 255)):
        raise DataError(f"{path}: mask must be binary 0/255")
    return (mask // 255).astype(np.uint8)


@dataclass
class PatchSet:
    """A loaded split: aligned arrays over all patches."""
    images: np.ndarray        # [M,3,S,S] float64
    masks: np.ndarray         # [M,S,S] uint8
    slide_ids: np.ndarray     # [M] int64
    class_ids: np.ndarray     # [M] int64

    def __len__(self) -> int:
        return len(self.images)

    def content_fractions(self) -> np.ndarray:
        return self.masks.reshape(len(self), -1).mean(axis=1)


def write_split(split_dir: Path, patches: list[Patch]) -> None:
    split_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, p in enumerate(patches):
        img_name = f"patch_{i:04d}.ppm"
        mask_name = f"patch_{i:04d}.pgm"
        write_ppm(split_dir / img_name, p.image)
        write_pgm(split_dir / mask_name, p.mask)
        rows.append({
            "path": img_name,
            "slide_id": p.slide_id,
            "class_id": p.class_id,
            "content_fraction": f"{p.content_fraction():.6f}",
            "mask_path": mask_name,
        })
    with open(split_dir / "index.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=INDEX_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def load_split(split_dir: Path) -> PatchSet:
    """Load every patch named by a split's index.csv.

    The index may reference images anywhere (paths resolve relative to
    the split directory), and mask_path may be left empty for datasets
    without segmentation ground truth; those rows get an all-zero mask.
    """
    index = split_dir / "index.csv"
    if not index.is_file():
        raise DataError(f"no index.csv in {split_dir}")
    with open(index, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not set(INDEX_FIELDS) <= set(reader.fieldnames):
            raise DataError(f"{index}: missing columns, need {INDEX_FIELDS}")
        rows = list(reader)
    if not rows:
        raise DataError(f"{index}: empty split")
    images, masks, slide_ids, class_ids = [], [], [], []
    shape = None
    for n, row in enumerate(rows, start=2):
        if None in row or any(v is None for v in row.values()):
            raise DataError(f"{index} line {n}: wrong number of fields")
        img_path = split_dir / row["path"]
        if not img_path.is_file():
            raise DataError(f"{index} line {n}: missing patch file {img_path}")
        img = read_ppm(img_path)
        if row["mask_path"]:
            mask_path = split_dir / row["mask_path"]
            if not mask_path.is_file():
                raise DataError(f"{index} line {n}: missing mask file {mask_path}")
            mask = read_pgm(mask_path)
        else:
            mask = np.zeros(img.shape[1:], dtype=np.uint8)
        if shape is None:
            shape = img.shape
        if img.shape != shape or mask.shape != shape[1:]:
            raise DataError(f"{row['path']}: inconsistent patch shape")
        try:
            slide_ids.append(int(row["slide_id"]))
            class_ids.append(int(row["class_id"]))
            fraction = float(row["content_fraction"])
        except ValueError:
            raise DataError(f"{index} line {n}: malformed label fields") from None
        if not 0.0 <= fraction <= 1.0:
            raise DataError(f"{index} line {n}: content_fraction {fraction} out of [0,1]")
        images.append(img)
        masks.append(mask)
    return PatchSet(images=np.stack(images), masks=np.stack(masks),
                    slide_ids=np.array(slide_ids, dtype=np.int64),
                    class_ids=np.array(class_ids, dtype=np.int64))
