"""Manifest files and the flat binary feature cache.

Feature cache layout (little-endian)::

    magic        8 bytes  b"SSWINFC\\0"
    version      u32
    config hash  32 bytes (SHA-256 of the DSP settings)
    count        u32 segments
    f, d         u32, u32
    names_len    u32, then UTF-8 JSON {"labels": [...], "speakers": [...]}
    count x segment records:
        clip_len u16, clip id (UTF-8)
        label    u32
        speaker  u32
        f * d float32, row-major (frequency major)
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from .training import LabeledDataset

CACHE_MAGIC = b"SSWINFC\0"
CACHE_VERSION = 1
MANIFEST_FIELDS = ("path", "label", "speaker", "clip_id")


class DataError(ValueError):
    """Bad input data: unreadable files, malformed caches, hash mismatches."""


@dataclass
class ManifestRow:
    path: Path
    label: str
    speaker: str
    clip_id: str


@dataclass
class Manifest:
    rows: List[ManifestRow]
    label_map: Dict[str, int] = field(default_factory=dict)

    @property
    def speakers(self) -> List[str]:
        return sorted({r.speaker for r in self.rows})


def write_manifest(path, rows: List[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in MANIFEST_FIELDS})


def read_manifest(path, check_paths: bool = True) -> Manifest:
    """Read a CSV manifest; relative wav paths resolve against its directory."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: manifest header lacks {sorted(missing)}")
        rows = []
        for rec in reader:
            wav = Path(rec["path"])
            if not wav.is_absolute():
                wav = path.parent / wav
            if check_paths and not wav.exists():
                raise DataError(f"{path}: listed file {wav} does not exist")
            rows.append(ManifestRow(wav, rec["label"], rec["speaker"], rec["clip_id"]))
    labels = sorted({r.label for r in rows})
    return Manifest(rows, {name: i for i, name in enumerate(labels)})


def cache_dumps(ds: LabeledDataset, config_hash: bytes) -> bytes:
    if len(config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    n, c, f, d = ds.features.shape if len(ds) else (0, 1, 0, 0)
    names = json.dumps({"labels": ds.label_names, "speakers": ds.speaker_names}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CACHE_MAGIC)
    buf.write(struct.pack("<I", CACHE_VERSION))
    buf.write(config_hash)
    buf.write(struct.pack("<III", n, f, d))
    buf.write(struct.pack("<I", len(names)))
    buf.write(names)
    for i in range(n):
        cid = ds.clip_ids[i].encode()
        buf.write(struct.pack("<H", len(cid)))
        buf.write(cid)
        buf.write(struct.pack("<II", int(ds.labels[i]), int(ds.speakers[i])))
        buf.write(np.ascontiguousarray(ds.features[i, 0], dtype="<f4").tobytes())
    return buf.getvalue()


def cache_loads(blob: bytes, expected_hash: bytes | None = None):
    """Parse a cache; returns ``(dataset, config_hash)``."""
    pos = 0

    def take(size: int) -> bytes:
        nonlocal pos
        if pos + size > len(blob):
            raise DataError("feature cache is truncated")
        out = blob[pos : pos + size]
        pos += size
        return out

    if take(8) != CACHE_MAGIC:
        raise DataError("not a feature cache (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CACHE_VERSION:
        raise DataError(f"unsupported cache version {version}")
    config_hash = take(32)
    if expected_hash is not None and config_hash != expected_hash:
        raise DataError("feature cache was built with different DSP settings (config hash mismatch)")
    n, f, d = struct.unpack("<III", take(12))
    (names_len,) = struct.unpack("<I", take(4))
    names = json.loads(take(names_len).decode())
    feats = np.zeros((n, 1, f, d), dtype=np.float32)
    labels = np.zeros(n, dtype=np.int64)
    speakers = np.zeros(n, dtype=np.int64)
    clip_ids = []
    for i in range(n):
        (clen,) = struct.unpack("<H", take(2))
        clip_ids.append(take(clen).decode())
        labels[i], speakers[i] = struct.unpack("<II", take(8))
        feats[i, 0] = np.frombuffer(take(4 * f * d), dtype="<f4").reshape(f, d)
    if pos != len(blob):
        raise DataError("trailing bytes in feature cache")
    k = max(len(names["labels"]), int(labels.max()) + 1 if n else 0)
    ds = LabeledDataset(feats, labels, speakers, clip_ids, k, names["labels"], names["speakers"])
    return ds, config_hash


def write_cache(path, ds: LabeledDataset, config_hash: bytes) -> None:
    Path(path).write_bytes(cache_dumps(ds, config_hash))


def read_cache(path, expected_hash: bytes | None = None):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read cache {path}: {exc}") from exc
    return cache_loads(blob, expected_hash)
