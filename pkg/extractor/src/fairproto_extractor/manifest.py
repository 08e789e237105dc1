"""Writer (and the minimal reader needed for --append) for the fairproto
embedding manifest wire format.

Little-endian, no padding: magic "FPEM", version u16 (=1), dim_vit u32,
dim_resnet u32, backbone tag (u16 length + UTF-8), class count u32, then per
class name (u16 + UTF-8) and class_id u32 in ascending id order, record
count u64, then per record: id (u16 + UTF-8), class_id u32, three attribute
strings (u16 + UTF-8, length 0 = absent), split u8 (0=train, 1=val,
2=support, 3=query), and dim_vit+dim_resnet float32 values.

This module intentionally does not import the consumer package; the byte
format is the only contract between the two.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"FPEM"
VERSION = 1
SPLITS = {"train": 0, "val": 1, "support": 2, "query": 3}


@dataclass
class Record:
    id: str
    class_id: int
    split: int
    vector: np.ndarray  # float32
    attrs: tuple = (None, None, None)


@dataclass
class Manifest:
    dim_vit: int
    dim_resnet: int
    backbone_tag: str
    class_table: dict[int, str]
    records: list[Record] = field(default_factory=list)

    @property
    def dim_total(self) -> int:
        return self.dim_vit + self.dim_resnet


def _pack_str(s: str) -> bytes:
    data = (s or "").encode("utf-8")
    if len(data) > 0xFFFF:
        raise ValueError("string longer than 65535 UTF-8 bytes")
    return struct.pack("<H", len(data)) + data


def write_manifest(manifest: Manifest, path) -> int:
    for rec in manifest.records:
        if rec.vector.shape != (manifest.dim_total,):
            raise ValueError(f"record {rec.id!r}: vector shape {rec.vector.shape} "
                             f"!= ({manifest.dim_total},)")
        if not np.all(np.isfinite(rec.vector)):
            raise ValueError(f"record {rec.id!r}: non-finite feature values")
        if rec.class_id not in manifest.class_table:
            raise ValueError(f"record {rec.id!r}: class id {rec.class_id} not in table")
    chunks = [MAGIC, struct.pack("<H", VERSION),
              struct.pack("<II", manifest.dim_vit, manifest.dim_resnet),
              _pack_str(manifest.backbone_tag),
              struct.pack("<I", len(manifest.class_table))]
    for cid in sorted(manifest.class_table):
        chunks.append(_pack_str(manifest.class_table[cid]))
        chunks.append(struct.pack("<I", cid))
    chunks.append(struct.pack("<Q", len(manifest.records)))
    for rec in manifest.records:
        chunks.append(_pack_str(rec.id))
        chunks.append(struct.pack("<I", rec.class_id))
        for attr in rec.attrs:
            chunks.append(_pack_str(attr or ""))
        chunks.append(struct.pack("<B", rec.split))
        chunks.append(rec.vector.astype("<f4", copy=False).tobytes())
    data = b"".join(chunks)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, os.fspath(path))
    return len(data)


def read_manifest(path) -> Manifest:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise ValueError(f"truncated manifest while reading {what} (offset {pos})")
        out = data[pos:pos + n]
        pos += n
        return out

    def take_str(what):
        (n,) = struct.unpack("<H", take(2, what))
        return take(n, what).decode("utf-8")

    if take(4, "magic") != MAGIC:
        raise ValueError(f"{path}: not a manifest file")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    dim_vit, dim_resnet = struct.unpack("<II", take(8, "dims"))
    tag = take_str("backbone tag")
    (n_classes,) = struct.unpack("<I", take(4, "class count"))
    table = {}
    for _ in range(n_classes):
        name = take_str("class name")
        (cid,) = struct.unpack("<I", take(4, "class id"))
        table[cid] = name
    (n_records,) = struct.unpack("<Q", take(8, "record count"))
    records = []
    dim_total = dim_vit + dim_resnet
    for _ in range(n_records):
        rec_id = take_str("record id")
        (cid,) = struct.unpack("<I", take(4, "record class id"))
        attrs = tuple(take_str("attr") or None for _ in range(3))
        split = take(1, "split")[0]
        vector = np.frombuffer(take(4 * dim_total, "vector"), dtype="<f4").copy()
        records.append(Record(rec_id, cid, split, vector, attrs))
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes after records")
    return Manifest(dim_vit, dim_resnet, tag, table, records)
