"""Embedding dataset model: records, binary manifest format, synthetic clusters.

A manifest bundles fused backbone features (one vector per sample) with a
class table, per-sample demographic attributes, and a split tag. The on-disk
format is little-endian throughout, with no padding or alignment gaps:

    magic            4 bytes  b"FPEM"
    version          u16      currently 1
    dim_vit          u32
    dim_resnet       u32      0 in transformer-only ablation manifests
    backbone_tag     u16 length + UTF-8 bytes
    class count      u32
    per class:       name as u16 length + UTF-8 bytes, then class_id u32
                     (written in ascending class_id order)
    record count     u64
    per record:      id as u16 length + UTF-8 bytes
                     class_id u32
                     three attr strings (race, gender, age_group), each as
                     u16 length + UTF-8 bytes; length 0 means absent
                     split u8 (0=train, 1=val, 2=support, 3=query)
                     vector payload, dim_total x f32

Vectors are stored (and kept in memory) as 32-bit floats so a save/load
round trip is bit-identical; numeric code widens to float64 on entry.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import BinaryIO, Iterable

import numpy as np

from .errors import (
    CapacityError,
    CorruptionError,
    FormatError,
    NumericError,
    SinkError,
    ValidationError,
)
from .rng import as_generator, named_stream

MAGIC = b"FPEM"
FORMAT_VERSION = 1
ATTR_NAMES = ("race", "gender", "age_group")


class Split(IntEnum):
    TRAIN = 0
    VAL = 1
    SUPPORT = 2
    QUERY = 3

    @classmethod
    def from_name(cls, name: str) -> "Split":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValidationError(f"unknown split {name!r}; expected one of "
                                  f"{[s.name.lower() for s in cls]}")


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    """One sample: a fused feature vector plus class, attributes, and split."""

    id: str
    class_id: int
    attrs: tuple[str | None, str | None, str | None]
    split: Split
    vector: np.ndarray  # float32, shape (dim_total,)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return (self.id == other.id
                and self.class_id == other.class_id
                and self.attrs == other.attrs
                and self.split == other.split
                and self.vector.dtype == other.vector.dtype
                and np.array_equal(self.vector, other.vector))

    __hash__ = None  # type: ignore[assignment]


@dataclass(eq=False)
class DatasetManifest:
    """An ordered embedding dataset with its feature-block dimensions.

    Nothing in this package mutates a manifest after construction or load,
    so instances are safe to share across concurrent readers; writing goes
    through a sink the caller owns exclusively.
    """

    dim_vit: int
    dim_resnet: int
    backbone_tag: str
    class_table: dict[int, str]
    records: list[EmbeddingRecord] = field(default_factory=list)

    @property
    def dim_total(self) -> int:
        return self.dim_vit + self.dim_resnet

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return (self.dim_vit == other.dim_vit
                and self.dim_resnet == other.dim_resnet
                and self.backbone_tag == other.backbone_tag
                and self.class_table == other.class_table
                and len(self.records) == len(other.records)
                and all(a == b for a, b in zip(self.records, other.records)))

    def validate(self) -> None:
        """Raise ValidationError unless every manifest invariant holds."""
        if self.dim_vit < 1:
            raise ValidationError(f"dim_vit must be positive, got {self.dim_vit}")
        if self.dim_resnet < 0:
            raise ValidationError(f"dim_resnet must be >= 0, got {self.dim_resnet}")
        seen_ids = {r.class_id for r in self.records}
        if seen_ids != set(self.class_table):
            raise ValidationError(
                f"class_table keys {sorted(self.class_table)} do not exactly cover "
                f"record class_ids {sorted(seen_ids)}")
        for rec in self.records:
            if rec.vector.shape != (self.dim_total,):
                raise ValidationError(
                    f"record {rec.id!r}: vector length {rec.vector.shape} does not "
                    f"match dim_total {self.dim_total}")
            if rec.vector.dtype != np.float32:
                raise ValidationError(f"record {rec.id!r}: vector dtype must be float32")
            if not np.all(np.isfinite(rec.vector)):
                raise ValidationError(f"record {rec.id!r}: vector has non-finite entries")
            if len(rec.attrs) != 3 or any(a == "" for a in rec.attrs):
                raise ValidationError(
                    f"record {rec.id!r}: attrs must be three labels, None for absent")

    def records_by_split(self, split: Split) -> list[EmbeddingRecord]:
        return [r for r in self.records if r.split == split]

    def class_ids(self) -> list[int]:
        return sorted(self.class_table)

    def split_class_counts(self, split: Split) -> dict[int, int]:
        counts = {cid: 0 for cid in self.class_table}
        for r in self.records:
            if r.split == split:
                counts[r.class_id] += 1
        return counts


def concat_features(vit_vec, resnet_vec) -> np.ndarray:
    """Append the convolutional feature block after the transformer block.

    Order is preserved; the second block may be empty (ablation manifests).
    Non-finite entries are rejected with the offending index.
    """
    out = []
    for name, vec in (("vit", vit_vec), ("resnet", resnet_vec)):
        arr = np.asarray(vec)
        if arr.ndim != 1:
            raise ValidationError(f"{name} features must be a 1-D vector, got shape {arr.shape}")
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise NumericError(f"non-finite {name} feature at index {int(bad[0])}")
        out.append(arr)
    if out[1].size == 0:
        return out[0].copy()
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# binary format
# ---------------------------------------------------------------------------

_MAX_STR = 0xFFFF


def _encode_str(s: str, what: str) -> bytes:
    data = s.encode("utf-8")
    if len(data) > _MAX_STR:
        raise ValidationError(f"{what} longer than {_MAX_STR} UTF-8 bytes")
    return struct.pack("<H", len(data)) + data


def save_manifest(manifest: DatasetManifest, sink: BinaryIO) -> int:
    """Serialize ``manifest`` to ``sink`` and return the number of bytes written."""
    manifest.validate()
    written = 0

    def put(chunk: bytes) -> None:
        nonlocal written
        try:
            sink.write(chunk)
        except OSError as exc:
            raise SinkError(f"sink write failed: {exc}", written) from exc
        written += len(chunk)

    put(MAGIC)
    put(struct.pack("<H", FORMAT_VERSION))
    put(struct.pack("<II", manifest.dim_vit, manifest.dim_resnet))
    put(_encode_str(manifest.backbone_tag, "backbone_tag"))
    put(struct.pack("<I", len(manifest.class_table)))
    for cid in sorted(manifest.class_table):
        put(_encode_str(manifest.class_table[cid], f"class name for id {cid}"))
        put(struct.pack("<I", cid))
    put(struct.pack("<Q", len(manifest.records)))
    for rec in manifest.records:
        put(_encode_str(rec.id, "record id"))
        put(struct.pack("<I", rec.class_id))
        for attr in rec.attrs:
            put(_encode_str(attr or "", "attr"))
        put(struct.pack("<B", int(rec.split)))
        put(rec.vector.astype("<f4", copy=False).tobytes())
    return written


class _Reader:
    """Byte-counting reader that names the offset of any truncation."""

    def __init__(self, stream: BinaryIO):
        self.stream = stream
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        data = self.stream.read(n)
        if len(data) < n:
            raise CorruptionError(f"truncated while reading {what}", self.offset + len(data))
        self.offset += n
        return data

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def string(self, what: str) -> str:
        n = self.u16(f"{what} length")
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{what} is not valid UTF-8: {exc}") from exc


def load_manifest(source) -> DatasetManifest:
    """Parse a manifest from ``source`` (binary file object or bytes).

    The stream must contain exactly one manifest; trailing bytes are an error.
    """
    if isinstance(source, (bytes, bytearray, memoryview)):
        source = io.BytesIO(source)
    r = _Reader(source)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u16("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    dim_vit = r.u32("dim_vit")
    dim_resnet = r.u32("dim_resnet")
    dim_total = dim_vit + dim_resnet
    backbone_tag = r.string("backbone_tag")
    class_table: dict[int, str] = {}
    for i in range(r.u32("class count")):
        name = r.string(f"class name #{i}")
        cid = r.u32(f"class id #{i}")
        if cid in class_table:
            raise FormatError(f"duplicate class id {cid}")
        class_table[cid] = name
    records = []
    n_records = r.u64("record count")
    for i in range(n_records):
        rec_id = r.string(f"record id #{i}")
        cid = r.u32(f"class id of record {rec_id!r}")
        if cid not in class_table:
            raise ValidationError(f"record {rec_id!r}: class_id {cid} missing from class table")
        attrs = tuple(r.string(f"attr of record {rec_id!r}") or None for _ in range(3))
        split_byte = r.take(1, f"split of record {rec_id!r}")[0]
        try:
            split = Split(split_byte)
        except ValueError:
            raise FormatError(f"record {rec_id!r}: invalid split byte {split_byte}")
        payload = r.take(4 * dim_total, f"vector of record {rec_id!r}")
        vector = np.frombuffer(payload, dtype="<f4").astype(np.float32)
        if not np.all(np.isfinite(vector)):
            raise ValidationError(f"record {rec_id!r}: vector has non-finite entries")
        records.append(EmbeddingRecord(rec_id, cid, attrs, split, vector))
    if source.read(1):
        raise FormatError(f"trailing data after record {n_records - 1}")
    manifest = DatasetManifest(dim_vit, dim_resnet, backbone_tag, class_table, records)
    manifest.validate()
    return manifest


def save_manifest_file(manifest: DatasetManifest, path) -> int:
    """Atomically write ``manifest`` to ``path`` (temp file + rename)."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        n = save_manifest(manifest, fh)
    os.replace(tmp, path)
    return n


def load_manifest_file(path) -> DatasetManifest:
    with open(path, "rb") as fh:
        return load_manifest(fh)


# ---------------------------------------------------------------------------
# synthetic clusters
# ---------------------------------------------------------------------------

def synthesize_clusters(k: int, per_class: int, dim: int, separation: float, seed: int, *,
                        dim_vit: int | None = None, dim_resnet: int | None = None,
                        informative: str = "all", support_per_class: int = 5,
                        backbone_tag: str = "synthetic") -> DatasetManifest:
    """Generate ``k`` isotropic unit-variance Gaussian clusters as a manifest.

    Cluster centers sit on scaled coordinate axes so any two are at least
    ``separation`` apart (separation 0 collapses all centers onto the origin).
    Per class the records are split, in order: half train, a quarter val,
    up to ``support_per_class`` support, remainder query.

    ``informative`` restricts which feature block carries the class signal:
    "all" (default), "vit" (first block only), or "resnet" (second block
    only; the other block is pure unlabeled noise).
    """
    if k < 2:
        raise ValidationError(f"need at least 2 classes, got {k}")
    if per_class < 2:
        raise ValidationError(f"need at least 2 samples per class, got {per_class}")
    if dim < 1:
        raise ValidationError(f"dim must be >= 1, got {dim}")
    if separation < 0:
        raise ValidationError(f"separation must be >= 0, got {separation}")
    if (dim_vit is None) != (dim_resnet is None):
        raise ValidationError("dim_vit and dim_resnet must be given together")
    if dim_vit is None:
        dim_vit, dim_resnet = dim, 0
    if dim_vit + dim_resnet != dim:
        raise ValidationError(f"dim_vit + dim_resnet = {dim_vit + dim_resnet} != dim = {dim}")
    if informative not in ("all", "vit", "resnet"):
        raise ValidationError(f"informative must be all/vit/resnet, got {informative!r}")

    block_start, block_width = {
        "all": (0, dim),
        "vit": (0, dim_vit),
        "resnet": (dim_vit, dim_resnet),
    }[informative]

    rng = named_stream(seed, "synth")
    n_train = per_class // 2
    n_val = per_class // 4
    rest = per_class - n_train - n_val
    n_support = min(support_per_class, rest)
    n_query = rest - n_support
    split_plan = ([Split.TRAIN] * n_train + [Split.VAL] * n_val
                  + [Split.SUPPORT] * n_support + [Split.QUERY] * n_query)

    records = []
    class_table = {}
    for c in range(k):
        class_table[c] = f"class_{c:03d}"
        center = np.zeros(dim)
        if block_width > 0 and separation > 0:
            axis = block_start + c % block_width
            center[axis] = separation * (1 + c // block_width)
        block = rng.standard_normal((per_class, dim)) + center
        for i in range(per_class):
            records.append(EmbeddingRecord(
                id=f"c{c:03d}_r{i:04d}",
                class_id=c,
                attrs=(None, None, None),
                split=split_plan[i],
                vector=block[i].astype(np.float32),
            ))
    return DatasetManifest(dim_vit, dim_resnet, backbone_tag, class_table, records)


def cluster_centers(k: int, dim: int, separation: float, *,
                    dim_vit: int | None = None, dim_resnet: int | None = None,
                    informative: str = "all") -> np.ndarray:
    """True centers used by ``synthesize_clusters`` for the same arguments."""
    if dim_vit is None:
        dim_vit, dim_resnet = dim, 0
    block_start, block_width = {
        "all": (0, dim),
        "vit": (0, dim_vit),
        "resnet": (dim_vit, dim_resnet),
    }[informative]
    centers = np.zeros((k, dim))
    if block_width > 0 and separation > 0:
        for c in range(k):
            centers[c, block_start + c % block_width] = separation * (1 + c // block_width)
    return centers


def vit_only_view(manifest: DatasetManifest) -> DatasetManifest:
    """Copy of ``manifest`` with the trailing feature block removed."""
    dim_vit = manifest.dim_vit
    records = [replace(rec, vector=rec.vector[:dim_vit].copy()) for rec in manifest.records]
    return DatasetManifest(dim_vit, 0, manifest.backbone_tag + "-vitonly",
                           dict(manifest.class_table), records)


# ---------------------------------------------------------------------------
# nested support/query protocol
# ---------------------------------------------------------------------------

def nested_support_query(manifest: DatasetManifest, shots: list[int],
                         queries_per_class: int, seed) -> dict[int, tuple[list, list]]:
    """Draw per-shot (support, query) sets from the support/query splits.

    The support set for a larger shot count extends the smaller one (the
    earlier picks are kept), and one static query set is shared by every
    shot. Returns ``{shot: (support_records, query_records)}``; the query
    list is the same object for all shots.
    """
    if not shots or any(b <= a for a, b in zip(shots, shots[1:])) or shots[0] < 1:
        raise ValidationError(f"shots must be strictly increasing positive ints, got {shots}")
    if queries_per_class < 1:
        raise ValidationError("queries_per_class must be >= 1")
    rng = as_generator(seed)
    max_shot = shots[-1]

    support_pool: dict[int, list[EmbeddingRecord]] = {c: [] for c in manifest.class_table}
    query_pool: dict[int, list[EmbeddingRecord]] = {c: [] for c in manifest.class_table}
    for rec in manifest.records:
        if rec.split == Split.SUPPORT:
            support_pool[rec.class_id].append(rec)
        elif rec.split == Split.QUERY:
            query_pool[rec.class_id].append(rec)

    chosen_support: dict[int, list[EmbeddingRecord]] = {}
    queries: list[EmbeddingRecord] = []
    for cid in sorted(manifest.class_table):
        name = manifest.class_table[cid]
        sup, qry = support_pool[cid], query_pool[cid]
        if len(sup) < max_shot:
            raise CapacityError(
                f"class {name!r} (id {cid}) has {len(sup)} support records, needs {max_shot}")
        if len(qry) < queries_per_class:
            raise CapacityError(
                f"class {name!r} (id {cid}) has {len(qry)} query records, "
                f"needs {queries_per_class}")
        order = rng.permutation(len(sup))[:max_shot]
        chosen_support[cid] = [sup[i] for i in order]
        queries.extend(qry[i] for i in rng.permutation(len(qry))[:queries_per_class])

    out: dict[int, tuple[list, list]] = {}
    for s in shots:
        support = [rec for cid in sorted(chosen_support) for rec in chosen_support[cid][:s]]
        out[s] = (support, queries)
    return out
