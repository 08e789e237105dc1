"""Head checkpoint serialization.

Same framing conventions as the manifest format, little-endian, no padding:

    magic         4 bytes  b"FPHD"
    version       u16      currently 1
    dims          u32 x 3  (dim_total, hidden, out)
    tensors       row-major f64 payloads in declaration order:
                  W1, b1, bn1.gamma, bn1.beta, bn1.running_mean,
                  bn1.running_var, W2, b2, bn2.gamma, bn2.beta,
                  bn2.running_mean, bn2.running_var
    w_v, b_v      f64 each
    hyperparams   f64 x 5: dropout_rate, bn1 momentum, bn1 epsilon,
                  bn2 momentum, bn2 epsilon
    has_optimizer u8
    optimizer     (only when has_optimizer = 1)
        magic     4 bytes b"FPOP"
        t         u64
        beta1, beta2, eps   f64 each
        m then v  f64 payloads for the trainable tensors, in
                  TRAINABLE_KEYS order (scalars as one f64)

Byte output is deterministic for identical state, so equal-seed training
runs produce bit-identical checkpoint files.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO

import numpy as np

from .errors import CorruptionError, FormatError, ShapeError
from .head import TRAINABLE_KEYS, BatchNormState, HeadParams
from .optim import AdamState

HEAD_MAGIC = b"FPHD"
OPT_MAGIC = b"FPOP"
CHECKPOINT_VERSION = 1


def _tensor_shapes(dim_total: int, hidden: int, out: int) -> dict[str, tuple]:
    return {
        "W1": (hidden, dim_total), "b1": (hidden,),
        "bn1.gamma": (hidden,), "bn1.beta": (hidden,),
        "bn1.running_mean": (hidden,), "bn1.running_var": (hidden,),
        "W2": (out, hidden), "b2": (out,),
        "bn2.gamma": (out,), "bn2.beta": (out,),
        "bn2.running_mean": (out,), "bn2.running_var": (out,),
    }


def _trainable_shapes(dim_total: int, hidden: int, out: int) -> dict[str, tuple]:
    full = _tensor_shapes(dim_total, hidden, out)
    shapes = {k: full[k] for k in TRAINABLE_KEYS if k in full}
    shapes["w_v"] = ()
    shapes["b_v"] = ()
    return {k: shapes[k] for k in TRAINABLE_KEYS}


def save_head(params: HeadParams, sink: BinaryIO,
              optimizer: AdamState | None = None) -> int:
    params.check_finite()
    buf = io.BytesIO()
    buf.write(HEAD_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(struct.pack("<III", params.dim_total, params.hidden_dim, params.out_dim))
    for arr in params.all_tensors().values():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    buf.write(struct.pack("<dd", float(params.w_v), float(params.b_v)))
    buf.write(struct.pack("<ddddd", params.dropout_rate,
                          params.bn1.momentum, params.bn1.epsilon,
                          params.bn2.momentum, params.bn2.epsilon))
    buf.write(struct.pack("<B", 0 if optimizer is None else 1))
    if optimizer is not None:
        buf.write(OPT_MAGIC)
        buf.write(struct.pack("<Q", optimizer.t))
        buf.write(struct.pack("<ddd", optimizer.beta1, optimizer.beta2, optimizer.eps))
        for store in (optimizer.m, optimizer.v):
            for key in TRAINABLE_KEYS:
                buf.write(np.ascontiguousarray(store[key], dtype="<f8").tobytes())
    data = buf.getvalue()
    sink.write(data)
    return len(data)


def load_head(source) -> tuple[HeadParams, AdamState | None]:
    if isinstance(source, (bytes, bytearray, memoryview)):
        source = io.BytesIO(source)
    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        data = source.read(n)
        if len(data) < n:
            raise CorruptionError(f"truncated while reading {what}", offset + len(data))
        offset += n
        return data

    def tensor(shape: tuple, what: str) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        raw = take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

    if take(4, "magic") != HEAD_MAGIC:
        raise FormatError("bad head checkpoint magic")
    version = struct.unpack("<H", take(2, "version"))[0]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    dim_total, hidden, out = struct.unpack("<III", take(12, "dims"))
    tensors = {name: tensor(shape, name)
               for name, shape in _tensor_shapes(dim_total, hidden, out).items()}
    w_v, b_v = struct.unpack("<dd", take(16, "verification scalars"))
    dropout, mom1, eps1, mom2, eps2 = struct.unpack("<ddddd", take(40, "hyperparams"))
    params = HeadParams(
        W1=tensors["W1"], b1=tensors["b1"],
        bn1=BatchNormState(tensors["bn1.gamma"], tensors["bn1.beta"],
                           tensors["bn1.running_mean"], tensors["bn1.running_var"],
                           mom1, eps1),
        W2=tensors["W2"], b2=tensors["b2"],
        bn2=BatchNormState(tensors["bn2.gamma"], tensors["bn2.beta"],
                           tensors["bn2.running_mean"], tensors["bn2.running_var"],
                           mom2, eps2),
        dropout_rate=dropout,
        w_v=np.array(w_v), b_v=np.array(b_v),
    )
    has_opt = take(1, "optimizer flag")[0]
    optimizer = None
    if has_opt == 1:
        if take(4, "optimizer magic") != OPT_MAGIC:
            raise FormatError("bad optimizer section magic")
        t = struct.unpack("<Q", take(8, "optimizer step"))[0]
        beta1, beta2, eps = struct.unpack("<ddd", take(24, "optimizer hyperparams"))
        shapes = _trainable_shapes(dim_total, hidden, out)
        m = {k: tensor(shapes[k], f"m[{k}]") for k in TRAINABLE_KEYS}
        v = {k: tensor(shapes[k], f"v[{k}]") for k in TRAINABLE_KEYS}
        optimizer = AdamState(m=m, v=v, t=t, beta1=beta1, beta2=beta2, eps=eps)
    elif has_opt != 0:
        raise FormatError(f"invalid optimizer flag byte {has_opt}")
    if source.read(1):
        raise FormatError("trailing data after checkpoint")
    return params, optimizer


def save_head_file(params: HeadParams, path, optimizer: AdamState | None = None) -> int:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        n = save_head(params, fh, optimizer)
    os.replace(tmp, path)
    return n


def load_head_file(path) -> tuple[HeadParams, AdamState | None]:
    with open(path, "rb") as fh:
        return load_head(fh)


def expect_dim(params: HeadParams, dim_total: int) -> None:
    """Guard a checkpoint against a manifest with different feature dims."""
    if params.dim_total != dim_total:
        raise ShapeError(f"checkpoint expects dim_total {params.dim_total}, "
                         f"manifest has {dim_total}")
