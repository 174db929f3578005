"""Binary checkpoint format ``HSCKPT1``.

All integers and floats are little-endian::

    magic      7 bytes   b"HSCKPT1"
    version    u16       currently 1
    stage      u16 length + UTF-8 text
    epoch      u32
    meta       u32 length + UTF-8 JSON (sorted keys)
    n_records  u32
    record     u16 name length, UTF-8 name, u8 ndim, ndim x u32 extents,
               prod(extents) x f32 values (row-major)
    has_optim  u8        0 or 1; when 1 the optimizer block follows
    optimizer  f64 lr_base, f64 weight_decay, f64 beta1, f64 beta2, f64 eps,
               f64 eta_min, u32 total_epochs, u64 step_count,
               u32 n_moments, then 2 * n_moments records named "m/<param>"
               and "v/<param>" in parameter order

Parameter records hold both trainable weights and batch-norm running
statistics, keyed by their dotted module path.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DependencyError, StateError
from .optim import AdamState

MAGIC = b"HSCKPT1"
VERSION = 1


@dataclass
class Checkpoint:
    stage: str
    arrays: "OrderedDict[str, np.ndarray]"
    epoch: int = 0
    meta: dict = field(default_factory=dict)
    optimizer: AdamState | None = None


def _write_record(buf, name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def _read_exact(buf, n):
    data = buf.read(n)
    if len(data) != n:
        raise StateError("truncated checkpoint")
    return data


def _read_record(buf):
    (n,) = struct.unpack("<H", _read_exact(buf, 2))
    name = _read_exact(buf, n).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(buf, 1))
    shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(_read_exact(buf, 4 * count), dtype="<f4").reshape(shape)
    return name, arr.astype(np.float32)


def dumps(ckpt):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    stage = ckpt.stage.encode("utf-8")
    buf.write(struct.pack("<H", len(stage)))
    buf.write(stage)
    buf.write(struct.pack("<I", ckpt.epoch))
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(ckpt.arrays)))
    for name, arr in ckpt.arrays.items():
        _write_record(buf, name, arr)
    opt = ckpt.optimizer
    if opt is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<6d", opt.lr_base, opt.weight_decay, opt.beta1, opt.beta2,
                              opt.eps, opt.eta_min))
        buf.write(struct.pack("<IQ", opt.total_epochs, opt.step_count))
        names = list(opt.m)
        buf.write(struct.pack("<I", len(names)))
        for name in names:
            _write_record(buf, "m/" + name, opt.m[name])
            _write_record(buf, "v/" + name, opt.v[name])
    return buf.getvalue()


def loads(data):
    buf = io.BytesIO(data)
    if _read_exact(buf, len(MAGIC)) != MAGIC:
        raise StateError("not an HSCKPT1 checkpoint")
    (version,) = struct.unpack("<H", _read_exact(buf, 2))
    if version != VERSION:
        raise StateError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<H", _read_exact(buf, 2))
    stage = _read_exact(buf, n).decode("utf-8")
    (epoch,) = struct.unpack("<I", _read_exact(buf, 4))
    (n,) = struct.unpack("<I", _read_exact(buf, 4))
    meta = json.loads(_read_exact(buf, n).decode("utf-8"))
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    arrays = OrderedDict(_read_record(buf) for _ in range(count))
    (has_opt,) = struct.unpack("<B", _read_exact(buf, 1))
    opt = None
    if has_opt:
        lr, wd, b1, b2, eps, eta_min = struct.unpack("<6d", _read_exact(buf, 48))
        total, steps = struct.unpack("<IQ", _read_exact(buf, 12))
        opt = AdamState(lr, wd, b1, b2, eps, total, eta_min, steps)
        (nmom,) = struct.unpack("<I", _read_exact(buf, 4))
        for _ in range(nmom):
            mname, m = _read_record(buf)
            vname, v = _read_record(buf)
            opt.m[mname[2:]] = m.copy()
            opt.v[vname[2:]] = v.copy()
    return Checkpoint(stage, arrays, epoch, meta, opt)


def save(path, ckpt):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(ckpt))
    return path


def load(path):
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"missing checkpoint {path}")
    return loads(path.read_bytes())
