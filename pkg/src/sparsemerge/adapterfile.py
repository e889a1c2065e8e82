"""Binary adapter / task-vector files.

Layout (little-endian)::

    b"SADP"  u16 version  u32 meta_len  meta_len bytes of UTF-8 JSON
    u32 n_layers, then per layer:
        u16 name_len, name, u32 rows, u32 cols, u8 kind
        kind 0 (element): u32 count, count x (u32 row, u32 col), count x f64
        kind 1 (block):   u32 B, u32 count, count x (u32 block_row, u32 block_col),
                          count*B*B x f64 (each block row-major, blocks in order)
        kind 2 (dense):   rows*cols x f64
        kind 3 (lora):    u32 rank, f64 alpha, rows*rank x f64 (A), rank*cols x f64 (B)

Coordinates are strictly increasing in (row, col) order. Sparse adapters only
store in-mask values; everything outside the mask reads back as zero.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import BadMagicError, FormatError, VersionError
from .model import Adapter, LoraAdapter, TaskVector
from .saliency import SparseMask

MAGIC = b"SADP"
VERSION = 1
KIND_ELEMENT, KIND_BLOCK, KIND_DENSE, KIND_LORA = 0, 1, 2, 3


def config_hash(config) -> str:
    blob = json.dumps(config or {}, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _metadata(obj, extra: dict | None) -> dict:
    cfg = obj.config or {}
    if isinstance(obj, Adapter):
        kind = "sparse"
        block = next((m.block_size for m in obj.masks.values() if m.kind == "block"), 0)
    elif isinstance(obj, LoraAdapter):
        kind, block = "lora", 0
    else:
        kind, block = "dense", 0
    meta = {
        "task_id": obj.task_id,
        "kind": kind,
        "criterion": cfg.get("criterion"),
        "kr": cfg.get("kr"),
        "block_size": block,
        "layers": list(obj.layers),
        "seed": cfg.get("seed"),
        "config_hash": config_hash(cfg),
        "config": cfg,
        "train_loss": obj.train_loss,
        "val_loss": obj.val_loss,
        "provenance": [],
    }
    if isinstance(obj, LoraAdapter):
        meta["rank"] = obj.rank
    meta.update(extra or {})
    return meta


def _coords(linear: np.ndarray, cols: int) -> bytes:
    pairs = np.empty((linear.size, 2), dtype="<u4")
    pairs[:, 0] = linear // cols
    pairs[:, 1] = linear % cols
    return pairs.tobytes()


def _f64(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def encode(obj, extra_meta: dict | None = None) -> bytes:
    """Serialize an Adapter, LoraAdapter or TaskVector."""
    meta = json.dumps(_metadata(obj, extra_meta), sort_keys=True).encode()
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<HI", VERSION, len(meta)) + meta)
    out.write(struct.pack("<I", len(obj.layers)))
    for lid in obj.layers:
        name = lid.encode()
        if isinstance(obj, LoraAdapter):
            a, b = obj.a[lid], obj.b[lid]
            shape = (a.shape[0], b.shape[1])
        elif isinstance(obj, Adapter):
            shape = obj.values[lid].shape
        else:
            shape = obj.deltas[lid].shape
        out.write(struct.pack("<H", len(name)) + name + struct.pack("<II", *shape))
        if isinstance(obj, LoraAdapter):
            out.write(struct.pack("<BId", KIND_LORA, obj.rank, obj.alpha) + _f64(a) + _f64(b))
        elif isinstance(obj, TaskVector):
            out.write(struct.pack("<B", KIND_DENSE) + _f64(obj.deltas[lid]))
        else:
            mask, values = obj.masks[lid], obj.values[lid]
            if mask.kind == "block":
                bs = mask.block_size
                nbc = shape[1] // bs
                rows, cols = np.divmod(mask.indices, nbc)
                blocks = [values[r * bs : (r + 1) * bs, c * bs : (c + 1) * bs] for r, c in zip(rows, cols)]
                data = np.stack(blocks) if blocks else np.zeros(0)
                out.write(struct.pack("<BII", KIND_BLOCK, bs, mask.indices.size))
                out.write(_coords(mask.indices, nbc) + _f64(data))
            else:
                idx = mask.indices
                out.write(struct.pack("<BI", KIND_ELEMENT, idx.size))
                out.write(_coords(idx, shape[1]) + _f64(values.ravel()[idx]))
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes, where: str):
        self.data, self.pos, self.where = data, 0, where

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.where}: truncated file")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)

    def coords(self, n: int, cols: int) -> np.ndarray:
        pairs = np.frombuffer(self.take(8 * n), dtype="<u4").reshape(n, 2).astype(np.int64)
        linear = pairs[:, 0] * cols + pairs[:, 1]
        if n > 1 and np.any(np.diff(linear) <= 0):
            raise FormatError(f"{self.where}: coordinates not strictly increasing")
        return linear


def decode(data: bytes, where: str = "<bytes>"):
    """Inverse of :func:`encode`; returns ``(object, metadata)``."""
    r = _Reader(data, where)
    if r.take(4) != MAGIC:
        raise BadMagicError(f"{where}: not an adapter file (bad magic)")
    version, meta_len = r.unpack("<HI")
    if version != VERSION:
        raise VersionError(f"{where}: unsupported format version {version} (expected {VERSION})")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{where}: corrupt metadata ({exc})") from exc
    (n_layers,) = r.unpack("<I")
    values, masks, deltas, lora_a, lora_b = {}, {}, {}, {}, {}
    rank, alpha = None, None
    for _ in range(n_layers):
        (name_len,) = r.unpack("<H")
        lid = r.take(name_len).decode()
        rows, cols = r.unpack("<II")
        (kind,) = r.unpack("<B")
        if kind == KIND_ELEMENT:
            (count,) = r.unpack("<I")
            idx = r.coords(count, cols)
            v = np.zeros(rows * cols)
            v[idx] = r.f64(count)
            values[lid] = v.reshape(rows, cols)
            masks[lid] = SparseMask((rows, cols), "element", idx)
        elif kind == KIND_BLOCK:
            bs, count = r.unpack("<II")
            if bs == 0 or rows % bs or cols % bs:
                raise FormatError(f"{where}: block size {bs} does not tile {rows}x{cols}")
            idx = r.coords(count, cols // bs)
            blocks = r.f64(count * bs * bs).reshape(count, bs, bs)
            v = np.zeros((rows, cols))
            brows, bcols = np.divmod(idx, cols // bs)
            for br, bc, blk in zip(brows, bcols, blocks):
                v[br * bs : (br + 1) * bs, bc * bs : (bc + 1) * bs] = blk
            values[lid] = v
            masks[lid] = SparseMask((rows, cols), "block", idx, bs)
        elif kind == KIND_DENSE:
            deltas[lid] = r.f64(rows * cols).reshape(rows, cols)
        elif kind == KIND_LORA:
            rank, alpha = r.unpack("<Id")
            lora_a[lid] = r.f64(rows * rank).reshape(rows, rank)
            lora_b[lid] = r.f64(rank * cols).reshape(rank, cols)
        else:
            raise FormatError(f"{where}: unknown layer kind tag {kind}")
    if r.pos != len(data):
        raise FormatError(f"{where}: {len(data) - r.pos} trailing bytes")
    common = dict(task_id=meta.get("task_id", ""), config=meta.get("config") or None)
    losses = dict(train_loss=_float(meta.get("train_loss")), val_loss=_float(meta.get("val_loss")))
    if sum([bool(values), bool(deltas), bool(lora_a)]) > 1:
        raise FormatError(f"{where}: mixes layer kinds")
    if lora_a:
        obj = LoraAdapter(lora_a, lora_b, rank, alpha, **common, **losses)
    elif deltas or meta.get("kind") == "dense":
        obj = TaskVector(deltas, **common, **losses)
    else:
        obj = Adapter(values, masks, **common, **losses)
    return obj, meta


def _float(x) -> float:
    return float("nan") if x is None else float(x)


def write(obj, path, extra_meta: dict | None = None) -> str:
    """Atomically write ``obj`` to ``path``; returns the file's content hash."""
    data = encode(obj, extra_meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return hashlib.sha256(data).hexdigest()[:16]


def read(path):
    """Load ``(object, metadata)`` from ``path``."""
    return decode(Path(path).read_bytes(), str(path))
