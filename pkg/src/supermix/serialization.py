"""Binary dataset and checkpoint files.

Both formats are little-endian, start with an 8-byte magic and a fixed
header protected by a CRC-32, and end with a CRC-32 over the payload.

Dataset file::

    magic       8s   b"SMXDATA\\0"
    version     u16  1
    kind        u8   0 = labeled, 1 = mixed
    flags       u8   bit 0: soft-label block present
    m, W, H, C  4 x u32
    N           u64
    meta_len    u32
    header_crc  u32  CRC-32 of the preceding header bytes
    meta        meta_len bytes of UTF-8 JSON (split / method / kappa / config ...)
    images      N*H*W*C float32, row-major (N, H, W, C)
    labels      N int32
    soft        N*m float32 (only when flag bit 0 is set)
    payload_crc u32  CRC-32 of meta .. soft

Checkpoint file::

    magic       8s   b"SMXCKPT\\0"
    version     u16  1
    arch_len    u16, then the architecture tag (ASCII)
    H, W, C, m  4 x u32
    meta_len    u32, n_params u32
    header_crc  u32
    meta        UTF-8 JSON: architecture options, config, metrics
    n_params x  { name_len u16, name, ndim u8, shape ndim x u32, float64 data }
    payload_crc u32
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .classifier import Classifier, build_classifier
from .data import LabeledDataset, MixedDataset
from .errors import FormatError

DATA_MAGIC = b"SMXDATA\0"
CKPT_MAGIC = b"SMXCKPT\0"
VERSION = 1

_DATA_HEAD = struct.Struct("<8sHBB4IQI")
_CKPT_HEAD = struct.Struct("<8sHH")
_CKPT_DIMS = struct.Struct("<4III")


def _atomic_write(path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, tuple)):
        return list(o)
    return str(o)


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{path}: no such file") from None
    except IsADirectoryError:
        raise FormatError(f"{path}: is a directory") from None


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated file (wanted {n} bytes at offset {self.pos})")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))


def _decode_meta(raw: bytes, path) -> dict:
    try:
        meta = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: metadata block is not valid JSON ({exc})") from None
    if not isinstance(meta, dict):
        raise FormatError(f"{path}: metadata block must be a JSON object")
    return meta


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def dataset_bytes(ds: LabeledDataset | MixedDataset, config: dict | None = None) -> bytes:
    n, h, w, c = ds.images.shape
    mixed = isinstance(ds, MixedDataset)
    meta = dict(ds.meta)
    if mixed:
        meta.update(method=ds.method, kappa=ds.kappa, iterations=ds.iterations.tolist(),
                    converged=[bool(v) for v in ds.converged])
    else:
        meta.update(split=ds.split)
    if config is not None:
        meta["config"] = config
    soft = ds.soft_labels if mixed else None
    flags = 1 if soft is not None else 0
    meta_raw = json.dumps(meta, sort_keys=True, default=_json_default).encode("utf-8")
    head = _DATA_HEAD.pack(DATA_MAGIC, VERSION, int(mixed), flags, ds.n_classes, w, h, c, n, len(meta_raw))
    head += struct.pack("<I", zlib.crc32(head))
    payload = [meta_raw, ds.images.astype("<f4").tobytes(), ds.labels.astype("<i4").tobytes()]
    if soft is not None:
        payload.append(soft.astype("<f4").tobytes())
    body = b"".join(payload)
    return head + body + struct.pack("<I", zlib.crc32(body))


def save_dataset(path, ds, config: dict | None = None) -> None:
    _atomic_write(path, dataset_bytes(ds, config))


def load_dataset(path) -> LabeledDataset | MixedDataset:
    """Read a dataset file; raise :class:`FormatError` on any inconsistency."""
    r = _Reader(_read(path), path)
    head = r.take(_DATA_HEAD.size)
    magic, version, kind, flags, m, w, h, c, n, meta_len = _DATA_HEAD.unpack(head)
    if magic != DATA_MAGIC:
        raise FormatError(f"{path}: not a dataset file (bad magic {magic!r})")
    (crc,) = r.unpack(struct.Struct("<I"))
    if crc != zlib.crc32(head):
        raise FormatError(f"{path}: header checksum mismatch")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    if kind not in (0, 1) or flags > 1 or m < 2 or min(w, h, c) < 1:
        raise FormatError(f"{path}: inconsistent header fields")
    expected = meta_len + 4 * n * (h * w * c + 1) + (4 * n * m if flags else 0) + 4
    if len(r.blob) - r.pos != expected:
        raise FormatError(f"{path}: payload is {len(r.blob) - r.pos} bytes, header implies {expected}")
    body_start = r.pos
    meta = _decode_meta(r.take(meta_len), path)
    images = np.frombuffer(r.take(4 * n * h * w * c), dtype="<f4").reshape(n, h, w, c).astype(np.float32)
    labels = np.frombuffer(r.take(4 * n), dtype="<i4").astype(np.int64)
    soft = None
    if flags:
        soft = np.frombuffer(r.take(4 * n * m), dtype="<f4").reshape(n, m).astype(np.float32)
    body_end = r.pos
    (crc,) = r.unpack(struct.Struct("<I"))
    if crc != zlib.crc32(r.blob[body_start:body_end]):
        raise FormatError(f"{path}: payload checksum mismatch")
    try:
        if kind == 0:
            split = meta.pop("split", "train")
            return LabeledDataset(images, labels, m, split, meta)
        method = meta.pop("method", "unknown")
        kappa = float(meta.pop("kappa", 0.0))
        iterations = np.asarray(meta.pop("iterations", [0] * n), dtype=np.int64)
        converged = np.asarray(meta.pop("converged", [True] * n), dtype=bool)
        return MixedDataset(images, labels, m, method, kappa, soft, iterations, converged, meta)
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_bytes(model: Classifier, meta: dict | None = None) -> bytes:
    h, w, c = model.input_shape
    arch = model.arch.encode("ascii")
    info = {"options": model.options()}
    if meta:
        info.update(meta)
    meta_raw = json.dumps(info, sort_keys=True, default=_json_default).encode("utf-8")
    head = _CKPT_HEAD.pack(CKPT_MAGIC, VERSION, len(arch)) + arch
    head += _CKPT_DIMS.pack(h, w, c, model.n_classes, len(meta_raw), len(model.params))
    head += struct.pack("<I", zlib.crc32(head))
    blocks = [meta_raw]
    for name, p in model.params.items():
        nb = name.encode("ascii")
        blocks.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", p.ndim)
                      + struct.pack(f"<{p.ndim}I", *p.shape) + p.astype("<f8").tobytes())
    body = b"".join(blocks)
    return head + body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, model: Classifier, meta: dict | None = None) -> None:
    _atomic_write(path, checkpoint_bytes(model, meta))


def load_checkpoint(path, with_meta: bool = False):
    """Rebuild a classifier from a checkpoint; optionally also return its metadata."""
    r = _Reader(_read(path), path)
    magic, version, arch_len = r.unpack(_CKPT_HEAD)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic {magic!r})")
    arch_raw = r.take(arch_len)
    h, w, c, m, meta_len, n_params = r.unpack(_CKPT_DIMS)
    head_end = r.pos
    (crc,) = r.unpack(struct.Struct("<I"))
    if crc != zlib.crc32(r.blob[:head_end]):
        raise FormatError(f"{path}: header checksum mismatch")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        arch = arch_raw.decode("ascii")
    except UnicodeDecodeError:
        raise FormatError(f"{path}: architecture tag is not ASCII") from None
    body_start = r.pos
    meta = _decode_meta(r.take(meta_len), path)
    params = {}
    for _ in range(n_params):
        (name_len,) = r.unpack(struct.Struct("<H"))
        name = r.take(name_len).decode("ascii", errors="replace")
        (ndim,) = r.unpack(struct.Struct("<B"))
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    body_end = r.pos
    (crc,) = r.unpack(struct.Struct("<I"))
    if r.pos != len(r.blob):
        raise FormatError(f"{path}: trailing bytes after checkpoint payload")
    if crc != zlib.crc32(r.blob[body_start:body_end]):
        raise FormatError(f"{path}: payload checksum mismatch")
    opts = meta.get("options", {})
    try:
        model = build_classifier(arch, (h, w, c), m, **{k: tuple(v) if isinstance(v, list) else v
                                                         for k, v in opts.items()})
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if set(params) != set(model.params):
        raise FormatError(f"{path}: parameter blocks {sorted(params)} do not match {arch}")
    for name, p in params.items():
        if p.shape != model.params[name].shape:
            raise FormatError(f"{path}: parameter {name} has shape {p.shape}, expected {model.params[name].shape}")
        model.params[name] = p
    return (model, meta) if with_meta else model
