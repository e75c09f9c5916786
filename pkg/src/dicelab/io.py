"""On-disk formats: checkpoints, datasets and JSON-lines metric streams.

Checkpoint::

    b"DICECKPT" | u32 version | u32 header length | JSON header | raw tensors

The header lists ``[name, shape]`` in storage order; tensors follow as contiguous
little-endian float64. Datasets use the same framing with magic ``b"DICEDATA"``,
a header holding dims, K, counts, seed and the nuisance mask, then the ``(n, dim)``
float64 matrix and an int64 label array.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import IO, Iterable

import numpy as np

from .datagen import Dataset, GenerativeRecord

CKPT_MAGIC = b"DICECKPT"
DATA_MAGIC = b"DICEDATA"
FORMAT_VERSION = 1
_F64 = np.dtype("<f8")
_I64 = np.dtype("<i8")


class FormatError(ValueError):
    pass


def _write_framed(path: Path, magic: bytes, header: dict, blobs: Iterable[bytes]) -> None:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def _read_framed(path: Path, magic: bytes) -> tuple[dict, memoryview]:
    raw = Path(path).read_bytes()
    if raw[:8] != magic:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    header = json.loads(raw[16 : 16 + hlen])
    return header, memoryview(raw)[16 + hlen :]


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = [[name, list(np.shape(a))] for name, a in arrays.items()]
    header = {"tensors": entries, "meta": meta or {}}
    blobs = (np.ascontiguousarray(a, dtype=_F64).tobytes() for a in arrays.values())
    _write_framed(Path(path), CKPT_MAGIC, header, blobs)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    header, body = _read_framed(Path(path), CKPT_MAGIC)
    out: dict[str, np.ndarray] = {}
    off = 0
    for name, shape in header["tensors"]:
        n = math.prod(shape) * 8
        if off + n > len(body):
            raise FormatError(f"{path}: truncated tensor {name}")
        out[name] = np.frombuffer(body[off : off + n], dtype=_F64).reshape(shape).astype(np.float64)
        off += n
    if off != len(body):
        raise FormatError(f"{path}: {len(body) - off} trailing bytes")
    return out, header["meta"]


def save_dataset(path, ds: Dataset) -> None:
    rec = ds.record
    header = {
        "n": len(ds),
        "dim": int(ds.x.shape[1]),
        "K": int(ds.K),
        "seed": None if rec is None else int(rec.seed),
        "nuisance_mask": None if rec is None else rec.nuisance_mask.astype(int).tolist(),
        "counts": np.bincount(ds.y, minlength=ds.K).tolist(),
        "record": None if rec is None else rec.to_dict(),
    }
    blobs = [
        np.ascontiguousarray(ds.x, dtype=_F64).tobytes(),
        np.ascontiguousarray(ds.y, dtype=_I64).tobytes(),
        np.ascontiguousarray(ds.ids, dtype=_I64).tobytes(),
    ]
    _write_framed(Path(path), DATA_MAGIC, header, blobs)


def load_dataset(path) -> Dataset:
    h, body = _read_framed(Path(path), DATA_MAGIC)
    n, dim = h["n"], h["dim"]
    nx, ny = n * dim * 8, n * 8
    if len(body) != nx + 2 * ny:
        raise FormatError(f"{path}: body size {len(body)} != {nx + 2 * ny}")
    x = np.frombuffer(body[:nx], dtype=_F64).reshape(n, dim).astype(np.float64)
    y = np.frombuffer(body[nx : nx + ny], dtype=_I64).astype(np.int64)
    ids = np.frombuffer(body[nx + ny :], dtype=_I64).astype(np.int64)
    rec = None
    if h.get("record"):
        r = dict(h["record"])
        r["class_means"] = np.asarray(r["class_means"], dtype=np.float64)
        r["nuisance_mask"] = np.asarray(r["nuisance_mask"], dtype=bool)
        rec = GenerativeRecord(**r)
    return Dataset(x, y, h["K"], rec, ids)


def _jsonable(v):
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return _jsonable(v.item())
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    return v


def _restore(v):
    if isinstance(v, str) and v in ("inf", "-inf", "nan"):
        return float(v)
    if isinstance(v, dict):
        return {k: _restore(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_restore(x) for x in v]
    return v


def dumps_record(rec: dict) -> str:
    # repr-exact floats, fixed key order: identical inputs give identical bytes
    return json.dumps(_jsonable(rec), sort_keys=True, separators=(",", ":"))


class JsonLinesWriter:
    def __init__(self, path):
        self.path = Path(path)
        self._fh: IO[str] = open(self.path, "w", encoding="utf-8", newline="\n")

    def __call__(self, rec: dict) -> None:
        self._fh.write(dumps_record(rec) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [_restore(json.loads(line)) for line in fh if line.strip()]
