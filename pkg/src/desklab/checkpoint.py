"""Flat binary checkpoint: header, config text block, manifest, raw float64.

Layout (all integers little-endian uint64):
  magic "DLABCKPT" | version | config block length | config text (utf-8
  key=value lines) | manifest length | manifest text (one line per array:
  name<TAB>dim,dim,...<TAB>byte offset) | raw little-endian float64 data.

Offsets are relative to the start of the data section. Round-trips are
bit-exact: arrays are written with tobytes() and read with frombuffer().
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DLABCKPT"
VERSION = 1


def _u64(x: int) -> bytes:
    return struct.pack("<Q", x)


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray],
                config_kv: dict[str, str] | None = None) -> None:
    config_text = "".join(f"{k}={v}\n" for k, v in sorted((config_kv or {}).items()))
    names = sorted(arrays)
    manifest_lines = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.asarray(arrays[name], dtype=np.float64)
        dims = ",".join(str(d) for d in arr.shape) or "0"
        manifest_lines.append(f"{name}\t{dims}\t{offset}")
        blob = arr.astype("<f8", copy=False).tobytes()  # C-order bytes
        blobs.append(blob)
        offset += len(blob)
    manifest_text = "\n".join(manifest_lines) + ("\n" if manifest_lines else "")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_u64(VERSION))
    cfg = config_text.encode()
    buf.write(_u64(len(cfg)))
    buf.write(cfg)
    man = manifest_text.encode()
    buf.write(_u64(len(man)))
    buf.write(man)
    for blob in blobs:
        buf.write(blob)
    Path(path).write_bytes(buf.getvalue())


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    pos = 8
    (version,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    config_text = raw[pos:pos + cfg_len].decode()
    pos += cfg_len
    (man_len,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    manifest_text = raw[pos:pos + man_len].decode()
    pos += man_len
    data_start = pos

    config_kv = {}
    for line in config_text.splitlines():
        k, _, v = line.partition("=")
        config_kv[k] = v

    arrays: dict[str, np.ndarray] = {}
    for line in manifest_text.splitlines():
        name, dims, off = line.split("\t")
        shape = tuple(int(d) for d in dims.split(",")) if dims != "0" else ()
        count = int(np.prod(shape)) if shape else 1
        start = data_start + int(off)
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        arrays[name] = arr.reshape(shape).copy()
    return arrays, config_kv
