"""Binary container shared by model checkpoints and class registries.

Layout: 8 magic bytes, little-endian uint32 format version, uint32 header
length, a UTF-8 JSON header (``kind``, ``meta``, ``blocks``), then every
block's data as little-endian float32 in header order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"IMTFA\x00CK"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


def write_container(path, kind: str, meta: Mapping, blocks: Mapping[str, np.ndarray]) -> None:
    table = []
    payload = []
    for name, arr in blocks.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape)})
        payload.append(arr.tobytes())
    header = json.dumps({"kind": kind, "meta": meta, "blocks": table}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for chunk in payload:
            fh.write(chunk)


def read_container(path, expected_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: bad magic bytes")
    version, hlen = struct.unpack_from("<II", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    start = len(MAGIC) + 8
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    if expected_kind is not None and header["kind"] != expected_kind:
        raise ContainerError(f"{path}: expected a {expected_kind!r} file, found {header['kind']!r}")
    offset = start + hlen
    blocks = {}
    for entry in header["blocks"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = offset + 4 * n
        if end > len(raw):
            raise ContainerError(f"{path}: truncated block {entry['name']!r}")
        blocks[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape).copy()
        offset = end
    return {"kind": header["kind"], **header["meta"]}, blocks
