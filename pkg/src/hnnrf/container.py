"""Versioned little-endian binary container shared by network and forest models."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HNRF"


class ContainerVersionError(ValueError):
    """The file's kind, version, or declared configuration does not match."""


def write_container(path, kind: bytes, version: int, config: dict, blocks) -> None:
    if len(kind) != 4:
        raise ValueError("container kind must be 4 bytes")
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    out = [MAGIC, kind, struct.pack("<II", version, len(cfg)), cfg, struct.pack("<I", len(blocks))]
    for b in blocks:
        a = np.asarray(b, dtype="<f8")
        out.append(struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes(order="C"))
    Path(path).write_bytes(b"".join(out))


def read_container(path, kind: bytes, version: int):
    """Return ``(config, blocks)``; raise ContainerVersionError on any mismatch."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ContainerVersionError(f"{path}: not an hnnrf model file (bad magic)")
    if buf[4:8] != kind:
        raise ContainerVersionError(f"{path}: holds a {buf[4:8]!r} model, expected {kind!r}")
    try:
        file_version, cfg_len = struct.unpack_from("<II", buf, 8)
        if file_version != version:
            raise ContainerVersionError(
                f"{path}: format version {file_version}, this build reads version {version}"
            )
        pos = 16
        config = json.loads(buf[pos : pos + cfg_len].decode("utf-8"))
        pos += cfg_len
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        blocks = []
        for _ in range(n):
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            a = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            blocks.append(a.astype(np.float64))
    except (struct.error, ValueError) as exc:
        if isinstance(exc, ContainerVersionError):
            raise
        raise ContainerVersionError(f"{path}: truncated or corrupt container ({exc})") from exc
    if pos != len(buf):
        raise ContainerVersionError(f"{path}: {len(buf) - pos} trailing bytes")
    return config, blocks
