"""Binary tensor-bundle container ("TMDA").

Layout, all integers little-endian u32:

    magic b"TMDA" | version | record*
    record := name_len | name (UTF-8) | rank | dims[rank] | float32-LE payload

Payloads are stored as float32 regardless of the in-memory dtype, so a
float32 bundle round-trips bit-exactly. Records keep insertion order; the
stream ends at EOF (no count field).
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"TMDA"
VERSION = 1
_MAX_RANK = 32


class FormatError(ValueError):
    """File does not parse as a valid container."""


def save_checkpoint(path, tensors: dict[str, np.ndarray], version: int = VERSION) -> None:
    blobs = [MAGIC, struct.pack("<I", version)]
    for name, arr in tensors.items():
        data = np.asarray(arr, dtype="<f4")  # not ascontiguousarray: keeps rank 0
        raw = name.encode("utf-8")
        blobs.append(struct.pack("<I", len(raw)))
        blobs.append(raw)
        blobs.append(struct.pack("<I", data.ndim))
        blobs.append(struct.pack(f"<{data.ndim}I", *data.shape))
        blobs.append(data.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blobs))


def load_checkpoint(path, expect_version: int | None = VERSION) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 8:
        raise FormatError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if expect_version is not None and version != expect_version:
        raise FormatError(f"{path}: version {version}, expected {expect_version}")

    out: dict[str, np.ndarray] = {}
    pos = 8
    while pos < len(buf):
        pos, name_len = _read_u32(buf, pos, path, "name length")
        if name_len > len(buf) - pos:
            raise FormatError(f"{path}: name length {name_len} overruns file")
        try:
            name = buf[pos:pos + name_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: record name is not UTF-8") from exc
        pos += name_len
        if name in out:
            raise FormatError(f"{path}: duplicate record {name!r}")

        pos, rank = _read_u32(buf, pos, path, f"rank of {name!r}")
        if rank > _MAX_RANK:
            raise FormatError(f"{path}: rank {rank} of {name!r} exceeds limit {_MAX_RANK}")
        dims = []
        for i in range(rank):
            pos, d = _read_u32(buf, pos, path, f"dim {i} of {name!r}")
            dims.append(d)

        nbytes = int(np.prod(dims, dtype=np.int64)) * 4
        if nbytes > len(buf) - pos:
            raise FormatError(f"{path}: payload of {name!r} ({nbytes} bytes) overruns file")
        out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4,
                                  offset=pos).reshape(dims).copy()
        pos += nbytes
    return out


def _read_u32(buf: bytes, pos: int, path, what: str) -> tuple[int, int]:
    if pos + 4 > len(buf):
        raise FormatError(f"{path}: truncated while reading {what}")
    return pos + 4, struct.unpack_from("<I", buf, pos)[0]
