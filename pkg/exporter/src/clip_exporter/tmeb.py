"""Binary container for patch-grid and prompt embeddings (TMEB).

Layout, integers little-endian u32, floats little-endian f32:

    b"TMEB" | version=1 | d_c | patch | grid count
    per grid:   name_len | name utf-8 | H_p | W_p | H_p*W_p*d_c floats
    prompt count
    per prompt: name_len | name utf-8 | d_c floats

Readers reject trailing bytes, so the container carries no free-form metadata;
``export.run_export`` writes a JSON sidecar next to the file instead.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"TMEB"
VERSION = 1


def write_embeddings(path, d_c: int, patch: int, grids: dict[str, np.ndarray],
                     prompts: dict[str, np.ndarray]) -> None:
    """Serialize grids (name -> (H_p, W_p, d_c)) and prompts (name -> (d_c,))."""
    if not 1 <= d_c <= 1 << 16 or not 1 <= patch <= 1 << 10:
        raise ValueError(f"implausible header d_c={d_c} patch={patch}")
    blobs = [MAGIC, struct.pack("<IIII", VERSION, d_c, patch, len(grids))]
    for name, grid in grids.items():
        grid = np.asarray(grid, "<f4")
        if grid.ndim != 3 or grid.shape[2] != d_c:
            raise ValueError(f"grid {name!r} must be (H_p, W_p, {d_c}), got {grid.shape}")
        raw = name.encode("utf-8")
        blobs += [struct.pack("<I", len(raw)), raw,
                  struct.pack("<II", grid.shape[0], grid.shape[1]), grid.tobytes()]
    blobs.append(struct.pack("<I", len(prompts)))
    for name, vec in prompts.items():
        vec = np.asarray(vec, "<f4")
        if vec.shape != (d_c,):
            raise ValueError(f"prompt {name!r} must be ({d_c},), got {vec.shape}")
        raw = name.encode("utf-8")
        blobs += [struct.pack("<I", len(raw)), raw, vec.tobytes()]
    with open(path, "wb") as fh:
        fh.write(b"".join(blobs))
