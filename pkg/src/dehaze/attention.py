"""Short-range path: single-head self-attention inside non-overlapping windows.

The map is cut into M x M tiles, each flattened to M^2 tokens; attention is
Softmax(Q K^T / sqrt(d_k)) V per tile, so no information crosses tile
boundaries. Windows are never shifted; long-range mixing is the scan path's
job. A full-image mode (one window spanning the map) exists for diagnostics,
plus a radial profile that averages attention weight by token distance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class WindowConfig:
    window_size: int
    attention_dim: int

    def __post_init__(self):
        if self.window_size < 1 or self.attention_dim < 1:
            raise ConfigError(f"window_size and attention_dim must be >= 1, got {self}")


@dataclass
class AttentionParams:
    """Query/key/value projections, all (C, d_k)."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    def __post_init__(self):
        shapes = {self.w_q.shape, self.w_k.shape, self.w_v.shape}
        if len(shapes) != 1 or self.w_q.ndim != 2:
            raise ConfigError(f"projections must share one (C, d_k) shape, got {shapes}")

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, attention_dim: int,
             dtype=np.float32) -> "AttentionParams":
        def w():
            scale = 1.0 / np.sqrt(channels)
            return Tensor((rng.normal(size=(channels, attention_dim)) * scale).astype(dtype),
                          requires_grad=True)

        return cls(w_q=w(), w_k=w(), w_v=w())


def window_partition(x: Tensor, m: int) -> Tensor:
    """(B, H, W, C) -> (B * H/m * W/m, m*m, C), row-major tiles, row-major tokens."""
    b, h, w, c = x.shape
    if h % m or w % m:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by window size {m}")
    t = T.reshape(x, (b, h // m, m, w // m, m, c))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (b * (h // m) * (w // m), m * m, c))


def window_merge(windows: Tensor, m: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`; infers batch from window count."""
    n_win, tokens, c = windows.shape
    if tokens != m * m or h % m or w % m:
        raise ShapeError(f"cannot merge {windows.shape} into {h}x{w} with window {m}")
    b = n_win // ((h // m) * (w // m))
    t = T.reshape(windows, (b, h // m, w // m, m, m, c))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (b, h, w, c))


def _attend(tokens: Tensor, p: AttentionParams, capture: list | None) -> Tensor:
    """Softmax(QK^T / sqrt(d_k)) V over a (N, L, C) token batch."""
    d_k = p.w_q.shape[1]
    q = T.matmul(tokens, p.w_q)
    k = T.matmul(tokens, p.w_k)
    v = T.matmul(tokens, p.w_v)
    logits = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(d_k))
    attn = T.softmax(logits, axis=-1)
    if capture is not None:
        capture.append(attn.data.copy())
    return T.matmul(attn, v)


def window_attention(x: Tensor, cfg: WindowConfig, p: AttentionParams,
                     capture: list | None = None) -> Tensor:
    """Windowed self-attention; output is (B, H, W, d_k)."""
    if x.shape[3] != p.w_q.shape[0]:
        raise ShapeError(f"input channels {x.shape[3]} vs projection rows {p.w_q.shape[0]}")
    m = cfg.window_size
    out = _attend(window_partition(x, m), p, capture)
    return window_merge(out, m, x.shape[1], x.shape[2])


def full_image_attention(x: Tensor, p: AttentionParams,
                         capture: list | None = None) -> Tensor:
    """One window spanning the whole map; used for distance diagnostics."""
    b, h, w, c = x.shape
    out = _attend(T.reshape(x, (b, h * w, c)), p, capture)
    return T.reshape(out, (b, h, w, out.shape[-1]))


# -- diagnostics --------------------------------------------------------------------


def attention_distance_profile(attn_maps: list[np.ndarray], h: int, w: int):
    """Mean attention weight per integer-binned token distance.

    ``attn_maps`` holds (N, L, L) arrays with L == h*w over full-image tokens.
    Returns (distances, mean_weights) as 1-D arrays.
    """
    if not attn_maps:
        raise ConfigError("no attention maps captured")
    yy, xx = np.divmod(np.arange(h * w), w)
    dist = np.hypot(yy[:, None] - yy[None, :], xx[:, None] - xx[None, :])
    bins = np.rint(dist).astype(np.int64)

    weight_sum = np.zeros(bins.max() + 1)
    count = np.zeros(bins.max() + 1, dtype=np.int64)
    for maps in attn_maps:
        if maps.shape[-2:] != (h * w, h * w):
            raise ShapeError(f"attention map {maps.shape} does not cover {h}x{w} tokens")
        flat = maps.reshape(-1, h * w, h * w)
        np.add.at(weight_sum, bins, flat.sum(axis=0))
        count += np.bincount(bins.ravel(), minlength=count.size) * flat.shape[0]
    mask = count > 0
    return np.flatnonzero(mask), weight_sum[mask] / count[mask]


def profile_to_csv(path, distances: np.ndarray, weights: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["distance", "mean_weight"])
        for d, wgt in zip(distances, weights):
            writer.writerow([int(d), f"{wgt:.10g}"])
