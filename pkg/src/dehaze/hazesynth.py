"""Synthetic haze: {hazy, clear, density} triplets from the scattering model.

A clear image J, per-pixel depth d and scattering coefficient beta give
transmission t = exp(-beta * d) and the observed hazy image

    I = J * t + A * (1 - t)

with A the (per-channel) atmospheric light. Ground-truth haze density is
1 - t, so it lands in [0,1] and grows with optical thickness. Depth maps are
procedural (ramps, radial gradients, smoothed noise); a procedural clear-image
texture generator makes the whole pipeline self-contained.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imageio
from .errors import ConfigError

DEPTH_SOURCES = ("ramp", "radial", "noise", "mix")


@dataclass(frozen=True)
class AsmParams:
    """Scattering parameters: coefficient, atmospheric light (3,), depth (H, W)."""

    beta: float
    atmospheric_light: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", float(self.beta))
        a = np.asarray(self.atmospheric_light, dtype=np.float64).reshape(-1)
        d = np.asarray(self.depth, dtype=np.float64)
        object.__setattr__(self, "atmospheric_light", a)
        object.__setattr__(self, "depth", d)
        if not (self.beta >= 0.0):
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if a.shape != (3,) or (a < 0).any() or (a > 1).any():
            raise ConfigError("atmospheric_light must be three values in [0,1]")
        if d.ndim != 2 or (d < 0).any() or not np.isfinite(d).all():
            raise ConfigError("depth must be a finite nonnegative (H, W) map")


@dataclass(frozen=True)
class HazeTriplet:
    """Aligned hazy/clear images (H, W, 3) with per-pixel density (H, W)."""

    hazy: np.ndarray
    clear: np.ndarray
    density: np.ndarray

    def __post_init__(self):
        if self.hazy.shape != self.clear.shape or self.hazy.shape[:2] != self.density.shape:
            raise ConfigError(
                f"triplet shapes disagree: hazy {self.hazy.shape}, "
                f"clear {self.clear.shape}, density {self.density.shape}")


def transmission(params: AsmParams) -> np.ndarray:
    """Per-pixel transmission t = exp(-beta * depth), in (0, 1]."""
    return np.exp(-params.beta * params.depth)


def synthesize(clear: np.ndarray, params: AsmParams) -> HazeTriplet:
    """Blend clear toward atmospheric light by 1 - t; density is that blend weight."""
    clear = np.asarray(clear)
    if clear.ndim != 3 or clear.shape[2] != 3:
        raise ConfigError(f"clear image must be (H, W, 3), got {clear.shape}")
    if clear.shape[:2] != params.depth.shape:
        raise ConfigError(f"image {clear.shape[:2]} vs depth {params.depth.shape}")
    t = transmission(params)[..., None]
    hazy = clear * t + params.atmospheric_light * (1.0 - t)
    dt = clear.dtype if clear.dtype in (np.float32, np.float64) else np.float64
    return HazeTriplet(hazy=np.clip(hazy, 0.0, 1.0).astype(dt),
                       clear=clear.astype(dt),
                       density=(1.0 - t[..., 0]).astype(dt))


def invert_asm(hazy: np.ndarray, params: AsmParams,
               t_floor: float = 1e-3) -> tuple[np.ndarray, bool]:
    """Algebraic inverse J = (I - A(1-t)) / t.

    Exact (pre-clamp) wherever t >= t_floor; returns the clamped image and a
    flag saying whether any pixel needed the transmission floor (approximate).
    """
    hazy = np.asarray(hazy)
    t = transmission(params)
    approximate = bool((t < t_floor).any())
    tf = np.maximum(t, t_floor)[..., None]
    clear = (hazy - params.atmospheric_light * (1.0 - tf)) / tf
    dt = hazy.dtype if hazy.dtype in (np.float32, np.float64) else np.float64
    return np.clip(clear, 0.0, 1.0).astype(dt), approximate


# -- procedural depth -------------------------------------------------------------


def _normalize01(field: np.ndarray) -> np.ndarray:
    lo, hi = field.min(), field.max()
    if hi - lo < 1e-12:
        return np.full_like(field, 0.5)
    return (field - lo) / (hi - lo)


def _depth_ramp(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    theta = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    return _normalize01(np.cos(theta) * xx / max(w - 1, 1) + np.sin(theta) * yy / max(h - 1, 1))


def _depth_radial(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    yy, xx = np.mgrid[0:h, 0:w]
    d = _normalize01(np.hypot(yy - cy, xx - cx))
    return 1.0 - d if rng.random() < 0.5 else d


def _depth_noise(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    sigma = rng.uniform(0.06, 0.2) * max(h, w)
    return _normalize01(ndimage.gaussian_filter(rng.uniform(size=(h, w)), sigma=sigma))


_DEPTH_FNS = {"ramp": _depth_ramp, "radial": _depth_radial, "noise": _depth_noise}


def make_depth(rng: np.random.Generator, h: int, w: int, source: str = "mix") -> np.ndarray:
    if source not in DEPTH_SOURCES:
        raise ConfigError(f"depth source must be one of {DEPTH_SOURCES}, got {source!r}")
    if source == "mix":
        source = ("ramp", "radial", "noise")[rng.integers(3)]
    return _DEPTH_FNS[source](rng, h, w)


# -- procedural clear images --------------------------------------------------------


def procedural_clear(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Self-contained textured test image: smooth color field + gratings + shapes."""
    img = ndimage.gaussian_filter(rng.uniform(size=(h, w, 3)), sigma=(0.1 * max(h, w),) * 2 + (0,))
    for c in range(3):
        img[..., c] = 0.15 + 0.7 * _normalize01(img[..., c])

    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(1, 4)):
        fx, fy = rng.uniform(-0.15, 0.15, size=2)
        phase, amp = rng.uniform(0, 2 * np.pi), rng.uniform(0.05, 0.15)
        wave = amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        img[..., rng.integers(3)] += wave

    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0.0, 1.0, size=3)
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, h), rng.integers(0, w)
            dy, dx = rng.integers(h // 8, max(h // 2, h // 8 + 1)), rng.integers(w // 8, max(w // 2, w // 8 + 1))
            img[y0:y0 + dy, x0:x0 + dx] = 0.3 * img[y0:y0 + dy, x0:x0 + dx] + 0.7 * color
        else:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(0.08, 0.25) * min(h, w)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
            img[mask] = 0.3 * img[mask] + 0.7 * color

    return np.clip(img, 0.0, 1.0).astype(np.float32)


# -- triplet stream -----------------------------------------------------------------


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Deterministic per-sample generator; safe to evaluate out of order."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def dataset_builder(clear_images, beta_range=(0.4, 2.0), depth_source: str = "mix",
                    seed: int = 0, count: int | None = None, crop: int = 64,
                    atmo_range=(0.7, 1.0), with_params: bool = False):
    """Deterministic stream of triplets: random crop, flips, beta, depth, light.

    ``clear_images`` is a sequence of (H, W, 3) float arrays, each at least
    ``crop`` on both sides. ``count=None`` streams forever. With
    ``with_params`` each item is ``(triplet, AsmParams)``.
    """
    images = list(clear_images)
    if not images:
        raise ConfigError("dataset_builder needs at least one clear image")
    lo, hi = float(beta_range[0]), float(beta_range[1])
    if not (0.0 <= lo <= hi <= 5.0):
        raise ConfigError(f"beta_range must satisfy 0 <= lo <= hi <= 5, got {beta_range}")
    if depth_source not in DEPTH_SOURCES:
        raise ConfigError(f"depth source must be one of {DEPTH_SOURCES}, got {depth_source!r}")
    for k, im in enumerate(images):
        if im.ndim != 3 or im.shape[2] != 3:
            raise ConfigError(f"clear image {k} must be (H, W, 3), got {im.shape}")
        if im.shape[0] < crop or im.shape[1] < crop:
            raise ConfigError(f"clear image {k} is {im.shape[:2]}, smaller than crop {crop}")

    index = 0
    while count is None or index < count:
        rng = sample_rng(seed, index)
        src = images[rng.integers(len(images))]
        y0 = rng.integers(src.shape[0] - crop + 1)
        x0 = rng.integers(src.shape[1] - crop + 1)
        patch = src[y0:y0 + crop, x0:x0 + crop].astype(np.float32)
        if rng.random() < 0.5:
            patch = patch[:, ::-1]
        if rng.random() < 0.5:
            patch = patch[::-1, :]
        params = AsmParams(
            beta=rng.uniform(lo, hi),
            atmospheric_light=rng.uniform(atmo_range[0], atmo_range[1], size=3),
            depth=make_depth(rng, crop, crop, depth_source))
        trip = synthesize(np.ascontiguousarray(patch), params)
        yield (trip, params) if with_params else trip
        index += 1


# -- triplet files ------------------------------------------------------------------


def write_triplet(dirpath, stem: str, trip: HazeTriplet) -> None:
    dirpath = Path(dirpath)
    imageio.write_image(dirpath / f"{stem}.hazy.png", trip.hazy)
    imageio.write_image(dirpath / f"{stem}.clear.png", trip.clear)
    imageio.write_density(dirpath / f"{stem}.density.png", trip.density)


def read_triplet(dirpath, stem: str) -> HazeTriplet:
    dirpath = Path(dirpath)
    return HazeTriplet(
        hazy=imageio.read_image(dirpath / f"{stem}.hazy.png"),
        clear=imageio.read_image(dirpath / f"{stem}.clear.png"),
        density=imageio.read_density(dirpath / f"{stem}.density.png").astype(np.float32))


def list_triplet_stems(dirpath) -> list[str]:
    dirpath = Path(dirpath)
    stems = sorted(p.name[:-len(".hazy.png")] for p in dirpath.glob("*.hazy.png"))
    return [s for s in stems
            if (dirpath / f"{s}.clear.png").exists() and (dirpath / f"{s}.density.png").exists()]
