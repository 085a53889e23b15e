"""Synthetic co-registered heterogeneous image pairs with known change.

A smooth latent land-cover field is rendered through two unrelated sensor
models. The second field differs from the first only inside a connected
blob, so the ground truth is exactly the set of pixels whose latent class
changed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .raster import compute_stats, normalize, RasterImage

MAX_ATTEMPTS = 10
FRACTION_TOLERANCE = 0.2


class SynthesisError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    height: int = 128
    width: int = 128
    num_classes: int = 5
    channels_x: int = 3
    channels_y: int = 5
    change_fraction: float = 0.1
    noise_std_x: float = 0.05
    noise_std_y: float = 0.15
    smoothness: float = 6.0
    speckle_looks: int = 0  # 0 disables multiplicative noise on Y

    def __post_init__(self):
        if not 0 <= self.change_fraction < 1:
            raise ValueError("change_fraction must lie in [0, 1)")
        if self.channels_x < 1 or self.channels_y < 1:
            raise ValueError("channel counts must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.height < 2 or self.width < 2:
            raise ValueError("image must be at least 2x2")
        if self.smoothness <= 0:
            raise ValueError("smoothness must be positive")
        if self.speckle_looks < 0:
            raise ValueError("speckle_looks must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthPair:
    x: RasterImage
    y: RasterImage
    gt: np.ndarray          # (H, W) uint8, 1 = changed
    field_before: np.ndarray
    field_after: np.ndarray
    config: SynthConfig
    attempts: int = 1


def class_field(rng: np.random.Generator, shape: tuple[int, int], num_classes: int,
                smoothness: float) -> np.ndarray:
    """Smoothed white noise cut at its quantiles into equally frequent classes."""
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), smoothness, mode="wrap")
    cuts = np.quantile(noise, np.linspace(0, 1, num_classes + 1)[1:-1])
    return np.searchsorted(cuts, noise).astype(np.int64)


def grow_blob(rng: np.random.Generator, shape: tuple[int, int], target: int) -> np.ndarray:
    """Connected region grown by random dilation from a seed pixel, exactly ``target`` pixels."""
    h, w = shape
    blob = np.zeros(shape, dtype=bool)
    if target <= 0:
        return blob
    cy, cx = rng.integers(h // 4, max(h // 4 + 1, 3 * h // 4)), rng.integers(w // 4, max(w // 4 + 1, 3 * w // 4))
    blob[cy, cx] = True
    cross = ndimage.generate_binary_structure(2, 1)
    while blob.sum() < target:
        frontier = ndimage.binary_dilation(blob, structure=cross) & ~blob
        cand = np.flatnonzero(frontier)
        if cand.size == 0:
            break
        take = rng.random(cand.size) < 0.5
        if not take.any():
            continue
        chosen = cand[take]
        need = target - int(blob.sum())
        if chosen.size > need:
            chosen = rng.choice(chosen, size=need, replace=False)
        blob.flat[chosen] = True
    return blob


def _distinct_means(rng: np.random.Generator, k: int, dims: int, lo: float, hi: float) -> np.ndarray:
    # rejection sampling for well separated class signatures
    min_sep = 0.6 * (hi - lo) / max(1.0, k ** (1.0 / dims))
    best, best_sep = None, -1.0
    for _ in range(200):
        m = rng.uniform(lo, hi, size=(k, dims))
        d = np.sqrt(((m[:, None] - m[None]) ** 2).sum(-1))
        sep = d[~np.eye(k, dtype=bool)].min()
        if sep > best_sep:
            best, best_sep = m, sep
        if sep >= min_sep:
            break
    return best


def _render_x(rng, field, cfg: SynthConfig) -> np.ndarray:
    means = _distinct_means(rng, cfg.num_classes, cfg.channels_x, -0.7, 0.7)
    img = means[field] + cfg.noise_std_x * rng.standard_normal(field.shape + (cfg.channels_x,))
    return np.clip(img, -1.0, 1.0)


def _render_y(rng, field, cfg: SynthConfig) -> np.ndarray:
    latent_dims = max(2, cfg.channels_y)
    means = _distinct_means(rng, cfg.num_classes, latent_dims, -1.0, 1.0)
    mixing = rng.standard_normal((latent_dims, cfg.channels_y)) / np.sqrt(latent_dims)
    gain = rng.uniform(1.0, 2.5, size=cfg.channels_y)
    # saturating per-channel response: class structure kept, values not comparable to X
    response = np.tanh(gain * (means @ mixing)) + 1.5
    img = response[field]
    if cfg.speckle_looks:
        img = img * rng.gamma(cfg.speckle_looks, 1.0 / cfg.speckle_looks, size=img.shape)
    raw = RasterImage(img)
    scaled = normalize(raw, compute_stats(raw)).values.astype(np.float64)
    scaled += cfg.noise_std_y * rng.standard_normal(scaled.shape)
    return np.clip(scaled, -1.0, 1.0)


def generate_pair(cfg: SynthConfig) -> SynthPair:
    shape = (cfg.height, cfg.width)
    target = int(round(cfg.change_fraction * cfg.height * cfg.width))
    seeds = np.random.SeedSequence(cfg.seed).spawn(MAX_ATTEMPTS)
    for attempt, ss in enumerate(seeds, start=1):
        rng = np.random.default_rng(ss)
        before = class_field(rng, shape, cfg.num_classes, cfg.smoothness)
        blob = grow_blob(rng, shape, target)
        got = int(blob.sum())
        if target and abs(got - target) > FRACTION_TOLERANCE * target:
            continue
        after = before.copy()
        offsets = rng.integers(1, cfg.num_classes, size=cfg.num_classes)
        after[blob] = (before[blob] + offsets[before[blob]]) % cfg.num_classes
        x = _render_x(rng, before, cfg)
        y = _render_y(rng, after, cfg)
        gt = (before != after).astype(np.uint8)
        return SynthPair(
            x=RasterImage(x.astype(np.float32), band_names=[f"x{i}" for i in range(cfg.channels_x)]),
            y=RasterImage(y.astype(np.float32), band_names=[f"y{i}" for i in range(cfg.channels_y)]),
            gt=gt, field_before=before, field_after=after, config=cfg, attempts=attempt,
        )
    raise SynthesisError(
        f"could not grow a change region of {target} pixels within {FRACTION_TOLERANCE:.0%} "
        f"after {MAX_ATTEMPTS} attempts")
