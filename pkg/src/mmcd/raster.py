"""Multiband raster container, the MMCD1 file format, and input scaling."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MAGIC = b"MMCD1\n"


class RasterFormatError(ValueError):
    """Malformed or inconsistent raster file."""


@dataclass
class RasterImage:
    """H x W x C float image (row-major HWC)."""

    values: np.ndarray
    band_names: Optional[list[str]] = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise ValueError(f"raster values must be H x W x C, got shape {v.shape}")
        if min(v.shape) < 1:
            raise ValueError(f"raster dimensions must be >= 1, got {v.shape}")
        if self.band_names is not None and len(self.band_names) != v.shape[2]:
            raise ValueError("band_names length does not match channel count")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass
class BandStats:
    """Per-channel summary statistics; each field is a length-C array."""

    min: np.ndarray
    max: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    p1: np.ndarray
    p99: np.ndarray

    @property
    def channels(self) -> int:
        return len(self.min)

    def to_dict(self) -> dict:
        return {k: [float(x) for x in getattr(self, k)] for k in ("min", "max", "mean", "std", "p1", "p99")}


def save_raster(img: RasterImage, path) -> None:
    values = np.asarray(img.values)
    header = {
        "height": img.height,
        "width": img.width,
        "channels": img.channels,
        "dtype": "f32",
        "layout": "hwc-row-major",
    }
    if img.band_names is not None:
        header["band_names"] = list(img.band_names)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def load_raster(path) -> RasterImage:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise RasterFormatError(f"{path}: bad magic, expected {MAGIC!r}")
    rest = raw[len(MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise RasterFormatError(f"{path}: header line is not terminated")
    try:
        header = json.loads(rest[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise RasterFormatError(f"{path}: malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise RasterFormatError(f"{path}: header must be an object")
    try:
        h, w, c = (int(header[k]) for k in ("height", "width", "channels"))
    except (KeyError, TypeError, ValueError) as exc:
        raise RasterFormatError(f"{path}: header lacks valid height/width/channels") from exc
    if header.get("dtype") != "f32" or header.get("layout") != "hwc-row-major":
        raise RasterFormatError(f"{path}: unsupported dtype/layout {header.get('dtype')}/{header.get('layout')}")
    if min(h, w, c) < 1:
        raise RasterFormatError(f"{path}: dimensions must be >= 1, got {h}x{w}x{c}")
    payload = rest[nl + 1:]
    expected = h * w * c
    if len(payload) % 4 != 0 or len(payload) // 4 != expected:
        raise RasterFormatError(
            f"{path}: payload length mismatch, header declares {expected} floats, "
            f"found {len(payload) / 4:g}")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise RasterFormatError(f"{path}: non-finite value at index {int(bad[0])}")
    return RasterImage(values.reshape(h, w, c), band_names=header.get("band_names"))


def log_transform(img: RasterImage, epsilon: float = 1e-6) -> RasterImage:
    """Natural log of (v + epsilon); used on SAR intensities."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    v = np.asarray(img.values, dtype=np.float64)
    if np.any(v < 0):
        idx = int(np.flatnonzero(v.ravel() < 0)[0])
        raise ValueError(f"log_transform needs non-negative values; index {idx} is {v.ravel()[idx]}")
    return RasterImage(np.log(v + epsilon), band_names=img.band_names)


def _nearest_rank(sorted_vals: np.ndarray, pct: int) -> float:
    # rank = floor(p*N/100) + 1 (1-based), clipped to N
    n = len(sorted_vals)
    idx = min(n - 1, (pct * n) // 100)
    return float(sorted_vals[idx])


def compute_stats(img: RasterImage) -> BandStats:
    v = np.asarray(img.values, dtype=np.float64)
    cols = v.reshape(-1, img.channels)
    p1, p99 = [], []
    for ch in range(img.channels):
        s = np.sort(cols[:, ch])
        p1.append(_nearest_rank(s, 1))
        p99.append(_nearest_rank(s, 99))
    return BandStats(
        min=cols.min(axis=0),
        max=cols.max(axis=0),
        mean=cols.mean(axis=0),
        std=cols.std(axis=0),
        p1=np.array(p1),
        p99=np.array(p99),
    )


def normalize(img: RasterImage, stats: BandStats) -> RasterImage:
    """Affine map [p1, p99] -> [-1, 1] per channel, clamped.

    A channel with p99 == p1 maps to zeros.
    """
    if stats.channels != img.channels:
        raise ValueError(f"stats have {stats.channels} channels, image has {img.channels}")
    v = np.asarray(img.values, dtype=np.float64)
    out = np.zeros_like(v)
    for ch in range(img.channels):
        lo, hi = stats.p1[ch], stats.p99[ch]
        if hi > lo:
            out[:, :, ch] = np.clip(2.0 * (v[:, :, ch] - lo) / (hi - lo) - 1.0, -1.0, 1.0)
    return RasterImage(out.astype(np.float32), band_names=img.band_names)


# ---------------------------------------------------------------------------
# PNG previews (display only)
# ---------------------------------------------------------------------------

def _stretch(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.round(255.0 * (a - lo) / (hi - lo)).astype(np.uint8)


def export_png(img, path, bands: Sequence[int] | None = None) -> None:
    """Min-max stretched 8-bit preview: grayscale for 1 band, RGB composite otherwise."""
    from PIL import Image

    values = img.values if isinstance(img, RasterImage) else np.asarray(img)
    if values.ndim == 2:
        values = values[:, :, None]
    if bands is None:
        bands = [0] if values.shape[2] < 3 else [0, 1, 2]
    if len(bands) == 1:
        Image.fromarray(_stretch(values[:, :, bands[0]]), mode="L").save(path)
    else:
        rgb = np.stack([_stretch(values[:, :, b]) for b in bands], axis=-1)
        Image.fromarray(rgb, mode="RGB").save(path)


def write_rgb_png(rgb: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path)
