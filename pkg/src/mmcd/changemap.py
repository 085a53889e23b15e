"""Difference image, spatial smoothing, Otsu thresholding and accuracy scores."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

# Confusion-map colours: TP white, TN black, FP green, FN red.
CONFUSION_COLOURS = {
    "tp": (255, 255, 255),
    "tn": (0, 0, 0),
    "fp": (0, 255, 0),
    "fn": (255, 0, 0),
}


class DegenerateHistogramError(ValueError):
    """All values fall in one histogram bin; no threshold separates anything."""


def _hwc(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[:, :, None] if a.ndim == 2 else a


def minmax_scale(a: np.ndarray) -> np.ndarray:
    """Global min-max scaling to [0, 1]; a constant array maps to zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def difference_image(x, x_hat, y, y_hat, w_x: Optional[float] = None, w_y: Optional[float] = None,
                     root: bool = False, scale: bool = True) -> np.ndarray:
    """Per-pixel w_x ||x - x_hat||^2 + w_y ||y - y_hat||^2, min-max scaled to [0, 1].

    Defaults w_x = 1/|X| and w_y = 1/|Y|. ``root`` uses unsquared norms.
    Returns an (H, W) array.
    """
    x, x_hat, y, y_hat = _hwc(x), _hwc(x_hat), _hwc(y), _hwc(y_hat)
    if x.shape != x_hat.shape or y.shape != y_hat.shape or x.shape[:2] != y.shape[:2]:
        raise ValueError(f"shape mismatch: x {x.shape}, x_hat {x_hat.shape}, y {y.shape}, y_hat {y_hat.shape}")
    w_x = 1.0 / x.shape[2] if w_x is None else w_x
    w_y = 1.0 / y.shape[2] if w_y is None else w_y
    if w_x < 0 or w_y < 0:
        raise ValueError("weights must be non-negative")
    dx = ((x - x_hat) ** 2).sum(axis=2)
    dy = ((y - y_hat) ** 2).sum(axis=2)
    if root:
        dx, dy = np.sqrt(dx), np.sqrt(dy)
    delta = w_x * dx + w_y * dy
    return minmax_scale(delta) if scale else delta


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_filter(delta, sigma_s: float = 2.0) -> np.ndarray:
    """Separable Gaussian smoothing with reflected borders, clamped to [0, 1].

    Stand-in for dense-CRF regularisation; sigma_s = 0 returns the input.
    """
    if sigma_s < 0:
        raise ValueError("sigma_s must be >= 0")
    d = np.asarray(delta, dtype=np.float64)
    if sigma_s == 0:
        return d.copy()
    k = gaussian_kernel(sigma_s)
    r = len(k) // 2
    out = d
    for axis in (0, 1):
        pad = [(0, 0)] * d.ndim
        pad[axis] = (r, r)
        p = np.pad(out, pad, mode="symmetric")
        acc = np.zeros_like(out)
        n = out.shape[axis]
        for i, wgt in enumerate(k):
            acc += wgt * np.take(p, np.arange(i, i + n), axis=axis)
        out = acc
    return np.clip(out, 0.0, 1.0)


def histogram_bins(values, bins: int) -> np.ndarray:
    """Bin index of each value on equal-width bins over [0, 1] (1.0 goes to the last bin)."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.searchsorted(edges, np.asarray(values, dtype=np.float64).ravel(), side="right") - 1
    return np.clip(idx, 0, bins - 1)


def _between_class(n0: int, s0: int, n1: int, s1: int) -> Fraction:
    # bin centres are (2k+1)/(2*bins); the common scale factor is dropped
    if n0 == 0 or n1 == 0:
        return Fraction(0)
    diff = Fraction(s1, n1) - Fraction(s0, n0)
    return Fraction(n0 * n1) * diff * diff


def otsu_from_counts(counts) -> int:
    """Index k in 1..bins-1 maximising between-class variance of bins [0,k) vs [k,bins).

    Exact rational arithmetic; ties go to the smallest k.
    """
    counts = [int(c) for c in counts]
    bins = len(counts)
    if bins < 2:
        raise ValueError("need at least two bins")
    if sum(1 for c in counts if c > 0) < 2:
        raise DegenerateHistogramError("histogram has fewer than two populated bins")
    total_n = sum(counts)
    total_s = sum(c * (2 * k + 1) for k, c in enumerate(counts))
    best_k, best = 1, Fraction(-1)
    n0 = s0 = 0
    for k in range(1, bins):
        n0 += counts[k - 1]
        s0 += counts[k - 1] * (2 * k - 1)
        score = _between_class(n0, s0, total_n - n0, total_s - s0)
        if score > best:
            best_k, best = k, score
    return best_k


def otsu_threshold(delta, bins: int = 256) -> float:
    """Otsu threshold on a [0, 1] image, returned as the winning bin edge."""
    d = np.asarray(delta, dtype=np.float64)
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if d.size and (d.min() < 0 or d.max() > 1):
        raise ValueError("otsu_threshold expects values in [0, 1]")
    counts = np.bincount(histogram_bins(d, bins), minlength=bins)
    k = otsu_from_counts(counts)
    return float(np.linspace(0.0, 1.0, bins + 1)[k])


def binarize(delta, threshold: float) -> np.ndarray:
    return (np.asarray(delta) >= threshold).astype(np.uint8)


@dataclass
class Score:
    tp: int
    tn: int
    fp: int
    fn: int
    oa: float
    kappa: float
    p_e: float
    degenerate_kappa: bool
    kappa_variant: str = "paper"
    confusion_map: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def report(self) -> dict:
        return {"TP": self.tp, "TN": self.tn, "FP": self.fp, "FN": self.fn,
                "OA": self.oa, "kappa": self.kappa, "p_e": self.p_e,
                "degenerate_kappa": self.degenerate_kappa, "kappa_variant": self.kappa_variant}


def kappa_from_counts(tp: int, tn: int, fp: int, fn: int, standard: bool = False) -> tuple[float, float, float, bool]:
    """(OA, p_e, kappa, degenerate) from confusion counts.

    The default chance-agreement term pairs (TP+FP)(FN+TN) and (TP+FN)(FP+TN);
    ``standard=True`` uses the textbook (TP+FP)(TP+FN) + (FN+TN)(FP+TN).
    """
    n = tp + tn + fp + fn
    if n == 0:
        raise ValueError("empty confusion matrix")
    oa = (tp + tn) / n
    if standard:
        p_e = ((tp + fp) / n) * ((tp + fn) / n) + ((fn + tn) / n) * ((fp + tn) / n)
    else:
        p_e = ((tp + fp) / n) * ((fn + tn) / n) + ((tp + fn) / n) * ((fp + tn) / n)
    if p_e >= 1.0:
        return oa, p_e, 0.0, True
    return oa, p_e, (oa - p_e) / (1.0 - p_e), False


def _check_binary(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{name} is not binary (values other than 0/1 present)")
    return a.astype(bool)


def score(change_map, gt, standard_kappa: bool = False) -> Score:
    m = _check_binary(change_map, "change map")
    g = _check_binary(gt, "ground truth")
    if m.shape != g.shape:
        raise ValueError(f"shape mismatch: map {m.shape} vs ground truth {g.shape}")
    tp = int(np.sum(m & g))
    tn = int(np.sum(~m & ~g))
    fp = int(np.sum(m & ~g))
    fn = int(np.sum(~m & g))
    oa, p_e, kappa, degenerate = kappa_from_counts(tp, tn, fp, fn, standard=standard_kappa)
    rgb = np.zeros(m.shape + (3,), dtype=np.uint8)
    rgb[m & g] = CONFUSION_COLOURS["tp"]
    rgb[m & ~g] = CONFUSION_COLOURS["fp"]
    rgb[~m & g] = CONFUSION_COLOURS["fn"]
    return Score(tp=tp, tn=tn, fp=fp, fn=fn, oa=oa, kappa=kappa, p_e=p_e, degenerate_kappa=degenerate,
                 kappa_variant="standard" if standard_kappa else "paper", confusion_map=rgb)


@dataclass
class ChangeResult:
    delta: np.ndarray
    delta_filtered: np.ndarray
    threshold: float
    change_map: np.ndarray
    score: Optional[Score] = None


def detect_changes(delta, sigma_s: float = 2.0, bins: int = 256, gt=None,
                   standard_kappa: bool = False) -> ChangeResult:
    """Filter -> Otsu -> binarize (-> score) on an already scaled difference image."""
    filtered = gaussian_filter(delta, sigma_s)
    try:
        thr = otsu_threshold(filtered, bins)
    except DegenerateHistogramError:
        # nothing to separate: report no change
        thr = math.inf
    cmap = binarize(filtered, thr)
    sc = score(cmap, gt, standard_kappa) if gt is not None else None
    return ChangeResult(delta=np.asarray(delta), delta_filtered=filtered, threshold=thr,
                        change_map=cmap, score=sc)
