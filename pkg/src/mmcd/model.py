"""Coupled convolutional autoencoders and their four loss terms."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import gradengine as ge
from .gradengine import Tensor

CODE_CHANNELS = 3
HIDDEN_CHANNELS = 100
DROPOUT_RATE = 0.2
LEAKY_SLOPE = 0.3


class TrainingDivergenceError(FloatingPointError):
    pass


class Network:
    """Three 3x3 conv layers: hidden, hidden, output (tanh)."""

    def __init__(self, cin: int, cout: int, *, hidden: int, rng: np.random.Generator,
                 dtype, dropout: float, name: str):
        self.name = name
        self.dropout = dropout
        self.layers = [
            ge.ConvLayer(cin, hidden, "leaky-relu", rng=rng, dtype=dtype, slope=LEAKY_SLOPE, name=f"{name}.0"),
            ge.ConvLayer(hidden, hidden, "leaky-relu", rng=rng, dtype=dtype, slope=LEAKY_SLOPE, name=f"{name}.1"),
            ge.ConvLayer(hidden, cout, "tanh", rng=rng, dtype=dtype, name=f"{name}.2"),
        ]

    @property
    def cin(self) -> int:
        return self.layers[0].cin

    @property
    def cout(self) -> int:
        return self.layers[-1].cout

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def __call__(self, x: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        if x.shape[-1] != self.cin:
            raise ValueError(f"{self.name}: expected {self.cin} input channels, got {x.shape[-1]}")
        h = x
        for layer in self.layers[:-1]:
            h = ge.dropout(layer(h), self.dropout, training, rng)
        return self.layers[-1](h)


@dataclass
class Transforms:
    x_tilde: Tensor
    y_tilde: Tensor
    x_hat: Tensor
    y_hat: Tensor
    x_dot: Tensor
    y_dot: Tensor
    z_x: Tensor
    z_y: Tensor


class CoupledModel:
    """Encoders E_X, E_Y and decoders D_X, D_Y sharing a 3-channel code space."""

    def __init__(self, channels_x: int, channels_y: int, *, seed: int = 0,
                 hidden: int = HIDDEN_CHANNELS, code_channels: int = CODE_CHANNELS,
                 dropout: float = DROPOUT_RATE, dtype=ge.DEFAULT_DTYPE):
        if channels_x < 1 or channels_y < 1:
            raise ValueError("channel counts must be >= 1")
        rng = np.random.default_rng(seed)
        kw = dict(hidden=hidden, rng=rng, dtype=dtype, dropout=dropout)
        self.encoder_x = Network(channels_x, code_channels, name="encoder_x", **kw)
        self.encoder_y = Network(channels_y, code_channels, name="encoder_y", **kw)
        self.decoder_x = Network(code_channels, channels_x, name="decoder_x", **kw)
        self.decoder_y = Network(code_channels, channels_y, name="decoder_y", **kw)
        self.channels_x = channels_x
        self.channels_y = channels_y
        self.hidden = hidden
        self.code_channels = code_channels
        self.dropout = dropout
        self.seed = seed

    @property
    def networks(self) -> list[Network]:
        return [self.encoder_x, self.encoder_y, self.decoder_x, self.decoder_y]

    def parameters(self) -> list[Tensor]:
        return [p for net in self.networks for p in net.parameters()]

    def encoder_parameters(self) -> list[Tensor]:
        return self.encoder_x.parameters() + self.encoder_y.parameters()

    def decoder_parameters(self) -> list[Tensor]:
        return self.decoder_x.parameters() + self.decoder_y.parameters()

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(p.name, p.data) for p in self.parameters()]

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in arrays:
                raise KeyError(f"checkpoint lacks parameter {p.name!r}")
            a = arrays[p.name]
            if a.shape != p.shape:
                raise ValueError(f"{p.name}: checkpoint shape {a.shape} != model shape {p.shape}")
            p.data = a.astype(p.dtype, copy=True)

    def config(self) -> dict:
        return {"channels_x": self.channels_x, "channels_y": self.channels_y, "hidden": self.hidden,
                "code_channels": self.code_channels, "dropout": self.dropout, "seed": self.seed}

    def receptive_radius(self, direction: str) -> int:
        """Pixels of context one output pixel depends on (one per stacked 3x3 layer)."""
        enc, dec = _DIRECTIONS[direction](self)
        return len(enc.layers) + (len(dec.layers) if isinstance(dec, Network) else 0)

    def translate(self, image: np.ndarray, direction: str) -> np.ndarray:
        """Dropout-free forward of one mapping on an (H, W, C) or (B, H, W, C) array."""
        enc, dec = _DIRECTIONS[direction](self)
        arr = np.asarray(image)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        dtype = self.encoder_x.layers[0].kernel.dtype
        with ge.no_grad():
            out = dec(enc(Tensor(arr.astype(dtype, copy=False)))).data
        return out[0] if single else out


_DIRECTIONS = {
    "x2y": lambda m: (m.encoder_x, m.decoder_y),
    "y2x": lambda m: (m.encoder_y, m.decoder_x),
    "reconstruct-x": lambda m: (m.encoder_x, m.decoder_x),
    "reconstruct-y": lambda m: (m.encoder_y, m.decoder_y),
    "code-x": lambda m: (m.encoder_x, lambda z: z),
    "code-y": lambda m: (m.encoder_y, lambda z: z),
}
DIRECTIONS = tuple(_DIRECTIONS)


def _as_batch(t) -> Tensor:
    t = ge.as_tensor(t)
    return ge.reshape(t, (1,) + t.shape) if t.data.ndim == 3 else t


def transform(model: CoupledModel, x, y, training: bool = False,
              rng: Optional[np.random.Generator] = None) -> Transforms:
    """All six mappings plus both codes for co-located patches x and y."""
    x, y = _as_batch(x), _as_batch(y)
    if x.shape[:3] != y.shape[:3]:
        raise ValueError(f"x and y patches differ in shape: {x.shape[:3]} vs {y.shape[:3]}")
    if x.shape[-1] != model.channels_x or y.shape[-1] != model.channels_y:
        raise ValueError(f"channel mismatch: model expects ({model.channels_x}, {model.channels_y}), "
                         f"got ({x.shape[-1]}, {y.shape[-1]})")
    z_x = model.encoder_x(x, training, rng)
    z_y = model.encoder_y(y, training, rng)
    x_tilde = model.decoder_x(z_x, training, rng)
    y_hat = model.decoder_y(z_x, training, rng)
    y_tilde = model.decoder_y(z_y, training, rng)
    x_hat = model.decoder_x(z_y, training, rng)
    x_dot = model.decoder_x(model.encoder_y(y_hat, training, rng), training, rng)
    y_dot = model.decoder_y(model.encoder_x(x_hat, training, rng), training, rng)
    return Transforms(x_tilde=x_tilde, y_tilde=y_tilde, x_hat=x_hat, y_hat=y_hat,
                      x_dot=x_dot, y_dot=y_dot, z_x=z_x, z_y=z_y)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def weighted_patch_distance(a, b, pi=None) -> Tensor:
    """(1/n) sum_i pi_i ||a_i - b_i||^2, averaged over the batch.

    ``a`` and ``b`` are (B, h, w, C) or (h, w, C); ``pi`` has h*w entries per
    patch (or is None for unit weights).
    """
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ValueError(f"patch shapes differ: {a.shape} vs {b.shape}")
    per_pixel = ge.sum(ge.square(ge.sub(a, b)), axis=-1)  # (B, h, w)
    if pi is not None:
        w = np.asarray(pi.data if isinstance(pi, Tensor) else pi, dtype=a.dtype)
        bsz, h, wd = per_pixel.shape
        if w.size not in (h * wd, bsz * h * wd):
            raise ValueError(f"pi has {w.size} weights, patch has {h * wd} pixels")
        if np.any(w < 0) or np.any(w > 1):
            raise ValueError("pi weights must lie in [0, 1]")
        w = w.reshape((-1, h, wd))
        per_pixel = ge.mul(per_pixel, w)
    return ge.mean(per_pixel)


def loss_reconstruction(x, x_tilde, y, y_tilde) -> Tensor:
    return ge.add(weighted_patch_distance(x_tilde, x), weighted_patch_distance(y_tilde, y))


def loss_cycle(x, x_dot, y, y_dot) -> Tensor:
    return ge.add(weighted_patch_distance(x_dot, x), weighted_patch_distance(y_dot, y))


def loss_translation(x, x_hat, y, y_hat, pi) -> Tensor:
    return ge.add(weighted_patch_distance(x_hat, x, pi), weighted_patch_distance(y_hat, y, pi))


def code_correlation(z_x, z_y) -> Tensor:
    """R[i, j] = (z_x[i] . z_y[j] + |Z|) / (2 |Z|) for (B, n, |Z|) or (n, |Z|) codes."""
    z_x, z_y = ge.as_tensor(z_x), ge.as_tensor(z_y)
    if z_x.shape[-1] != z_y.shape[-1]:
        raise ValueError(f"code channel mismatch: {z_x.shape[-1]} vs {z_y.shape[-1]}")
    nz = z_x.shape[-1]
    inner = ge.matmul(z_x, ge.transpose_last(z_y))
    scale = np.asarray(1.0 / (2 * nz), dtype=z_x.dtype)
    return ge.mul(ge.add(inner, np.asarray(nz, dtype=z_x.dtype)), scale)


def loss_code(r, s) -> Tensor:
    """Mean squared difference over all matrix entries (and the batch)."""
    r = ge.as_tensor(r)
    s_arr = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=r.dtype)
    if r.shape != s_arr.shape:
        raise ValueError(f"R and S differ in shape: {r.shape} vs {s_arr.shape}")
    return ge.mean(ge.square(ge.sub(r, s_arr)))


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 1.0
    lambda_c: float = 1.0
    lambda_t: float = 1.0
    lambda_z: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{k} must be finite and >= 0, got {v}")


@dataclass
class LossReport:
    l_r: float
    l_c: float
    l_t: float
    l_z: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def total_loss(l_r: float, l_c: float, l_t: float, l_z: float, w: LossWeights = LossWeights()) -> float:
    terms = {"l_r": l_r, "l_c": l_c, "l_t": l_t, "l_z": l_z}
    for k, v in terms.items():
        if not math.isfinite(v):
            raise TrainingDivergenceError(f"loss term {k} is not finite ({v})")
    return w.lambda_r * l_r + w.lambda_c * l_c + w.lambda_t * l_t + w.lambda_z * l_z
