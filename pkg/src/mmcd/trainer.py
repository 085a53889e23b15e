"""Patch sampling, the training loop, the self-supervised change prior and tiled inference."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import gradengine as ge
from .affinity import DegenerateDataError, crossmodal_distance, patch_affinity, AffinityMatrix, similarity_target
from .changemap import difference_image
from .raster import RasterImage, save_raster
from .model import (CoupledModel, LossReport, LossWeights, TrainingDivergenceError, code_correlation,
                    loss_code, loss_cycle, loss_reconstruction, loss_translation, total_loss, transform)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batches_per_epoch: int = 10
    batch_size: int = 10
    patch_size: int = 100
    affinity_crop: int = 20
    lr_base: float = 1e-4
    lr_decay_main: float = 0.96
    lr_decay_code: float = 0.9
    lr_decay_every: int = 1
    prior_update_epochs: tuple[int, ...] = (25, 50, 75)
    lambda_r: float = 1.0
    lambda_c: float = 1.0
    lambda_t: float = 1.0
    lambda_z: float = 1.0
    seed: int = 0
    hidden_channels: int = 100
    dropout: float = 0.2
    amsgrad: bool = False
    tile: int = 256
    tile_overlap: int = 16

    def __post_init__(self):
        self.prior_update_epochs = tuple(sorted(int(e) for e in self.prior_update_epochs))
        for name in ("batches_per_epoch", "batch_size", "patch_size", "affinity_crop", "hidden_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.affinity_crop > self.patch_size:
            raise ValueError("affinity_crop must not exceed patch_size")
        if self.affinity_crop < 2:
            raise ValueError("affinity_crop must be >= 2 (at least two pixels per side)")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        self.weights  # validates the lambdas
        self.main_schedule
        self.code_schedule
        if self.tile < 3 or not 0 <= self.tile_overlap < self.tile / 2:
            raise ValueError("need tile >= 3 and 0 <= tile_overlap < tile / 2")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_r, self.lambda_c, self.lambda_t, self.lambda_z)

    @property
    def main_schedule(self) -> ge.LrSchedule:
        return ge.LrSchedule(self.lr_base, self.lr_decay_main, self.lr_decay_every)

    @property
    def code_schedule(self) -> ge.LrSchedule:
        return ge.LrSchedule(self.lr_base, self.lr_decay_code, self.lr_decay_every)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prior_update_epochs"] = list(self.prior_update_epochs)
        return d


@dataclass
class Batch:
    x: np.ndarray        # (B, p, p, |X|)
    y: np.ndarray        # (B, p, p, |Y|)
    pi: np.ndarray       # (B, p*p)
    corners: list[tuple[int, int]]


@dataclass
class TrainState:
    model: CoupledModel
    main_opt: ge.AdamState
    code_opt: ge.AdamState
    rng: np.random.Generator
    epoch: int = 0


@dataclass
class FitResult:
    model: CoupledModel
    prior: np.ndarray
    history: list[dict]
    prior_snapshots: list[np.ndarray] = field(default_factory=list)
    state: Optional[TrainState] = None


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def augment(x: np.ndarray, y: np.ndarray, pi_grid: np.ndarray, rng: np.random.Generator,
            op: Optional[int] = None):
    """Apply one of the 8 dihedral transforms identically to x, y and the prior grid."""
    if x.shape[0] != x.shape[1]:
        raise ValueError(f"augment needs square patches, got {x.shape[:2]}")
    if op is None:
        op = int(rng.integers(8))
    k, flip = op % 4, op >= 4

    def f(a):
        a = np.rot90(a, k, axes=(0, 1))
        return np.flipud(a) if flip else a

    return f(x), f(y), f(pi_grid)


def sample_batch(rng: np.random.Generator, images: tuple[np.ndarray, np.ndarray], prior: np.ndarray,
                 cfg: TrainConfig) -> Batch:
    x_img, y_img = images
    h, w = x_img.shape[:2]
    p = cfg.patch_size
    if p > min(h, w):
        raise ValueError(f"patch_size {p} exceeds image size {h}x{w}")
    xs, ys, pis, corners = [], [], [], []
    for _ in range(cfg.batch_size):
        r = int(rng.integers(0, h - p + 1))
        c = int(rng.integers(0, w - p + 1))
        xa, ya, pa = augment(x_img[r:r + p, c:c + p], y_img[r:r + p, c:c + p], prior[r:r + p, c:c + p], rng)
        xs.append(xa)
        ys.append(ya)
        pis.append(pa.reshape(-1))
        corners.append((r, c))
    return Batch(np.stack(xs), np.stack(ys), np.stack(pis), corners)


def inner_crop(p: int, crop: int) -> slice:
    start = (p - crop) // 2
    return slice(start, start + crop)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _patch_affinity_or_flat(patch: np.ndarray) -> AffinityMatrix:
    try:
        return patch_affinity(patch)
    except DegenerateDataError:
        # every pixel identical: all pairs maximally similar
        n = patch.shape[0]
        return AffinityMatrix(np.ones((n, n)), sigma=float("nan"))


def similarity_for_batch(x: np.ndarray, y: np.ndarray, crop: int) -> np.ndarray:
    """Target S (B, n, n) from the centred crop of each co-located patch pair."""
    sl = inner_crop(x.shape[1], crop)
    ds = []
    for xb, yb in zip(x, y):
        ax = _patch_affinity_or_flat(xb[sl, sl].reshape(crop * crop, -1))
        ay = _patch_affinity_or_flat(yb[sl, sl].reshape(crop * crop, -1))
        ds.append(crossmodal_distance(ax, ay))
    return similarity_target(np.stack(ds), stretch=True).similarities


def new_train_state(model: CoupledModel, cfg: TrainConfig) -> TrainState:
    return TrainState(model=model, main_opt=ge.AdamState(amsgrad=cfg.amsgrad),
                      code_opt=ge.AdamState(amsgrad=cfg.amsgrad), rng=np.random.default_rng(cfg.seed))


def _grads(params: Sequence[ge.Tensor]) -> list[Optional[np.ndarray]]:
    return [p.grad for p in params]


def train_batch(state: TrainState, batch: Batch, cfg: TrainConfig, lr_main: float, lr_code: float) -> LossReport:
    model = state.model
    w = cfg.weights
    dtype = model.encoder_x.layers[0].kernel.dtype
    x = ge.Tensor(batch.x.astype(dtype, copy=False))
    y = ge.Tensor(batch.y.astype(dtype, copy=False))
    t = transform(model, x, y, training=True, rng=state.rng)

    l_r = loss_reconstruction(x, t.x_tilde, y, t.y_tilde)
    l_c = loss_cycle(x, t.x_dot, y, t.y_dot)
    l_t = loss_translation(x, t.x_hat, y, t.y_hat, batch.pi)

    crop = cfg.affinity_crop
    sl = inner_crop(cfg.patch_size, crop)
    s = similarity_for_batch(batch.x, batch.y, crop)
    zx = ge.reshape(t.z_x[:, sl, sl, :], (len(batch.corners), crop * crop, model.code_channels))
    zy = ge.reshape(t.z_y[:, sl, sl, :], (len(batch.corners), crop * crop, model.code_channels))
    l_z = loss_code(code_correlation(zx, zy), s)

    values = [float(v.data) for v in (l_r, l_c, l_t, l_z)]
    total = total_loss(*values, w)

    params = model.parameters()
    enc_params = model.encoder_parameters()
    ge.zero_grads(params)
    main = ge.add(ge.add(ge.mul(l_r, np.asarray(w.lambda_r, dtype)), ge.mul(l_c, np.asarray(w.lambda_c, dtype))),
                  ge.mul(l_t, np.asarray(w.lambda_t, dtype)))
    ge.backward(main)
    main_grads = _grads(params)
    ge.zero_grads(params)
    ge.backward(ge.mul(l_z, np.asarray(w.lambda_z, dtype)))
    code_grads = _grads(enc_params)
    ge.zero_grads(params)

    ge.adam_step(params, main_grads, state.main_opt, lr_main)
    ge.adam_step(enc_params, code_grads, state.code_opt, lr_code)
    return LossReport(*values, total)


def train_epoch(state: TrainState, images: tuple[np.ndarray, np.ndarray], prior: np.ndarray,
                cfg: TrainConfig, epoch: int) -> LossReport:
    """One epoch of ``batches_per_epoch`` batches; returns the mean of each loss term."""
    lr_main = ge.schedule_rate(cfg.main_schedule, epoch)
    lr_code = ge.schedule_rate(cfg.code_schedule, epoch)
    reports = []
    for b in range(cfg.batches_per_epoch):
        batch = sample_batch(state.rng, images, prior, cfg)
        try:
            rep = train_batch(state, batch, cfg, lr_main, lr_code)
        except (TrainingDivergenceError, ge.NonFiniteGradientError) as exc:
            raise TrainingDivergenceError(f"epoch {epoch + 1}, batch {b + 1}: {exc}") from exc
        reports.append(rep)
    means = [float(np.mean([getattr(r, k) for r in reports])) for k in ("l_r", "l_c", "l_t", "l_z", "total")]
    state.epoch = epoch + 1
    return LossReport(*means)


# ---------------------------------------------------------------------------
# inference and prior
# ---------------------------------------------------------------------------

def _tile_starts(size: int, tile: int, overlap: int) -> list[int]:
    if tile >= size:
        return [0]
    step = tile - overlap
    starts = list(range(0, size - tile + 1, step))
    if starts[-1] != size - tile:
        starts.append(size - tile)
    return starts


def infer_full(model: CoupledModel, image: np.ndarray, direction: str, tile: int = 256,
               overlap: int = 16) -> np.ndarray:
    """Whole-image mapping computed tile by tile without dropout.

    Each tile contributes only its core: a margin is trimmed on every side
    that faces another tile, and cores that still overlap are averaged with
    uniform weights. The margin is at least the receptive radius of the
    mapping, so zero padding at tile edges never reaches a kept pixel and
    the result matches a single whole-image pass. ``overlap`` is raised to
    twice that radius when it is smaller.
    """
    if tile < 3 or not 0 <= overlap < tile / 2:
        raise ValueError("need tile >= 3 and 0 <= overlap < tile / 2")
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError("image must be H x W x C")
    expected = {"x2y": model.channels_x, "reconstruct-x": model.channels_x, "code-x": model.channels_x,
                "y2x": model.channels_y, "reconstruct-y": model.channels_y, "code-y": model.channels_y}
    if direction not in expected:
        raise ValueError(f"unknown direction {direction!r}")
    if image.shape[2] != expected[direction]:
        raise ValueError(f"{direction} expects {expected[direction]} channels, image has {image.shape[2]}")
    h, w = image.shape[:2]
    margin = max((overlap + 1) // 2, model.receptive_radius(direction))
    overlap = 2 * margin
    tile = max(tile, overlap + 1)
    if tile >= h and tile >= w:
        return model.translate(image, direction).astype(np.float64)
    acc = None
    weight = np.zeros((h, w))
    rows, cols = _tile_starts(h, tile, overlap), _tile_starts(w, tile, overlap)
    for r in rows:
        for c in cols:
            out = model.translate(image[r:r + tile, c:c + tile], direction)
            th, tw = out.shape[:2]
            if acc is None:
                acc = np.zeros((h, w, out.shape[2]))
            top = 0 if r == 0 else margin
            left = 0 if c == 0 else margin
            bottom = th if r + th >= h else th - margin
            right = tw if c + tw >= w else tw - margin
            acc[r + top:r + bottom, c + left:c + right] += out[top:bottom, left:right]
            weight[r + top:r + bottom, c + left:c + right] += 1.0
    return acc / weight[:, :, None]


def full_difference(model: CoupledModel, images: tuple[np.ndarray, np.ndarray], tile: int = 256,
                    overlap: int = 16, root: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(delta scaled to [0,1], x_hat, y_hat) over the whole image."""
    x_img, y_img = images
    y_hat = infer_full(model, x_img, "x2y", tile, overlap)
    x_hat = infer_full(model, y_img, "y2x", tile, overlap)
    return difference_image(x_img, x_hat, y_img, y_hat, root=root), x_hat, y_hat


def update_prior(model: CoupledModel, images: tuple[np.ndarray, np.ndarray], cfg: TrainConfig) -> np.ndarray:
    """Prior of being unchanged, 1 - (min-max scaled raw difference image)."""
    delta, _, _ = full_difference(model, images, cfg.tile, cfg.tile_overlap)
    if float(delta.max()) <= float(delta.min()):
        return np.ones(delta.shape)
    return 1.0 - delta


# ---------------------------------------------------------------------------
# full protocol
# ---------------------------------------------------------------------------

def history_line(epoch: int, report: LossReport, lr_main: float, lr_code: float) -> dict:
    return {"epoch": epoch, "l_r": report.l_r, "l_c": report.l_c, "l_t": report.l_t, "l_z": report.l_z,
            "total": report.total, "lr_main": lr_main, "lr_code": lr_code}


def build_model(channels_x: int, channels_y: int, cfg: TrainConfig, dtype=ge.DEFAULT_DTYPE) -> CoupledModel:
    init_seed = int(np.random.SeedSequence([cfg.seed, 1]).generate_state(1)[0])
    return CoupledModel(channels_x, channels_y, seed=init_seed, hidden=cfg.hidden_channels,
                        dropout=cfg.dropout, dtype=dtype)


def fit(images: tuple[np.ndarray, np.ndarray], cfg: TrainConfig, *,
        checkpoint_dir: Optional[Path] = None, history_path: Optional[Path] = None,
        on_epoch: Optional[Callable[[dict], None]] = None) -> FitResult:
    """Train for ``cfg.epochs`` epochs, refreshing the prior after each listed epoch."""
    x_img, y_img = (np.asarray(a, dtype=np.float32) for a in images)
    if x_img.ndim != 3 or y_img.ndim != 3 or x_img.shape[:2] != y_img.shape[:2]:
        raise ValueError(f"images must be co-registered H x W x C arrays, got {x_img.shape} and {y_img.shape}")
    if cfg.patch_size > min(x_img.shape[:2]):
        raise ValueError(f"patch_size {cfg.patch_size} exceeds image size {x_img.shape[:2]}")
    model = build_model(x_img.shape[2], y_img.shape[2], cfg)
    state = new_train_state(model, cfg)
    prior = np.zeros(x_img.shape[:2])
    history: list[dict] = []
    snapshots: list[np.ndarray] = []
    hist_fh = open(history_path, "w") if history_path is not None else None
    try:
        for epoch in range(cfg.epochs):
            rep = train_epoch(state, (x_img, y_img), prior, cfg, epoch)
            line = history_line(epoch + 1, rep, ge.schedule_rate(cfg.main_schedule, epoch),
                                ge.schedule_rate(cfg.code_schedule, epoch))
            history.append(line)
            log.info("epoch %d  total %.5f  (r %.4f c %.4f t %.4f z %.4f)", epoch + 1, rep.total,
                     rep.l_r, rep.l_c, rep.l_t, rep.l_z)
            if hist_fh is not None:
                hist_fh.write(json.dumps(line) + "\n")
                hist_fh.flush()
            if on_epoch is not None:
                on_epoch(line)
            if epoch + 1 in cfg.prior_update_epochs:
                prior = update_prior(model, (x_img, y_img), cfg)
                snapshots.append(prior.copy())
                log.info("prior updated after epoch %d (mean %.3f)", epoch + 1, prior.mean())
                if checkpoint_dir is not None:
                    save_checkpoint(Path(checkpoint_dir) / f"checkpoint_epoch{epoch + 1:03d}.ckpt", state, cfg)
                    save_raster(RasterImage(prior.astype(np.float32), band_names=["prior_unchanged"]),
                                Path(checkpoint_dir) / f"prior_epoch{epoch + 1:03d}.mmcd")
    finally:
        if hist_fh is not None:
            hist_fh.close()
    return FitResult(model=model, prior=prior, history=history, prior_snapshots=snapshots, state=state)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, state: TrainState, cfg: Optional[TrainConfig] = None) -> None:
    model = state.model
    arrays = list(model.named_arrays())
    manifest = {
        "format": "MMCDCKPT1",
        "model": model.config(),
        "epoch": state.epoch,
        "rng_state": state.rng.bit_generator.state,
        "train_config": cfg.to_dict() if cfg is not None else None,
        "adam": {},
    }
    for tag, opt, params in (("main", state.main_opt, model.parameters()),
                             ("code", state.code_opt, model.encoder_parameters())):
        manifest["adam"][tag] = {"t": opt.t, "beta1": opt.beta1, "beta2": opt.beta2,
                                 "epsilon": opt.epsilon, "amsgrad": opt.amsgrad}
        if opt.m:
            for p, m, v in zip(params, opt.m, opt.v):
                arrays.append((f"adam.{tag}.m.{p.name}", m))
                arrays.append((f"adam.{tag}.v.{p.name}", v))
            for p, vm in zip(params, opt.v_max):
                arrays.append((f"adam.{tag}.vmax.{p.name}", vm))
    ge.write_checkpoint(path, manifest, arrays)


def load_checkpoint(path) -> tuple[TrainState, dict]:
    manifest, arrays = ge.read_checkpoint(path)
    mc = manifest["model"]
    model = CoupledModel(mc["channels_x"], mc["channels_y"], seed=mc["seed"], hidden=mc["hidden"],
                         code_channels=mc["code_channels"], dropout=mc["dropout"])
    model.load_arrays(arrays)
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng_state"]
    state = TrainState(model=model, main_opt=ge.AdamState(), code_opt=ge.AdamState(), rng=rng,
                       epoch=manifest.get("epoch", 0))
    for tag, opt, params in (("main", state.main_opt, model.parameters()),
                             ("code", state.code_opt, model.encoder_parameters())):
        meta = manifest["adam"][tag]
        opt.t, opt.beta1, opt.beta2 = meta["t"], meta["beta1"], meta["beta2"]
        opt.epsilon, opt.amsgrad = meta["epsilon"], meta["amsgrad"]
        if opt.t:
            opt.m = [arrays[f"adam.{tag}.m.{p.name}"].copy() for p in params]
            opt.v = [arrays[f"adam.{tag}.v.{p.name}"].copy() for p in params]
            if opt.amsgrad:
                opt.v_max = [arrays[f"adam.{tag}.vmax.{p.name}"].copy() for p in params]
    return state, manifest
