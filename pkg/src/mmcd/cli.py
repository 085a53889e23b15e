"""Command-line pipeline: synth -> (preprocess) -> train -> detect -> evaluate.

Every step reads and writes files only, so any step can be rerun on its own.
Logs go to stderr; metrics go to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import changemap, config, raster, synthgen, trainer
from .gradengine import CheckpointError
from .model import TrainingDivergenceError

log = logging.getLogger("mmcd")

SHARED = ("seed", "out_dir")
SYNTH = ("size", "height", "width", "num_classes", "channels_x", "channels_y", "change_fraction",
         "noise_std_x", "noise_std_y", "smoothness", "speckle_looks")
TRAIN = ("x", "y", "epochs", "batches_per_epoch", "batch_size", "patch_size", "affinity_crop", "lr_base",
         "lr_decay_main", "lr_decay_code", "lr_decay_every", "prior_update_epochs", "lambda_r", "lambda_c",
         "lambda_t", "lambda_z", "hidden_channels", "dropout", "amsgrad", "tile", "tile_overlap")
DETECT = ("x", "y", "checkpoint", "filter_sigma", "bins", "root", "w_x", "w_y", "tile", "tile_overlap")
EVALUATE = ("map", "gt", "kappa_standard")
PREPROCESS = ("input", "output", "log", "epsilon", "normalize")


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _write_raster(values: np.ndarray, path: Path, band_names=None) -> None:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 2:
        v = v[:, :, None]
    if not np.all(np.isfinite(v)):
        raise CliError(f"refusing to write non-finite values to {path}")
    raster.save_raster(raster.RasterImage(v.astype(np.float32), band_names=band_names), path)


def _preview(values: np.ndarray, path: Path) -> None:
    raster.export_png(np.asarray(values), path)


def _require(cfg: config.RunConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) in (None, "")]
    if missing:
        raise CliError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _load_pair(cfg: config.RunConfig) -> tuple[np.ndarray, np.ndarray]:
    _require(cfg, "x", "y")
    x = raster.load_raster(cfg.x).values
    y = raster.load_raster(cfg.y).values
    if x.shape[:2] != y.shape[:2]:
        raise CliError(f"inputs are not co-registered: {x.shape[:2]} vs {y.shape[:2]}")
    for name, img in (("x", x), ("y", y)):
        if img.min() < -1.0 or img.max() > 1.0:
            raise CliError(f"{name} is not normalised to [-1, 1]; run `preprocess` first")
    return x, y


def _out_dir(cfg: config.RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: config.RunConfig, args) -> int:
    sc = cfg.synth_config()
    pair = synthgen.generate_pair(sc)
    out = _out_dir(cfg)
    raster.save_raster(pair.x, out / "x.mmcd")
    raster.save_raster(pair.y, out / "y.mmcd")
    _write_raster(pair.gt.astype(np.float32), out / "gt.mmcd", band_names=["changed"])
    manifest = {"generator": "mmcd.synthgen", "config": sc.to_dict(), "attempts": pair.attempts,
                "files": {"x": "x.mmcd", "y": "y.mmcd", "gt": "gt.mmcd"},
                "change_fraction_observed": float(pair.gt.mean())}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _preview(pair.x.values, out / "x.png")
    _preview(pair.y.values, out / "y.png")
    _preview(pair.gt, out / "gt.png")
    log.info("wrote synthetic pair %dx%d (change fraction %.4f) to %s", sc.height, sc.width, pair.gt.mean(), out)
    return 0


def cmd_preprocess(cfg: config.RunConfig, args) -> int:
    _require(cfg, "input", "output")
    img = raster.load_raster(cfg.input)
    if cfg.log:
        img = raster.log_transform(img, cfg.epsilon)
    stats = raster.compute_stats(img)
    if cfg.normalize:
        img = raster.normalize(img, stats)
    raster.save_raster(img, cfg.output)
    Path(str(cfg.output) + ".stats.json").write_text(json.dumps(stats.to_dict(), indent=2) + "\n")
    return 0


def cmd_train(cfg: config.RunConfig, args) -> int:
    tc = cfg.train_config()
    if args.print_config:
        print(json.dumps(tc.to_dict(), indent=2, sort_keys=True))
        return 0
    x, y = _load_pair(cfg)
    out = _out_dir(cfg)
    (out / "train_config.json").write_text(json.dumps(tc.to_dict(), indent=2, sort_keys=True) + "\n")
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    result = trainer.fit((x, y), tc, checkpoint_dir=ckpt_dir, history_path=out / "history.jsonl")
    trainer.save_checkpoint(out / "model.ckpt", result.state, tc)
    _write_raster(result.prior, out / "prior.mmcd", band_names=["prior_unchanged"])
    _preview(result.prior, out / "prior.png")
    log.info("training finished after %d epochs; checkpoint %s", tc.epochs, out / "model.ckpt")
    return 0


def cmd_detect(cfg: config.RunConfig, args) -> int:
    _require(cfg, "checkpoint")
    x, y = _load_pair(cfg)
    try:
        state, _ = trainer.load_checkpoint(cfg.checkpoint)
    except (CheckpointError, KeyError, ValueError) as exc:
        raise CliError(f"cannot load checkpoint {cfg.checkpoint}: {exc}") from exc
    model = state.model
    if (model.channels_x, model.channels_y) != (x.shape[2], y.shape[2]):
        raise CliError(f"checkpoint expects ({model.channels_x}, {model.channels_y}) channels, "
                       f"inputs have ({x.shape[2]}, {y.shape[2]})")
    out = _out_dir(cfg)
    run = lambda img, d: trainer.infer_full(model, img, d, cfg.tile, cfg.tile_overlap)  # noqa: E731
    products = {
        "y_hat": run(x, "x2y"),
        "x_hat": run(y, "y2x"),
        "x_tilde": run(x, "reconstruct-x"),
        "y_tilde": run(y, "reconstruct-y"),
        "z_x": run(x, "code-x"),
        "z_y": run(y, "code-y"),
    }
    delta = changemap.difference_image(x, products["x_hat"], y, products["y_hat"],
                                       w_x=cfg.w_x, w_y=cfg.w_y, root=cfg.root)
    result = changemap.detect_changes(delta, sigma_s=cfg.filter_sigma, bins=cfg.bins)
    for name, arr in products.items():
        _write_raster(arr, out / f"{name}.mmcd")
        _preview(arr, out / f"{name}.png")
    _write_raster(result.delta, out / "delta.mmcd", band_names=["delta"])
    _write_raster(result.delta_filtered, out / "delta_filtered.mmcd", band_names=["delta_filtered"])
    _write_raster(result.change_map.astype(np.float32), out / "change_map.mmcd", band_names=["changed"])
    for name, arr in (("delta", result.delta), ("delta_filtered", result.delta_filtered),
                      ("change_map", result.change_map)):
        _preview(arr, out / f"{name}.png")
    meta = {"threshold": result.threshold if np.isfinite(result.threshold) else None,
            "filter_sigma": cfg.filter_sigma, "bins": cfg.bins, "root": cfg.root,
            "changed_fraction": float(result.change_map.mean())}
    (out / "detect.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("threshold %.4f, %.2f%% of pixels flagged", result.threshold, 100 * result.change_map.mean())
    return 0


def cmd_evaluate(cfg: config.RunConfig, args) -> int:
    _require(cfg, "map", "gt")
    cmap = raster.load_raster(cfg.map).values
    gt = raster.load_raster(cfg.gt).values
    if cmap.shape != gt.shape:
        raise CliError(f"shape mismatch: map {cmap.shape} vs ground truth {gt.shape}")
    sc = changemap.score(cmap, gt, standard_kappa=cfg.kappa_standard)
    report = sc.report()
    sidecar = Path(cfg.map).with_name("detect.json")
    report["threshold"] = json.loads(sidecar.read_text()).get("threshold") if sidecar.exists() else None
    out = _out_dir(cfg)
    (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    raster.write_rgb_png(sc.confusion_map, out / "confusion.png")
    if args.json:
        print(json.dumps(report, sort_keys=True))
    else:
        for k in ("threshold", "TP", "TN", "FP", "FN", "OA", "kappa", "p_e", "degenerate_kappa", "kappa_variant"):
            print(f"{k}: {report[k]}")
    return 0


COMMANDS = {
    "synth": (cmd_synth, SYNTH, "generate a synthetic heterogeneous pair with ground truth"),
    "preprocess": (cmd_preprocess, PREPROCESS, "log-transform and/or normalise a raster to [-1, 1]"),
    "train": (cmd_train, TRAIN, "train the coupled autoencoders"),
    "detect": (cmd_detect, DETECT, "compute translations, difference image and change map"),
    "evaluate": (cmd_evaluate, EVALUATE, "score a change map against ground truth"),
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_field(p: argparse.ArgumentParser, name: str) -> None:
    flag = "--" + name.replace("_", "-")
    default = config._FIELD_TYPES[name].default
    if isinstance(default, bool):
        p.add_argument(flag, dest=name, action="store_const", const=True, default=argparse.SUPPRESS)
        p.add_argument("--no-" + name.replace("_", "-"), dest=name, action="store_const", const=False,
                       default=argparse.SUPPRESS)
    elif name == "prior_update_epochs":
        p.add_argument(flag, dest=name, nargs="+", default=argparse.SUPPRESS, metavar="EPOCH")
    else:
        p.add_argument(flag, dest=name, default=argparse.SUPPRESS, metavar=name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmcd", description="Unsupervised heterogeneous change detection "
                                     "with code-aligned autoencoders.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, group, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file with configuration values")
        for field_name in SHARED + group:
            _add_field(p, field_name)
        if name == "train":
            p.add_argument("--print-config", action="store_true", help="print the resolved training config and exit")
        if name == "evaluate":
            p.add_argument("--json", action="store_true", help="print the metrics as one JSON object")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    handler, group, _ = COMMANDS[args.command]
    overrides = {k: getattr(args, k) for k in SHARED + group if hasattr(args, k)}
    if "prior_update_epochs" in overrides:
        overrides["prior_update_epochs"] = " ".join(overrides["prior_update_epochs"])
    try:
        file_values = config.load_config_file(args.config) if args.config else None
        cfg = config.resolve(file_values, overrides)
        return handler(cfg, args)
    except TrainingDivergenceError as exc:
        log.error("training diverged: %s", exc)
        return 3
    except (CliError, config.ConfigError, raster.RasterFormatError, synthgen.SynthesisError,
            ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
