"""Glue between config values, synthetic data, training, and evaluation.

Both the command line and the acceptance suite drive experiments through
these helpers so they measure exactly the same protocol.
"""

from __future__ import annotations

import os
import statistics

import numpy as np

from .data import ImageBuffer, Rng, add_awgn, bicubic_resize, read_pnm, synth_image
from .errors import ConfigError
from .metrics import psnr, rgb_to_y
from .model import DartConfig, DartModel
from .train import DenoiseTask, SrTask, TraceEntry, restore_image, train_loop

__all__ = [
    "synthetic_images",
    "load_dir_images",
    "build_training_task",
    "build_eval_pairs",
    "evaluate_restoration",
    "train_from_values",
    "ablation_variants",
]

_TRAIN_SALT = 0x1000
_EVAL_SALT = 0x9000
_EVAL_NOISE_SALT = 0xE7A1


def synthetic_images(count: int, size: int, channels: int, base_seed: int,
                     salt: int) -> list[ImageBuffer]:
    return [synth_image(size, size, channels, (base_seed ^ (salt + i)))
            for i in range(count)]


def load_dir_images(path) -> list[ImageBuffer]:
    names = sorted(n for n in os.listdir(path)
                   if n.lower().endswith((".pgm", ".ppm", ".pnm")))
    if not names:
        raise ConfigError(f"no PNM images found in {path}")
    return [read_pnm(os.path.join(path, n)) for n in names]


def _train_images(values: dict, cfg: DartConfig) -> list[ImageBuffer]:
    if values["data.source"] == "synthetic":
        return synthetic_images(values["data.train_images"], values["data.image_size"],
                                cfg.in_channels, values["data.seed"], _TRAIN_SALT)
    return load_dir_images(values["data.source"])


def build_training_task(values: dict, cfg: DartConfig):
    images = _train_images(values, cfg)
    patch = values["train.patch"]
    stride = values["data.stride"]
    if cfg.sr_scale is None:
        return DenoiseTask(images, patch, values["data.sigma"], stride=stride)
    return SrTask(images, patch, cfg.sr_scale, stride=stride)


def build_eval_pairs(values: dict, cfg: DartConfig) -> list[tuple[ImageBuffer, ImageBuffer]]:
    """Held-out (degraded, clean) pairs with deterministic degradation."""
    clean = synthetic_images(values["data.eval_images"], values["data.image_size"],
                             cfg.in_channels, values["data.seed"], _EVAL_SALT)
    pairs = []
    for i, img in enumerate(clean):
        if cfg.sr_scale is None:
            rng = Rng.derived(values["data.seed"], _EVAL_NOISE_SALT + i)
            pairs.append((add_awgn(img, values["data.sigma"], rng), img))
        else:
            pairs.append((bicubic_resize(img, 1.0 / cfg.sr_scale), img))
    return pairs


def _metric_plane(img: ImageBuffer) -> np.ndarray:
    arr = img.samples.astype(np.float64)
    if img.channels == 3:
        return rgb_to_y(arr)
    return arr[:, :, 0]


def evaluate_restoration(model: DartModel,
                         pairs: list[tuple[ImageBuffer, ImageBuffer]]) -> float:
    """Mean PSNR (dB) of the restored pairs, on Y for color images.

    Super-resolution crops ``scale`` pixels per side before measuring.
    """
    border = model.cfg.sr_scale or 0
    scores = []
    for degraded, clean in pairs:
        restored = restore_image(model, degraded)
        scores.append(psnr(_metric_plane(restored), _metric_plane(clean), border))
    return float(statistics.fmean(scores))


def train_from_values(values: dict, cfg: DartConfig, seed: int,
                      schedule) -> tuple[DartModel, list[TraceEntry]]:
    model = DartModel.init(cfg, Rng.derived(seed, 0x1A17))
    task = build_training_task(values, cfg)
    trace = train_loop(
        model, task, schedule,
        iters=values["train.iters"], seed=seed, batch=values["train.batch"],
        loss_kind=values["train.loss"], optimizer=values["train.optimizer"],
        weight_decay=values["train.weight_decay"],
        log_every=values["train.log_every"],
    )
    return model, trace


def ablation_variants(cfg: DartConfig) -> dict[str, DartConfig]:
    """The three configurations compared in the ablation: both branches,
    the banded branch alone, and the gating alone."""
    from dataclasses import replace
    return {
        "full": replace(cfg, use_longir=True, use_cbam=True),
        "longir-only": replace(cfg, use_longir=True, use_cbam=False),
        "cbam-only": replace(cfg, use_longir=False, use_cbam=True),
    }
