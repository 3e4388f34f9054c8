"""Flat dotted-key configuration files: ``key = value`` lines, ``#`` comments.

Every key has a documented default below; unknown keys are rejected so
typos fail loudly. Parsing is order-independent.
"""

from __future__ import annotations

import os
from typing import Any, Callable

from .errors import ConfigError, UnknownKeyError
from .model import DartConfig, TASKS
from .train import LrSchedule

__all__ = ["SCHEMA", "parse_config", "read_config", "dart_config_from", "schedule_from"]


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    if not text.strip():
        return ()
    return tuple(int(part) for part in text.split(","))


def _parse_choice(*choices: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in choices:
            raise ValueError(f"expected one of {choices}, got {text!r}")
        return text
    return parse


# key -> (default, parser, help)
SCHEMA: dict[str, tuple[Any, Callable[[str], Any], str]] = {
    "model.task": ("denoise-gray", _parse_choice(*TASKS), "restoration task"),
    "model.embed_dim": (32, int, "feature dimension inside the transformer body"),
    "model.heads": (4, int, "attention heads (must divide embed_dim)"),
    "model.window": (8, int, "window attention tile size"),
    "model.blocks_per_stage": (2, int, "transformer blocks per stage"),
    "model.stages": (1, int, "stage count"),
    "model.mlp_ratio": (2, int, "MLP hidden width as a multiple of embed_dim"),
    "model.reduction": (4, int, "channel-gate bottleneck reduction rate"),
    "model.use_longir": (True, _parse_bool, "enable the banded long-sequence branch"),
    "model.use_cbam": (True, _parse_bool, "enable the channel/spatial gates"),
    "longir.window": (9, int, "band width (odd, includes the center token)"),
    "longir.dilation": (2, int, "gap between band neighbors"),
    "longir.globals_per_window": (1, int, "global anchors per window-sized span"),
    "train.iters": (2000, int, "optimizer steps"),
    "train.batch": (1, int, "patches per step"),
    "train.patch": (32, int, "input patch size"),
    "train.seed": (0, int, "training stream seed"),
    "train.loss": ("l1", _parse_choice("l1", "charbonnier"), "training loss"),
    "train.optimizer": ("adam", _parse_choice("adam", "adamw"), "optimizer mode"),
    "train.weight_decay": (0.0, float, "decoupled decay (adamw only)"),
    "train.log_every": (50, int, "loss trace emission interval"),
    "lr.warmup_start": (1e-5, float, "warmup starting rate"),
    "lr.base": (2e-4, float, "rate reached at warmup end"),
    "lr.warmup_iters": (100, int, "warmup length in iterations"),
    "lr.milestones": ((1000, 1500), _parse_int_list, "iterations where the rate halves"),
    "data.source": ("synthetic", str, "'synthetic' or a directory of PNM images"),
    "data.sigma": (25.0, float, "noise standard deviation on the 0..255 scale"),
    "data.train_images": (16, int, "synthetic training scene count"),
    "data.eval_images": (6, int, "synthetic held-out scene count"),
    "data.image_size": (64, int, "synthetic scene extent"),
    "data.stride": (0, int, "patch anchor stride (0 means the patch size)"),
    "data.seed": (1234, int, "synthetic scene seed (independent of train.seed)"),
}


def parse_config(text: str) -> dict[str, Any]:
    """Parse config text into a fully-defaulted key -> value map."""
    values = {key: default for key, (default, _, _) in SCHEMA.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in SCHEMA:
            raise UnknownKeyError(f"line {lineno}: unknown config key {key!r}")
        _, parser, _ = SCHEMA[key]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return values


def read_config(path) -> dict[str, Any]:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def dart_config_from(values: dict[str, Any]) -> DartConfig:
    return DartConfig(
        task=values["model.task"],
        embed_dim=values["model.embed_dim"],
        heads=values["model.heads"],
        window=values["model.window"],
        longir_window=values["longir.window"],
        longir_dilation=values["longir.dilation"],
        globals_per_window=values["longir.globals_per_window"],
        reduction=values["model.reduction"],
        blocks_per_stage=values["model.blocks_per_stage"],
        stages=values["model.stages"],
        mlp_ratio=values["model.mlp_ratio"],
        use_longir=values["model.use_longir"],
        use_cbam=values["model.use_cbam"],
    )


def schedule_from(values: dict[str, Any]) -> LrSchedule:
    return LrSchedule(
        warmup_start=values["lr.warmup_start"],
        base=values["lr.base"],
        warmup_iters=values["lr.warmup_iters"],
        milestones=tuple(values["lr.milestones"]),
    )
