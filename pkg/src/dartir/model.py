"""The restoration network: shallow conv, stages of dual-attention blocks,
and a reconstruction head (residual denoise or pixel-shuffle upscale)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import (
    AttentionParams,
    LongIRMask,
    build_longir_mask,
    fuse_branches,
    longir_attention,
    window_attention,
    window_partition,
    window_reverse,
)
from .cbam import ChannelAttnParams, SpatialAttnParams, cbam_refine
from .errors import ConfigError, ShapeError
from .tensor import Tensor

__all__ = [
    "DartConfig",
    "DartModel",
    "BlockParams",
    "StageParams",
    "pixel_shuffle",
    "global_token_indices",
    "expected_parameter_count",
]

TASKS = ("denoise-gray", "denoise-color", "sr2", "sr3", "sr4")


@dataclass(frozen=True)
class DartConfig:
    """Full hyperparameter record for one model instance."""

    task: str = "denoise-gray"
    embed_dim: int = 32
    heads: int = 4
    window: int = 8
    longir_window: int = 9
    longir_dilation: int = 2
    globals_per_window: int = 1
    reduction: int = 4
    blocks_per_stage: int = 2
    stages: int = 1
    mlp_ratio: int = 2
    use_longir: bool = True
    use_cbam: bool = True

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}, expected one of {TASKS}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % self.reduction != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by reduction {self.reduction}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.longir_window < 1 or self.longir_window % 2 == 0:
            raise ConfigError(
                f"longir window must be odd and >= 1, got {self.longir_window}")
        if self.longir_dilation < 1:
            raise ConfigError(
                f"longir dilation must be >= 1, got {self.longir_dilation}")
        if self.blocks_per_stage < 1 or self.stages < 1:
            raise ConfigError("need at least one block and one stage")
        if self.mlp_ratio < 1:
            raise ConfigError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if not (self.use_longir or self.use_cbam):
            raise ConfigError("empty block: both use_longir and use_cbam disabled")

    @property
    def in_channels(self) -> int:
        return 1 if self.task == "denoise-gray" else 3

    @property
    def sr_scale(self) -> int | None:
        return int(self.task[2]) if self.task.startswith("sr") else None

    def to_text(self) -> str:
        lines = []
        for name in ("task", "embed_dim", "heads", "window", "longir_window",
                     "longir_dilation", "globals_per_window", "reduction",
                     "blocks_per_stage", "stages", "mlp_ratio",
                     "use_longir", "use_cbam"):
            lines.append(f"{name} = {getattr(self, name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DartConfig":
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key == "task":
                kwargs[key] = value
            elif key in ("use_longir", "use_cbam"):
                kwargs[key] = value == "True"
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


def global_token_indices(length: int, window_area: int, per_window: int) -> tuple[int, ...]:
    """Global anchors: evenly spaced tokens within each window-sized span.

    One anchor per span is the first token of that span, giving the
    stride-M^2 pattern; more anchors spread uniformly inside the span.
    """
    if per_window <= 0:
        return ()
    count = min(per_window, window_area)
    out = []
    for start in range(0, length, window_area):
        span = min(window_area, length - start)
        for t in range(count):
            token = start + (t * window_area) // count
            if token < start + span:
                out.append(token)
    return tuple(sorted(set(out)))


def pixel_shuffle(x: Tensor, scale: int) -> Tensor:
    """Rearrange [C*s^2, H, W] channels into [C, s*H, s*W] space.

    output[c, s*i + a, s*j + b] = input[c*s^2 + a*s + b, i, j].
    """
    c2, h, w = x.data.shape
    if c2 % (scale * scale) != 0:
        raise ShapeError(
            f"pixel_shuffle needs channels divisible by {scale * scale}, got {c2}")
    c = c2 // (scale * scale)
    y = T.reshape(x, (c, scale, scale, h, w))
    y = T.transpose(y, (0, 3, 1, 4, 2))
    return T.reshape(y, (c, scale * h, scale * w))


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class BlockParams:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    win: AttentionParams
    long: AttentionParams | None
    fuse_w: Tensor | None
    fuse_b: Tensor | None
    chan: ChannelAttnParams | None
    spat: SpatialAttnParams | None
    out_w: Tensor
    out_b: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.ln1.gamma": self.ln1_gamma, f"{prefix}.ln1.beta": self.ln1_beta}
        out.update(self.win.named(f"{prefix}.win"))
        if self.long is not None:
            out.update(self.long.named(f"{prefix}.long"))
            out[f"{prefix}.fuse.w"] = self.fuse_w
            out[f"{prefix}.fuse.b"] = self.fuse_b
        if self.chan is not None:
            out.update(self.chan.named(f"{prefix}.chan"))
            out.update(self.spat.named(f"{prefix}.spat"))
        out.update({
            f"{prefix}.out.w": self.out_w, f"{prefix}.out.b": self.out_b,
            f"{prefix}.ln2.gamma": self.ln2_gamma, f"{prefix}.ln2.beta": self.ln2_beta,
            f"{prefix}.mlp.w1": self.mlp_w1, f"{prefix}.mlp.b1": self.mlp_b1,
            f"{prefix}.mlp.w2": self.mlp_w2, f"{prefix}.mlp.b2": self.mlp_b2,
        })
        return out


@dataclass
class StageParams:
    blocks: list[BlockParams]
    conv_w: Tensor
    conv_b: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks):
            out.update(block.named(f"{prefix}.block{i}"))
        out[f"{prefix}.conv.w"] = self.conv_w
        out[f"{prefix}.conv.b"] = self.conv_b
        return out


def _conv_params(c_out: int, c_in: int, k: int, rng, zero: bool = False) -> tuple[Tensor, Tensor]:
    if zero:
        w = Tensor(np.zeros((c_out, c_in, k, k)))
    else:
        w = Tensor(rng.truncated_normals(c_out * c_in * k * k, 0.02)
                   .reshape(c_out, c_in, k, k))
    return w, Tensor(np.zeros(c_out))


def _linear_params(d_in: int, d_out: int, rng, zero: bool = False) -> tuple[Tensor, Tensor]:
    if zero:
        w = Tensor(np.zeros((d_in, d_out)))
    else:
        w = Tensor(rng.truncated_normals(d_in * d_out, 0.02).reshape(d_in, d_out))
    return w, Tensor(np.zeros(d_out))


def _block_params(cfg: DartConfig, rng, residual_zero_init: bool) -> BlockParams:
    d = cfg.embed_dim
    hidden = cfg.mlp_ratio * d
    long = fuse_w = fuse_b = chan = spat = None
    win = AttentionParams.create(d, cfg.heads, rng, window=cfg.window)
    if cfg.use_longir:
        long = AttentionParams.create(d, cfg.heads, rng)
        fuse_w, fuse_b = _linear_params(2 * d, d, rng)
    if cfg.use_cbam:
        chan = ChannelAttnParams.create(d, cfg.reduction, rng)
        spat = SpatialAttnParams.create(rng)
    out_w, out_b = _linear_params(d, d, rng, zero=residual_zero_init)
    mlp_w1, mlp_b1 = _linear_params(d, hidden, rng)
    mlp_w2, mlp_b2 = _linear_params(hidden, d, rng, zero=residual_zero_init)
    return BlockParams(
        ln1_gamma=Tensor(np.ones(d)), ln1_beta=Tensor(np.zeros(d)),
        win=win, long=long, fuse_w=fuse_w, fuse_b=fuse_b, chan=chan, spat=spat,
        out_w=out_w, out_b=out_b,
        ln2_gamma=Tensor(np.ones(d)), ln2_beta=Tensor(np.zeros(d)),
        mlp_w1=mlp_w1, mlp_b1=mlp_b1, mlp_w2=mlp_w2, mlp_b2=mlp_b2,
    )


# ---------------------------------------------------------------------------
# The model


class DartModel:
    """Parameter container plus the forward computation.

    Parameters are immutable during a forward/backward pass; one training
    step owns the model exclusively. ``named_parameters`` enumerates every
    tensor exactly once, in a deterministic order used for checkpoints.
    """

    def __init__(self, cfg: DartConfig, shallow_w: Tensor, shallow_b: Tensor,
                 stages: list[StageParams], head_w: Tensor, head_b: Tensor) -> None:
        self.cfg = cfg
        self.shallow_w = shallow_w
        self.shallow_b = shallow_b
        self.stages = stages
        self.head_w = head_w
        self.head_b = head_b
        self._mask_cache: dict[int, LongIRMask] = {}

    @classmethod
    def init(cls, cfg: DartConfig, rng, residual_zero_init: bool = True) -> "DartModel":
        """Draw fresh parameters.

        With ``residual_zero_init`` every residual output projection (block
        out proj, MLP second layer, and the denoise head) starts at zero,
        so a fresh denoising model is exactly the identity map.
        """
        d = cfg.embed_dim
        shallow_w, shallow_b = _conv_params(d, cfg.in_channels, 3, rng)
        stages = []
        for _ in range(cfg.stages):
            blocks = [_block_params(cfg, rng, residual_zero_init)
                      for _ in range(cfg.blocks_per_stage)]
            conv_w, conv_b = _conv_params(d, d, 3, rng)
            stages.append(StageParams(blocks, conv_w, conv_b))
        if cfg.sr_scale is None:
            head_w, head_b = _conv_params(cfg.in_channels, d, 3, rng,
                                          zero=residual_zero_init)
        else:
            s = cfg.sr_scale
            head_w, head_b = _conv_params(cfg.in_channels * s * s, d, 3, rng)
        return cls(cfg, shallow_w, shallow_b, stages, head_w, head_b)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"shallow.w": self.shallow_w, "shallow.b": self.shallow_b}
        for i, stage in enumerate(self.stages):
            out.update(stage.named(f"stage{i}"))
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def longir_mask(self, length: int) -> LongIRMask:
        mask = self._mask_cache.get(length)
        if mask is None:
            g = global_token_indices(length, self.cfg.window ** 2,
                                     self.cfg.globals_per_window)
            mask = build_longir_mask(length, self.cfg.longir_window,
                                     self.cfg.longir_dilation, g)
            self._mask_cache[length] = mask
        return mask

    # -- forward ---------------------------------------------------------

    def block_forward(self, x: Tensor, p: BlockParams) -> Tensor:
        """One block: window and longir branches fused, gated, and a MLP,
        each behind a residual connection."""
        cfg = self.cfg
        h, w, d = x.data.shape
        n = h * w
        normed = T.layer_norm(x, p.ln1_gamma, p.ln1_beta)
        wins, grid = window_partition(normed, cfg.window)
        branch = window_reverse(window_attention(wins, p.win), grid)
        branch = T.reshape(branch, (n, d))
        if cfg.use_longir:
            tokens = T.reshape(normed, (n, d))
            long_out = longir_attention(tokens, self.longir_mask(n), p.long)
            branch = fuse_branches(branch, long_out, p.fuse_w, p.fuse_b)
        if cfg.use_cbam:
            fmap = T.transpose(T.reshape(branch, (h, w, d)), (2, 0, 1))
            refined = cbam_refine(fmap, p.chan, p.spat)
            branch = T.reshape(T.transpose(refined, (1, 2, 0)), (n, d))
        branch = T.linear(branch, p.out_w, p.out_b)
        y = T.add(x, T.reshape(branch, (h, w, d)))
        normed2 = T.layer_norm(y, p.ln2_gamma, p.ln2_beta)
        hidden = T.relu(T.linear(T.reshape(normed2, (n, d)), p.mlp_w1, p.mlp_b1))
        mlp_out = T.linear(hidden, p.mlp_w2, p.mlp_b2)
        return T.add(y, T.reshape(mlp_out, (h, w, d)))

    def forward(self, img: Tensor) -> Tensor:
        """Restore a [C, H, W] image in [0, 1]; SR scales the spatial dims."""
        cfg = self.cfg
        if img.data.ndim != 3 or img.data.shape[0] != cfg.in_channels:
            raise ShapeError(
                f"expected [{cfg.in_channels}, H, W] input, got {img.data.shape}")
        feat = T.conv2d(img, self.shallow_w, self.shallow_b)
        x = T.transpose(feat, (1, 2, 0))
        for stage in self.stages:
            x0 = x
            for block in stage.blocks:
                x = self.block_forward(x, block)
            y = T.conv2d(T.transpose(x, (2, 0, 1)), stage.conv_w, stage.conv_b)
            x = T.add(T.transpose(y, (1, 2, 0)), x0)
        deep = T.transpose(x, (2, 0, 1))
        head = T.conv2d(deep, self.head_w, self.head_b)
        if cfg.sr_scale is None:
            return T.add(img, head)
        return pixel_shuffle(head, cfg.sr_scale)


def expected_parameter_count(cfg: DartConfig) -> int:
    """Closed-form parameter count for a config.

    shallow conv:   D*C_in*9 + D
    per block:      2D (ln1)
                    + 4*D^2 + 3D + (2M-1)^2 * heads        (window attn)
                    + 4*D^2 + 3D  if longir                (longir attn)
                    + 2D^2 + D    if longir                (fusion)
                    + 2*D^2/r     if cbam                  (channel gate)
                    + 2*49 + 1    if cbam                  (spatial gate)
                    + D^2 + D     (out proj)
                    + 2D          (ln2)
                    + 2*rho*D^2 + rho*D + D                (MLP, ratio rho)
    per stage:      blocks * block + 9*D^2 + D             (stage conv)
    head:           denoise: C_in*D*9 + C_in
                    sr x s:  (C_in*s^2)*D*9 + C_in*s^2
    """
    d = cfg.embed_dim
    c_in = cfg.in_channels
    block = 2 * d
    block += 4 * d * d + 3 * d + (2 * cfg.window - 1) ** 2 * cfg.heads
    if cfg.use_longir:
        block += 4 * d * d + 3 * d
        block += 2 * d * d + d
    if cfg.use_cbam:
        block += 2 * d * (d // cfg.reduction)
        block += 2 * 49 + 1
    block += d * d + d
    block += 2 * d
    block += 2 * cfg.mlp_ratio * d * d + cfg.mlp_ratio * d + d
    stage = cfg.blocks_per_stage * block + 9 * d * d + d
    total = d * c_in * 9 + d + cfg.stages * stage
    if cfg.sr_scale is None:
        total += c_in * d * 9 + c_in
    else:
        s = cfg.sr_scale
        total += (c_in * s * s) * d * 9 + c_in * s * s
    return total
