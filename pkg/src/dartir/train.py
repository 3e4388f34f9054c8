"""Losses, the Adam/AdamW optimizer, the warmup-and-halving learning rate
schedule, the training loop, and checkpoint serialization."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import ImageBuffer, Rng, add_awgn, bicubic_resize, patch_anchors
from .fileio import atomic_write_bytes
from .errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointVersionError,
    ConfigError,
    NumericsError,
    ShapeError,
)
from .model import DartConfig, DartModel
from .tensor import GradTape, Tensor

__all__ = [
    "l1_loss",
    "charbonnier_loss",
    "OptimState",
    "adam_step",
    "LrSchedule",
    "lr_at",
    "DenoiseTask",
    "SrTask",
    "TraceEntry",
    "train_loop",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint_config",
    "load_model",
    "restore_image",
    "atomic_write_bytes",
]

CHECKPOINT_MAGIC = b"DARTCKPT"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Losses


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; the subgradient at exact ties is 0."""
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"l1 shapes differ: {pred.data.shape} vs {target.data.shape}")
    return T.mean_all(T.abs_(T.sub(pred, target)))


def charbonnier_loss(pred: Tensor, target: Tensor, eps: float = 1e-3) -> Tensor:
    """Smooth L1 surrogate: mean sqrt((pred - target)^2 + eps^2)."""
    if pred.data.shape != target.data.shape:
        raise ShapeError(
            f"charbonnier shapes differ: {pred.data.shape} vs {target.data.shape}")
    diff = T.sub(pred, target)
    return T.mean_all(T.sqrt_(T.add_const(T.mul(diff, diff), eps * eps)))


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptimState:
    """Per-parameter Adam moments plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: dict[str, Tensor], weight_decay: float = 0.0) -> "OptimState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            weight_decay=weight_decay,
        )


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: OptimState, lr: float, mode: str = "adam") -> None:
    """One bias-corrected Adam update in place.

    ``adamw`` additionally applies decoupled decay lr * weight_decay * theta.
    A non-finite gradient aborts loudly rather than poisoning the moments.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if mode not in ("adam", "adamw"):
        raise ConfigError(f"unknown optimizer mode {mode!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name} "
                             f"shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if mode == "adamw" and state.weight_decay != 0.0:
            p.data = p.data - lr * state.weight_decay * p.data - lr * update
        else:
            p.data = p.data - lr * update


# ---------------------------------------------------------------------------
# Learning rate schedule


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to the base rate, then halving at each milestone."""

    warmup_start: float = 1e-5
    base: float = 2e-4
    warmup_iters: int = 100
    milestones: tuple[int, ...] = (1000, 1500)

    def __post_init__(self) -> None:
        if self.warmup_start <= 0 or self.base <= 0:
            raise ConfigError("learning rates must be positive")
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ConfigError(f"milestones must be strictly increasing, "
                              f"got {self.milestones}")


def lr_at(iteration: int, schedule: LrSchedule) -> float:
    """Rate used for the given iteration (0-based)."""
    if iteration < 0:
        raise ConfigError(f"iteration must be >= 0, got {iteration}")
    if schedule.warmup_iters > 0 and iteration < schedule.warmup_iters:
        frac = iteration / schedule.warmup_iters
        return schedule.warmup_start + (schedule.base - schedule.warmup_start) * frac
    halvings = sum(1 for m in schedule.milestones if m <= iteration)
    return schedule.base * (0.5 ** halvings)


# ---------------------------------------------------------------------------
# Batch synthesis


@dataclass
class DenoiseTask:
    """Clean images plus a noise level; batches are (noisy, clean) patches."""

    images: list[ImageBuffer]
    patch: int
    sigma: float
    stride: int = 0

    def __post_init__(self) -> None:
        if not self.images:
            raise ConfigError("denoise task needs at least one image")
        stride = self.stride or self.patch
        self._anchors = [
            (i, y, x)
            for i, img in enumerate(self.images)
            for (y, x) in patch_anchors(img.height, img.width, self.patch, stride)
        ]

    def sample(self, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
        i, y, x = self._anchors[rng.uniform_int(len(self._anchors))]
        clean = ImageBuffer(
            self.images[i].samples[y:y + self.patch, x:x + self.patch].copy())
        noisy = add_awgn(clean, self.sigma, rng)
        return noisy.to_float01(), clean.to_float01()


@dataclass
class SrTask:
    """HR images; batches are (bicubic LR, HR) aligned patch pairs."""

    hr_images: list[ImageBuffer]
    patch: int
    scale: int
    stride: int = 0

    def __post_init__(self) -> None:
        if not self.hr_images:
            raise ConfigError("sr task needs at least one image")
        if self.scale not in (2, 3, 4):
            raise ConfigError(f"sr scale must be 2, 3 or 4, got {self.scale}")
        self._lr_images = [bicubic_resize(img, 1.0 / self.scale)
                           for img in self.hr_images]
        stride = self.stride or self.patch
        self._anchors = [
            (i, y, x)
            for i, lr in enumerate(self._lr_images)
            for (y, x) in patch_anchors(lr.height, lr.width, self.patch, stride)
        ]

    def sample(self, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
        i, y, x = self._anchors[rng.uniform_int(len(self._anchors))]
        s, p = self.scale, self.patch
        lr = self._lr_images[i].samples[y:y + p, x:x + p]
        hr = self.hr_images[i].samples[s * y:s * (y + p), s * x:s * (x + p)]
        return (ImageBuffer(lr.copy()).to_float01(),
                ImageBuffer(hr.copy()).to_float01())


@dataclass
class TraceEntry:
    iteration: int
    lr: float
    loss: float

    def csv_line(self) -> str:
        return f"{self.iteration},{self.lr:.10g},{self.loss:.10g}"


def train_loop(model: DartModel, task, schedule: LrSchedule, iters: int,
               seed: int, batch: int = 1, loss_kind: str = "l1",
               optimizer: str = "adam", weight_decay: float = 0.0,
               log_every: int = 50) -> list[TraceEntry]:
    """Train in place; returns the logged loss trace.

    Deterministic given the seed: batch sampling, noise synthesis, and the
    optimizer all derive from one stream. A non-finite loss aborts with a
    diagnostic instead of continuing.
    """
    if loss_kind not in ("l1", "charbonnier"):
        raise ConfigError(f"unknown loss {loss_kind!r}")
    params = model.named_parameters()
    state = OptimState.for_params(params, weight_decay=weight_decay)
    rng = Rng.derived(seed, 0x7261696E)
    trace: list[TraceEntry] = []
    loss_fn = l1_loss if loss_kind == "l1" else charbonnier_loss
    for it in range(iters):
        lr = lr_at(it, schedule)
        for p in params.values():
            p.grad = None
        with GradTape() as tape:
            total = None
            for _ in range(batch):
                inp, target = task.sample(rng)
                pred = model.forward(Tensor(inp))
                loss = loss_fn(pred, Tensor(target))
                total = loss if total is None else T.add(total, loss)
            total = T.scale(total, 1.0 / batch)
            if not np.isfinite(total.data).all():
                raise NumericsError(f"non-finite loss at iteration {it}")
            tape.backward(total)
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        adam_step(params, grads, state, lr, mode=optimizer)
        if it % log_every == 0 or it == iters - 1:
            trace.append(TraceEntry(it, lr, float(total.data)))
    return trace


# ---------------------------------------------------------------------------
# Checkpoints


def _encode_tensor(buf: io.BytesIO, name: str, data: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<I", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<I", data.ndim))
    for extent in data.shape:
        buf.write(struct.pack("<Q", extent))
    buf.write(data.astype("<f4").tobytes())


def checkpoint_bytes(model: DartModel, state: OptimState | None = None) -> bytes:
    """Serialize config plus named tensors: 32-bit little-endian payloads."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    config_blob = model.cfg.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(config_blob)))
    buf.write(config_blob)
    tensors: list[tuple[str, np.ndarray]] = [
        (name, p.data) for name, p in model.named_parameters().items()
    ]
    if state is not None:
        for name in state.m:
            tensors.append((f"opt.m.{name}", state.m[name]))
        for name in state.v:
            tensors.append((f"opt.v.{name}", state.v[name]))
        tensors.append(("opt.step", np.array([float(state.step)])))
    buf.write(struct.pack("<I", len(tensors)))
    for name, data in tensors:
        _encode_tensor(buf, name, data)
    return buf.getvalue()


def save_checkpoint(path, model: DartModel, state: OptimState | None = None) -> None:
    atomic_write_bytes(path, checkpoint_bytes(model, state))


class _Reader:
    def __init__(self, blob: bytes) -> None:
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path, model: DartModel, state: OptimState | None = None) -> None:
    """Restore parameters (and optionally optimizer state) into the model.

    Validates the magic, the format version, and every tensor's shape
    against the model before touching any parameter.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointMagicError("not a checkpoint: bad magic")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    config_len = r.u32()
    r.take(config_len)  # informational; the live model's config governs shapes
    count = r.u32()
    params = model.named_parameters()
    loaded: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u64() for _ in range(rank))
        n_vals = 1
        for extent in shape:
            n_vals *= extent
        data = np.frombuffer(r.take(4 * n_vals), dtype="<f4").reshape(shape)
        loaded[name] = data.astype(np.float64)
    for name, p in params.items():
        if name not in loaded:
            raise CheckpointShapeError(f"checkpoint is missing tensor {name}")
        if loaded[name].shape != p.data.shape:
            raise CheckpointShapeError(
                f"tensor {name}: checkpoint shape {loaded[name].shape} "
                f"!= model shape {p.data.shape}")
    for name, p in params.items():
        p.data = loaded[name]
        p.grad = None
    if state is not None:
        for name in params:
            m_name, v_name = f"opt.m.{name}", f"opt.v.{name}"
            if m_name not in loaded or v_name not in loaded:
                raise CheckpointShapeError(f"checkpoint has no optimizer state for {name}")
            state.m[name] = loaded[m_name]
            state.v[name] = loaded[v_name]
        if "opt.step" not in loaded:
            raise CheckpointShapeError("checkpoint has no optimizer step counter")
        state.step = int(loaded["opt.step"][0])


def read_checkpoint_config(path) -> DartConfig:
    """Decode only the header and config blob of a checkpoint."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointMagicError("not a checkpoint: bad magic")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    return DartConfig.from_text(r.take(r.u32()).decode("utf-8"))


def load_model(path) -> DartModel:
    """Build a model from a checkpoint's own config and load its weights."""
    cfg = read_checkpoint_config(path)
    model = DartModel.init(cfg, Rng(0))
    load_checkpoint(path, model)
    return model


def restore_image(model: DartModel, degraded: ImageBuffer) -> ImageBuffer:
    """Run the model on an 8-bit image and quantize the result back."""
    out = model.forward(Tensor(degraded.to_float01()))
    return ImageBuffer.from_float01(np.clip(out.data, 0.0, 1.0))
