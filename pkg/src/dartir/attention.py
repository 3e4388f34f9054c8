"""Windowed multi-head attention, the banded long-sequence attention used by
the longir branch, and the fusion of the two branches.

Two interchangeable long-sequence kernels live here. ``longir_attention``
walks only each token's admissible neighbors through a compressed banded
layout, so its work is O(N * (w + |G|)). ``longir_attention_dense`` scores
every token pair and masks, O(N^2); it exists as the reference the banded
kernel is validated against and as the dense arm of the scaling benchmark.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from . import tensor as T
from .tensor import Tensor

__all__ = [
    "WindowGrid",
    "window_partition",
    "window_reverse",
    "AttentionParams",
    "relative_position_index",
    "window_attention",
    "LongIRMask",
    "build_longir_mask",
    "longir_attention",
    "longir_attention_dense",
    "fuse_branches",
    "MacCounter",
]


@dataclass
class MacCounter:
    """Accumulates multiply-add counts for attention score + aggregation work."""

    macs: int = 0

    def add(self, pairs: int, dim: int) -> None:
        # One score dot product and one value accumulation per pair.
        self.macs += 2 * pairs * dim

    def reset(self) -> None:
        self.macs = 0


# ---------------------------------------------------------------------------
# Window geometry


@dataclass(frozen=True)
class WindowGrid:
    """Geometry of one partition: original extents, window size, pads."""

    height: int
    width: int
    window: int
    pad_bottom: int
    pad_right: int

    @property
    def padded_height(self) -> int:
        return self.height + self.pad_bottom

    @property
    def padded_width(self) -> int:
        return self.width + self.pad_right

    @property
    def count(self) -> int:
        return (self.padded_height // self.window) * (self.padded_width // self.window)


def window_partition(x: Tensor, window: int) -> tuple[Tensor, WindowGrid]:
    """Tile a [H, W, D] map into non-overlapping [nW, window^2, D] windows.

    The map is reflect-padded on the bottom/right to multiples of the
    window size. Raster order is used within and across windows, so
    ``window_reverse`` restores the original map exactly.
    """
    if window <= 0:
        raise ConfigError(f"window size must be positive, got {window}")
    h, w, d = x.data.shape
    pad_b = (-h) % window
    pad_r = (-w) % window
    grid = WindowGrid(h, w, window, pad_b, pad_r)
    if pad_b or pad_r:
        x = T.reflect_pad_bottom_right(x, pad_b, pad_r)
    nh = grid.padded_height // window
    nw = grid.padded_width // window
    x = T.reshape(x, (nh, window, nw, window, d))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (nh * nw, window * window, d)), grid


def window_reverse(windows: Tensor, grid: WindowGrid) -> Tensor:
    """Invert :func:`window_partition` back to the original [H, W, D] map."""
    m = grid.window
    nh = grid.padded_height // m
    nw = grid.padded_width // m
    d = windows.data.shape[-1]
    x = T.reshape(windows, (nh, nw, m, m, d))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    x = T.reshape(x, (grid.padded_height, grid.padded_width, d))
    if grid.pad_bottom or grid.pad_right:
        x = T.crop_top_left(x, grid.height, grid.width)
    return x


# ---------------------------------------------------------------------------
# Shared projection parameters


@dataclass
class AttentionParams:
    """Q/K/V and output projections for one attention branch.

    The key projection carries no bias: shifting every key by a constant
    moves each score row by the same amount, which the softmax cancels
    exactly, so such a bias could never receive gradient. The window
    branch carries a relative position bias table with one row per
    in-window coordinate offset, (2M-1)^2 rows by ``heads`` columns; the
    longir branch runs without positional bias.
    """

    dim: int
    heads: int
    q_w: Tensor
    q_b: Tensor
    k_w: Tensor
    v_w: Tensor
    v_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    rel_bias: Tensor | None = None
    rel_index: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @classmethod
    def create(cls, dim: int, heads: int, rng, window: int | None = None) -> "AttentionParams":
        """Fresh projections: truncated-normal weights (std 0.02), zero biases.

        Pass ``window`` to attach a zero-initialized relative position bias
        table covering every in-window coordinate offset exactly once.
        """
        def w() -> Tensor:
            return Tensor(rng.truncated_normals(dim * dim, 0.02).reshape(dim, dim))

        rel_bias = rel_index = None
        if window is not None:
            table = (2 * window - 1) ** 2
            rel_bias = Tensor(np.zeros((table, heads)))
            rel_index = relative_position_index(window)
        return cls(
            dim=dim, heads=heads,
            q_w=w(), q_b=Tensor(np.zeros(dim)),
            k_w=w(),
            v_w=w(), v_b=Tensor(np.zeros(dim)),
            proj_w=w(), proj_b=Tensor(np.zeros(dim)),
            rel_bias=rel_bias, rel_index=rel_index,
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {
            f"{prefix}.q_w": self.q_w, f"{prefix}.q_b": self.q_b,
            f"{prefix}.k_w": self.k_w,
            f"{prefix}.v_w": self.v_w, f"{prefix}.v_b": self.v_b,
            f"{prefix}.proj_w": self.proj_w, f"{prefix}.proj_b": self.proj_b,
        }
        if self.rel_bias is not None:
            out[f"{prefix}.rel_bias"] = self.rel_bias
        return out


def relative_position_index(window: int) -> np.ndarray:
    """[M^2, M^2] lookup of each token pair's relative coordinate bucket."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]
    rel = rel.transpose(1, 2, 0) + (window - 1)
    return rel[:, :, 0] * (2 * window - 1) + rel[:, :, 1]


def _project_heads(x: Tensor, w: Tensor, b: Tensor | None, heads: int) -> Tensor:
    """[..., N, D] -> [..., heads, N, D/heads]."""
    y = T.linear(x, w, b)
    lead = y.data.shape[:-1]
    d = y.data.shape[-1]
    hd = d // heads
    y = T.reshape(y, lead + (heads, hd))
    ndim = len(lead) + 2
    perm = tuple(range(ndim - 3)) + (ndim - 2, ndim - 3, ndim - 1)
    return T.transpose(y, perm)


def _merge_heads(x: Tensor) -> Tensor:
    """[..., heads, N, D/heads] -> [..., N, D]."""
    ndim = x.data.ndim
    perm = tuple(range(ndim - 3)) + (ndim - 2, ndim - 3, ndim - 1)
    y = T.transpose(x, perm)
    lead = y.data.shape[:-2]
    return T.reshape(y, lead + (y.data.shape[-2] * y.data.shape[-1],))


def window_attention(windows: Tensor, params: AttentionParams) -> Tensor:
    """Scaled dot-product multi-head attention inside each window.

    ``windows`` is [nW, M^2, D]. Scores are Q K^T / sqrt(D/heads) plus the
    relative position bias, softmaxed per window row.
    """
    n_windows, tokens, dim = windows.data.shape
    if dim != params.dim:
        raise ShapeError(f"window feature dim {dim} != params dim {params.dim}")
    q = _project_heads(windows, params.q_w, params.q_b, params.heads)
    k = _project_heads(windows, params.k_w, None, params.heads)
    v = _project_heads(windows, params.v_w, params.v_b, params.heads)
    q = T.scale(q, 1.0 / np.sqrt(params.head_dim))
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
    if params.rel_bias is not None:
        flat = T.take_rows(params.rel_bias, params.rel_index.reshape(-1))
        bias = T.reshape(flat, (tokens, tokens, params.heads))
        bias = T.transpose(bias, (2, 0, 1))
        scores = T.add(scores, bias)
    probs = T.masked_softmax_lastdim(scores)
    ctx = T.matmul(probs, v)
    return T.linear(_merge_heads(ctx), params.proj_w, params.proj_b)


# ---------------------------------------------------------------------------
# Long-sequence mask


@dataclass
class LongIRMask:
    """Admissibility pattern: dilated band plus fully-connected global tokens.

    For non-global tokens i, j the pair is admissible iff j - i is a
    multiple of the dilation within (w-1)/2 steps of i. Global tokens see
    and are seen by everything. ``band_index``/``band_valid`` give the
    compressed per-token neighbor lists (out-of-range neighbors are
    clipped and marked invalid); :meth:`dense` materializes the same
    relation as an [N, N] boolean oracle.
    """

    length: int
    band_width: int
    dilation: int
    global_tokens: tuple[int, ...]
    band_offsets: np.ndarray = field(repr=False)
    band_index: np.ndarray = field(repr=False)
    band_valid: np.ndarray = field(repr=False)

    def dense(self) -> np.ndarray:
        n = self.length
        mask = np.zeros((n, n), dtype=bool)
        half = (self.band_width - 1) // 2
        for k in range(-half, half + 1):
            off = k * self.dilation
            lo = max(0, -off)
            hi = min(n, n - off)
            rows = np.arange(lo, hi)
            mask[rows, rows + off] = True
        for g in self.global_tokens:
            mask[g, :] = True
            mask[:, g] = True
        return mask

    def admissible_pairs(self) -> int:
        return int(self.dense().sum())


def build_longir_mask(length: int, band_width: int, dilation: int,
                      global_tokens=()) -> LongIRMask:
    """Construct the banded + global admissibility mask for a sequence.

    ``band_width`` counts the whole span including the center, so it must
    be odd; ``dilation`` spaces the band offsets. Global token indices
    must lie inside the sequence.
    """
    if band_width < 1 or band_width % 2 == 0:
        raise ConfigError(f"band width must be odd and >= 1, got {band_width}")
    if dilation < 1:
        raise ConfigError(f"dilation must be >= 1, got {dilation}")
    globals_sorted = tuple(sorted(set(int(g) for g in global_tokens)))
    for g in globals_sorted:
        if not 0 <= g < length:
            raise ConfigError(f"global token {g} outside sequence of length {length}")
    half = (band_width - 1) // 2
    offsets = np.arange(-half, half + 1, dtype=np.int64) * dilation
    raw = np.arange(length, dtype=np.int64)[:, None] + offsets[None, :]
    valid = (raw >= 0) & (raw < length)
    index = np.clip(raw, 0, length - 1)
    return LongIRMask(length, band_width, dilation, globals_sorted,
                      offsets, index, valid)


# ---------------------------------------------------------------------------
# Long-sequence attention kernels


def _qkv(x: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    q = _project_heads(x, params.q_w, params.q_b, params.heads)
    k = _project_heads(x, params.k_w, None, params.heads)
    v = _project_heads(x, params.v_w, params.v_b, params.heads)
    return T.scale(q, 1.0 / np.sqrt(params.head_dim)), k, v


def longir_attention(x: Tensor, mask: LongIRMask, params: AttentionParams,
                     counter: MacCounter | None = None) -> Tensor:
    """Banded multi-head attention over a [N, D] sequence.

    Each token's scores are computed only over its admissible set via the
    compressed neighbor lists, so work and memory stay O(N * (w + |G|)).
    Global-token rows are the exception: they attend densely, and their
    results overwrite the banded rows.
    """
    n, dim = x.data.shape
    if mask.length != n:
        raise ShapeError(f"mask length {mask.length} != sequence length {n}")
    if dim != params.dim:
        raise ShapeError(f"sequence feature dim {dim} != params dim {params.dim}")
    q, k, v = _qkv(x, params)
    g_idx = np.asarray(mask.global_tokens, dtype=np.int64)
    n_glob = g_idx.size

    # Band part: gather each token's neighbors once.
    kb = T.gather_band(k, mask.band_offsets, mask.band_index)   # [h, N, w, hd]
    vb = T.gather_band(v, mask.band_offsets, mask.band_index)
    scores = T.band_dot(q, kb)                      # [h, N, w]
    valid = mask.band_valid
    if n_glob:
        # Neighbors that are global are covered by the global columns below.
        valid = valid & ~np.isin(mask.band_index, g_idx)
    if counter is not None:
        counter.add(n * mask.band_width * params.heads, params.head_dim)

    if n_glob:
        kg = T.take_middle(k, g_idx)                # [h, G, hd]
        vg = T.take_middle(v, g_idx)
        glob_scores = T.matmul(q, T.transpose(kg, (0, 2, 1)))    # [h, N, G]
        scores = T.concat([scores, glob_scores], axis=2)
        admissible = np.concatenate(
            [valid, np.ones((n, n_glob), dtype=bool)], axis=1)
        if counter is not None:
            counter.add(n * n_glob * params.heads, params.head_dim)
    else:
        admissible = valid

    probs = T.masked_softmax_lastdim(
        scores, np.broadcast_to(admissible, scores.data.shape))
    if n_glob:
        band_probs = T.slice_lastdim(probs, 0, mask.band_width)
        glob_probs = T.slice_lastdim(probs, mask.band_width,
                                     mask.band_width + n_glob)
        ctx = T.add(T.band_weighted_sum(band_probs, vb),
                    T.matmul(glob_probs, vg))
        # Global rows attend densely; recompute them and splice in.
        qg = T.take_middle(q, g_idx)                             # [h, G, hd]
        row_scores = T.matmul(qg, T.transpose(k, (0, 2, 1)))     # [h, G, N]
        row_probs = T.masked_softmax_lastdim(row_scores)
        row_ctx = T.matmul(row_probs, v)                         # [h, G, hd]
        ctx = T.replace_middle(ctx, g_idx, row_ctx)
        if counter is not None:
            counter.add(n_glob * n * params.heads, params.head_dim)
    else:
        ctx = T.band_weighted_sum(probs, vb)
    return T.linear(_merge_heads(ctx), params.proj_w, params.proj_b)


def longir_attention_dense(x: Tensor, mask: LongIRMask, params: AttentionParams,
                           counter: MacCounter | None = None) -> Tensor:
    """Reference kernel: full [N, N] scores with the dense admissibility mask."""
    n, dim = x.data.shape
    if mask.length != n:
        raise ShapeError(f"mask length {mask.length} != sequence length {n}")
    if dim != params.dim:
        raise ShapeError(f"sequence feature dim {dim} != params dim {params.dim}")
    q, k, v = _qkv(x, params)
    scores = T.matmul(q, T.transpose(k, (0, 2, 1)))
    dense = np.broadcast_to(mask.dense(), scores.data.shape)
    probs = T.masked_softmax_lastdim(scores, dense)
    ctx = T.matmul(probs, v)
    if counter is not None:
        counter.add(n * n * params.heads, params.head_dim)
    return T.linear(_merge_heads(ctx), params.proj_w, params.proj_b)


def fuse_branches(x_win: Tensor, x_long: Tensor, weight: Tensor,
                  bias: Tensor | None = None) -> Tensor:
    """Merge the two branch outputs: concatenate features, one linear 2D -> D."""
    if x_win.data.shape != x_long.data.shape:
        raise ShapeError(
            f"branch token shapes differ: {x_win.data.shape} vs {x_long.data.shape}")
    both = T.concat([x_win, x_long], axis=-1)
    return T.linear(both, weight, bias)
