"""Window attention, the banded mask family, kernel equivalence, fusion."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dartir import tensor as T
from dartir.attention import (
    AttentionParams,
    MacCounter,
    build_longir_mask,
    fuse_branches,
    longir_attention,
    longir_attention_dense,
    relative_position_index,
    window_attention,
    window_partition,
    window_reverse,
)
from dartir.data import Rng
from dartir.errors import ConfigError, ShapeError
from dartir.tensor import GradTape, Tensor


def rand_tensor(rng: Rng, *shape: int) -> Tensor:
    return Tensor(rng.normals(int(np.prod(shape))).reshape(shape))


# ---------------------------------------------------------------------------
# Independent oracles, written before the tests that use them


def dense_window_attention_oracle(windows: np.ndarray, p: AttentionParams) -> np.ndarray:
    """Per-window attention computed with plain loops over windows and heads."""
    n_windows, tokens, dim = windows.shape
    hd = p.head_dim
    bias_table = p.rel_bias.data if p.rel_bias is not None else None
    out = np.empty_like(windows)
    for wi in range(n_windows):
        x = windows[wi]
        q = x @ p.q_w.data + p.q_b.data
        k = x @ p.k_w.data
        v = x @ p.v_w.data + p.v_b.data
        ctx = np.empty((tokens, dim))
        for h in range(p.heads):
            qs = q[:, h * hd:(h + 1) * hd] / np.sqrt(hd)
            ks = k[:, h * hd:(h + 1) * hd]
            vs = v[:, h * hd:(h + 1) * hd]
            scores = qs @ ks.T
            if bias_table is not None:
                scores = scores + bias_table[p.rel_index, h]
            scores = scores - scores.max(axis=1, keepdims=True)
            e = np.exp(scores)
            probs = e / e.sum(axis=1, keepdims=True)
            ctx[:, h * hd:(h + 1) * hd] = probs @ vs
        out[wi] = ctx @ p.proj_w.data + p.proj_b.data
    return out


def enumerate_admissible(length, band_width, dilation, global_tokens) -> set:
    """Admissible pairs straight from the defining offset-set rule."""
    half = (band_width - 1) // 2
    pairs = set()
    for i in range(length):
        for j in range(length):
            if i in global_tokens or j in global_tokens:
                pairs.add((i, j))
            else:
                delta = j - i
                if delta % dilation == 0 and abs(delta) <= half * dilation:
                    pairs.add((i, j))
    return pairs


# ---------------------------------------------------------------------------
# Window geometry


class TestWindowPartition:
    def test_exact_tiling_8x8_window4(self):
        x = rand_tensor(Rng(0), 8, 8, 3)
        windows, grid = window_partition(x, 4)
        assert windows.data.shape == (4, 16, 3)
        assert grid.count == 4
        assert (grid.pad_bottom, grid.pad_right) == (0, 0)
        back = window_reverse(windows, grid)
        assert np.array_equal(back.data, x.data)

    def test_window_one_degenerates_to_tokens(self):
        x = rand_tensor(Rng(1), 3, 5, 2)
        windows, grid = window_partition(x, 1)
        assert windows.data.shape == (15, 1, 2)
        assert np.array_equal(windows.data.reshape(3, 5, 2), x.data)

    def test_5x5_pads_to_8x8_and_crops_back(self):
        x = rand_tensor(Rng(2), 5, 5, 2)
        windows, grid = window_partition(x, 4)
        assert windows.data.shape == (4, 16, 2)
        assert (grid.padded_height, grid.padded_width) == (8, 8)
        back = window_reverse(windows, grid)
        assert back.data.shape == (5, 5, 2)
        assert np.array_equal(back.data, x.data)

    def test_nonpositive_window_rejected(self):
        with pytest.raises(ConfigError):
            window_partition(rand_tensor(Rng(3), 4, 4, 1), 0)

    def test_raster_order_within_and_across_windows(self):
        h, w = 4, 6
        x = Tensor(np.arange(float(h * w)).reshape(h, w, 1))
        windows, _ = window_partition(x, 2)
        # first window is the top-left 2x2 tile, raster scanned
        assert list(windows.data[0, :, 0]) == [0.0, 1.0, 6.0, 7.0]
        # windows themselves advance in raster order
        assert list(windows.data[1, :, 0]) == [2.0, 3.0, 8.0, 9.0]

    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 64), st.integers(1, 64),
           st.integers(1, 16))
    @settings(max_examples=60, deadline=None)
    def test_partition_reverse_identity(self, seed, h, w, m):
        x = rand_tensor(Rng(seed), h, w, 2)
        windows, grid = window_partition(x, m)
        assert np.array_equal(window_reverse(windows, grid).data, x.data)


class TestRelativePositionIndex:
    @pytest.mark.parametrize("m", [1, 2, 3, 4])
    def test_covers_every_offset_exactly(self, m):
        idx = relative_position_index(m)
        assert idx.shape == (m * m, m * m)
        assert idx.min() >= 0 and idx.max() < (2 * m - 1) ** 2
        # same relative coordinate -> same bucket
        for a in range(m * m):
            for b in range(m * m):
                dy = a // m - b // m
                dx = a % m - b % m
                assert idx[a, b] == (dy + m - 1) * (2 * m - 1) + (dx + m - 1)


class TestWindowAttention:
    def test_identical_values_make_output_constant(self):
        rng = Rng(4)
        p = AttentionParams.create(6, 2, rng, window=2)
        v = rng.normals(6)
        p.v_w = Tensor(np.zeros((6, 6)))
        p.v_b = Tensor(v)
        x = rand_tensor(rng, 3, 4, 6)
        out = window_attention(x, p).data
        expected = v @ p.proj_w.data + p.proj_b.data
        assert np.allclose(out, expected[None, None, :], atol=1e-12)

    def test_single_token_window_attends_to_self(self):
        rng = Rng(5)
        p = AttentionParams.create(4, 2, rng, window=1)
        x = rand_tensor(rng, 5, 1, 4)
        out = window_attention(x, p).data
        v = x.data @ p.v_w.data + p.v_b.data
        expected = v @ p.proj_w.data + p.proj_b.data
        assert np.allclose(out, expected, atol=1e-12)

    def test_matches_dense_per_window_oracle(self):
        rng = Rng(6)
        p = AttentionParams.create(8, 2, rng, window=3)
        p.rel_bias = rand_tensor(rng, (2 * 3 - 1) ** 2, 2)
        x = rand_tensor(rng, 2, 9, 8)
        out = window_attention(x, p).data
        expected = dense_window_attention_oracle(x.data, p)
        assert np.abs(out - expected).max() <= 1e-10

    def test_dim_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            AttentionParams.create(6, 4, Rng(7))


# ---------------------------------------------------------------------------
# Banded mask


class TestLongIRMask:
    def test_count_8_3_1_no_globals(self):
        mask = build_longir_mask(8, 3, 1, ())
        expected = len(enumerate_admissible(8, 3, 1, ()))
        assert expected == 22  # 3*8 minus the two truncated boundary neighbors
        assert mask.admissible_pairs() == 22

    def test_saturated_window_admits_all(self):
        mask = build_longir_mask(4, 7, 1, ())
        assert mask.admissible_pairs() == 16
        assert mask.dense().all()

    def test_dilated_with_global(self):
        mask = build_longir_mask(9, 3, 2, (0,))
        dense = mask.dense()
        assert set(np.nonzero(dense[4])[0]) == {0, 2, 4, 6}
        assert dense[0].all() and dense[:, 0].all()

    def test_even_width_rejected(self):
        with pytest.raises(ConfigError):
            build_longir_mask(8, 4, 1, ())

    def test_out_of_range_global_rejected(self):
        with pytest.raises(ConfigError):
            build_longir_mask(8, 3, 1, (8,))

    @given(st.integers(2, 40), st.integers(0, 4), st.integers(1, 3),
           st.integers(0, 3), st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_dense_matches_enumeration(self, n, half, d, n_glob, seed):
        w = 2 * half + 1
        rng = Rng(seed)
        globals_ = tuple(sorted({rng.uniform_int(n) for _ in range(n_glob)}))
        mask = build_longir_mask(n, w, d, globals_)
        dense = mask.dense()
        expected = enumerate_admissible(n, w, d, globals_)
        actual = {(i, j) for i, j in zip(*np.nonzero(dense))}
        assert actual == expected

    @given(st.integers(2, 40), st.integers(0, 4), st.integers(1, 3),
           st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_self_admissible_and_band_symmetric(self, n, half, d, seed):
        rng = Rng(seed)
        globals_ = tuple(sorted({rng.uniform_int(n) for _ in range(rng.uniform_int(3))}))
        dense = build_longir_mask(n, 2 * half + 1, d, globals_).dense()
        assert np.diag(dense).all()
        non_glob = [i for i in range(n) if i not in globals_]
        for i in non_glob:
            for j in non_glob:
                assert dense[i, j] == dense[j, i]


# ---------------------------------------------------------------------------
# Banded kernel vs dense oracle


def both_kernel_outputs(seed: int, n: int, w: int, d: int, n_glob: int):
    rng = Rng(seed)
    dim, heads = 8, 2
    p = AttentionParams.create(dim, heads, rng)
    globals_ = tuple(sorted({rng.uniform_int(n) for _ in range(n_glob)}))
    mask = build_longir_mask(n, w, d, globals_)
    x = rand_tensor(rng, n, dim)
    results = []
    for kernel in (longir_attention, longir_attention_dense):
        for t in list(p.named("p").values()) + [x]:
            t.grad = None
        with GradTape() as tape:
            out = kernel(x, mask, p)
            tape.backward(T.sum_all(out))
        grads = {k: v.grad.copy() for k, v in p.named("p").items()}
        results.append((out.data.copy(), x.grad.copy(), grads))
    return results


class TestBandedDenseEquivalence:
    def test_self_only_mask_gives_weight_one_on_self(self):
        rng = Rng(8)
        p = AttentionParams.create(4, 1, rng)
        mask = build_longir_mask(6, 1, 1, ())
        x = rand_tensor(rng, 6, 4)
        out = longir_attention(x, mask, p).data
        v = x.data @ p.v_w.data + p.v_b.data
        expected = v @ p.proj_w.data + p.proj_b.data
        assert np.allclose(out, expected, atol=1e-12)

    def test_equal_keys_give_uniform_weights(self):
        rng = Rng(9)
        p = AttentionParams.create(4, 1, rng)
        p.k_w = Tensor(np.zeros((4, 4)))  # all keys identical (zero)
        mask = build_longir_mask(7, 3, 1, ())
        x = rand_tensor(rng, 7, 4)
        out = longir_attention(x, mask, p).data
        v = x.data @ p.v_w.data + p.v_b.data
        dense = mask.dense()
        expected = np.stack([v[dense[i]].mean(axis=0) for i in range(7)])
        expected = expected @ p.proj_w.data + p.proj_b.data
        assert np.allclose(out, expected, atol=1e-12)

    def test_mask_length_mismatch_rejected(self):
        rng = Rng(10)
        p = AttentionParams.create(4, 1, rng)
        with pytest.raises(ShapeError):
            longir_attention(rand_tensor(rng, 5, 4), build_longir_mask(6, 3, 1, ()), p)

    @pytest.mark.parametrize("seed", range(12))
    def test_values_and_gradients_match_dense_oracle(self, seed):
        rng = Rng(seed ^ 0xBEEF)
        n = 4 + rng.uniform_int(60)
        w = 1 + 2 * rng.uniform_int(6)
        d = 1 + rng.uniform_int(3)
        n_glob = rng.uniform_int(4)
        (o1, gx1, gp1), (o2, gx2, gp2) = both_kernel_outputs(seed, n, w, d, n_glob)
        assert np.abs(o1 - o2).max() <= 1e-10
        assert np.abs(gx1 - gx2).max() <= 1e-10
        for k in gp1:
            assert np.abs(gp1[k] - gp2[k]).max() <= 1e-10

    def test_attention_rows_stochastic_over_admissible(self):
        rng = Rng(11)
        p = AttentionParams.create(8, 2, rng)
        mask = build_longir_mask(20, 5, 2, (3,))
        x = rand_tensor(rng, 20, 8)
        q = (x.data @ p.q_w.data + p.q_b.data).reshape(20, 2, 4).transpose(1, 0, 2)
        k = (x.data @ p.k_w.data).reshape(20, 2, 4).transpose(1, 0, 2)
        scores = (q / 2.0) @ k.transpose(0, 2, 1)
        dense = np.broadcast_to(mask.dense(), scores.shape)
        probs = T.masked_softmax_lastdim(Tensor(scores), dense).data
        assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(probs[~dense] == 0.0)


class TestComplexityCounter:
    def test_banded_growth_linear_dense_quadratic(self):
        rng = Rng(12)
        p = AttentionParams.create(8, 1, rng)
        macs = {"sparse": [], "dense": []}
        for n in (64, 128, 256):
            mask = build_longir_mask(n, 9, 1, ())
            x = rand_tensor(rng, n, 8)
            for mode, kernel in (("sparse", longir_attention),
                                 ("dense", longir_attention_dense)):
                counter = MacCounter()
                kernel(x, mask, p, counter=counter)
                macs[mode].append(counter.macs)
        for prev, cur in zip(macs["sparse"], macs["sparse"][1:]):
            assert cur / prev <= 2.2
        for prev, cur in zip(macs["dense"], macs["dense"][1:]):
            assert cur / prev >= 3.8


class TestFuseBranches:
    def test_selector_weight_returns_first_branch(self):
        rng = Rng(13)
        a, b = rand_tensor(rng, 6, 4), rand_tensor(rng, 6, 4)
        w = Tensor(np.vstack([np.eye(4), np.zeros((4, 4))]))
        out = fuse_branches(a, b, w, Tensor(np.zeros(4)))
        assert np.allclose(out.data, a.data, atol=1e-15)

    def test_half_half_weight_averages(self):
        rng = Rng(14)
        a, b = rand_tensor(rng, 5, 3), rand_tensor(rng, 5, 3)
        w = Tensor(np.vstack([0.5 * np.eye(3), 0.5 * np.eye(3)]))
        out = fuse_branches(a, b, w, Tensor(np.zeros(3)))
        assert np.allclose(out.data, 0.5 * (a.data + b.data), atol=1e-15)

    def test_random_weights_match_matmul_oracle(self):
        rng = Rng(15)
        a, b = rand_tensor(rng, 4, 6), rand_tensor(rng, 4, 6)
        w = rand_tensor(rng, 12, 6)
        bias = rand_tensor(rng, 6)
        out = fuse_branches(a, b, w, bias).data
        expected = np.concatenate([a.data, b.data], axis=1) @ w.data + bias.data
        assert np.abs(out - expected).max() <= 1e-12

    def test_token_misalignment_rejected(self):
        rng = Rng(16)
        with pytest.raises(ShapeError):
            fuse_branches(rand_tensor(rng, 4, 3), rand_tensor(rng, 5, 3),
                          rand_tensor(rng, 6, 3))
