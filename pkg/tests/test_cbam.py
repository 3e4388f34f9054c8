"""Channel and spatial attention gates against scalar-loop references."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dartir import tensor as T
from dartir.cbam import (
    ChannelAttnParams,
    SpatialAttnParams,
    cbam_refine,
    channel_attention,
    spatial_attention,
)
from dartir.data import Rng
from dartir.errors import ConfigError, ShapeError
from dartir.tensor import Tensor, grad_check


def rand_tensor(rng: Rng, *shape: int) -> Tensor:
    return Tensor(rng.normals(int(np.prod(shape))).reshape(shape))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# ---------------------------------------------------------------------------
# Scalar-loop oracles (no vectorized shortcuts), written first


def channel_gate_oracle(f: np.ndarray, w0: np.ndarray, w1: np.ndarray) -> np.ndarray:
    """Direct elementwise transcription of the shared-MLP channel gate."""
    c, h, w = f.shape
    hidden = w0.shape[1]
    avg = np.array([f[ch].sum() / (h * w) for ch in range(c)])
    mx = np.array([f[ch].max() for ch in range(c)])

    def mlp(vec):
        mid = np.zeros(hidden)
        for j in range(hidden):
            acc = sum(vec[i] * w0[i, j] for i in range(c))
            mid[j] = max(acc, 0.0)
        out = np.zeros(c)
        for j in range(c):
            out[j] = sum(mid[i] * w1[i, j] for i in range(hidden))
        return out

    return _sigmoid(mlp(avg) + mlp(mx))


def spatial_gate_oracle(f: np.ndarray, weight: np.ndarray, bias: float) -> np.ndarray:
    """Direct transcription of the 7x7 gate over channel mean/max maps."""
    c, h, w = f.shape
    pooled = np.stack([f.mean(axis=0), f.max(axis=0)])
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = bias
            for ch in range(2):
                for dy in range(7):
                    for dx in range(7):
                        sy = _reflect(y + dy - 3, h)
                        sx = _reflect(x + dx - 3, w)
                        acc += weight[0, ch, dy, dx] * pooled[ch, sy, sx]
            out[y, x] = acc
    return _sigmoid(out)


def _reflect(i: int, n: int) -> int:
    if i < 0:
        return -i
    if i >= n:
        return 2 * n - 2 - i
    return i


def make_params(rng: Rng, channels: int = 8, reduction: int = 4):
    return (ChannelAttnParams.create(channels, reduction, rng),
            SpatialAttnParams.create(rng))


class TestChannelAttention:
    def test_zero_network_gates_at_half(self):
        rng = Rng(0)
        cp, _ = make_params(rng)
        cp.w0 = Tensor(np.zeros_like(cp.w0.data))
        cp.w1 = Tensor(np.zeros_like(cp.w1.data))
        f = rand_tensor(rng, 8, 5, 6)
        gate, gated = channel_attention(f, cp)
        assert np.all(gate.data == 0.5)
        assert np.allclose(gated.data, 0.5 * f.data, atol=1e-15)

    def test_constant_map_makes_pools_coincide(self):
        rng = Rng(1)
        cp, _ = make_params(rng)
        levels = np.arange(1.0, 9.0)
        f = Tensor(np.broadcast_to(levels[:, None, None], (8, 4, 4)).copy())
        gate, _ = channel_attention(f, cp)
        hidden = np.maximum(levels @ cp.w0.data, 0.0)
        expected = _sigmoid(2.0 * (hidden @ cp.w1.data))
        assert np.allclose(gate.data, expected, atol=1e-12)

    def test_matches_scalar_loop_oracle(self):
        rng = Rng(2)
        cp, _ = make_params(rng)
        f = rand_tensor(rng, 8, 5, 7)
        gate, gated = channel_attention(f, cp)
        expected = channel_gate_oracle(f.data, cp.w0.data, cp.w1.data)
        assert np.abs(gate.data - expected).max() <= 1e-12
        assert np.abs(gated.data - expected[:, None, None] * f.data).max() <= 1e-12

    def test_indivisible_reduction_rejected(self):
        with pytest.raises(ConfigError):
            ChannelAttnParams.create(6, 4, Rng(3))

    def test_channel_permutation_equivariance(self):
        rng = Rng(4)
        cp, _ = make_params(rng)
        f = rand_tensor(rng, 8, 4, 4)
        gate, _ = channel_attention(f, cp)
        perm = np.array([3, 1, 7, 0, 5, 2, 6, 4])
        cp_perm = ChannelAttnParams(
            w0=Tensor(cp.w0.data[perm]), w1=Tensor(cp.w1.data[:, perm]),
            reduction=cp.reduction)
        gate_perm, _ = channel_attention(Tensor(f.data[perm]), cp_perm)
        assert np.allclose(gate_perm.data, gate.data[perm], atol=1e-12)


class TestSpatialAttention:
    def test_zero_network_gates_at_half(self):
        rng = Rng(5)
        _, sp = make_params(rng)
        sp.weight = Tensor(np.zeros_like(sp.weight.data))
        sp.bias = Tensor(np.zeros(1))
        f = rand_tensor(rng, 3, 6, 6)
        gate, gated = spatial_attention(f, sp)
        assert np.all(gate.data == 0.5)
        assert np.allclose(gated.data, 0.5 * f.data, atol=1e-15)

    def test_large_bias_saturates_gate_open(self):
        rng = Rng(6)
        _, sp = make_params(rng)
        sp.weight = Tensor(np.zeros_like(sp.weight.data))
        sp.bias = Tensor([20.0])
        f = rand_tensor(rng, 3, 5, 5)
        gate, gated = spatial_attention(f, sp)
        assert np.all(gate.data > 1.0 - 1e-8)
        assert np.abs(gated.data - f.data).max() < 1e-7

    def test_matches_scalar_loop_oracle(self):
        rng = Rng(7)
        _, sp = make_params(rng)
        f = rand_tensor(rng, 4, 6, 5)
        gate, gated = spatial_attention(f, sp)
        expected = spatial_gate_oracle(f.data, sp.weight.data, float(sp.bias.data[0]))
        assert np.abs(gate.data[0] - expected).max() <= 1e-12
        assert np.abs(gated.data - expected[None] * f.data).max() <= 1e-12

    def test_spatial_size_below_pad_support_rejected(self):
        rng = Rng(8)
        _, sp = make_params(rng)
        with pytest.raises(ShapeError):
            spatial_attention(rand_tensor(rng, 2, 3, 8), sp)

    def test_non_7x7_kernel_rejected(self):
        rng = Rng(16)
        _, sp = make_params(rng)
        sp.weight = Tensor(np.zeros((1, 2, 5, 5)))
        with pytest.raises(ConfigError):
            spatial_attention(rand_tensor(rng, 3, 8, 8), sp)

    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 100.0))
    @settings(max_examples=25, deadline=None)
    def test_channel_argmax_is_scale_invariant(self, seed, lam):
        f = np.abs(Rng(seed).normals(3 * 4 * 4).reshape(3, 4, 4)) + 0.1
        assert np.array_equal(f.argmax(axis=0), (lam * f).argmax(axis=0))


class TestCbamRefine:
    def test_both_zero_networks_quarter_the_input(self):
        rng = Rng(9)
        cp, sp = make_params(rng)
        cp.w0 = Tensor(np.zeros_like(cp.w0.data))
        cp.w1 = Tensor(np.zeros_like(cp.w1.data))
        sp.weight = Tensor(np.zeros_like(sp.weight.data))
        sp.bias = Tensor(np.zeros(1))
        f = rand_tensor(rng, 8, 5, 5)
        out = cbam_refine(f, cp, sp)
        assert np.allclose(out.data, 0.25 * f.data, atol=1e-15)

    def test_saturated_gates_pass_input_through(self):
        # drive both gates into sigmoid saturation: the channel MLP has no
        # bias, so open it with large positive weights on a positive map;
        # the spatial gate opens through its bias
        rng = Rng(10)
        cp, sp = make_params(rng)
        cp.w0 = Tensor(np.full_like(cp.w0.data, 10.0))
        cp.w1 = Tensor(np.full_like(cp.w1.data, 10.0))
        sp.weight = Tensor(np.zeros_like(sp.weight.data))
        sp.bias = Tensor([200.0])
        f = Tensor(0.5 + np.abs(Rng(11).normals(8 * 5 * 5)).reshape(8, 5, 5))
        out = cbam_refine(f, cp, sp)
        assert np.abs(out.data - f.data).max() < 1e-9

    def test_matches_composed_oracles(self):
        rng = Rng(12)
        cp, sp = make_params(rng)
        f = rand_tensor(rng, 8, 6, 6)
        out = cbam_refine(f, cp, sp).data
        ch_gate = channel_gate_oracle(f.data, cp.w0.data, cp.w1.data)
        mid = ch_gate[:, None, None] * f.data
        sp_gate = spatial_gate_oracle(mid, sp.weight.data, float(sp.bias.data[0]))
        assert np.abs(out - sp_gate[None] * mid).max() <= 1e-12

    def test_gates_strictly_inside_unit_interval(self):
        rng = Rng(13)
        cp, sp = make_params(rng)
        f = Tensor(1e6 * Rng(14).normals(8 * 4 * 4).reshape(8, 4, 4))
        c_gate, mid = channel_attention(f, cp)
        s_gate, _ = spatial_attention(mid, sp)
        for gate in (c_gate.data, s_gate.data):
            assert np.all(gate > 0.0) and np.all(gate < 1.0)

    def test_gradient_check_passes(self):
        rng = Rng(15)
        cp, sp = make_params(rng, channels=4, reduction=2)
        f = rand_tensor(rng, 4, 4, 5)
        w = rng.normals(4 * 4 * 5).reshape(4, 4, 5)
        params = cp.named("chan") | sp.named("spat") | {"f": f}
        report = grad_check(
            lambda: T.sum_all(T.mul(cbam_refine(f, cp, sp), Tensor(w))), params)
        assert report.passed(1e-4), report.worst()
