"""RNG determinism, noise synthesis, bicubic resampling, patches, PNM I/O."""

import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dartir.data import (
    ImageBuffer,
    Rng,
    add_awgn,
    bicubic_resize,
    bicubic_resize_float,
    cubic_kernel,
    extract_patches,
    patch_anchors,
    read_pnm,
    resize_weights,
    sr_anchor_pairs,
    synth_image,
    write_pnm,
)
from dartir.errors import (
    ConfigError,
    PnmMagicError,
    PnmMaxvalError,
    PnmTruncatedError,
    ShapeError,
)

FIXTURES = os.path.join(os.path.dirname(__file__), "data")


# ---------------------------------------------------------------------------
# Naive bicubic oracle: direct 2-D summation with the same kernel, no
# separable pass. Written before the tests that consume it.


def naive_bicubic(img: np.ndarray, out_h: int, out_w: int,
                  scale_h: float, scale_w: float) -> np.ndarray:
    h, w = img.shape
    iy, wy = resize_weights(h, out_h, scale_h)
    ix, wx = resize_weights(w, out_w, scale_w)
    out = np.zeros((out_h, out_w))
    for r in range(out_h):
        for c in range(out_w):
            acc = 0.0
            for ty in range(iy.shape[1]):
                for tx in range(ix.shape[1]):
                    acc += wy[r, ty] * wx[c, tx] * img[iy[r, ty], ix[c, tx]]
            out[r, c] = acc
    return out


class TestRng:
    def test_same_seed_same_stream(self):
        a = [Rng(42).next_u64() for _ in range(8)]
        b = [Rng(42).next_u64() for _ in range(8)]
        assert a == b

    def test_different_seeds_differ(self):
        assert Rng(1).next_u64() != Rng(2).next_u64()

    def test_uniform_range(self):
        rng = Rng(3)
        vals = [rng.uniform() for _ in range(1000)]
        assert all(0.0 <= v < 1.0 for v in vals)

    def test_normals_odd_count_consumes_pairs(self):
        a = Rng(4)
        first_three = a.normals(3)
        b = Rng(4)
        four = b.normals(4)
        assert np.array_equal(first_three, four[:3])
        # after an odd draw the next value starts a fresh pair
        assert a.normals(1)[0] == Rng(4).normals(6)[4]

    def test_truncated_normals_bounded(self):
        vals = Rng(5).truncated_normals(500, std=0.02)
        assert np.abs(vals).max() <= 0.04 + 1e-15

    def test_derived_streams_independent(self):
        assert Rng.derived(7, 1).next_u64() != Rng.derived(7, 2).next_u64()

    def test_shuffle_is_deterministic(self):
        items = list(range(10))
        Rng(8).shuffle(items)
        again = list(range(10))
        Rng(8).shuffle(again)
        assert items == again
        assert sorted(items) == list(range(10))


class TestAwgn:
    def test_sigma_zero_is_bit_exact_copy(self):
        img = synth_image(12, 9, 1, seed=0)
        out = add_awgn(img, 0.0, Rng(1))
        assert np.array_equal(out.samples, img.samples)

    def test_same_seed_twice_identical(self):
        img = synth_image(10, 10, 3, seed=2)
        a = add_awgn(img, 25.0, Rng(9))
        b = add_awgn(img, 25.0, Rng(9))
        assert np.array_equal(a.samples, b.samples)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ConfigError):
            add_awgn(synth_image(8, 8, 1, 0), -1.0, Rng(0))

    def test_law_of_large_numbers_at_sigma_25(self):
        img = ImageBuffer(np.full((1024, 1024, 1), 128, dtype=np.uint8))
        out = add_awgn(img, 25.0, Rng(0))
        diff = out.samples.astype(np.float64) - 128.0
        assert abs(diff.mean()) <= 0.3
        assert abs(diff.std() - 25.0) <= 0.5

    def test_golden_byte_stream_seed_zero(self):
        img = ImageBuffer(np.full((16, 16, 1), 128, dtype=np.uint8))
        out = add_awgn(img, 25.0, Rng(0))
        with open(os.path.join(FIXTURES, "awgn_sigma25_seed0.bin"), "rb") as fh:
            assert out.samples.tobytes() == fh.read()


class TestBicubic:
    def test_keys_kernel_anchor_values(self):
        assert cubic_kernel(np.array([0.0]))[0] == 1.0
        assert cubic_kernel(np.array([1.0]))[0] == 0.0
        assert cubic_kernel(np.array([2.0]))[0] == 0.0

    @pytest.mark.parametrize("scale", [2.0, 3.0, 4.0, 0.5, 1.0 / 3.0, 0.25])
    def test_constant_image_is_fixed_point(self, scale):
        img = ImageBuffer(np.full((12, 12, 3), 77, dtype=np.uint8))
        out = bicubic_resize(img, scale)
        assert np.all(out.samples == 77)

    @pytest.mark.parametrize("n_in,n_out,scale", [
        (16, 8, 0.5), (16, 32, 2.0), (12, 4, 1.0 / 3.0), (9, 27, 3.0),
        (16, 4, 0.25), (5, 20, 4.0),
    ])
    def test_weight_rows_sum_to_one(self, n_in, n_out, scale):
        _, weights = resize_weights(n_in, n_out, scale)
        assert np.abs(weights.sum(axis=1) - 1.0).max() <= 1e-12

    @pytest.mark.parametrize("scale", [0.5, 2.0, 1.0 / 3.0, 3.0, 0.25, 4.0])
    def test_matches_naive_double_loop(self, scale):
        rng = Rng(11)
        img = np.array([[255.0 * rng.uniform() for _ in range(16)]
                        for _ in range(16)])
        out_n = int(math.ceil(16 * scale))
        fast = bicubic_resize_float(img, out_n, out_n, scale, scale)
        slow = naive_bicubic(img, out_n, out_n, scale, scale)
        assert np.abs(fast - slow).max() <= 1e-6

    def test_color_planes_resized_independently(self):
        rng = Rng(12)
        img = np.array([[[255.0 * rng.uniform() for _ in range(3)]
                         for _ in range(8)] for _ in range(8)])
        both = bicubic_resize_float(img, 4, 4, 0.5, 0.5)
        for c in range(3):
            single = bicubic_resize_float(img[:, :, c], 4, 4, 0.5, 0.5)
            assert np.array_equal(both[:, :, c], single)

    def test_output_stays_in_range(self):
        img = synth_image(16, 16, 1, seed=3)
        for scale in (0.5, 2.0):
            out = bicubic_resize(img, scale)
            assert out.samples.min() >= 0 and out.samples.max() <= 255


class TestPatches:
    def test_single_patch_exact_fit(self):
        img = synth_image(8, 8, 1, seed=20)
        assert extract_patches(img, 8, 8) == [(0, 0)]

    def test_disjoint_tiling_16x16(self):
        img = synth_image(16, 16, 1, seed=21)
        anchors = extract_patches(img, 8, 8)
        assert anchors == [(0, 0), (0, 8), (8, 0), (8, 8)]

    def test_sr_alignment(self):
        img = synth_image(8, 10, 1, seed=22)
        pairs = extract_patches(img, 4, 1, scale=2)
        assert ((3, 5), (6, 10)) in pairs
        for (ly, lx), (hy, hx) in pairs:
            assert (hy, hx) == (2 * ly, 2 * lx)

    def test_shuffle_is_deterministic_and_complete(self):
        img = synth_image(16, 16, 1, seed=23)
        a = extract_patches(img, 8, 4, rng=Rng(5))
        b = extract_patches(img, 8, 4, rng=Rng(5))
        assert a == b
        assert sorted(a) == patch_anchors(16, 16, 8, 4)

    def test_oversized_patch_rejected(self):
        with pytest.raises(ShapeError):
            patch_anchors(8, 8, 9, 1)


class TestPnm:
    def test_round_trip_gray_bit_exact(self, tmp_path):
        img = synth_image(11, 7, 1, seed=4)
        path = tmp_path / "g.pgm"
        write_pnm(path, img)
        back = read_pnm(path)
        assert np.array_equal(back.samples, img.samples)

    def test_round_trip_color_bit_exact(self, tmp_path):
        img = synth_image(6, 9, 3, seed=5)
        path = tmp_path / "c.ppm"
        write_pnm(path, img)
        assert np.array_equal(read_pnm(path).samples, img.samples)

    def test_minimal_valid_file(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P5 2 2 255\n\x01\x02\x03\x04")
        img = read_pnm(path)
        assert img.width == 2 and img.height == 2 and img.channels == 1
        assert list(img.samples.reshape(-1)) == [1, 2, 3, 4]

    def test_unsupported_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.pbm"
        path.write_bytes(b"P4 2 2\n\x00")
        with pytest.raises(PnmMagicError):
            read_pnm(path)

    def test_wrong_maxval_rejected(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P5 2 2 128\n\x01\x02\x03\x04")
        with pytest.raises(PnmMaxvalError):
            read_pnm(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P5 2 2 255\n\x01\x02\x03")
        with pytest.raises(PnmTruncatedError):
            read_pnm(path)


class TestImageBuffer:
    def test_float_round_trip(self):
        img = synth_image(9, 9, 3, seed=6)
        back = ImageBuffer.from_float01(img.to_float01())
        assert np.array_equal(back.samples, img.samples)

    def test_rejects_bad_channel_count(self):
        with pytest.raises(ShapeError):
            ImageBuffer(np.zeros((4, 4, 2), dtype=np.uint8))

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_synth_images_deterministic(self, seed):
        a = synth_image(16, 16, 1, seed)
        b = synth_image(16, 16, 1, seed)
        assert np.array_equal(a.samples, b.samples)
