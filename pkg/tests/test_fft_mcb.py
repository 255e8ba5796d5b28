import numpy as np
import pytest

from gma import autodiff as ad
from gma import fft
from gma.autodiff import Tensor
from gma.errors import ShapeError
from gma.mcb import (SketchSpec, circular_convolve_fft, combined_sketch_outer, count_sketch, mcb_pool, sketch_pair,
                     splitmix64)
from gradcheck import rand_param, worst_mismatch

KERNEL_DIMS = (1, 2, 3, 8, 16, 257)


def naive_dft(x):
    n = len(x)
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) @ x


class TestFFT:
    @pytest.mark.parametrize("n", [1, 2, 3, 5, 8, 12, 16, 31, 64, 100, 257])
    def test_matches_dft_matrix(self, n):
        x = np.random.default_rng(n).normal(size=n) + 1j * np.random.default_rng(n + 1).normal(size=n)
        np.testing.assert_allclose(fft.fft(x), naive_dft(x), atol=1e-9 * max(n, 1))

    @pytest.mark.parametrize("n", [7, 16, 1000, 16000])
    def test_inverse_round_trip(self, n):
        x = np.random.default_rng(3).normal(size=n)
        np.testing.assert_allclose(fft.ifft(fft.fft(x)).real, x, atol=1e-9)

    def test_batched_rows_independent(self):
        x = np.random.default_rng(4).normal(size=(3, 12))
        rows = np.stack([fft.fft(r) for r in x])
        np.testing.assert_allclose(fft.fft(x), rows, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fft.fft(np.zeros(0))


class TestCircularConvolution:
    @pytest.mark.parametrize("D", KERNEL_DIMS)
    def test_fft_equals_direct(self, D):
        rng = np.random.default_rng(D)
        a, b = rng.normal(size=D), rng.normal(size=D)
        got = circular_convolve_fft(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(got, fft.circular_convolve_direct(a, b), rtol=0, atol=1e-9)

    def test_delta_is_identity(self):
        a = np.arange(1.0, 7.0)
        delta = np.eye(6)[0]
        np.testing.assert_allclose(circular_convolve_fft(Tensor(a), Tensor(delta)).data, a, atol=1e-12)

    def test_shifted_delta_rotates(self):
        a = np.arange(1.0, 7.0)
        np.testing.assert_allclose(circular_convolve_fft(Tensor(a), Tensor(np.eye(6)[1])).data,
                                   np.roll(a, 1), atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            circular_convolve_fft(Tensor(np.ones(4)), Tensor(np.ones(5)))


class TestCountSketch:
    def test_zero_maps_to_zero(self):
        spec = SketchSpec(6, 4, seed=1)
        assert not count_sketch(Tensor(np.zeros(6)), spec).data.any()

    def test_hand_example(self):
        spec = SketchSpec(2, 2, seed=0)
        object.__setattr__(spec, "h", np.array([0, 1]))
        object.__setattr__(spec, "s", np.array([1.0, -1.0]))
        assert count_sketch(Tensor([3.0, 5.0]), spec).data.tolist() == [3.0, -5.0]

    def test_deterministic_from_seed(self):
        a, b = SketchSpec(32, 64, seed=9), SketchSpec(32, 64, seed=9)
        assert a.h.tobytes() == b.h.tobytes() and a.s.tobytes() == b.s.tobytes()
        assert not np.array_equal(a.h, SketchSpec(32, 64, seed=10).h)

    def test_known_hash_values(self):
        # reference splitmix64 stream for seed 0, pinned so platform drift is caught
        assert [int(x) for x in splitmix64(0, 2)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4]
        spec = SketchSpec(4, 8, seed=0)
        assert spec.h.tolist() == [7, 7, 3, 1]
        assert spec.s.tolist() == [1.0, -1.0, 1.0, -1.0]

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            count_sketch(Tensor(np.ones(3)), SketchSpec(4, 8, seed=0))

    def test_inner_product_unbiased(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=32), rng.normal(size=32)
        true = float(x @ y)
        est = [float(count_sketch(Tensor(x), s).data @ count_sketch(Tensor(y), s).data)
               for s in (SketchSpec(32, 64, seed=k) for k in range(2000))]
        assert abs(np.mean(est) - true) <= 0.05 * abs(true)


class TestMCB:
    def test_matches_combined_sketch_oracle(self):
        rng = np.random.default_rng(5)
        x, y = rng.normal(size=4), rng.normal(size=4)
        specs = sketch_pair((4, 4), 8, seed=3)
        got = mcb_pool(Tensor(x), Tensor(y), specs).data
        np.testing.assert_allclose(got, combined_sketch_outer(x, y, specs), rtol=0, atol=1e-9)

    def test_zero_and_scaling(self):
        rng = np.random.default_rng(6)
        x, y = rng.normal(size=5), rng.normal(size=7)
        specs = sketch_pair((5, 7), 16, seed=0)
        assert np.allclose(mcb_pool(Tensor(np.zeros(5)), Tensor(y), specs).data, 0.0, atol=1e-15)
        np.testing.assert_allclose(mcb_pool(Tensor(2 * x), Tensor(y), specs).data,
                                   2 * mcb_pool(Tensor(x), Tensor(y), specs).data, rtol=0, atol=1e-12)

    def test_bilinear_in_first_argument(self):
        rng = np.random.default_rng(7)
        x, x2, y = rng.normal(size=6), rng.normal(size=6), rng.normal(size=6)
        specs = sketch_pair((6, 6), 32, seed=1)

        def pool(a):
            return mcb_pool(Tensor(a), Tensor(y), specs).data

        np.testing.assert_allclose(pool(1.5 * x - 0.5 * x2), 1.5 * pool(x) - 0.5 * pool(x2), rtol=0, atol=1e-12)

    def test_sketch_dim_mismatch(self):
        with pytest.raises(ShapeError):
            mcb_pool(Tensor(np.ones(2)), Tensor(np.ones(2)), (SketchSpec(2, 4, 0), SketchSpec(2, 8, 1)))

    def test_gradients(self):
        rng = np.random.default_rng(8)
        x, y = rand_param("x", (2, 5), rng), rand_param("y", (2, 3), rng)
        w = rng.normal(size=(2, 9))
        specs = sketch_pair((5, 3), 9, seed=2)
        assert worst_mismatch(lambda: ad.sum(ad.mul(mcb_pool(x, y, specs), Tensor(w))), [x, y]) <= 1.0
