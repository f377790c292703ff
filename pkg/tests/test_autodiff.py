import math

import numpy as np
import pytest

import gradcases
import oracles
from memenc import autodiff as ad
from memenc.autodiff import GraphError, ShapeError, Tensor


@pytest.mark.parametrize("name", sorted(gradcases.CASES))
def test_gradient_matches_finite_differences(name):
    worst = max(gradcases.worst_error(name, seed) for seed in range(20))
    assert worst <= 1e-4, f"{name}: {worst:.2e}"


class TestMatmul:
    def test_identity(self):
        b = np.random.default_rng(0).normal(size=(3, 5))
        out = ad.matmul(Tensor(np.eye(3)), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_hand_multiplied(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_grad_of_sum(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        assert ad.gradcheck(lambda: ad.tsum(ad.matmul(a, b)), [a]) <= 1e-6
        # analytic form: dA = 1 @ B^T
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-12)

    def test_shape_error_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_batched_leading_dims_must_agree(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((3, 4, 5))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ad.softmax(Tensor(np.zeros(4))).data, 0.25, atol=1e-15)

    def test_no_overflow(self):
        out = ad.softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == 1.0 and out[1] == 0.0

    def test_direct_formula(self):
        e = np.exp([1.0, 2.0, 3.0])
        np.testing.assert_allclose(ad.softmax(Tensor([1.0, 2.0, 3.0])).data, e / e.sum(), atol=1e-12)

    def test_rows_sum_to_one(self):
        x = np.random.default_rng(2).uniform(-1e3, 1e3, size=(50, 9))
        s = ad.softmax(Tensor(x), axis=-1).data
        assert np.all(s >= 0)
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)

    def test_non_finite_raises(self):
        with pytest.raises(FloatingPointError):
            ad.softmax(Tensor([0.0, np.inf]))


class TestPointwise:
    def test_tanh_zero_and_odd(self):
        x = np.linspace(-3, 3, 13)
        assert ad.tanh(Tensor(0.0)).item() == 0.0
        np.testing.assert_array_equal(ad.tanh(Tensor(x)).data, -ad.tanh(Tensor(-x)).data)
        assert np.all(np.abs(ad.tanh(Tensor(x * 5)).data) < 1.0)

    def test_tanh_gradcheck_points(self):
        x = Tensor([-2.0, -0.5, 0.1, 3.0], requires_grad=True)
        assert ad.gradcheck(lambda: ad.tsum(ad.tanh(x)), [x]) <= 1e-6

    def test_gelu_asymptotes(self):
        assert ad.gelu(Tensor(0.0)).item() == 0.0
        assert ad.gelu(Tensor(12.0)).item() == pytest.approx(12.0, abs=1e-12)
        assert abs(ad.gelu(Tensor(-12.0)).item()) < 1e-20

    def test_gelu_exact_erf(self):
        x = 0.7
        expected = x * 0.5 * (1 + math.erf(x / math.sqrt(2)))
        assert ad.gelu(Tensor(x)).item() == pytest.approx(expected, rel=1e-14)

    def test_xlogx_zero_convention(self):
        x = Tensor([0.0, 1.0, 0.5], requires_grad=True)
        out = ad.xlogx(x)
        np.testing.assert_allclose(out.data, [0.0, 0.0, 0.5 * math.log(0.5)])
        ad.tsum(out).backward()
        assert x.grad[0] == 0.0


class TestLayernorm:
    def test_constant_row(self):
        out = ad.layernorm(Tensor(np.full((2, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_zero_gamma_gives_beta(self):
        beta = np.array([1.0, -2.0, 0.5])
        x = np.random.default_rng(3).normal(size=(5, 3))
        out = ad.layernorm(Tensor(x), Tensor(np.zeros(3)), Tensor(beta))
        np.testing.assert_array_equal(out.data, np.broadcast_to(beta, (5, 3)))

    def test_standardizes(self):
        x = np.random.default_rng(4).normal(3.0, 2.0, size=(6, 16))
        out = ad.layernorm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(-1), 1.0, atol=1e-4)

    def test_gradcheck_2x4(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        g = Tensor(rng.normal(size=4), requires_grad=True)
        b = Tensor(rng.normal(size=4), requires_grad=True)
        w = rng.normal(size=(2, 4))
        assert ad.gradcheck(lambda: ad.tsum(ad.layernorm(x, g, b) * w), [x, g, b]) <= 1e-5


class TestBilinear:
    @pytest.fixture
    def grid(self):
        return np.random.default_rng(6).normal(size=(5, 7, 3))

    def test_exact_at_nodes(self, grid):
        for i in range(5):
            for j in range(7):
                u = np.array([j / 6 * 2 - 1, i / 4 * 2 - 1])
                out = ad.bilinear_sample(Tensor(grid), Tensor(u)).data
                np.testing.assert_allclose(out, grid[i, j], atol=1e-12)

    def test_corners_align(self, grid):
        out = ad.bilinear_sample(Tensor(grid), Tensor([[-1.0, -1.0], [1.0, 1.0], [1.0, -1.0]])).data
        np.testing.assert_allclose(out, [grid[0, 0], grid[-1, -1], grid[0, -1]], atol=1e-12)

    def test_center_of_2x2(self):
        g = np.random.default_rng(7).normal(size=(2, 2, 4))
        out = ad.bilinear_sample(Tensor(g), Tensor([0.0, 0.0])).data
        np.testing.assert_allclose(out, g.reshape(4, 4).mean(0), atol=1e-15)

    def test_matches_tent_oracle(self, grid):
        rng = np.random.default_rng(8)
        u = rng.uniform(-1, 1, size=(40, 2))
        out = ad.bilinear_sample(Tensor(grid), Tensor(u)).data
        ref = np.stack([oracles.bilinear_tent(grid, p) for p in u])
        np.testing.assert_allclose(out, ref, atol=1e-12, rtol=0)

    def test_linear_within_cell(self, grid):
        # two points on the same row, inside cell x in [2, 3]
        y = -0.3
        u1 = np.array([2.1 / 6 * 2 - 1, y])
        u2 = np.array([2.8 / 6 * 2 - 1, y])
        f = lambda u: ad.bilinear_sample(Tensor(grid), Tensor(u)).data
        for lam in (0.0, 0.25, 0.6, 1.0):
            np.testing.assert_allclose(f(lam * u1 + (1 - lam) * u2), lam * f(u1) + (1 - lam) * f(u2), atol=1e-12)

    def test_out_of_range(self, grid):
        with pytest.raises(ValueError, match="outside"):
            ad.bilinear_sample(Tensor(grid), Tensor([1.01, 0.0]))

    def test_bad_u_shape(self, grid):
        with pytest.raises(ShapeError):
            ad.bilinear_sample(Tensor(grid), Tensor(np.zeros((3, 3))))


class TestAvgMaxPool:
    def test_constant(self):
        out = ad.avgmaxpool(Tensor(np.full((3, 4, 2), 1.5))).data
        np.testing.assert_array_equal(out, 1.5)

    def test_single_cell(self):
        v = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(ad.avgmaxpool(Tensor(v.reshape(1, 1, 3))).data, np.r_[v, v])

    def test_matches_loops(self):
        m = np.random.default_rng(9).normal(size=(3, 3, 2))
        np.testing.assert_allclose(ad.avgmaxpool(Tensor(m)).data, oracles.avgmaxpool_loops(m), atol=1e-12)

    def test_tie_routes_to_first(self):
        m = Tensor(np.zeros((2, 2, 1)), requires_grad=True)
        ad.tsum(ad.avgmaxpool(m)[..., 1:]).backward()
        np.testing.assert_array_equal(m.grad[..., 0], [[1.0, 0.0], [0.0, 0.0]])


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        ad.tsum(x).backward()
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_square(self):
        x = Tensor(np.random.default_rng(10).normal(size=5), requires_grad=True)
        ad.tsum(x * x).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-15)

    def test_shared_subexpression_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * 3.0
        (y * y + y).backward()
        assert x.grad == pytest.approx(2 * 6 * 3 + 3)

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError, match="scalar"):
            (x * 2.0).backward()

    def test_double_backward(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = ad.tsum(x * x)
        loss.backward()
        with pytest.raises(GraphError):
            loss.backward()

    def test_untracked_loss(self):
        with pytest.raises(GraphError):
            ad.tsum(Tensor(np.ones(3))).backward()

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            y = ad.tsum(x * x)
        assert not y.requires_grad

    def test_rerun_bit_identical(self):
        def run():
            rng = np.random.default_rng(11)
            fn, inputs = gradcases.case_composite(rng)
            fn().backward()
            return [t.grad.copy() for t in inputs]
        for a, b in zip(run(), run()):
            np.testing.assert_array_equal(a, b)


class TestStrictShapes:
    def test_mul_requires_equal(self):
        with pytest.raises(ShapeError, match="expand"):
            ad.mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_bias_add_allowed(self):
        out = ad.add(Tensor(np.zeros((2, 3))), Tensor(np.arange(3.0)))
        np.testing.assert_array_equal(out.data, [[0, 1, 2], [0, 1, 2]])

    def test_non_trailing_add_rejected(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))

    def test_expand_rejects(self):
        with pytest.raises(ShapeError):
            ad.expand(Tensor(np.ones((2, 3))), (2, 4))

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError):
            ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=-1)

    def test_reshape_error(self):
        with pytest.raises(ShapeError):
            ad.reshape(Tensor(np.ones(6)), (4, 2))


class TestExactnessOracles:
    """100 random small instances per op against the loop oracles in tests/oracles.py."""

    def test_bilinear(self):
        rng = np.random.default_rng(100)
        for _ in range(100):
            h, w, c = rng.integers(2, 6, size=3)
            grid = rng.normal(size=(h, w, c))
            u = rng.uniform(-1, 1, size=2)
            out = ad.bilinear_sample(Tensor(grid), Tensor(u)).data
            np.testing.assert_allclose(out, oracles.bilinear_tent(grid, u), atol=1e-12, rtol=0)

    def test_avgmaxpool(self):
        rng = np.random.default_rng(101)
        for _ in range(100):
            m = rng.normal(size=tuple(rng.integers(1, 5, size=3)))
            np.testing.assert_allclose(ad.avgmaxpool(Tensor(m)).data, oracles.avgmaxpool_loops(m),
                                       atol=1e-12, rtol=0)

    def test_softmax(self):
        rng = np.random.default_rng(102)
        for _ in range(100):
            row = rng.normal(scale=rng.uniform(0.1, 50), size=int(rng.integers(1, 10)))
            np.testing.assert_allclose(ad.softmax(Tensor(row)).data, oracles.softmax_loops(row),
                                       atol=1e-12, rtol=0)
