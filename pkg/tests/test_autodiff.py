import numpy as np
import pytest

from ltdr.autodiff import (
    GraphError,
    ShapeError,
    Tensor,
    add,
    cross_entropy,
    finite_difference_gradient,
    gelu,
    matmul,
    mix,
    mul,
    normalize_rows,
    softmax_rows,
    variance_rows,
)


def rel_err(got: np.ndarray, want: np.ndarray) -> float:
    """Worst per-coordinate relative error with a floor that absorbs
    central-difference rounding noise on near-zero gradients."""
    scale = np.maximum(1e-3, np.maximum(np.abs(got), np.abs(want)))
    return float(np.max(np.abs(got - want) / scale)) if got.size else 0.0


class TestMatmul:
    def test_identity(self):
        a = Tensor([[3.0, 4.0], [5.0, 6.0]])
        out = matmul(Tensor(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_hand_computed(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_zeros(self):
        out = matmul(Tensor(np.zeros((3, 2))), Tensor(np.ones((2, 5))))
        np.testing.assert_array_equal(out.data, np.zeros((3, 5)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 5\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 5))))


class TestSoftmaxRows:
    def test_uniform(self):
        out = softmax_rows(Tensor([[0.0, 0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.25] * 4], atol=1e-15)

    def test_closed_form(self):
        out = softmax_rows(Tensor([[np.log(1.0), np.log(3.0)]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-15)

    def test_no_overflow(self):
        out = softmax_rows(Tensor([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-300)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            z = rng.uniform(-50, 50, size=(rng.integers(1, 9), rng.integers(1, 9)))
            p = softmax_rows(Tensor(z)).data
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(p >= 0)


class TestCrossEntropy:
    def test_uniform_logits(self):
        out = cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 2])
        np.testing.assert_allclose(out.item(), np.log(4.0), atol=1e-15)

    def test_confident_correct_limit(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 1e4
        out = cross_entropy(Tensor(logits), [2])
        assert out.item() < 1e-12

    def test_closed_form(self):
        out = cross_entropy(Tensor([[np.log(1.0), np.log(3.0)]]), [1])
        np.testing.assert_allclose(out.item(), -np.log(0.75), atol=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError, match="out of range"):
            cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


class TestVarianceRows:
    def test_uniform_rows_are_zero(self):
        for k in (1, 2, 4, 8):
            v = variance_rows(Tensor(np.full((2, k), 1.0 / k)))
            np.testing.assert_array_equal(v.data, np.zeros(2))

    @pytest.mark.parametrize("k", [2, 4, 8])
    def test_one_hot_exact(self, k):
        row = np.zeros((1, k))
        row[0, 0] = 1.0
        v = variance_rows(Tensor(row))
        assert v.data[0] == (k - 1) / k**2

    def test_hand_computed(self):
        v = variance_rows(Tensor([[0.5, 0.5, 0.0, 0.0]]))
        assert v.data[0] == 0.0625

    def test_permutation_invariant_and_zero_iff_constant(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            row = rng.uniform(0, 1, size=(1, 6))
            perm = rng.permutation(6)
            a = variance_rows(Tensor(row)).data[0]
            b = variance_rows(Tensor(row[:, perm])).data[0]
            assert a == pytest.approx(b, abs=1e-15)
            assert (a == 0) == bool(np.all(row == row[0, 0]))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        mul(x, x).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], atol=1e-15)

    def test_disconnected_parameter_stays_zero(self):
        x = Tensor(np.ones(3), requires_grad=True)
        w = Tensor(np.ones(3), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(w.grad, np.zeros(3))

    def test_repeated_backward_accumulates(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        loss = x.sum()
        loss.backward()
        loss.backward()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError, match="scalar"):
            add(x, x).backward()

    def test_diamond_fanout(self):
        # y = x + x reuses x twice; grad must be 2
        x = Tensor(np.array(1.5), requires_grad=True)
        add(x, x).backward()
        assert x.grad == pytest.approx(2.0)

    def test_intermediate_holds_grad(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        h = mul(x, 3.0)
        h.sum().backward()
        np.testing.assert_array_equal(h.grad, np.ones((2, 2)))
        np.testing.assert_array_equal(x.grad, np.full((2, 2), 3.0))

    def test_aliased_adjoints_do_not_share_buffers(self):
        # add passes its adjoint through unchanged to both parents; the
        # stored grads must still be independent buffers.
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(2), requires_grad=True)
        add(a, b).sum().backward()
        a.grad[0] = 99.0
        np.testing.assert_array_equal(b.grad, np.ones(2))


class TestFiniteDifference:
    def test_linear(self):
        x = Tensor(np.array([1.0, -2.0, 0.5]))
        np.testing.assert_allclose(
            finite_difference_gradient(lambda t: t.sum(), x), np.ones(3), atol=1e-9
        )

    def test_square(self):
        x = Tensor(np.array(3.0).reshape(1))
        g = finite_difference_gradient(lambda t: mul(t, t).sum(), x, h=1e-5)
        np.testing.assert_allclose(g, [6.0], atol=1e-6)

    def test_bad_step_rejected(self):
        with pytest.raises(ValueError):
            finite_difference_gradient(lambda t: t.sum(), Tensor(np.ones(2)), h=0.0)


def _check_op_gradient(build_loss, x_shape, seed, h=1e-5, tol=1e-4):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-2, 2, size=x_shape), requires_grad=True)
    build_loss(x).backward()
    fd = finite_difference_gradient(build_loss, x, h=h)
    assert rel_err(x.grad, fd) < tol


@pytest.mark.parametrize(
    "name,build_loss,shape",
    [
        ("matmul_lhs", lambda x: matmul(x, Tensor(np.linspace(-1, 1, 12).reshape(4, 3))).sum(), (5, 4)),
        ("matmul_rhs", lambda x: matmul(Tensor(np.linspace(-1, 1, 20).reshape(5, 4)), x).sum(), (4, 3)),
        ("add_bias", lambda x: add(Tensor(np.ones((3, 4))), x).mean(), (4,)),
        ("mul_tensor", lambda x: mul(x, x).sum(), (3, 4)),
        ("mul_const", lambda x: mul(x, np.linspace(0.5, 2.0, 12).reshape(3, 4)).sum(), (3, 4)),
        ("gelu", lambda x: gelu(x).sum(), (4, 5)),
        ("softmax", lambda x: mul(softmax_rows(x), np.linspace(-1, 1, 12).reshape(3, 4)).sum(), (3, 4)),
        ("variance", lambda x: variance_rows(x).sum(), (4, 5)),
        ("normalize", lambda x: mul(normalize_rows(softmax_rows(x)), np.linspace(0, 1, 12).reshape(3, 4)).sum(), (3, 4)),
        ("cross_entropy", lambda x: cross_entropy(x, [0, 2, 1]), (3, 4)),
        ("mean", lambda x: x.mean(), (6,)),
    ],
)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_op_gradients_match_central_differences(name, build_loss, shape, seed):
    _check_op_gradient(build_loss, shape, seed)


@pytest.mark.parametrize("seed", [0, 1])
def test_mix_gradients(seed):
    rng = np.random.default_rng(seed)
    m, k, d = 4, 3, 5
    outs_data = [rng.uniform(-2, 2, size=(m, d)) for _ in range(k)]

    def loss_of_weights(w):
        return mix(w, [Tensor(o) for o in outs_data]).sum()

    _check_op_gradient(loss_of_weights, (m, k), seed)

    w_data = rng.uniform(-2, 2, size=(m, k))

    def loss_of_out0(y):
        return mix(Tensor(w_data), [y] + [Tensor(o) for o in outs_data[1:]]).sum()

    _check_op_gradient(loss_of_out0, (m, d), seed + 10)


def test_softmax_cross_entropy_composite_matches_backward():
    rng = np.random.default_rng(11)
    labels = rng.integers(0, 4, size=6)
    x = Tensor(rng.uniform(-2, 2, size=(6, 4)), requires_grad=True)

    def f(t):
        return cross_entropy(matmul(t, Tensor(np.eye(4))), labels)

    f(x).backward()
    fd = finite_difference_gradient(f, x, h=1e-5)
    assert rel_err(x.grad, fd) < 1e-4


def test_matmul_identity_is_bitwise():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((6, 6))
    out = matmul(Tensor(np.eye(6)), Tensor(a))
    assert np.array_equal(out.data, a)


def test_forward_values_stay_finite():
    rng = np.random.default_rng(9)
    x = Tensor(rng.uniform(-2, 2, size=(8, 6)), requires_grad=True)
    w = Tensor(rng.uniform(-2, 2, size=(6, 4)), requires_grad=True)
    out = softmax_rows(matmul(gelu(x), w))
    assert np.all(np.isfinite(out.data))
