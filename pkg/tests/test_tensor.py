import numpy as np
import pytest

from adaqat import tensor as T
from adaqat.tensor import ContractError, GeometryError, ShapeError, Tensor

from oracles import batch_norm_ref, conv2d_loops, cross_entropy_ref, numeric_grad, rel_err


@pytest.fixture(autouse=True)
def fresh_tape():
    T.reset_tape()
    yield
    T.reset_tape()


def param(a):
    return Tensor(np.asarray(a, dtype=np.float32), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_hand_product(self):
        assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]

    def test_gradient_pinned(self):
        a = param([[1, 0], [0, 1]])
        b = param([[2, 3], [4, 5]])
        T.matmul(a, b).sum().backward()
        np.testing.assert_allclose(a.grad, [[5, 9], [5, 9]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestConv2d:
    def test_ones(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.data.tolist() == [[[[9.0]]]]

    def test_delta_filter_is_identity(self):
        x = np.random.default_rng(0).standard_normal((2, 1, 5, 6)).astype(np.float32)
        f = np.zeros((1, 1, 3, 3), np.float32)
        f[0, 0, 1, 1] = 1
        np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(f), padding=1).data, x)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_loop_reference(self, stride, padding):
        rng = np.random.default_rng(stride * 10 + padding)
        x = rng.standard_normal((1, 2, 5, 5))
        f = rng.standard_normal((3, 2, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(f), stride, padding)
        np.testing.assert_allclose(out.data, conv2d_loops(x, f, stride, padding), atol=1e-5)

    def test_output_geometry_floors(self):
        out = T.conv2d(Tensor(np.zeros((1, 1, 6, 6))), Tensor(np.zeros((2, 1, 3, 3))), stride=2)
        assert out.shape == (1, 2, 2, 2)

    def test_empty_output_raises(self):
        with pytest.raises(GeometryError):
            T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


class TestCrossEntropy:
    def test_uniform(self):
        loss = T.cross_entropy_loss(Tensor(np.zeros((4, 10))), [0, 3, 5, 9])
        assert loss.item() == pytest.approx(np.log(10), abs=1e-6)

    def test_saturated(self):
        logits = np.zeros((2, 5))
        logits[0, 1] = logits[1, 4] = 1000
        assert T.cross_entropy_loss(Tensor(logits), [1, 4]).item() == pytest.approx(0, abs=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy_loss(Tensor(np.zeros((2, 3))), [0, 3])

    def test_matches_reference(self):
        z = np.random.default_rng(1).standard_normal((5, 4))
        y = [0, 1, 3, 2, 3]
        assert T.cross_entropy_loss(Tensor(z), y).item() == pytest.approx(cross_entropy_ref(z, y), rel=1e-6)


class TestBackward:
    def test_linear(self):
        w = param([1, 2, 3])
        w.sum().backward()
        np.testing.assert_array_equal(w.grad, [1, 1, 1])

    def test_quadratic(self):
        w = param([1, 2, 3])
        (w * w).sum().backward()
        np.testing.assert_array_equal(w.grad, [2, 4, 6])

    def test_accumulates(self):
        w = param([1, 2, 3])
        loss = (w * w).sum()
        loss.backward()
        loss.backward()
        np.testing.assert_array_equal(w.grad, [4, 8, 12])

    def test_non_scalar(self):
        w = param([1, 2])
        with pytest.raises(ContractError):
            T.backward(w * 2.0)

    def test_detached_never_receives_grad(self):
        w = param([1.0, 2.0])
        d = w.detach()
        (w * d).sum().backward()
        assert d.grad is None
        np.testing.assert_array_equal(w.grad, [1, 2])

    def test_linearity_of_accumulation(self):
        rng = np.random.default_rng(3)
        a0 = rng.standard_normal((3, 3)).astype(np.float32)
        b = Tensor(rng.standard_normal((3, 3)))
        a1 = param(a0)
        ((a1 @ b).sum() + (a1 * a1).sum()).backward()
        a2 = param(a0)
        (a2 @ b).sum().backward()
        (a2 * a2).sum().backward()
        np.testing.assert_allclose(a1.grad, a2.grad, rtol=1e-6)

    def test_tape_visits_in_reverse_order(self):
        w = param([1.0])
        loss = ((w * 2.0) * 3.0).sum()
        tape = T.get_tape()
        assert [n.index for n in tape.nodes] == [0, 1, 2]
        order = []
        for node in tape.nodes:
            fn = node.backward
            node.backward = lambda g, fn=fn, i=node.index: (order.append(i), fn(g))[1]
        loss.backward()
        assert order == [2, 1, 0]

    def test_no_grad_records_nothing(self):
        w = param([1.0, 2.0])
        with T.no_grad():
            out = w * 3.0
        assert len(T.get_tape()) == 0 and out.node is None


class TestSGD:
    def test_vanilla(self):
        p = param([1.0])
        p.grad = np.array([1.0], np.float32)
        T.sgd_step([p], lr=0.1)
        assert p.data[0] == pytest.approx(0.9)

    def test_momentum_two_steps(self):
        p = param([1.0])
        opt = T.SGD([p], lr=0.1, momentum=0.9)
        seen = []
        for _ in range(2):
            p.grad = np.array([1.0], np.float32)
            opt.step()
            seen.append(float(p.data[0]))
        assert seen == pytest.approx([0.9, 0.71], abs=1e-6)

    def test_decay_only(self):
        p = param([1.0])
        p.grad = np.zeros(1, np.float32)
        T.sgd_step([p], lr=0.1, weight_decay=0.1)
        assert p.data[0] == pytest.approx(0.99)

    def test_missing_gradient(self):
        with pytest.raises(ContractError):
            T.SGD([param([1.0])], lr=0.1).step()


def _gradcheck(build, ref, inputs, h=1e-3):
    """Compare the engine's analytic gradients with finite differences of a float64 reference."""
    ts = [param(x) for x in inputs]
    T.reset_tape()
    build(*ts).backward()
    errs = []
    for i, t in enumerate(ts):
        def f(xi, i=i):
            args = [np.asarray(x, np.float64) for x in inputs]
            args[i] = xi
            return ref(*args)
        errs.append(rel_err(t.grad, numeric_grad(f, inputs[i], h)))
    return max(errs)


def _cases(seed, n=20):
    return [np.random.default_rng(seed + i) for i in range(n)]


class TestGradientOracles:
    """Analytic gradients against central differences (h=1e-3) on 20 random instances per op."""

    tol = 1e-3

    def test_matmul(self):
        for rng in _cases(100):
            a, b, g = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal((3, 2))
            gt = Tensor(g)
            err = _gradcheck(lambda x, y: (T.matmul(x, y) * gt).sum(), lambda x, y: ((x @ y) * g).sum(), [a, b])
            assert err < self.tol

    def test_linear_with_bias(self):
        for rng in _cases(200):
            x, w, b = rng.standard_normal((4, 3)), rng.standard_normal((2, 3)), rng.standard_normal(2)
            g = rng.standard_normal((4, 2))
            gt = Tensor(g)
            err = _gradcheck(lambda x_, w_, b_: (T.linear(x_, w_, b_) * gt).sum(),
                             lambda x_, w_, b_: ((x_ @ w_.T + b_) * g).sum(), [x, w, b])
            assert err < self.tol

    def test_conv2d(self):
        for rng in _cases(300):
            stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
            x, f = rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
            g = rng.standard_normal(conv2d_loops(x, f, stride, pad).shape)
            gt = Tensor(g)
            err = _gradcheck(lambda x_, f_: (T.conv2d(x_, f_, stride, pad) * gt).sum(),
                             lambda x_, f_: (conv2d_loops(x_, f_, stride, pad) * g).sum(), [x, f])
            assert err < self.tol

    def test_cross_entropy(self):
        for rng in _cases(400):
            z = rng.standard_normal((2, 3))
            y = rng.integers(0, 3, 2)
            err = _gradcheck(lambda z_: T.cross_entropy_loss(z_, y), lambda z_: cross_entropy_ref(z_, y), [z])
            assert err < self.tol

    def test_batch_norm(self):
        for rng in _cases(500):
            x = rng.standard_normal((4, 3, 2, 2))
            gamma, beta = rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)
            g = rng.standard_normal(x.shape)
            gt = Tensor(g)
            rm, rv = np.zeros(3, np.float32), np.ones(3, np.float32)
            err = _gradcheck(lambda x_, ga, be: (T.batch_norm(x_, ga, be, rm, rv, True, update_stats=False) * gt).sum(),
                             lambda x_, ga, be: (batch_norm_ref(x_, ga, be) * g).sum(), [x, gamma, beta])
            assert err < self.tol

    def test_relu_tanh_mul_add(self):
        for rng in _cases(600):
            a, b = rng.standard_normal(6), rng.standard_normal(6)
            a[np.abs(a) < 0.01] = 0.5  # keep away from the ReLU kink
            err = _gradcheck(lambda x, y: T.add(T.relu(x), T.tanh(x) * y).sum(),
                             lambda x, y: (np.maximum(x, 0) + np.tanh(x) * y).sum(), [a, b])
            assert err < self.tol

    def test_pooling_and_shortcut(self):
        for rng in _cases(700):
            x = rng.standard_normal((2, 2, 4, 4))
            g1, g2 = rng.standard_normal((2, 2)), rng.standard_normal((2, 4, 2, 2))
            t1, t2 = Tensor(g1), Tensor(g2)

            def ref(x_):
                pad = np.zeros((2, 4, 2, 2))
                pad[:, 1:3] = x_[:, :, ::2, ::2]
                return (x_.mean(axis=(2, 3)) * g1).sum() + (pad * g2).sum()

            err = _gradcheck(lambda x_: T.add((T.global_avg_pool(x_) * t1).sum(),
                                              (T.shortcut_pad(x_, 4, 2) * t2).sum()), ref, [x])
            assert err < self.tol


def test_bias_add_rejects_other_broadcasts():
    with pytest.raises(ShapeError):
        T.bias_add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((1, 3))))


def test_storage_is_float32():
    t = Tensor(np.arange(4, dtype=np.float64))
    assert t.data.dtype == np.float32
    assert T.matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2)))).data.dtype == np.float32


def test_forward_deterministic():
    rng = np.random.default_rng(9)
    x, f = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(f), 1, 1).data
    b = T.conv2d(Tensor(x), Tensor(f), 1, 1).data
    assert np.array_equal(a, b)
