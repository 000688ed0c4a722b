import numpy as np
import pytest

from synthdetect.tensor import (
    GradTape,
    GradientError,
    ShapeError,
    Tensor,
    backward,
    batch_norm,
    conv2d_valid,
    conv_output_size,
    dropout,
    linear,
    mean_pool,
    sigmoid,
    sum_all,
)

from helpers import assert_grads_close, fd_gradient


def test_tensor_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        Tensor([1.0, np.inf])
    with pytest.raises(FloatingPointError):
        Tensor([np.nan])


def test_tensor_is_isolated_from_caller_buffer():
    buf = np.ones(3)
    t = Tensor(buf)
    buf[0] = 99.0
    assert t.data[0] == 1.0


def test_op_output_buffers_are_read_only():
    t = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
    with pytest.raises(ValueError):
        t.data[0] = 0.0


# --- conv2d ---------------------------------------------------------------


def test_conv2d_one_by_one_kernel_scales():
    x = Tensor(np.ones((1, 3, 3)))
    k = Tensor(np.full((1, 1, 1, 1), 2.0))
    b = Tensor(np.zeros(1))
    out = conv2d_valid(x, k, b, stride=1)
    assert out.shape == (1, 3, 3)
    assert np.allclose(out.data, 2.0)


def test_conv2d_hand_sum():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    k = Tensor(np.ones((1, 1, 2, 2)))
    b = Tensor(np.zeros(1))
    out = conv2d_valid(x, k, b, stride=1)
    assert out.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == pytest.approx(10.0)


def test_conv2d_full_scale_shape():
    x = Tensor(np.zeros((3, 224, 224)))
    k = Tensor(np.zeros((16, 3, 5, 5)))
    b = Tensor(np.zeros(16))
    out = conv2d_valid(x, k, b, stride=1)
    assert out.shape == (16, 220, 220)


def test_conv2d_channel_mismatch_rejected():
    x = Tensor(np.zeros((2, 4, 4)))
    k = Tensor(np.zeros((1, 3, 2, 2)))
    with pytest.raises(ShapeError):
        conv2d_valid(x, k, Tensor(np.zeros(1)))


def test_conv2d_oversized_kernel_rejected():
    x = Tensor(np.zeros((1, 3, 3)))
    k = Tensor(np.zeros((1, 1, 4, 4)))
    with pytest.raises(ShapeError):
        conv2d_valid(x, k, Tensor(np.zeros(1)))


def test_conv2d_matches_direct_loop_oracle():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 6, 7))
    k = rng.normal(size=(4, 3, 3, 2))
    b = rng.normal(size=4)
    out = conv2d_valid(Tensor(x), Tensor(k), Tensor(b), stride=(2, 3)).data
    Hp = conv_output_size(6, 3, 2)
    Wp = conv_output_size(7, 2, 3)
    assert out.shape == (2, 4, Hp, Wp)
    for n in range(2):
        for f in range(4):
            for i in range(Hp):
                for j in range(Wp):
                    patch = x[n, :, 2 * i:2 * i + 3, 3 * j:3 * j + 2]
                    want = (patch * k[f]).sum() + b[f]
                    assert out[n, f, i, j] == pytest.approx(want, rel=1e-12)


# --- mean_pool ------------------------------------------------------------


def test_mean_pool_constant_input():
    x = Tensor(np.full((2, 8, 8), 3.25))
    out = mean_pool(x, 4, 2)
    assert out.shape == (2, 3, 3)
    assert np.allclose(out.data, 3.25)


def test_mean_pool_hand_value():
    x = Tensor(np.arange(1.0, 17.0).reshape(1, 4, 4))
    out = mean_pool(x, 4, 2)
    assert out.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == pytest.approx(8.5)


def test_mean_pool_shape_formula():
    x = Tensor(np.zeros((5, 47, 47)))
    out = mean_pool(x, 4, 2)
    assert out.shape == (5, 22, 22)


def test_mean_pool_window_too_large_rejected():
    with pytest.raises(ShapeError):
        mean_pool(Tensor(np.zeros((1, 3, 3))), 4, 2)


def test_shape_closure_random_cases():
    rng = np.random.default_rng(11)
    for _ in range(50):
        H = int(rng.integers(1, 30))
        W = int(rng.integers(1, 30))
        kh = int(rng.integers(1, H + 1))
        kw = int(rng.integers(1, W + 1))
        sh = int(rng.integers(1, 4))
        sw = int(rng.integers(1, 4))
        out = mean_pool(Tensor(np.zeros((1, H, W))), (kh, kw), (sh, sw))
        assert out.shape == (1, (H - kh) // sh + 1, (W - kw) // sw + 1)
        k = Tensor(np.zeros((2, 1, kh, kw)))
        out = conv2d_valid(Tensor(np.zeros((1, H, W))), k, Tensor(np.zeros(2)), (sh, sw))
        assert out.shape == (2, (H - kh) // sh + 1, (W - kw) // sw + 1)


# --- sigmoid --------------------------------------------------------------


def test_sigmoid_values():
    out = sigmoid(Tensor([0.0, -100.0, 100.0]))
    assert out.data[0] == pytest.approx(0.5)
    assert 0.0 < out.data[1] < 1e-40
    assert np.isfinite(out.data).all()


def test_sigmoid_symmetry():
    x = np.linspace(-5, 5, 11)
    s_pos = sigmoid(Tensor(x)).data
    s_neg = sigmoid(Tensor(-x)).data
    assert np.allclose(s_pos + s_neg, 1.0, atol=1e-15)


# --- batch_norm -----------------------------------------------------------


def _bn_state(C):
    return np.zeros(C), np.ones(C)


def test_batch_norm_train_standardizes():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(2.0, 3.0, size=(8, 4, 5, 5)))
    scale = Tensor(np.ones(4))
    shift = Tensor(np.zeros(4))
    rm, rv = _bn_state(4)
    out = batch_norm(x, scale, shift, rm, rv, training=True).data
    assert np.allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    assert np.allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-5)


def test_batch_norm_infer_identity_with_unit_stats():
    x = Tensor(np.random.default_rng(4).normal(size=(3, 2)))
    rm, rv = _bn_state(2)
    out = batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv,
                     training=False, eps=0.0)
    assert np.allclose(out.data, x.data)


def test_batch_norm_constant_channel_is_finite():
    x = Tensor(np.full((4, 1, 3, 3), 7.0))
    rm, rv = _bn_state(1)
    out = batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv,
                     training=True, eps=1e-5)
    assert np.allclose(out.data, 0.0)


def test_batch_norm_batch_of_one_rejected():
    x = Tensor(np.zeros((1, 2, 3, 3)))
    rm, rv = _bn_state(2)
    with pytest.raises(ShapeError):
        batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)


def test_batch_norm_updates_running_stats():
    rng = np.random.default_rng(5)
    x = rng.normal(1.5, 2.0, size=(16, 3, 4, 4))
    rm, rv = _bn_state(3)
    batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv,
               training=True, momentum=0.1)
    assert np.allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    assert np.allclose(rv, 0.9 * 1.0 + 0.1 * x.var(axis=(0, 2, 3)))


# --- linear ---------------------------------------------------------------


def test_linear_identity():
    x = Tensor([1.0, 2.0, 3.0])
    out = linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
    assert np.allclose(out.data, x.data)


def test_linear_hand_matvec():
    out = linear(Tensor([1.0, 1.0]),
                 Tensor([[1.0, 2.0], [3.0, 4.0]]),
                 Tensor([0.0, 1.0]))
    assert np.allclose(out.data, [3.0, 8.0])


def test_linear_zero_weights_returns_bias():
    b = np.array([4.0, -2.0])
    out = linear(Tensor([5.0, 6.0, 7.0]), Tensor(np.zeros((2, 3))), Tensor(b))
    assert np.allclose(out.data, b)


def test_linear_dimension_mismatch_rejected():
    with pytest.raises(ShapeError):
        linear(Tensor([1.0, 2.0]), Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))


# --- dropout --------------------------------------------------------------


def test_dropout_rate_zero_and_infer_are_identity():
    x = Tensor(np.arange(6.0))
    rng = np.random.default_rng(0)
    assert dropout(x, 0.0, True, rng) is x
    assert dropout(x, 0.7, False) is x


def test_dropout_rejects_rate_one():
    with pytest.raises(ValueError):
        dropout(Tensor([1.0]), 1.0, True, np.random.default_rng(0))


def test_dropout_survivor_fraction_and_expectation():
    n = 10 ** 6
    x = Tensor(np.full(n, 2.0))
    out = dropout(x, 0.5, True, np.random.default_rng(123)).data
    survivors = np.count_nonzero(out) / n
    assert abs(survivors - 0.5) < 0.01
    assert abs(out.mean() - 2.0) / 2.0 < 0.02


# --- backward -------------------------------------------------------------


def test_backward_sum_gives_ones():
    w = Tensor(np.random.default_rng(1).normal(size=(3, 4)), requires_grad=True)
    with GradTape() as tape:
        loss = sum_all(w)
    grads = backward(loss, tape)
    assert np.array_equal(grads[w.uid], np.ones((3, 4)))


def test_backward_sigmoid_at_zero():
    w = Tensor(0.0, requires_grad=True)
    with GradTape() as tape:
        loss = sum_all(sigmoid(w))
    grads = backward(loss, tape)
    assert grads[w.uid] == pytest.approx(0.25)


def test_backward_rejects_non_scalar_loss():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        y = w + 1.0
    with pytest.raises(GradientError):
        backward(y, tape)


def test_backward_unreachable_parameter_gets_exact_zero():
    w1 = Tensor([1.0, 2.0], requires_grad=True)
    w2 = Tensor([3.0], requires_grad=True)
    with GradTape() as tape:
        _side = sum_all(w2 * 2.0)
        loss = sum_all(w1 * w1)
    grads = backward(loss, tape)
    assert np.array_equal(grads[w2.uid], np.zeros(1))
    assert np.allclose(grads[w1.uid], 2.0 * w1.data)


def test_backward_linearity():
    rng = np.random.default_rng(9)
    w = Tensor(rng.normal(size=5), requires_grad=True)

    def losses():
        l1 = sum_all(sigmoid(w))
        l2 = sum_all(w * w)
        return l1, l2

    with GradTape() as t1:
        l1, _ = losses()
    g1 = backward(l1, t1)[w.uid]
    with GradTape() as t2:
        _, l2 = losses()
    g2 = backward(l2, t2)[w.uid]
    a, b = 2.5, -0.75
    with GradTape() as t3:
        l1, l2 = losses()
        combo = a * l1 + b * l2
    g3 = backward(combo, t3)[w.uid]
    assert np.allclose(g3, a * g1 + b * g2, rtol=1e-12, atol=1e-14)


def test_gradient_accumulates_over_reuse():
    w = Tensor([2.0], requires_grad=True)
    with GradTape() as tape:
        loss = sum_all(w * w + w * 3.0)
    grads = backward(loss, tape)
    assert grads[w.uid][0] == pytest.approx(2.0 * 2.0 + 3.0)


@pytest.mark.parametrize("op_name", [
    "conv", "pool", "sigmoid", "bn_train", "bn_infer", "linear", "dropout",
    "exp", "mul", "sub",
])
def test_primitive_gradients_match_finite_differences(op_name):
    rng = np.random.default_rng(hash(op_name) % 2 ** 31)
    if op_name == "conv":
        params = [Tensor(rng.normal(size=(2, 2, 5, 6)), requires_grad=True),
                  Tensor(rng.normal(size=(3, 2, 2, 3)), requires_grad=True),
                  Tensor(rng.normal(size=3), requires_grad=True)]
        proj = rng.normal(size=(2, 3, 2, 2))

        def build():
            out = conv2d_valid(params[0], params[1], params[2], stride=2)
            return sum_all(out * proj)
    elif op_name == "pool":
        params = [Tensor(rng.normal(size=(2, 1, 6, 6)), requires_grad=True)]
        proj = rng.normal(size=(2, 1, 2, 2))

        def build():
            return sum_all(mean_pool(params[0], 4, 2) * proj)
    elif op_name == "sigmoid":
        params = [Tensor(rng.normal(size=7), requires_grad=True)]
        proj = rng.normal(size=7)

        def build():
            return sum_all(sigmoid(params[0]) * proj)
    elif op_name in ("bn_train", "bn_infer"):
        params = [Tensor(rng.normal(size=(5, 3, 2, 2)), requires_grad=True),
                  Tensor(rng.normal(size=3) + 1.5, requires_grad=True),
                  Tensor(rng.normal(size=3), requires_grad=True)]
        proj = rng.normal(size=(5, 3, 2, 2))
        training = op_name == "bn_train"

        def build():
            rm = np.full(3, 0.3)
            rv = np.full(3, 1.7)
            out = batch_norm(params[0], params[1], params[2], rm, rv,
                             training=training)
            return sum_all(out * proj)
    elif op_name == "linear":
        params = [Tensor(rng.normal(size=(4, 3)), requires_grad=True),
                  Tensor(rng.normal(size=(2, 3)), requires_grad=True),
                  Tensor(rng.normal(size=2), requires_grad=True)]
        proj = rng.normal(size=(4, 2))

        def build():
            return sum_all(linear(params[0], params[1], params[2]) * proj)
    elif op_name == "dropout":
        params = [Tensor(rng.normal(size=40), requires_grad=True)]
        proj = rng.normal(size=40)

        def build():
            gen = np.random.default_rng(77)
            return sum_all(dropout(params[0], 0.4, True, gen) * proj)
    elif op_name == "exp":
        from synthdetect.tensor import exp
        params = [Tensor(rng.normal(size=5), requires_grad=True)]
        proj = rng.normal(size=5)

        def build():
            return sum_all(exp(params[0]) * proj)
    elif op_name == "mul":
        params = [Tensor(rng.normal(size=6), requires_grad=True),
                  Tensor(rng.normal(size=6), requires_grad=True)]

        def build():
            return sum_all(params[0] * params[1])
    else:
        params = [Tensor(rng.normal(size=6), requires_grad=True),
                  Tensor(rng.normal(size=6), requires_grad=True)]
        proj = rng.normal(size=6)

        def build():
            return sum_all((params[0] - params[1]) * proj)

    with GradTape() as tape:
        loss = build()
    analytic = backward(loss, tape)
    numeric = fd_gradient(lambda: build().item(), params)
    for p, num in zip(params, numeric):
        assert_grads_close(analytic[p.uid], num)


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(3, 2, 6, 6)), requires_grad=True)
        k = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
        b = Tensor(np.zeros(2), requires_grad=True)
        with GradTape() as tape:
            h = sigmoid(mean_pool(conv2d_valid(x, k, b), 2, 2))
            loss = sum_all(h * h)
        grads = backward(loss, tape)
        return loss.item(), grads[k.uid].copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    assert np.array_equal(g1, g2)
