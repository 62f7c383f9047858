import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtlight import neural as nn
from mtlight.neural import (Adam, GRUCell, Linear, NonFiniteError, RMSprop, Tensor, backward, concat,
                            finite_difference_grads, gather_last, gru_step, linear_relu_forward, load_checkpoint,
                            max_relative_error, mse_loss, no_grad, relu, save_checkpoint, sigmoid, tanh)


def test_linear_relu_identity():
    np.testing.assert_array_equal(linear_relu_forward([1, -2], np.eye(2), [0, 0]), [1, 0])


def test_linear_relu_bias_only():
    np.testing.assert_array_equal(linear_relu_forward([0, 0], np.ones((2, 2)), [3, -1]), [3, 0])


def test_linear_relu_matches_loops():
    rng = np.random.default_rng(0)
    W, b, x = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=3)
    ref = [max(0.0, sum(W[i, j] * x[j] for j in range(3)) + b[i]) for i in range(4)]
    np.testing.assert_allclose(linear_relu_forward(x, W, b), ref, rtol=0, atol=1e-12)


def test_linear_relu_shape_mismatch():
    with pytest.raises(ValueError):
        linear_relu_forward(np.ones(3), np.ones((2, 2)), np.zeros(2))


def _zero_gru(n_in=3, hidden=4):
    cell = GRUCell(n_in, hidden, np.random.default_rng(0))
    for p in cell.parameters():
        p.data[:] = 0.0
    return cell


def test_gru_zero_fixed_point():
    np.testing.assert_array_equal(gru_step(np.ones((1, 3)), np.zeros((1, 4)), _zero_gru()), 0.0)


def test_gru_bounded_for_large_inputs():
    cell = GRUCell(8, 16, np.random.default_rng(1))
    x = 100 * np.random.default_rng(2).normal(size=(20, 8))
    h = np.random.default_rng(3).uniform(-1, 1, size=(20, 16))
    assert np.all(np.abs(gru_step(x, h, cell)) < 1.0 + 1e-12)


def test_gru_scalar_oracle():
    import math
    rng = np.random.default_rng(4)
    cell = GRUCell(3, 2, rng)
    for p in (cell.b_i, cell.b_h):
        p.data[:] = rng.normal(size=p.data.shape)
    x, h = rng.normal(size=3), rng.normal(size=2) * 0.5
    H = 2
    Wi, Wh, bi, bh = cell.W_i.data, cell.W_h.data, cell.b_i.data, cell.b_h.data
    out = []
    for j in range(H):
        def gate(col):
            a = sum(x[k] * Wi[k, col] for k in range(3)) + bi[col]
            c = sum(h[k] * Wh[k, col] for k in range(H)) + bh[col]
            return a, c
        ar, cr = gate(j)
        r = 1 / (1 + math.exp(-(ar + cr)))
        az, cz = gate(H + j)
        z = 1 / (1 + math.exp(-(az + cz)))
        an, cn = gate(2 * H + j)
        n = math.tanh(an + r * cn)
        out.append((1 - z) * n + z * h[j])
    np.testing.assert_allclose(gru_step(x[None], h[None], cell)[0], out, rtol=0, atol=1e-10)


def test_gru_shape_mismatch():
    with pytest.raises(ValueError):
        gru_step(np.ones((1, 2)), np.zeros((1, 4)), _zero_gru())


def test_mse_examples():
    assert mse_loss(Tensor([1.0, 2.0]), [1.0, 2.0]).data == 0.0
    assert mse_loss(Tensor([1.0, 1.0]), [0.0, 0.0]).data == 1.0
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=17), rng.normal(size=17)
    assert abs(mse_loss(Tensor(a), b).data - sum((a - b) ** 2) / 17) < 1e-12
    with pytest.raises(ValueError):
        mse_loss(Tensor(np.ones(3)), np.ones(4))


def test_mse_gradient_mean_convention():
    p = Tensor([1.0, 1.0], requires_grad=True)
    (g,) = backward(mse_loss(p, [0.0, 0.0]), [p])
    np.testing.assert_array_equal(g, [1.0, 1.0])


def test_masked_mse_zero_gradient():
    p = Tensor(np.ones((3, 2)), requires_grad=True)
    mask = np.array([[1.0], [0.0], [1.0]])
    (g,) = backward(mse_loss(p, np.zeros((3, 2)), mask), [p])
    np.testing.assert_array_equal(g[1], 0.0)
    (g,) = backward(mse_loss(Tensor(np.ones(2), requires_grad=True), np.zeros(2), np.zeros(2)),
                    [Tensor(np.ones(2), requires_grad=True)])
    np.testing.assert_array_equal(g, 0.0)


def test_constant_and_detached_gradients():
    w = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    loss = (Tensor(np.arange(3.0)) * 2.0).sum()
    gw, gu = backward(loss, [w, unused])
    np.testing.assert_array_equal(gw, 0.0)
    np.testing.assert_array_equal(gu, 0.0)


def _mlp_gru_loss(seed, n_in=4, hidden=5, gru_h=3, batch=3):
    rng = np.random.default_rng(seed)
    l1 = Linear(n_in, hidden, rng)
    cell = GRUCell(hidden, gru_h, rng)
    l2 = Linear(gru_h, 2, rng)
    for p in (l1.b, l2.b, cell.b_i, cell.b_h):
        p.data[:] = rng.normal(size=p.data.shape) * 0.3
    x = rng.normal(size=(batch, n_in))
    h0 = rng.uniform(-0.5, 0.5, size=(batch, gru_h))
    y = rng.normal(size=(batch, 2))
    params = l1.parameters() + cell.parameters() + l2.parameters()

    def loss():
        h = cell(relu(l1(Tensor(x))), Tensor(h0))
        return mse_loss(l2(tanh(h)), y)

    return loss, params


@pytest.mark.parametrize("seed", range(5))
def test_mlp_gru_gradcheck(seed):
    loss, params = _mlp_gru_loss(seed)
    analytic = backward(loss(), params)
    numeric = finite_difference_grads(lambda: float(loss().data), params, h=1e-5)
    assert max_relative_error(analytic, numeric) < 1e-4


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31), n_in=st.integers(1, 5), hidden=st.integers(1, 6), gru_h=st.integers(1, 4),
       batch=st.integers(1, 4))
def test_gradcheck_random_architectures(seed, n_in, hidden, gru_h, batch):
    loss, params = _mlp_gru_loss(seed, n_in, hidden, gru_h, batch)
    analytic = backward(loss(), params)
    numeric = finite_difference_grads(lambda: float(loss().data), params)
    assert max_relative_error(analytic, numeric) < 1e-4


def test_elementwise_ops_gradcheck():
    rng = np.random.default_rng(7)
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3,)), requires_grad=True)
    idx = np.array([0, 2])

    def loss():
        z = concat([sigmoid(a * b - 0.5), tanh(a + b)], axis=-1)
        return gather_last(z.reshape(2, 6), idx).sum() + (z[:, 1:4] * z[:, 1:4]).mean()

    analytic = backward(loss(), [a, b])
    numeric = finite_difference_grads(lambda: float(loss().data), [a, b])
    assert max_relative_error(analytic, numeric) < 1e-6


def test_stacked_matmul_gradcheck():
    rng = np.random.default_rng(8)
    W = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
    bias = Tensor(rng.normal(size=(3, 1, 2)), requires_grad=True)
    x = rng.normal(size=(3, 5, 4))

    def loss():
        return relu(Tensor(x) @ W + bias).sum()

    analytic = backward(loss(), [W, bias])
    numeric = finite_difference_grads(lambda: float(loss().data), [W, bias])
    assert max_relative_error(analytic, numeric) < 1e-6


def test_no_grad_builds_no_graph():
    w = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        out = (w * 3.0).sum()
    assert not out.requires_grad


def test_forward_repeatable():
    loss, _ = _mlp_gru_loss(11)
    assert loss().data == loss().data


def test_rmsprop_zero_grad_is_noop():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = RMSprop([p])
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert opt.step_count == 1


def test_adam_zero_grad_is_noop():
    p = Tensor(np.array([0.5]), requires_grad=True)
    opt = Adam([p])
    p.grad = np.zeros(1)
    opt.step()
    np.testing.assert_array_equal(p.data, [0.5])


def test_adam_first_step_is_lr():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([p], lr=0.01)
    p.grad = np.array([1.0])
    nn.optimizer_step(opt)
    assert p.data[0] == pytest.approx(1.0 - 0.01, abs=1e-9)


def test_rmsprop_two_steps_hand_recurrence():
    p = Tensor(np.array([0.3, -0.7]), requires_grad=True)
    opt = RMSprop([p], lr=0.001)
    g = np.array([0.4, -1.5])
    ref, v = p.data.copy(), np.zeros(2)
    for _ in range(2):
        p.grad = g.copy()
        opt.step()
        v = 0.99 * v + 0.01 * g * g
        ref = ref - 0.001 * g / (np.sqrt(v) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("opt_cls", [RMSprop, Adam])
def test_nan_gradient_raises(opt_cls):
    p = Tensor(np.ones(2), requires_grad=True)
    opt = opt_cls([p])
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NonFiniteError):
        opt.step()


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a.W": rng.normal(size=(3, 4)), "b": rng.normal(size=7), "s": np.array(0.1 + 0.2)}
    save_checkpoint(tmp_path / "c.npz", arrays, {"variant": "x"})
    loaded, meta = load_checkpoint(tmp_path / "c.npz")
    assert meta == {"variant": "x"}
    for k, v in arrays.items():
        assert loaded[k].tobytes() == v.tobytes()
        assert loaded[k].shape == v.shape


def test_sampled_coords_match_full_differences():
    loss, params = _mlp_gru_loss(3)
    full = finite_difference_grads(lambda: float(loss().data), params)
    coords = nn.sample_coords(params, 4, np.random.default_rng(0))
    part = finite_difference_grads(lambda: float(loss().data), params, coords=coords)
    for f, c, p in zip(full, coords, part):
        np.testing.assert_array_equal(f.reshape(-1)[c], p)
