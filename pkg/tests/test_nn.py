import math

import numpy as np
import pytest

from conftest import AE_FD_STEP, kink_free_autoencoder, redraw, tiny_ae_config, tiny_batch
from flowguard import nn
from flowguard.autoencoder import reconstruction_loss


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def cell_oracle(x, h, W, U, b):
    """Scalar-loop GRU step straight from the gate equations."""
    H = len(h)
    F = len(x)
    out = []
    pre = [sum(x[f] * W[f][j] for f in range(F)) + b[j] for j in range(3 * H)]
    z = [sig(pre[j] + sum(h[i] * U[i][j] for i in range(H))) for j in range(H)]
    r = [sig(pre[H + j] + sum(h[i] * U[i][H + j] for i in range(H))) for j in range(H)]
    for j in range(H):
        hc = math.tanh(pre[2 * H + j] + sum(r[i] * h[i] * U[i][2 * H + j] for i in range(H)))
        out.append((1 - z[j]) * h[j] + z[j] * hc)
    return out


def test_linear_forward():
    out = nn.linear_forward(np.array([[1.0, 2.0]]), np.array([[1.0], [1.0]]), np.array([3.0]))
    assert out.value.tolist() == [[6.0]]


def test_linear_shape_error():
    with pytest.raises(nn.ShapeError):
        nn.linear_forward(np.ones((1, 2)), np.ones((3, 1)), np.zeros(1))
    with pytest.raises(nn.ShapeError):
        nn.linear_forward(np.ones((1, 2)), np.ones((2, 1)), np.zeros(2))


def test_gru_zero_weights_halves_state():
    H = 3
    h = np.array([[0.4, -1.0, 2.0]])
    out = nn.gru_cell_forward(np.ones((1, 2)), h, np.zeros((2, 3 * H)), np.zeros((H, 3 * H)), np.zeros(3 * H))
    np.testing.assert_allclose(out, 0.5 * h)


def test_gru_one_dim_hand_value():
    out = nn.gru_cell_forward([[1.0]], [[0.0]], np.ones((1, 3)), np.ones((1, 3)), np.zeros(3))
    assert out[0, 0] == pytest.approx(0.5567699411459397, abs=1e-12)


def test_gru_cell_matches_scalar_oracle(rng):
    F, H = 3, 2
    W, U, b = rng.normal(size=(F, 3 * H)), rng.normal(size=(H, 3 * H)), rng.normal(size=3 * H)
    x, h = rng.normal(size=F), rng.normal(size=H)
    got = nn.gru_cell_forward(x[None], h[None], W, U, b)[0]
    np.testing.assert_allclose(got, cell_oracle(x.tolist(), h.tolist(), W.tolist(), U.tolist(), b.tolist()), atol=1e-12)


def test_gru_cell_shape_error():
    with pytest.raises(nn.ShapeError):
        nn.gru_cell_forward(np.ones((1, 2)), np.zeros((1, 2)), np.ones((2, 3)), np.ones((2, 6)), np.zeros(6))


@pytest.mark.parametrize("reverse", [False, True])
def test_sequence_matches_cell_loop(rng, reverse):
    N, T, F, H = 3, 6, 4, 5
    x = rng.normal(size=(N, T, F))
    mask = np.arange(T)[None] < np.array([[6], [2], [4]])
    W, U, b = rng.normal(size=(F, 3 * H)), rng.normal(size=(H, 3 * H)), rng.normal(size=3 * H)
    got = nn.gru_sequence(nn.Tensor(x), mask, nn.Tensor(W), nn.Tensor(U), nn.Tensor(b), reverse).value
    h = np.zeros((N, H))
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        hn = nn.gru_cell_forward(x[:, t], h, W, U, b)
        h = np.where(mask[:, t, None], hn, h)
        np.testing.assert_allclose(got[:, t], h, atol=1e-12)


def test_stack_zero_weights_final_zero():
    store = nn.ParamStore()
    nn.init_bi_gru_stack(store, "g", 3, 4, 1, nn.make_rng(0))
    for _, p in store:
        p.value = np.zeros_like(p.value)
    _, final = nn.bi_gru_stack_forward(nn.Tensor(np.ones((2, 5, 3))), np.ones((2, 5), bool), store, "g", 1)
    assert final.shape == (2, 8)
    assert not final.value.any()


def test_stack_final_width_two_layers_eight_hidden():
    store = nn.ParamStore()
    nn.init_bi_gru_stack(store, "g", 32, 8, 2, nn.make_rng(0))
    _, final = nn.bi_gru_stack_forward(nn.Tensor(np.ones((1, 7, 32))), np.ones((1, 7), bool), store, "g", 2)
    assert final.shape == (1, 32)


def test_softmax_closed_form():
    np.testing.assert_allclose(nn.softmax(np.log([1.0, 3.0])), [0.25, 0.75])
    np.testing.assert_allclose(nn.softmax(np.array([1000.0, 1000.0])), [0.5, 0.5])
    assert np.isfinite(nn.log_softmax(np.array([1e4, -1e4]))).all()


def test_cross_entropy_examples():
    assert nn.cross_entropy_loss(np.zeros((1, 2)), [0]).item() == pytest.approx(math.log(2))
    assert nn.cross_entropy_loss(np.array([[math.log(3), 0.0]]), [0]).item() == pytest.approx(0.2876820724517809)


def test_cross_entropy_errors():
    with pytest.raises(ValueError):
        nn.cross_entropy_loss(np.zeros((0, 2)), np.zeros(0, int))
    with pytest.raises(ValueError):
        nn.cross_entropy_loss(np.zeros((1, 2)), [2])
    with pytest.raises(ValueError):
        nn.cross_entropy(nn.Tensor(np.zeros((2, 2))), [0, 1], weights=[0, 0])


def test_mse_examples(rng):
    assert nn.mse_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])).item() == 2.0
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert nn.mse_loss(3 * a, 3 * b).item() == pytest.approx(9 * nn.mse_loss(a, b).item())
    with pytest.raises(nn.ShapeError):
        nn.mse_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_backward_sum_gives_ones():
    W = nn.Tensor(np.arange(6.0).reshape(2, 3))
    loss = nn.sum_all(W)
    nn.backward(loss)
    np.testing.assert_array_equal(W.grad, np.ones((2, 3)))


def test_backward_twice_raises():
    W = nn.Tensor(np.ones(2))
    loss = nn.sum_all(nn.mul(W, W))
    nn.backward(loss)
    with pytest.raises(RuntimeError):
        nn.backward(loss)


def test_shared_node_accumulates():
    x = nn.Tensor(np.array([2.0]))
    y = nn.mul(x, x)
    nn.backward(nn.sum_all(nn.add(y, x)))
    assert x.grad[0] == pytest.approx(5.0)


def test_adam_zero_grad_leaves_params():
    store = nn.ParamStore()
    w = store.add("w", np.array([1.0, -2.0]))
    w.grad = np.zeros(2)
    nn.adam_step(store, lr=0.1)
    np.testing.assert_array_equal(w.value, [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    store = nn.ParamStore()
    w = store.add("w", np.zeros(3))
    w.grad = np.array([0.3, -7.0, 1e-3])
    nn.adam_step(store, lr=0.01)
    np.testing.assert_allclose(w.value, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_without_grads_raises():
    store = nn.ParamStore()
    store.add("w", np.zeros(2))
    with pytest.raises(RuntimeError):
        nn.adam_step(store)


def test_adam_deterministic():
    def run():
        rng = nn.make_rng(7)
        store = nn.ParamStore()
        w = store.add("w", rng.normal(size=(3, 2)))
        for _ in range(5):
            x = rng.normal(size=(4, 3))
            nn.backward(nn.sum_all(nn.mul(nn.matmul(nn.Tensor(x), w), nn.matmul(nn.Tensor(x), w))))
            nn.adam_step(store, 1e-2)
        return w.value

    assert run().tobytes() == run().tobytes()


def test_rng_state_round_trip():
    rng = nn.make_rng(3)
    rng.normal(size=5)
    clone = nn.rng_from_state(nn.rng_state(rng))
    assert rng.normal(size=4).tobytes() == clone.normal(size=4).tobytes()


def test_param_store_rejects_bad_shapes():
    store = nn.ParamStore()
    store.add("w", np.zeros((2, 2)))
    arrays = store.arrays()
    arrays["w"] = np.zeros((3, 2))
    with pytest.raises(nn.ShapeError):
        store.load_arrays(arrays, 0)
    with pytest.raises(KeyError):
        store.add("w", np.zeros(1))


# finite-difference checks


def test_gradcheck_linear(rng):
    store = nn.ParamStore()
    store.add("W", rng.normal(size=(3, 2)))
    store.add("b", rng.normal(size=2))
    x, y = rng.normal(size=(5, 3)), rng.integers(0, 2, 5)
    rep = nn.gradient_check(lambda: nn.cross_entropy(nn.linear_forward(x, store["W"], store["b"]), y), store)
    assert rep.max_rel_error < 1e-9


def test_gradcheck_two_layer_net(rng):
    store = nn.ParamStore()
    store.add("W1", rng.normal(size=(4, 5)))
    store.add("b1", rng.normal(size=5))
    store.add("W2", rng.normal(size=(5, 2)))
    store.add("b2", rng.normal(size=2))
    x, y = rng.normal(size=(6, 4)), rng.integers(0, 2, 6)

    def loss():
        h = nn.relu(nn.linear_forward(x, store["W1"], store["b1"]))
        return nn.cross_entropy(nn.linear_forward(h, store["W2"], store["b2"]), y)

    assert nn.gradient_check(loss, store).max_rel_error < 1e-7


def test_gradcheck_gru_one_dim(rng):
    store = nn.ParamStore()
    for name, shape in (("W", (1, 3)), ("U", (1, 3)), ("b", (3,))):
        store.add(name, rng.uniform(-1, 1, size=shape))
    x = rng.normal(size=(2, 4, 1))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], bool)

    def loss():
        out = nn.gru_sequence(nn.Tensor(x), mask, store["W"], store["U"], store["b"])
        return nn.sum_all(nn.mul(out, out))

    assert nn.gradient_check(loss, store).max_rel_error < 1e-6


def test_gradcheck_bidirectional_stack():
    rng = nn.make_rng(11)
    store = nn.ParamStore()
    nn.init_bi_gru_stack(store, "g", 2, 2, 2, rng)
    redraw(store, rng)
    x = nn.Tensor(rng.normal(size=(2, 4, 2)))
    mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], bool)

    def loss():
        _, final = nn.bi_gru_stack_forward(x, mask, store, "g", 2)
        return nn.sum_all(nn.mul(final, final))

    assert nn.gradient_check(loss, store).max_rel_error < 1e-6


@pytest.mark.parametrize("layers", [1, 2])
@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_autoencoder_tiny(seed, layers):
    rng = nn.make_rng(seed)
    buckets, mask = tiny_batch(rng, n=2)
    model = kink_free_autoencoder(tiny_ae_config(layers=layers), rng, buckets, mask)

    def loss():
        return reconstruction_loss(model.forward(buckets, mask)[1], buckets, mask)

    rep = nn.gradient_check(loss, model.store, step=AE_FD_STEP)
    assert rep.max_rel_error < 1e-5, rep.per_param
