"""Dense net forward/backward against closed forms and central differences."""
import io

import numpy as np
import pytest

from optfetch import nn
from optfetch.errors import CheckpointError, ConfigError, ShapeError
from optfetch.utils import make_rng

FD_H = 1e-5
FD_TOL = 1e-4
KINK_MARGIN = 1e-3


def _rel_close(analytic, numeric, tol=FD_TOL):
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.all(np.abs(analytic - numeric) <= tol * scale)


def _net_from(weights, biases, activations):
    layers = [nn.Layer(np.asarray(w, float), np.asarray(b, float), a)
              for w, b, a in zip(weights, biases, activations)]
    return nn.DenseNet(layers)


def test_forward_identity_layer_passes_input_through():
    net = _net_from([np.eye(3)], [np.zeros(3)], ["identity"])
    x = np.array([0.5, -2.0, 3.25])
    assert np.array_equal(nn.forward(net, x), x)


def test_forward_matches_manual_loop():
    rng = make_rng(11)
    net = nn.glorot_net([4, 5, 3], ["relu", "identity"], rng)
    x = rng.normal(size=4)
    # independent evaluation with explicit loops
    h = np.zeros(5)
    for j in range(5):
        s = net.layers[0].bias[j]
        for i in range(4):
            s += net.layers[0].weight[j, i] * x[i]
        h[j] = s if s > 0 else 0.0
    out = np.zeros(3)
    for j in range(3):
        s = net.layers[1].bias[j]
        for i in range(5):
            s += net.layers[1].weight[j, i] * h[i]
        out[j] = s
    assert np.allclose(nn.forward(net, x), out, atol=1e-12, rtol=0)


def test_forward_batch_rows_match_single_calls():
    rng = make_rng(3)
    net = nn.glorot_net([6, 8, 2], ["relu", "identity"], rng)
    xs = rng.normal(size=(7, 6))
    batch = nn.forward(net, xs)
    assert batch.shape == (7, 2)
    for i in range(7):
        # gemm accumulation order differs between batch shapes, so the
        # comparison is tight-tolerance rather than bitwise
        assert np.allclose(batch[i], nn.forward(net, xs[i]),
                           atol=1e-12, rtol=0)


def test_forward_rejects_wrong_width():
    net = nn.glorot_net([4, 2], ["identity"], make_rng(0))
    with pytest.raises(ShapeError):
        nn.forward(net, np.zeros(5))


def test_backward_zero_output_grad_gives_zero_gradients():
    rng = make_rng(5)
    net = nn.glorot_net([3, 4, 2], ["relu", "identity"], rng)
    grads = nn.backward(net, rng.normal(size=3), np.zeros(2))
    for g in grads.as_list():
        assert np.all(g == 0.0)


def test_backward_linear_layer_closed_form():
    # single identity layer: dL/dW = g x^T, dL/db = g, exactly
    rng = make_rng(9)
    net = nn.glorot_net([4, 3], ["identity"], rng)
    x = rng.normal(size=4)
    g = rng.normal(size=3)
    grads = nn.backward(net, x, g)
    assert np.allclose(grads.weights[0], np.outer(g, x), atol=1e-12, rtol=0)
    assert np.allclose(grads.biases[0], g, atol=1e-12, rtol=0)


def _sample_net_away_from_kinks(rng, max_tries=50):
    """Random small net + input whose ReLU pre-activations avoid zero."""
    for _ in range(max_tries):
        depth = int(rng.integers(1, 6))
        dims = [int(rng.integers(1, 33)) for _ in range(depth + 1)]
        acts = [str(rng.choice(["relu", "identity"])) for _ in range(depth)]
        net = nn.glorot_net(dims, acts, rng)
        x = rng.normal(size=dims[0])
        _, cache = nn.forward_cached(net, x)
        margins = [np.min(np.abs(z)) for (_, z), a in zip(cache, acts)
                   if a == "relu"]
        if not margins or min(margins) > KINK_MARGIN:
            return net, x
    raise AssertionError("could not sample a kink-free net")


@pytest.mark.parametrize("seed", range(25))
def test_backward_matches_central_differences(seed):
    rng = make_rng(1000 + seed)
    net, x = _sample_net_away_from_kinks(rng)
    v = rng.normal(size=net.output_dim)

    def loss(candidate):
        return float(v @ nn.forward(candidate, x))

    analytic = nn.backward(net, x, v)
    numeric = nn.finite_difference_gradients(net, loss, h=FD_H)
    for a, f in zip(analytic.as_list(), numeric.as_list()):
        assert _rel_close(a, f)


def test_backward_batch_sums_per_row_gradients():
    rng = make_rng(21)
    net = nn.glorot_net([5, 6, 3], ["relu", "identity"], rng)
    xs = rng.normal(size=(4, 5))
    gs = rng.normal(size=(4, 3))
    batch = nn.backward(net, xs, gs)
    accum = [np.zeros_like(p) for p in nn.net_parameters(net)]
    for i in range(4):
        for acc, g in zip(accum, nn.backward(net, xs[i], gs[i]).as_list()):
            acc += g
    for a, b in zip(batch.as_list(), accum):
        assert np.allclose(a, b, atol=1e-12)


def test_softmax_uniform_and_exact_case():
    assert np.allclose(nn.softmax(np.zeros(4)), 0.25, atol=1e-15)
    probs = nn.softmax(np.array([np.log(2.0), 0.0, 0.0]))
    assert np.allclose(probs, [0.5, 0.25, 0.25], atol=1e-15)


def test_softmax_shift_invariance_and_normalization():
    rng = make_rng(2)
    for _ in range(200):
        z = rng.normal(scale=3.0, size=int(rng.integers(1, 40)))
        p = nn.softmax(z)
        assert abs(p.sum() - 1.0) < 1e-12
        assert np.allclose(p, nn.softmax(z + 17.5), atol=1e-12)


def test_softmax_extreme_logits_stay_finite():
    p = nn.softmax(np.array([1000.0, 0.0, -1000.0]))
    assert np.all(np.isfinite(p))
    assert abs(p.sum() - 1.0) < 1e-12


def test_softmax_rejects_empty():
    with pytest.raises(ShapeError):
        nn.softmax(np.array([]))


def test_cross_entropy_matched_distributions():
    y = np.array([0.5, 0.5])
    loss, grad = nn.cross_entropy_loss_and_grad(y, y)
    assert abs(loss - np.log(2.0) / 2.0) < 1e-15
    assert np.allclose(grad, 0.0, atol=1e-15)
    k = 7
    u = np.full(k, 1.0 / k)
    loss, grad = nn.cross_entropy_loss_and_grad(u, u)
    assert abs(loss - np.log(k) / k) < 1e-15
    assert np.allclose(grad, 0.0, atol=1e-15)


def test_cross_entropy_clamps_zero_probability():
    loss, _ = nn.cross_entropy_loss_and_grad(np.array([1.0, 0.0]),
                                             np.array([0.0, 1.0]))
    assert np.isfinite(loss)
    assert abs(loss - (-0.5 * np.log(1e-12))) < 1e-9


@pytest.mark.parametrize("seed", range(20))
def test_cross_entropy_logit_gradient_matches_central_differences(seed):
    rng = make_rng(300 + seed)
    k = int(rng.integers(2, 16))
    z = rng.normal(size=k)
    y = rng.uniform(size=k)
    _, grad = nn.cross_entropy_loss_and_grad(y, nn.softmax(z))

    def loss_at(zz):
        val, _ = nn.cross_entropy_loss_and_grad(y, nn.softmax(zz))
        return float(val)

    numeric = np.zeros(k)
    for i in range(k):
        up = z.copy()
        up[i] += FD_H
        down = z.copy()
        down[i] -= FD_H
        numeric[i] = (loss_at(up) - loss_at(down)) / (2 * FD_H)
    assert _rel_close(grad, numeric)


def test_sgd_single_step_closed_form():
    net = _net_from([np.array([[1.0, 2.0]])], [np.array([0.5])], ["identity"])
    grads = nn.Gradients([np.array([[0.25, -1.0]])], [np.array([2.0])])
    state = nn.init_optimizer(nn.net_parameters(net), "sgd", learning_rate=0.1)
    assert nn.optimizer_step(net, grads, state)
    assert np.allclose(net.layers[0].weight, [[1.0 - 0.025, 2.0 + 0.1]],
                       atol=1e-15)
    assert np.allclose(net.layers[0].bias, [0.3], atol=1e-15)


def test_adam_first_step_closed_form():
    # bias-corrected first step reduces to lr * g / (|g| + eps)
    net = _net_from([np.array([[1.0, -1.0]])], [np.array([0.0])], ["identity"])
    g = np.array([[0.3, -0.004]])
    grads = nn.Gradients([g.copy()], [np.array([0.0])])
    state = nn.init_optimizer(nn.net_parameters(net), "adam",
                              learning_rate=1e-3)
    assert nn.optimizer_step(net, grads, state)
    expected = np.array([[1.0, -1.0]]) - 1e-3 * g / (np.abs(g) + 1e-8)
    assert np.allclose(net.layers[0].weight, expected, atol=1e-12, rtol=0)
    assert state.step == 1


def test_adam_multi_step_matches_reference_update():
    rng = make_rng(8)
    net = nn.glorot_net([3, 2], ["identity"], rng)
    ref_params = [p.copy() for p in nn.net_parameters(net)]
    state = nn.init_optimizer(nn.net_parameters(net), "adam",
                              learning_rate=1e-2)
    m = [np.zeros_like(p) for p in ref_params]
    v = [np.zeros_like(p) for p in ref_params]
    for t in range(1, 6):
        gs = [rng.normal(size=p.shape) for p in ref_params]
        grads = nn.Gradients([gs[0]], [gs[1]])
        assert nn.optimizer_step(net, grads, state)
        for i, g in enumerate(gs):
            m[i] = 0.9 * m[i] + 0.1 * g
            v[i] = 0.999 * v[i] + 0.001 * g * g
            mhat = m[i] / (1 - 0.9 ** t)
            vhat = v[i] / (1 - 0.999 ** t)
            ref_params[i] -= 1e-2 * mhat / (np.sqrt(vhat) + 1e-8)
    for p, ref in zip(nn.net_parameters(net), ref_params):
        assert np.allclose(p, ref, atol=1e-12, rtol=0)


def test_non_finite_gradients_skip_update_with_warning():
    net = nn.glorot_net([2, 2], ["identity"], make_rng(1))
    before = [p.copy() for p in nn.net_parameters(net)]
    grads = nn.Gradients([np.array([[np.nan, 0.0], [0.0, 0.0]])],
                         [np.zeros(2)])
    state = nn.init_optimizer(nn.net_parameters(net), "adam")
    with pytest.warns(RuntimeWarning):
        applied = nn.optimizer_step(net, grads, state)
    assert not applied
    assert state.step == 0
    for p, b in zip(nn.net_parameters(net), before):
        assert np.array_equal(p, b)


def test_zero_gradients_leave_parameters_fixed():
    net = nn.glorot_net([3, 3], ["relu"], make_rng(4))
    before = [p.copy() for p in nn.net_parameters(net)]
    grads = nn.Gradients([np.zeros((3, 3))], [np.zeros(3)])
    for kind in ("sgd", "adam"):
        state = nn.init_optimizer(nn.net_parameters(net), kind)
        assert nn.optimizer_step(net, grads, state)
        for p, b in zip(nn.net_parameters(net), before):
            assert np.allclose(p, b, atol=1e-15)


def test_glorot_bounds_and_zero_biases():
    rng = make_rng(13)
    net = nn.glorot_net([10, 20, 5], ["relu", "identity"], rng)
    for layer in net.layers:
        bound = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
        assert np.all(np.abs(layer.weight) <= bound)
        assert np.all(layer.bias == 0.0)


def test_same_seed_builds_identical_net():
    a = nn.glorot_net([5, 4, 3], ["relu", "identity"], make_rng(77))
    b = nn.glorot_net([5, 4, 3], ["relu", "identity"], make_rng(77))
    for pa, pb in zip(nn.net_parameters(a), nn.net_parameters(b)):
        assert np.array_equal(pa, pb)


def test_bad_configs_rejected():
    rng = make_rng(0)
    with pytest.raises(ConfigError):
        nn.glorot_net([4], [], rng)
    with pytest.raises(ConfigError):
        nn.glorot_net([4, 2], ["relu", "relu"], rng)
    with pytest.raises(ConfigError):
        nn.glorot_net([4, 2], ["tanh"], rng)
    with pytest.raises(ConfigError):
        nn.init_optimizer([], kind="rmsprop")


def test_serialization_round_trip_is_bitwise():
    rng = make_rng(31)
    net = nn.glorot_net([7, 11, 4, 2], ["relu", "relu", "identity"], rng)
    buf = io.BytesIO()
    nn.write_net(buf, net)
    buf.seek(0)
    loaded = nn.read_net(buf)
    assert [l.activation for l in loaded.layers] == \
        [l.activation for l in net.layers]
    for pa, pb in zip(nn.net_parameters(net), nn.net_parameters(loaded)):
        assert np.array_equal(pa, pb)


def test_truncated_stream_raises():
    net = nn.glorot_net([4, 3], ["identity"], make_rng(2))
    buf = io.BytesIO()
    nn.write_net(buf, net)
    data = buf.getvalue()
    with pytest.raises(CheckpointError):
        nn.read_net(io.BytesIO(data[:-9]))
