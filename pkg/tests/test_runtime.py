import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentfuzz.datasets import gen_blobs, split
from latentfuzz.runtime import (BatchNorm, Conv2D, Dense, Flatten, ManifestError, Model,
                                NonFiniteError, ReLU, ShapeError, Softmax, accuracy, forward,
                                forward_trace, grad_check, load_model, loss_value, mlp,
                                parameter_gradients, quantize, quantize_tensor, save_model,
                                train_sgd)


def random_mlp(rng, sizes=(5, 7, 6, 3), batchnorm=False):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(rng.standard_normal((a, b)), rng.standard_normal(b) * 0.1))
        if i < len(sizes) - 2:
            if batchnorm:
                layers.append(BatchNorm(rng.uniform(0.5, 1.5, b), rng.standard_normal(b) * 0.1,
                                        rng.standard_normal(b) * 0.1, rng.uniform(0.5, 2.0, b)))
            layers.append(ReLU())
    layers.append(Softmax())
    return Model(layers, (sizes[0],), [str(i) for i in range(sizes[-1])])


def random_convnet(rng):
    layers = [
        Conv2D(rng.standard_normal((3, 2, 3, 3)) * 0.3, rng.standard_normal(3) * 0.1, stride=2, pad=1),
        BatchNorm(rng.uniform(0.5, 1.5, 3), rng.standard_normal(3) * 0.1,
                  rng.standard_normal(3) * 0.1, rng.uniform(0.5, 2.0, 3)),
        ReLU(),
        Flatten(),
        Dense(rng.standard_normal((3 * 3 * 3, 4)) * 0.3, rng.standard_normal(4) * 0.1),
        Softmax(),
    ]
    return Model(layers, (2, 6, 5), ["a", "b", "c", "d"])


def naive_forward(model, x):
    """Straight-line re-implementation with Python loops."""
    x = [float(v) for v in np.asarray(x).reshape(-1)]
    for layer in model.layers:
        if isinstance(layer, Dense):
            w, b = layer.weight.tolist(), layer.bias.tolist()
            x = [sum(x[i] * w[i][j] for i in range(len(x))) + b[j] for j in range(len(b))]
        elif isinstance(layer, ReLU):
            x = [v if v > 0 else 0.0 for v in x]
        elif isinstance(layer, BatchNorm):
            x = [(v - m) / math.sqrt(var + layer.eps) * g + bb for v, m, var, g, bb in
                 zip(x, layer.running_mean.tolist(), layer.running_var.tolist(),
                     layer.gamma.tolist(), layer.beta.tolist())]
        elif isinstance(layer, Softmax):
            top = max(x)
            e = [math.exp(v - top) for v in x]
            x = [v / sum(e) for v in e]
    return x


def naive_conv(x, w, b, stride, pad):
    c_in, h, wd = x.shape
    xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    out_ch, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((out_ch, ho, wo))
    for o in range(out_ch):
        for i in range(ho):
            for j in range(wo):
                acc = float(b[o])
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            acc += float(w[o, c, u, v]) * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = acc
    return out


# -- forward ----------------------------------------------------------------

def test_identity_dense_softmax_is_uniform_at_zero():
    model = Model([Dense(np.eye(2), np.zeros(2)), Softmax()], (2,), ["a", "b"])
    probs, trace = forward_trace(model, np.zeros(2))
    np.testing.assert_array_equal(probs, [0.5, 0.5])
    assert trace.layer_ids == (0,)


def test_identity_dense_is_identity():
    model = Model([Dense(np.eye(2), np.zeros(2))], (2,))
    np.testing.assert_array_equal(forward(model, np.array([0.3, -1.5])), [0.3, -1.5])


def test_unit_batchnorm_with_zero_eps_is_identity():
    bn = BatchNorm(np.ones(4), np.zeros(4), np.zeros(4), np.ones(4), eps=0.0)
    x = np.array([[0.1, -2.0, 3.5, 7.25]])
    np.testing.assert_array_equal(bn.forward(x)[0], x)


def test_batchnorm_rejects_negative_variance_and_zero_eps_with_zero_var():
    with pytest.raises(ValueError):
        BatchNorm(np.ones(2), np.zeros(2), np.zeros(2), np.array([1.0, -1.0]))
    with pytest.raises(ValueError):
        BatchNorm(np.ones(2), np.zeros(2), np.zeros(2), np.array([1.0, 0.0]), eps=0.0)


def test_mlp_matches_naive_forward():
    rng = np.random.default_rng(0)
    for _ in range(5):
        model = random_mlp(rng, batchnorm=True)
        x = rng.standard_normal(5)
        np.testing.assert_allclose(forward(model, x), naive_forward(model, x), atol=1e-6, rtol=0)


def test_conv_matches_naive_convolution():
    rng = np.random.default_rng(1)
    for stride, pad in [(1, 0), (2, 1), (1, 2)]:
        layer = Conv2D(rng.standard_normal((3, 2, 3, 2)), rng.standard_normal(3), stride, pad)
        x = rng.standard_normal((2, 6, 5))
        got = layer.forward(x[None])[0][0]
        np.testing.assert_allclose(got, naive_conv(x, layer.weight, layer.bias, stride, pad), atol=1e-9)


def test_trace_points_after_nonlinearity():
    rng = np.random.default_rng(2)
    model = random_convnet(rng)
    assert model.trace_points == ((0, 2), (4, 4))
    x = rng.standard_normal((2, 6, 5))
    _, trace = forward_trace(model, x)
    assert trace.neuron_counts == (3, 4)
    assert np.all(trace.values[0] >= 0)  # post-ReLU channel means


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_softmax_output_is_probability_vector(seed):
    rng = np.random.default_rng(seed)
    model = random_mlp(rng)
    probs = forward(model, rng.standard_normal(5) * 50)
    assert np.all(probs >= 0) and np.all(probs <= 1)
    assert abs(probs.sum() - 1) <= 1e-5


def test_forward_is_pure():
    rng = np.random.default_rng(3)
    model = random_convnet(rng)
    x = rng.standard_normal((2, 6, 5))
    a, ta = forward_trace(model, x)
    b, tb = forward_trace(model, x)
    assert a.tobytes() == b.tobytes()
    assert ta.flat.tobytes() == tb.flat.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
def test_relu_idempotent(values):
    x = np.array([values])
    once = ReLU().forward(x)[0]
    np.testing.assert_array_equal(ReLU().forward(once)[0], once)


def test_shape_mismatch_rejected():
    model = Model([Dense(np.eye(2), np.zeros(2)), Softmax()], (2,), ["a", "b"])
    with pytest.raises(ShapeError):
        forward_trace(model, np.zeros(3))
    with pytest.raises(ShapeError):
        Model([Dense(np.eye(2), np.zeros(2)), Dense(np.eye(3), np.zeros(3))], (2,))


def test_checked_mode_rejects_non_finite():
    model = Model([Dense(np.array([[1e38]]), np.zeros(1)) for _ in range(10)], (1,))
    with pytest.raises(NonFiniteError):
        forward(model, np.array([1.0]))


# -- manifest I/O -------------------------------------------------------------

def test_manifest_identity_dense(tmp_path):
    model = Model([Dense(np.eye(2), np.zeros(2))], (2,))
    path = save_model(model, tmp_path / "m.json")
    loaded = load_model(path)
    np.testing.assert_array_equal(forward(loaded, np.array([1.0, 2.0])), [1.0, 2.0])


def test_manifest_shape_mismatch(tmp_path):
    model = Model([Dense(np.zeros((2, 3)), np.zeros(3))], (2,))
    path = save_model(model, tmp_path / "m.json")
    manifest = json.loads(path.read_text())
    blob = tmp_path / manifest["layers"][0]["params"]["weight"]["blob"]
    blob.write_bytes(np.zeros(5, dtype="<f4").tobytes())
    with pytest.raises(ManifestError, match="shape"):
        load_model(path)


def test_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "missing.json")
    model = Model([Dense(np.eye(2), np.zeros(2))], (2,))
    path = save_model(model, tmp_path / "m.json")
    manifest = json.loads(path.read_text())
    manifest["layers"][0]["kind"] = "LSTM"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(manifest))
    with pytest.raises(ManifestError, match="unknown layer kind"):
        load_model(bad)
    blob = tmp_path / manifest["layers"][0]["params"]["bias"]["blob"]
    blob.write_bytes(np.array([np.nan, 0], dtype="<f4").tobytes())
    with pytest.raises(ManifestError, match="non-finite"):
        load_model(path)


def test_manifest_round_trip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(4)
    for i in range(20):
        model = random_convnet(rng) if i % 4 == 0 else random_mlp(rng, batchnorm=bool(i % 2))
        first = save_model(model, tmp_path / f"a{i}" / "m.json")
        second = save_model(load_model(first), tmp_path / f"b{i}" / "m.json")
        for blob in sorted(first.parent.glob("*.f32")):
            assert blob.read_bytes() == (second.parent / blob.name).read_bytes()
        assert first.read_text() == second.read_text()


# -- gradients ------------------------------------------------------------------

def test_single_weight_squared_error_gradient():
    model = Model([Dense(np.array([[2.0]]), np.zeros(1))], (1,))
    x = np.array([1.0])
    eps = 1e-4
    grads = parameter_gradients(model, x, 0, loss="squared_error")
    plus, minus = Dense(np.array([[2.0 + eps]]), np.zeros(1)), Dense(np.array([[2.0 - eps]]), np.zeros(1))
    up = loss_value(Model([plus], (1,)), x, 0, "squared_error")
    down = loss_value(Model([minus], (1,)), x, 0, "squared_error")
    # parameters are stored as float32, so divide by the step actually taken
    taken = float(plus.weight[0, 0]) - float(minus.weight[0, 0])
    # L = (w x - 1)^2 / 2 -> dL/dw = (w x - 1) x = 1
    assert grads[0]["weight"][0, 0] == pytest.approx(1.0, abs=1e-12)
    assert grads[0]["weight"][0, 0] == pytest.approx((up - down) / taken, abs=1e-6)


def test_grad_check_random_mlps():
    rng = np.random.default_rng(5)
    for _ in range(5):
        model = random_mlp(rng, batchnorm=True)
        assert grad_check(model, rng.standard_normal(5), int(rng.integers(3)), 1e-4) < 1e-3


def test_grad_check_convnet():
    rng = np.random.default_rng(6)
    model = random_convnet(rng)
    assert grad_check(model, rng.standard_normal((2, 6, 5)), 1, 1e-4) < 1e-3


def test_zero_model_bias_gradient_is_softmax_minus_onehot():
    model = Model([Dense(np.zeros((4, 5)), np.zeros(5)), ReLU(),
                   Dense(np.zeros((5, 3)), np.zeros(3)), Softmax()], (4,), ["a", "b", "c"])
    grads = parameter_gradients(model, np.zeros(4), 2)
    np.testing.assert_allclose(grads[2]["bias"], np.full(3, 1 / 3) - np.eye(3)[2], atol=1e-15)
    np.testing.assert_array_equal(grads[0]["bias"], np.zeros(5))


def test_grad_check_rejects_bad_eps():
    model = random_mlp(np.random.default_rng(0))
    with pytest.raises(ValueError):
        grad_check(model, np.zeros(5), 0, 0.1)


def test_training_batchnorm_backward_matches_finite_differences():
    from latentfuzz.runtime.train import _loss_and_grad, _working_copy

    rng = np.random.default_rng(7)
    model = random_mlp(rng, batchnorm=True)
    layers = [_working_copy(l) for l in model.layers]
    x, y = rng.standard_normal((6, 5)), rng.integers(0, 3, 6)
    _, grads, _ = _loss_and_grad(layers, x, y, "cross_entropy", True)
    eps = 1e-5
    for li in (0, 1):
        name = "weight" if li == 0 else "gamma"
        param = getattr(layers[li], name).reshape(-1)
        for j in range(param.size):
            orig = param[j]
            param[j] = orig + eps
            up = _loss_and_grad(layers, x, y, "cross_entropy", True)[0]
            param[j] = orig - eps
            down = _loss_and_grad(layers, x, y, "cross_entropy", True)[0]
            param[j] = orig
            assert grads[li][name].reshape(-1)[j] == pytest.approx((up - down) / (2 * eps), abs=1e-7)


# -- training ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def two_blobs():
    data = gen_blobs(2, (8,), 100, 0.05, rng_seed=11)
    return split(data, 0.8, 12)


def test_logistic_model_separates_blobs(two_blobs):
    train, _ = two_blobs
    logistic = Model([Dense(np.zeros((8, 2)), np.zeros(2)), Softmax()], (8,), ["0", "1"])
    trained, curve = train_sgd(logistic, train, lr=0.5, epochs=50, batch=16, rng_seed=0)
    assert accuracy(trained, train.inputs, train.labels) >= 0.99
    assert all(b <= a for a, b in zip(curve, curve[1:]))


def test_zero_learning_rate_leaves_parameters(two_blobs):
    train, _ = two_blobs
    model = mlp((8,), [6], 2, np.random.default_rng(0))
    trained, _ = train_sgd(model, train, lr=0.0, epochs=2, batch=16, rng_seed=0)
    for a, b in zip(model.layers, trained.layers):
        for name, arr in a.params().items():
            assert arr.tobytes() == b.params()[name].tobytes()


def test_training_is_deterministic(two_blobs):
    train, _ = two_blobs
    model = mlp((8,), [6], 2, np.random.default_rng(0), batchnorm=True)
    a, _ = train_sgd(model, train, 0.1, 3, 16, rng_seed=9)
    b, _ = train_sgd(model, train, 0.1, 3, 16, rng_seed=9)
    for la, lb in zip(a.layers, b.layers):
        for name, arr in la.params().items():
            assert arr.tobytes() == lb.params()[name].tobytes()


def test_training_errors(two_blobs):
    train, _ = two_blobs
    model = mlp((8,), [6], 2, np.random.default_rng(0))
    with pytest.raises(ValueError, match="empty"):
        train_sgd(model, train.subset([]), 0.1, 1, 4, 0)
    three_class = type(train)(train.inputs, np.where(train.labels == 1, 2, 0), 3)
    with pytest.raises(ValueError, match="out of range"):
        train_sgd(model, three_class, 0.1, 1, 4, 0)


# -- quantization -----------------------------------------------------------------

def test_quantize_half_with_unit_peak():
    w = np.array([0.5, 1.0, -0.25], dtype=np.float32)
    q = quantize_tensor(w)
    assert q[0] == pytest.approx(64 / 127, abs=1e-7)
    assert q[0] == pytest.approx(0.503937, abs=1e-6)
    assert q[1] == pytest.approx(1.0, abs=1e-7)


def test_quantize_all_zero_unchanged():
    np.testing.assert_array_equal(quantize_tensor(np.zeros((3, 2))), np.zeros((3, 2)))


def test_quantize_only_selected_layers():
    rng = np.random.default_rng(8)
    model = random_convnet(rng)
    q = quantize(model, {"Dense"})
    assert q.layers[0].weight.tobytes() == model.layers[0].weight.tobytes()
    assert q.layers[1].gamma.tobytes() == model.layers[1].gamma.tobytes()
    assert q.layers[4].weight.tobytes() != model.layers[4].weight.tobytes()
    steps = q.layers[4].weight / (np.abs(model.layers[4].weight).max() / 127)
    np.testing.assert_allclose(steps, np.round(steps), atol=1e-4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_quantize_idempotent_up_to_float32_rounding(seed):
    rng = np.random.default_rng(seed)
    model = random_convnet(rng) if seed % 2 else random_mlp(rng, batchnorm=True)
    once = quantize(model)
    twice = quantize(once)
    for a, b in zip(once.layers, twice.layers):
        for name, arr in a.params().items():
            np.testing.assert_allclose(b.params()[name], arr, rtol=1e-6, atol=0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, width=32), min_size=1, max_size=50))
def test_quantization_error_within_half_step(values):
    w = np.array(values, dtype=np.float32)
    peak = float(np.abs(w).max())
    q = quantize_tensor(w).astype(np.float64)
    if peak == 0:
        assert np.all(q == 0)
        return
    scale = peak / 127
    assert np.all(np.abs(q - w) <= scale / 2 * (1 + 1e-6) + 1e-30)
    steps = q / scale
    np.testing.assert_allclose(steps, np.round(steps), atol=1e-4)
    assert np.all(np.abs(np.round(steps)) <= 127)
