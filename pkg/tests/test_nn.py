import numpy as np
import pytest

from ssa_eeg.errors import CacheError, ClassImbalanceError, ShapeError
from ssa_eeg.nn import (
    DEFAULT_PARAM_COUNT_32,
    BatchNorm,
    CnnModel,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    LayerSpec,
    ReLU,
    TrainHyper,
    cross_entropy,
    default_architecture,
    default_model,
    predict,
    predict_from_probs,
    softmax,
    train,
)

EPS = 1e-5
TOL = 1e-4


def rel_error(a, n):
    """Elementwise relative error.

    The 1e-6 floor keeps exactly-zero gradients (e.g. a bias feeding batch
    norm) from turning finite-difference roundoff into a large ratio.
    """
    a, n = np.asarray(a).ravel(), np.asarray(n).ravel()
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
    return float(np.max(np.abs(a - n) / scale)) if a.size else 0.0


def numeric_grad(f, arr):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + EPS
        fp = f()
        arr[i] = old - EPS
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * EPS)
    return g


def check_layer(layer, x, training=True, seed=0):
    """Compare analytic and central-difference grads for input and params."""
    x = x.copy()
    out0, _ = layer.forward(x, training, np.random.default_rng(seed))
    R = np.random.default_rng(99).standard_normal(out0.shape)

    def f():
        out, _ = layer.forward(x, training, np.random.default_rng(seed))
        return float(np.sum(out * R))

    _, cache = layer.forward(x, training, np.random.default_rng(seed))
    dx, grads = layer.backward(R, cache)
    errs = {"x": rel_error(dx, numeric_grad(f, x))}
    for name, p in layer.params.items():
        errs[name] = rel_error(grads[name], numeric_grad(f, p))
    return errs


# -- per-layer gradient checks --------------------------------------------

@pytest.mark.parametrize("stride,pad,bias", [(1, 0, True), (2, 1, False), (2, 0, True), (3, 1, True)])
def test_conv_gradients(stride, pad, bias):
    rng = np.random.default_rng(1)
    layer = Conv2D(2, LayerSpec("conv", filters=3, kernel=3, stride=stride, pad=pad, bias=bias), rng)
    if bias:
        layer.params["b"] = rng.standard_normal(3)
    errs = check_layer(layer, rng.standard_normal((2, 2, 7, 7)))
    assert max(errs.values()) < TOL, errs


@pytest.mark.parametrize("shape", [(6, 4), (3, 2, 4, 4)])
def test_batchnorm_gradients(shape):
    rng = np.random.default_rng(2)
    layer = BatchNorm(shape[1])
    layer.params["gamma"] = rng.uniform(0.5, 1.5, shape[1])
    layer.params["beta"] = rng.standard_normal(shape[1])
    errs = check_layer(layer, rng.standard_normal(shape) * 2 + 1)
    assert max(errs.values()) < TOL, errs


def test_batchnorm_eval_gradients():
    rng = np.random.default_rng(3)
    layer = BatchNorm(4)
    layer.buffers["running_mean"] = rng.standard_normal(4)
    layer.buffers["running_var"] = rng.uniform(0.5, 2, 4)
    errs = check_layer(layer, rng.standard_normal((5, 4)), training=False)
    assert max(errs.values()) < TOL, errs


def test_dense_gradients():
    rng = np.random.default_rng(4)
    layer = Dense(6, 3, rng)
    layer.params["b"] = rng.standard_normal(3)
    assert max(check_layer(layer, rng.standard_normal((5, 6))).values()) < TOL


def test_relu_gradients():
    x = np.random.default_rng(5).standard_normal((4, 10))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    assert check_layer(ReLU(), x)["x"] < TOL


def test_flatten_gradients():
    assert check_layer(Flatten(), np.random.default_rng(6).standard_normal((2, 3, 2, 2)))["x"] < TOL


def test_dropout_gradients():
    assert check_layer(Dropout(0.4), np.random.default_rng(7).standard_normal((6, 8)), seed=3)["x"] < TOL


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(8)
    logits = rng.standard_normal((5, 2))
    y = np.array([0, 1, 1, 0, 1])
    _, g = cross_entropy(logits, y)
    num = numeric_grad(lambda: cross_entropy(logits, y)[0], logits)
    assert rel_error(g, num) < TOL


# -- full network ----------------------------------------------------------

def full_network_errors(model, x, y):
    def f():
        logits, _ = model.forward(x, training=True, rng=np.random.default_rng(11))
        return cross_entropy(logits, y)[0]

    logits, cache = model.forward(x, training=True, rng=np.random.default_rng(11))
    grads = model.backward(cache, cross_entropy(logits, y)[1])
    out = {}
    for key, p in list(model.named_params()):
        out[key] = rel_error(grads[key], numeric_grad(f, p))
    return out


def test_full_default_network_gradients():
    # default layer stack at 8x8 input keeps the check fast; every layer type is present
    model = default_model(n_channels=8, seed=4)
    rng = np.random.default_rng(12)
    x = rng.standard_normal((6, 1, 8, 8))
    y = np.array([0, 1, 0, 1, 1, 0])
    errs = full_network_errors(model, x, y)
    assert len(errs) == sum(1 for _ in model.named_params())
    assert max(errs.values()) < TOL, max(errs.items(), key=lambda kv: kv[1])


def test_small_random_model_gradients():
    specs = [LayerSpec("conv", filters=4, kernel=3, stride=2, pad=1, bias=True),
             LayerSpec("relu"), LayerSpec("conv", filters=6, kernel=2, stride=1, pad=0, bias=False),
             LayerSpec("batchnorm"), LayerSpec("relu"), LayerSpec("flatten"),
             LayerSpec("dense", units=10), LayerSpec("batchnorm"), LayerSpec("relu"),
             LayerSpec("dropout", rate=0.3), LayerSpec("dense", units=2), LayerSpec("softmax")]
    model = CnnModel((1, 6, 6), specs, seed=9)
    assert model.n_params <= 2000
    rng = np.random.default_rng(13)
    x = rng.standard_normal((5, 1, 6, 6))
    errs = full_network_errors(model, x, np.array([1, 0, 1, 0, 0]))
    assert max(errs.values()) < TOL


def test_zero_upstream_gradient():
    model = default_model(n_channels=8, seed=0)
    _, cache = model.forward(np.random.default_rng(0).standard_normal((3, 1, 8, 8)), training=True)
    grads = model.backward(cache, np.zeros((3, 2)))
    assert all(np.all(g == 0) for g in grads.values())


def test_duplicated_batch_doubles_sum_gradient():
    specs = [LayerSpec("conv", filters=3, kernel=3, stride=2, pad=1), LayerSpec("relu"),
             LayerSpec("flatten"), LayerSpec("dense", units=2), LayerSpec("softmax")]
    model = CnnModel((1, 6, 6), specs, seed=1)
    x = np.random.default_rng(2).standard_normal((1, 1, 6, 6))
    y = np.array([1])

    def grads(xb, yb):
        logits, cache = model.forward(xb, training=True)
        return model.backward(cache, cross_entropy(logits, yb, reduction="sum")[1])

    one = grads(x, y)
    two = grads(np.concatenate([x, x]), np.concatenate([y, y]))
    for k in one:
        np.testing.assert_allclose(two[k], 2 * one[k], rtol=1e-12, atol=1e-14)


def test_stale_cache_rejected():
    model = default_model(n_channels=8)
    x = np.random.default_rng(0).standard_normal((2, 1, 8, 8))
    _, cache = model.forward(x, training=True)
    key, p = next(model.named_params())
    model.set_param(key, p + 1)
    with pytest.raises(CacheError):
        model.backward(cache, np.zeros((2, 2)))


def test_eval_cache_rejected():
    model = default_model(n_channels=8)
    _, cache = model.forward(np.zeros((2, 1, 8, 8)), training=False)
    with pytest.raises(CacheError):
        model.backward(cache, np.zeros((2, 2)))


# -- layer semantics -------------------------------------------------------

def test_batchnorm_training_moments():
    x = np.random.default_rng(0).normal(5.0, 3.0, size=(64, 4, 3, 3))
    out, _ = BatchNorm(4).forward(x, True, None)
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-6)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) < 1e-5)


def test_batchnorm_eval_batch_size_invariant():
    bn = BatchNorm(3)
    rng = np.random.default_rng(1)
    for _ in range(5):
        bn.forward(rng.standard_normal((8, 3)) * 2 + 1, True, None)
    x = rng.standard_normal((6, 3))
    full, _ = bn.forward(x, False, None)
    part, _ = bn.forward(x[:2], False, None)
    np.testing.assert_array_equal(full[:2], part)


def test_conv_output_shape():
    layer = Conv2D(1, LayerSpec("conv", filters=8, kernel=3, stride=2, pad=1), np.random.default_rng(0))
    out, _ = layer.forward(np.zeros((2, 1, 32, 32)), False, None)
    assert out.shape == (2, 8, 16, 16)
    assert layer.out_shape((1, 32, 32)) == (8, 16, 16)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    layer = Conv2D(2, LayerSpec("conv", filters=2, kernel=3, stride=2, pad=1), rng)
    layer.params["b"] = rng.standard_normal(2)
    x = rng.standard_normal((1, 2, 5, 5))
    out, _ = layer.forward(x, False, None)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    W, b = layer.params["W"], layer.params["b"]
    for f in range(2):
        for i in range(3):
            for j in range(3):
                ref = np.sum(xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * W[f]) + b[f]
                assert abs(out[0, f, i, j] - ref) < 1e-12


def test_dropout_only_in_training():
    x = np.ones((4, 100))
    d = Dropout(0.5)
    assert np.array_equal(d.forward(x, False, None)[0], x)
    out, _ = d.forward(x, True, np.random.default_rng(0))
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_default_param_count():
    model = default_model(n_channels=32)
    # 72 + 16 + 1152 + 32 + 4608 + 64 + (512*32 + 32) + (32*2 + 2)
    assert model.n_params == DEFAULT_PARAM_COUNT_32 == 22426
    assert model.output_shape == (2,)


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec("pool")
    with pytest.raises(ValueError):
        LayerSpec("conv", filters=4, stride=0)
    with pytest.raises(ShapeError):
        CnnModel((1, 8, 8), [LayerSpec("flatten"), LayerSpec("conv", filters=2)])


def test_input_shape_mismatch():
    with pytest.raises(ShapeError):
        default_model(n_channels=8).forward(np.zeros((2, 1, 9, 9)))


# -- loss, softmax, predict -----------------------------------------------

def test_uniform_logits_loss_ln2():
    loss, _ = cross_entropy(np.zeros((4, 2)), np.array([0, 1, 0, 1]))
    assert abs(loss - np.log(2)) < 1e-12


def test_softmax_rows_sum_to_one():
    logits, _ = default_model(n_channels=8, seed=3).forward(
        np.random.default_rng(0).standard_normal((5, 1, 8, 8)))
    assert np.all(np.isfinite(logits))
    assert np.all(np.abs(softmax(logits).sum(axis=1) - 1) < 1e-12)


def test_zero_model_uniform_output():
    model = default_model(n_channels=8).zero_()
    probs = model.predict_proba(np.random.default_rng(0).standard_normal((3, 1, 8, 8)))
    np.testing.assert_array_equal(probs, 0.5)


def test_predict_examples():
    probs = softmax(np.array([[2.0, -1.0], [0.0, 0.0]]))
    np.testing.assert_allclose(probs[0], [0.9526, 0.0474], atol=1e-4)
    assert predict_from_probs(probs).tolist() == [0, 0]


def test_predict_order_preserving():
    model = default_model(n_channels=8, seed=1)
    x = np.random.default_rng(4).standard_normal((7, 1, 8, 8))
    cls, probs = predict(model, x)
    assert cls.shape == (7,) and probs.shape == (7, 2)
    for i in range(7):
        assert predict(model, x[i:i + 1])[0][0] == cls[i]


def test_eval_forward_deterministic():
    model = default_model(n_channels=8, seed=2)
    x = np.random.default_rng(0).standard_normal((3, 1, 8, 8))
    assert model.forward(x)[0].tobytes() == model.forward(x)[0].tobytes()


# -- training --------------------------------------------------------------

def xor_images():
    """Four 4x4 images whose class is the XOR of two quadrant bits."""
    xs, ys = [], []
    for a in (0, 1):
        for b in (0, 1):
            img = np.zeros((4, 4))
            img[:2, :2] = a
            img[2:, 2:] = b
            xs.append(img)
            ys.append(a ^ b)
    return np.array(xs)[:, None], np.array(ys)


def test_xor_toy_fits():
    x, y = xor_images()
    model = CnnModel((1, 4, 4), default_architecture(dropout=0.0), seed=0)
    res = train(model, x, y, TrainHyper(lr=1e-2, epochs=200, batch=4))
    cls, _ = predict(res.model, x)
    assert np.array_equal(cls, y)
    assert res.loss_history[-1] < res.loss_history[0]


def test_zero_lr_keeps_parameters():
    x, y = xor_images()
    model = CnnModel((1, 4, 4), default_architecture(), seed=0)
    before = [p.copy() for _, p in model.named_params()]
    res = train(model, x, y, TrainHyper(lr=0.0, epochs=5, batch=2))
    assert all(np.array_equal(a, b) for a, (_, b) in zip(before, model.named_params()))
    assert len(res.loss_history) == 6
    assert len(set(res.loss_history)) == 1


def test_training_deterministic():
    x, y = xor_images()
    runs = [train(CnnModel((1, 4, 4), default_architecture(), seed=3), x, y,
                  TrainHyper(epochs=10, batch=2, seed=5)) for _ in range(2)]
    assert runs[0].loss_history == runs[1].loss_history
    assert runs[0].model.state_vector().tobytes() == runs[1].model.state_vector().tobytes()


def test_class_imbalance():
    x, _ = xor_images()
    with pytest.raises(ClassImbalanceError):
        train(CnnModel((1, 4, 4), seed=0), x, np.array([0, 0, 0, 1]))


def test_checkpoint_round_trip(tmp_path):
    x, y = xor_images()
    model = CnnModel((1, 4, 4), default_architecture(), seed=1)
    train(model, x, y, TrainHyper(epochs=3, batch=2))
    model.save(tmp_path / "m", {"lr": 1e-3})
    back = CnnModel.load(tmp_path / "m")
    assert back.state_vector().tobytes() == model.state_vector().tobytes()
    assert back.forward(x)[0].tobytes() == model.forward(x)[0].tobytes()
