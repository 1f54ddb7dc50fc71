import numpy as np
import pytest

from bpplab.errors import (
    ConfigurationError,
    DimensionError,
    FormatError,
    NumericError,
    StateError,
)
from bpplab.nn import (
    SGD,
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    Network,
    ReLU,
    load_checkpoint,
    mnist_classifier,
    save_checkpoint,
    scale_input,
    softmax,
    softmax_cross_entropy,
)

RNG = np.random.default_rng(0)


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of a scalar function of an array."""
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        hi = f()
        x[idx] = orig - eps
        lo = f()
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * eps)
    return g


def check_layer_grads(layer, x, training=True, atol=1e-5):
    """Compare analytic parameter/input gradients against finite
    differences of the summed squared output (a generic scalar head)."""
    x = x.astype(np.float64)
    for k in layer.params:
        layer.params[k] = layer.params[k].astype(np.float64)

    def loss():
        return float(0.5 * (layer.forward(x, training) ** 2).sum())

    out = layer.forward(x, training)
    dx = layer.backward(out)  # d(0.5*sum(out^2))/dout = out

    gx = numeric_grad(loss, x)
    np.testing.assert_allclose(dx, gx, rtol=atol, atol=atol)
    trainable = getattr(layer, "trainable", layer.param_order)
    for name in trainable:
        gp = numeric_grad(loss, layer.params[name])
        np.testing.assert_allclose(layer.grads[name], gp, rtol=atol, atol=atol)


class TestLayerGradients:
    def test_conv(self):
        layer = Conv2D(2, 3, stride=2, pad=1)
        for k in layer.params:
            layer.params[k] = RNG.normal(0, 0.5, layer.params[k].shape)
        check_layer_grads(layer, RNG.normal(0, 1, (2, 2, 7, 7)))

    def test_conv_no_pad(self):
        layer = Conv2D(1, 2, stride=2, pad=0)
        layer.params["w"] = RNG.normal(0, 0.5, layer.params["w"].shape)
        layer.params["b"] = RNG.normal(0, 0.5, layer.params["b"].shape)
        check_layer_grads(layer, RNG.normal(0, 1, (3, 1, 6, 6)))

    def test_batchnorm_training_mode(self):
        layer = BatchNorm(3)
        layer.params["gamma"] = RNG.normal(1, 0.2, 3)
        layer.params["beta"] = RNG.normal(0, 0.2, 3)
        # freeze running stats so the finite-difference loss is pure
        layer.momentum = 0.0
        check_layer_grads(layer, RNG.normal(0, 1, (4, 3, 3, 3)))

    def test_batchnorm_inference_mode(self):
        layer = BatchNorm(2)
        layer.params["running_mean"] = RNG.normal(0, 1, 2)
        layer.params["running_var"] = RNG.uniform(0.5, 2, 2)
        check_layer_grads(layer, RNG.normal(0, 1, (3, 2, 4, 4)), training=False)

    def test_dense(self):
        layer = Dense(5, 4)
        layer.params["w"] = RNG.normal(0, 0.5, (5, 4))
        layer.params["b"] = RNG.normal(0, 0.5, 4)
        check_layer_grads(layer, RNG.normal(0, 1, (3, 5)))

    def test_relu(self):
        check_layer_grads(ReLU(), RNG.normal(0, 1, (4, 6)) + 0.01)

    def test_flatten(self):
        check_layer_grads(Flatten(), RNG.normal(0, 1, (2, 3, 4, 4)))

    def test_cross_entropy_input_gradient(self):
        logits = RNG.normal(0, 1, (4, 5))
        labels = np.array([0, 1, 2, 3])

        def loss():
            return softmax_cross_entropy(logits, labels)[0]

        _, dl, _ = softmax_cross_entropy(logits, labels)
        np.testing.assert_allclose(dl, numeric_grad(loss, logits), atol=1e-6)

    def test_full_network_input_gradient(self):
        net = mnist_classifier(dtype=np.float64, dropout_rate=0.0)
        net.init_params(seed=1)
        x = RNG.uniform(0, 1, (2, 1, 28, 28))
        labels = np.array([3, 8])

        def loss():
            return softmax_cross_entropy(net.forward(x, training=False), labels)[0]

        _, dl, _ = softmax_cross_entropy(net.forward(x, training=False), labels)
        dx = net.backward(dl)
        gx = numeric_grad(loss, x[:, :, 10:14, 10:14])  # spot-check a patch
        np.testing.assert_allclose(dx[:, :, 10:14, 10:14], gx, atol=1e-5)


class TestForwardShapes:
    def test_stock_net_spatial_sizes(self):
        net = mnist_classifier()
        net.init_params(0)
        net.forward(np.zeros((2, 1, 28, 28)), training=False)
        assert net.activation(0).shape == (2, 32, 14, 14)
        assert net.activation(3).shape == (2, 64, 6, 6)
        assert net.activation(6).shape == (2, 64, 2, 2)
        assert net.embeddings.shape == (2, 512)
        assert net.activation(12).shape == (2, 10)

    def test_uniform_softmax_of_zero_logits(self):
        np.testing.assert_allclose(softmax(np.zeros((3, 10))), 0.1)

    def test_softmax_rows_sum_to_one(self):
        p = softmax(RNG.normal(0, 10, (20, 10)))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        assert p.min() >= 0 and p.max() <= 1

    def test_cross_entropy_zero_gradient_at_certainty(self):
        logits = np.array([[100.0, 0.0, 0.0]])
        _, dl, _ = softmax_cross_entropy(logits, np.array([0]))
        np.testing.assert_allclose(dl, 0.0, atol=1e-12)

    def test_linear_model_input_gradient_closed_form(self):
        # CE(Wx + b, y): d/dx = W^T (softmax - onehot)
        net = Network([Dense(6, 4)], 4, dtype=np.float64)
        w = RNG.normal(0, 1, (6, 4))
        net.layers[0].params["w"] = w.copy()
        x = RNG.normal(0, 1, (1, 6))
        logits = net.forward(x, training=False)
        _, dl, probs = softmax_cross_entropy(logits, np.array([2]))
        dx = net.backward(dl)
        expected = (probs - np.eye(4)[2]) @ w.T
        np.testing.assert_allclose(dx, expected, atol=1e-10)

    def test_shape_mismatch_errors(self):
        net = mnist_classifier()
        net.init_params(0)
        with pytest.raises(DimensionError):
            net.forward(np.zeros((1, 3, 28, 28)))

    def test_backward_before_forward(self):
        net = mnist_classifier()
        with pytest.raises(StateError):
            net.backward(np.zeros((1, 10)))

    def test_inference_determinism(self):
        net = mnist_classifier()
        net.init_params(2)
        x = RNG.uniform(0, 1, (4, 1, 28, 28))
        a = net.forward(x, training=False)
        b = net.forward(x, training=False)
        np.testing.assert_array_equal(a, b)

    def test_dropout_inactive_at_inference(self):
        layer = Dropout(0.5)
        x = RNG.normal(0, 1, (5, 5))
        np.testing.assert_array_equal(layer.forward(x, training=False), x)
        assert not np.array_equal(layer.forward(x, training=True), x)

    def test_batchnorm_inference_is_affine(self):
        layer = BatchNorm(2)
        layer.params["running_mean"] = RNG.normal(0, 1, 2)
        layer.params["running_var"] = RNG.uniform(0.5, 2, 2)
        x = RNG.normal(0, 1, (2, 2, 3, 3))
        y = RNG.normal(0, 1, (2, 2, 3, 3))
        f = lambda z: layer.forward(z, training=False)
        lhs = f(0.3 * x + 0.7 * y)
        rhs = 0.3 * f(x) + 0.7 * f(y) + 0.0 * f(np.zeros_like(x))
        # affine: f(ax + by) = a f(x) + b f(y) + (1 - a - b) f(0)
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)


class TestSgd:
    def test_single_step_no_momentum(self):
        net = Network([Dense(3, 2)], 2, dtype=np.float64)
        net.layers[0].params["w"] = np.ones((3, 2))
        net.layers[0].grads = {"w": np.full((3, 2), 2.0), "b": np.zeros(2)}
        SGD(net, lr=0.1, momentum=0.0).step()
        np.testing.assert_allclose(net.layers[0].params["w"], 1.0 - 0.2)

    def test_momentum_matches_scalar_recurrence(self):
        net = Network([Dense(1, 1)], 2, dtype=np.float64)
        net.layers[0].params["w"] = np.array([[1.0]])
        opt = SGD(net, lr=0.1, momentum=0.9)
        p, v = 1.0, 0.0
        for _ in range(3):
            net.layers[0].grads = {"w": np.array([[2.0]]), "b": np.zeros(1)}
            opt.step()
            v = 0.9 * v + 2.0
            p = p - 0.1 * v
        np.testing.assert_allclose(net.layers[0].params["w"], [[p]], atol=1e-12)

    def test_nonfinite_gradient_names_layer(self):
        net = Network([Dense(2, 2)], 2)
        net.layers[0].grads = {"w": np.full((2, 2), np.nan), "b": np.zeros(2)}
        with pytest.raises(NumericError, match="dense"):
            SGD(net, lr=0.1).step()

    def test_bad_hyperparameters(self):
        net = Network([Dense(2, 2)], 2)
        with pytest.raises(ConfigurationError):
            SGD(net, lr=0.0)
        with pytest.raises(ConfigurationError):
            SGD(net, lr=0.1, momentum=1.0)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        net = mnist_classifier()
        net.init_params(3)
        p1 = str(tmp_path / "a.ckpt")
        p2 = str(tmp_path / "b.ckpt")
        save_checkpoint(net, p1)
        net2 = load_checkpoint(p1)
        save_checkpoint(net2, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()
        x = RNG.uniform(0, 1, (2, 1, 28, 28))
        np.testing.assert_array_equal(
            net.forward(x, training=False), net2.forward(x, training=False)
        )

    def test_embedding_index_preserved(self, tmp_path):
        net = mnist_classifier()
        net.init_params(0)
        path = str(tmp_path / "c.ckpt")
        save_checkpoint(net, path)
        assert load_checkpoint(path).embedding_index == net.embedding_index

    def test_corrupt_magic(self, tmp_path):
        net = mnist_classifier()
        net.init_params(0)
        path = str(tmp_path / "d.ckpt")
        save_checkpoint(net, path)
        raw = bytearray(open(path, "rb").read())
        raw[0] ^= 0xFF
        open(path, "wb").write(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        net = mnist_classifier()
        net.init_params(0)
        path = str(tmp_path / "e.ckpt")
        save_checkpoint(net, path)
        raw = bytearray(open(path, "rb").read())
        raw[8] = 99
        open(path, "wb").write(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)

    @pytest.mark.parametrize("cut", [20, 200, 1])
    def test_truncation_detected(self, tmp_path, cut):
        net = mnist_classifier()
        net.init_params(0)
        path = str(tmp_path / "f.ckpt")
        save_checkpoint(net, path)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:-cut])
        with pytest.raises(FormatError):
            load_checkpoint(path)


class TestScaleInput:
    def test_range_and_layout(self):
        imgs = np.full((2, 4, 4, 1), 255.0)
        x = scale_input(imgs)
        assert x.shape == (2, 1, 4, 4)
        np.testing.assert_allclose(x, 1.0)
