"""Minimal differentiable network engine for small CNN classifiers.

Fixed layer set (Conv2D 3x3, BatchNorm, ReLU, Flatten, Dense, Dropout)
with a softmax cross-entropy head. Supports gradients with respect to
parameters and to the input (needed for PGD and trigger reverse
engineering), SGD with momentum, and a versioned binary checkpoint
format. Activations use NCHW layout; inputs are expected pre-scaled
to [0, 1].

Training storage is float32; pass dtype=np.float64 when building a
network for finite-difference gradient checks.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import (
    ConfigurationError,
    DimensionError,
    FormatError,
    NumericError,
    StateError,
)

CHECKPOINT_MAGIC = b"NETCKPT\x00"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# im2col helpers


def _im2col(x, k, stride, pad):
    """(B, C, H, W) -> (B, C*k*k, OH*OW) patch matrix."""
    b, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, k, k, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[
                :, :, i : i + stride * oh : stride, j : j + stride * ow : stride
            ]
    return cols.reshape(b, c * k * k, oh * ow), oh, ow


def _col2im(cols, x_shape, k, stride, pad):
    """Scatter-add inverse of _im2col."""
    b, c, h, w = x_shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    cols = cols.reshape(b, c, k, k, oh, ow)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                cols[:, :, i, j]
            )
    return xp[:, :, pad : pad + h, pad : pad + w]


# ---------------------------------------------------------------------------
# layers


class Layer:
    """Common layer interface; parameters live in self.params/self.grads."""

    def __init__(self):
        self.params = {}
        self.grads = {}

    param_order = ()

    def forward(self, x, training):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def spec(self):
        raise NotImplementedError


class Conv2D(Layer):
    param_order = ("w", "b")

    def __init__(self, in_channels, out_channels, stride=1, pad=0, kernel=3):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.params["w"] = np.zeros(
            (out_channels, in_channels, kernel, kernel), dtype=np.float32
        )
        self.params["b"] = np.zeros(out_channels, dtype=np.float32)
        self._cache = None

    def forward(self, x, training):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"conv expects (B, {self.in_channels}, H, W), got {x.shape}"
            )
        cols, oh, ow = _im2col(x, self.kernel, self.stride, self.pad)
        w = self.params["w"].reshape(self.out_channels, -1)
        out = np.matmul(w, cols) + self.params["b"][None, :, None]
        self._cache = (x.shape, cols)
        return out.reshape(x.shape[0], self.out_channels, oh, ow)

    def backward(self, dout):
        if self._cache is None:
            raise StateError("conv backward before forward")
        x_shape, cols = self._cache
        b = dout.shape[0]
        dflat = dout.reshape(b, self.out_channels, -1)
        w = self.params["w"].reshape(self.out_channels, -1)
        self.grads["w"] = np.matmul(dflat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(
            self.params["w"].shape
        )
        self.grads["b"] = dflat.sum(axis=(0, 2))
        dcols = np.matmul(w.T, dflat)
        return _col2im(dcols, x_shape, self.kernel, self.stride, self.pad)

    def spec(self):
        return (
            f"conv2d in={self.in_channels} out={self.out_channels} "
            f"k={self.kernel} stride={self.stride} pad={self.pad}"
        )


class BatchNorm(Layer):
    """Per-channel batch normalization over (B, H, W).

    Batch statistics (biased variance) while training; running statistics
    at inference, making the layer an affine map of its input.
    """

    param_order = ("gamma", "beta", "running_mean", "running_var")

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(channels, dtype=np.float32)
        self.params["beta"] = np.zeros(channels, dtype=np.float32)
        self.params["running_mean"] = np.zeros(channels, dtype=np.float32)
        self.params["running_var"] = np.ones(channels, dtype=np.float32)
        self._cache = None

    trainable = ("gamma", "beta")

    def forward(self, x, training):
        if x.shape[1] != self.channels:
            raise DimensionError(f"batchnorm expects {self.channels} channels")
        axes = (0, 2, 3)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            rm, rv = self.params["running_mean"], self.params["running_var"]
            rm += self.momentum * (mean.astype(rm.dtype) - rm)
            rv += self.momentum * (var.astype(rv.dtype) - rv)
        else:
            mean = self.params["running_mean"].astype(x.dtype)
            var = self.params["running_var"].astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, training, x.shape)
        return (
            self.params["gamma"][None, :, None, None] * xhat
            + self.params["beta"][None, :, None, None]
        )

    def backward(self, dout):
        if self._cache is None:
            raise StateError("batchnorm backward before forward")
        xhat, inv_std, training, x_shape = self._cache
        axes = (0, 2, 3)
        self.grads["gamma"] = (dout * xhat).sum(axis=axes)
        self.grads["beta"] = dout.sum(axis=axes)
        self.grads["running_mean"] = np.zeros_like(self.params["running_mean"])
        self.grads["running_var"] = np.zeros_like(self.params["running_var"])
        g = self.params["gamma"][None, :, None, None]
        dxhat = dout * g
        if not training:
            return dxhat * inv_std[None, :, None, None]
        n = x_shape[0] * x_shape[2] * x_shape[3]
        # standard batchnorm backward through batch mean/var
        return (
            inv_std[None, :, None, None]
            / n
            * (
                n * dxhat
                - dxhat.sum(axis=axes)[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None]
            )
        )

    def spec(self):
        return f"batchnorm channels={self.channels} eps={self.eps} momentum={self.momentum}"


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x, training):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        if self._mask is None:
            raise StateError("relu backward before forward")
        return dout * self._mask

    def spec(self):
        return "relu"


class Flatten(Layer):
    def __init__(self):
        super().__init__()
        self._shape = None

    def forward(self, x, training):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        if self._shape is None:
            raise StateError("flatten backward before forward")
        return dout.reshape(self._shape)

    def spec(self):
        return "flatten"


class Dense(Layer):
    param_order = ("w", "b")

    def __init__(self, in_features, out_features):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.params["w"] = np.zeros((in_features, out_features), dtype=np.float32)
        self.params["b"] = np.zeros(out_features, dtype=np.float32)
        self._x = None

    def forward(self, x, training):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(
                f"dense expects (B, {self.in_features}), got {x.shape}"
            )
        self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, dout):
        if self._x is None:
            raise StateError("dense backward before forward")
        self.grads["w"] = self._x.T @ dout
        self.grads["b"] = dout.sum(axis=0)
        return dout @ self.params["w"].T

    def spec(self):
        return f"dense in={self.in_features} out={self.out_features}"


class Dropout(Layer):
    """Inverted dropout; active only when training. Holds its own seeded
    generator so training runs are reproducible."""

    def __init__(self, rate=0.5):
        super().__init__()
        if not (0.0 <= rate < 1.0):
            raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = np.random.Generator(np.random.PCG64(0))
        self._mask = None

    def reseed(self, seed):
        self.rng = np.random.Generator(np.random.PCG64(seed))

    def forward(self, x, training):
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (self.rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask

    def spec(self):
        return f"dropout rate={self.rate}"


# ---------------------------------------------------------------------------
# loss


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient wrt the logits.

    Returns (loss, dlogits, probs); dlogits already includes the 1/B
    factor of the mean.
    """
    b = logits.shape[0]
    probs = softmax(logits)
    eps = np.finfo(probs.dtype).tiny
    loss = -np.log(probs[np.arange(b), labels] + eps).mean()
    dlogits = probs.copy()
    dlogits[np.arange(b), labels] -= 1.0
    return float(loss), dlogits / b, probs


# ---------------------------------------------------------------------------
# network


class Network:
    """Ordered layer stack with an embedding tap for contrastive training.

    embedding_index is the index of the layer whose output serves as the
    sample embedding (the ReLU after the penultimate dense layer in the
    stock classifier); backward() can inject an extra gradient there.
    """

    def __init__(self, layers, num_classes, embedding_index=None, dtype=np.float32):
        self.layers = list(layers)
        self.num_classes = num_classes
        self.embedding_index = embedding_index
        self.dtype = np.dtype(dtype)
        for layer in self.layers:
            for k in layer.params:
                layer.params[k] = layer.params[k].astype(self.dtype)
        self._acts = None
        self._training = False

    # -- forward / backward ------------------------------------------------

    def forward(self, x, training=False):
        """Run the stack; caches activations for backward()."""
        x = np.asarray(x, dtype=self.dtype)
        acts = [x]
        for layer in self.layers:
            x = layer.forward(x, training)
            acts.append(x)
        self._acts = acts
        self._training = training
        return x

    @property
    def embeddings(self):
        """Embedding-tap output of the most recent forward pass."""
        if self._acts is None:
            raise StateError("no cached forward pass")
        if self.embedding_index is None:
            raise ConfigurationError("network has no embedding tap")
        return self._acts[self.embedding_index + 1]

    def activation(self, layer_index):
        """Output of layer layer_index from the most recent forward pass."""
        if self._acts is None:
            raise StateError("no cached forward pass")
        return self._acts[layer_index + 1]

    def backward(self, dlogits, d_embedding=None, capture_index=None):
        """Backpropagate; returns d loss / d input.

        d_embedding, if given, is added to the gradient flowing into the
        embedding tap. capture_index, if given, records the gradient at
        that layer's output in self.captured_grad.
        """
        if self._acts is None:
            raise StateError("backward called without a cached forward pass")
        self.captured_grad = None
        grad = np.asarray(dlogits, dtype=self.dtype)
        for i in range(len(self.layers) - 1, -1, -1):
            if d_embedding is not None and i == self.embedding_index:
                grad = grad + d_embedding
            if capture_index is not None and i == capture_index:
                self.captured_grad = grad
            grad = self.layers[i].backward(grad)
        return grad

    # -- parameters --------------------------------------------------------

    def trainable_params(self):
        """Yield (layer_index, name, array) for every trainable parameter."""
        for i, layer in enumerate(self.layers):
            trainable = getattr(layer, "trainable", layer.param_order)
            for name in trainable:
                yield i, name, layer.params[name]

    def init_params(self, seed=0):
        """Kaiming-uniform (fan-in) init for conv/dense; BN gamma=1 beta=0."""
        rng = np.random.Generator(np.random.PCG64(seed))
        for layer in self.layers:
            if isinstance(layer, Conv2D):
                fan_in = layer.in_channels * layer.kernel * layer.kernel
            elif isinstance(layer, Dense):
                fan_in = layer.in_features
            else:
                continue
            bound = np.sqrt(6.0 / fan_in)
            w = layer.params["w"]
            layer.params["w"] = rng.uniform(-bound, bound, size=w.shape).astype(
                self.dtype
            )
            layer.params["b"] = np.zeros_like(layer.params["b"])

    def reseed_dropout(self, seed):
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dropout):
                layer.reseed(seed + i)

    def copy(self):
        """Deep copy (parameters and architecture, not caches)."""
        new = build_network(
            [layer.spec() for layer in self.layers],
            self.num_classes,
            self.embedding_index,
            dtype=self.dtype,
        )
        for src, dst in zip(self.layers, new.layers):
            for k, v in src.params.items():
                dst.params[k] = v.copy()
        return new


class SGD:
    """Plain SGD with momentum: v <- momentum*v + g; p <- p - lr*v."""

    def __init__(self, net: Network, lr, momentum=0.9):
        if lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {lr}")
        if not (0.0 <= momentum < 1.0):
            raise ConfigurationError(f"momentum must be in [0, 1), got {momentum}")
        self.net = net
        self.lr = lr
        self.momentum = momentum
        self.velocity = {
            (i, name): np.zeros_like(p) for i, name, p in net.trainable_params()
        }

    def step(self):
        for i, name, p in self.net.trainable_params():
            g = self.net.layers[i].grads.get(name)
            if g is None:
                raise StateError(f"layer {i} parameter {name!r} has no gradient")
            if not np.all(np.isfinite(g)):
                raise NumericError(
                    f"non-finite gradient in layer {i} "
                    f"({self.net.layers[i].spec()}) parameter {name!r}"
                )
            v = self.velocity[(i, name)]
            v *= self.momentum
            v += g.astype(p.dtype)
            p -= self.lr * v


# ---------------------------------------------------------------------------
# stock architecture


def mnist_classifier(num_classes=10, dtype=np.float32, dropout_rate=0.5):
    """The small 28x28x1 CNN used throughout:

    Conv 32 3x3 s2 p1 + BN + ReLU -> Conv 64 3x3 s2 p0 + BN + ReLU ->
    Conv 64 3x3 s2 p0 + ReLU -> Flatten -> Dense 512 + ReLU + Dropout ->
    Dense num_classes.  Spatial sizes: 28 -> 14 -> 6 -> 2.
    """
    layers = [
        Conv2D(1, 32, stride=2, pad=1),
        BatchNorm(32),
        ReLU(),
        Conv2D(32, 64, stride=2, pad=0),
        BatchNorm(64),
        ReLU(),
        Conv2D(64, 64, stride=2, pad=0),
        ReLU(),
        Flatten(),
        Dense(64 * 2 * 2, 512),
        ReLU(),
        Dropout(dropout_rate),
        Dense(512, num_classes),
    ]
    return Network(layers, num_classes, embedding_index=10, dtype=dtype)


LAST_CONV_INDEX = 6  # Conv 64 s2 p0, output 2x2 -> used by GradCAM/fine-pruning


def scale_input(images, depth=8):
    """(B, H, W, C) raw pixels -> (B, C, H, W) in [0, 1]."""
    x = np.asarray(images, dtype=np.float64) / (2**depth - 1)
    return np.transpose(x, (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# checkpoints


def _layer_from_spec(spec):
    parts = spec.split()
    kind = parts[0]
    kv = dict(p.split("=", 1) for p in parts[1:])
    if kind == "conv2d":
        return Conv2D(
            int(kv["in"]),
            int(kv["out"]),
            stride=int(kv["stride"]),
            pad=int(kv["pad"]),
            kernel=int(kv["k"]),
        )
    if kind == "batchnorm":
        return BatchNorm(
            int(kv["channels"]), eps=float(kv["eps"]), momentum=float(kv["momentum"])
        )
    if kind == "relu":
        return ReLU()
    if kind == "flatten":
        return Flatten()
    if kind == "dense":
        return Dense(int(kv["in"]), int(kv["out"]))
    if kind == "dropout":
        return Dropout(rate=float(kv["rate"]))
    raise FormatError(f"unknown layer descriptor {spec!r}")


def build_network(specs, num_classes, embedding_index, dtype=np.float32):
    return Network(
        [_layer_from_spec(s) for s in specs], num_classes, embedding_index, dtype=dtype
    )


def save_checkpoint(net: Network, path):
    """magic | version | header | per-layer descriptors | float32 LE blob."""
    blob = bytearray()
    descriptors = []
    for layer in net.layers:
        count = sum(layer.params[k].size for k in layer.param_order)
        descriptors.append((layer.spec(), count))
        for k in layer.param_order:
            blob += np.ascontiguousarray(
                layer.params[k], dtype="<f4"
            ).tobytes()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<III", CHECKPOINT_VERSION, len(net.layers), net.num_classes))
        f.write(struct.pack("<i", -1 if net.embedding_index is None else net.embedding_index))
        for spec, count in descriptors:
            enc = spec.encode("utf-8")
            f.write(struct.pack("<HQ", len(enc), count))
            f.write(enc)
        f.write(bytes(blob))


def load_checkpoint(path) -> Network:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {magic!r} at offset 0")
        head = f.read(16)
        if len(head) != 16:
            raise FormatError(f"{path}: truncated header at offset 8")
        version, n_layers, num_classes, emb = struct.unpack("<IIIi", head)
        if version != CHECKPOINT_VERSION:
            raise FormatError(
                f"{path}: unsupported checkpoint version {version} "
                f"(expected {CHECKPOINT_VERSION})"
            )
        descriptors = []
        for _ in range(n_layers):
            hdr = f.read(10)
            if len(hdr) != 10:
                raise FormatError(f"{path}: truncated descriptor at offset {f.tell()}")
            length, count = struct.unpack("<HQ", hdr)
            enc = f.read(length)
            if len(enc) != length:
                raise FormatError(f"{path}: truncated descriptor at offset {f.tell()}")
            descriptors.append((enc.decode("utf-8"), count))
        net = build_network(
            [s for s, _ in descriptors],
            num_classes,
            None if emb < 0 else emb,
            dtype=np.float32,
        )
        for layer, (spec, count) in zip(net.layers, descriptors):
            expected = sum(layer.params[k].size for k in layer.param_order)
            if count != expected:
                raise FormatError(
                    f"{path}: descriptor {spec!r} declares {count} parameters, "
                    f"layer needs {expected}"
                )
            raw = f.read(4 * count)
            if len(raw) != 4 * count:
                raise FormatError(
                    f"{path}: truncated parameter blob at offset {f.tell()}"
                )
            flat = np.frombuffer(raw, dtype="<f4")
            offset = 0
            for k in layer.param_order:
                size = layer.params[k].size
                layer.params[k] = (
                    flat[offset : offset + size].reshape(layer.params[k].shape).copy()
                )
                offset += size
        trailing = f.read(1)
        if trailing:
            raise FormatError(f"{path}: trailing bytes at offset {f.tell() - 1}")
    return net
