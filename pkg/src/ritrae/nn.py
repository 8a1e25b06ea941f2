"""Small convolutional classifier with hand-written forward/backward passes.

Images enter as ``(n, h, w, c)`` floats in [0, 1] (uint8 input is divided by
255).  All arithmetic is float64; after training, parameters are rounded to
float32 precision so that a saved weight file reloads to bit-identical logits.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

__all__ = [
    "Conv2D",
    "Dense",
    "ReLU",
    "MaxPool2",
    "Flatten",
    "AvgPool",
    "Sequential",
    "ToyNetClassifier",
    "softmax",
    "to_unit",
    "save_weights",
    "load_weights",
]

WEIGHTS_MAGIC = b"RITRAE-WEIGHTS 1\n"


def to_unit(X):
    """Images as float64 ``(n, h, w, c)`` in [0, 1]."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n, h, w[, c]), got {X.shape}")
    if X.dtype == np.uint8:
        return X.astype(np.float64) / 255.0
    X = X.astype(np.float64)
    if not np.isfinite(X).all():
        raise ValueError("input contains non-finite values")
    return X


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Conv2D:
    """3x3 convolution, stride 1, zero padding 1.  Input/output layout NCHW."""

    def __init__(self, in_channels, out_channels, rng=None):
        self.in_channels, self.out_channels = in_channels, out_channels
        fan_in = in_channels * 9
        rng = rng or np.random.default_rng(0)
        self.params = {
            "W": rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_channels, fan_in)),
            "b": np.zeros(out_channels),
        }

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(f"conv expects {self.in_channels} channels, got {c}")
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))          # n, c, h, w, 3, 3
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)
        out = cols @ self.params["W"].T + self.params["b"]
        self.cache = (x.shape, cols)
        return out.reshape(n, h, w, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, dout):
        (n, c, h, w), cols = self.cache
        d2 = dout.transpose(0, 2, 3, 1).reshape(n * h * w, self.out_channels)
        self.grads = {"W": d2.T @ cols, "b": d2.sum(axis=0)}
        dcols = (d2 @ self.params["W"]).reshape(n, h, w, c, 3, 3)
        dxp = np.zeros((n, c, h + 2, w + 2))
        for i in range(3):
            for j in range(3):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, 1:-1, 1:-1]


class Dense:
    def __init__(self, in_features, out_features, rng=None):
        rng = rng or np.random.default_rng(0)
        self.params = {
            "W": rng.normal(0.0, np.sqrt(2.0 / in_features), size=(out_features, in_features)),
            "b": np.zeros(out_features),
        }

    def forward(self, x):
        self.cache = x
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, dout):
        self.grads = {"W": dout.T @ self.cache, "b": dout.sum(axis=0)}
        return dout @ self.params["W"]


class ReLU:
    params = {}

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, dout):
        self.grads = {}
        return np.where(self.mask, dout, 0.0)


class MaxPool2:
    """2x2 max pooling, stride 2.  Ties route the gradient to the first maximum."""

    params = {}

    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"max pooling needs even spatial size, got {h}x{w}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        self.arg = win.argmax(axis=-1)
        self.shape = x.shape
        return np.take_along_axis(win, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        self.grads = {}
        n, c, h, w = self.shape
        win = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(win, self.arg[..., None], dout[..., None], axis=-1)
        return win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


class AvgPool:
    """``k x k`` average pooling, stride ``k``."""

    params = {}

    def __init__(self, k):
        self.k = k

    def forward(self, x):
        n, c, h, w = x.shape
        k = self.k
        if h % k or w % k:
            raise ValueError(f"average pooling by {k} needs sides divisible by {k}, got {h}x{w}")
        self.shape = x.shape
        return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(self, dout):
        self.grads = {}
        k = self.k
        up = np.repeat(np.repeat(dout, k, axis=2), k, axis=3)
        return up / (k * k)


class Flatten:
    params = {}

    def forward(self, x):
        self.shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        self.grads = {}
        return dout.reshape(self.shape)


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for k in sorted(layer.params):
                yield f"{i}.{type(layer).__name__}.{k}", layer, k


def _build(architecture, input_shape, n_classes, conv_channels, hidden, rng, input_pool=1):
    h, w, c = input_shape
    if input_pool > 1:
        if h % input_pool or w % input_pool:
            raise ValueError(f"input_pool={input_pool} does not divide input size {h}x{w}")
        inner = _build(architecture, (h // input_pool, w // input_pool, c), n_classes,
                       conv_channels, hidden, rng)
        return Sequential([AvgPool(input_pool)] + inner.layers)
    if architecture == "linear":
        return Sequential([Flatten(), Dense(h * w * c, n_classes, rng)])
    if architecture == "mlp":
        return Sequential([Flatten(), Dense(h * w * c, hidden, rng), ReLU(), Dense(hidden, n_classes, rng)])
    if architecture != "cnn":
        raise ValueError(f"unknown architecture {architecture!r}")
    c1, c2 = conv_channels
    if h % 4 or w % 4:
        raise ValueError(f"cnn architecture needs sides divisible by 4, got {h}x{w}")
    return Sequential([
        Conv2D(c, c1, rng), ReLU(), MaxPool2(),
        Conv2D(c1, c2, rng), ReLU(), MaxPool2(),
        Flatten(),
        Dense(c2 * (h // 4) * (w // 4), hidden, rng), ReLU(),
        Dense(hidden, n_classes, rng),
    ])


class ToyNetClassifier(ClassifierMixin, BaseEstimator):
    """Desk-scale image classifier (2 conv + 2 dense by default).

    Parameters
    ----------
    architecture : {"cnn", "mlp", "linear"}, default="cnn"
    conv_channels : tuple of int, default=(8, 16)
    hidden : int, default=64
    input_pool : int, default=1
        Side of an average-pooling stage applied to the input (1 = none).
    epochs : int, default=8
    batch_size : int, default=32
    learning_rate : float, default=2e-3
        Adam step size.
    random_state : int, default=0
        Seeds weight initialization and minibatch order.

    Attributes
    ----------
    net_ : Sequential
    classes_ : ndarray of shape (n_classes,)
    input_shape_ : tuple (h, w, c)
    loss_curve_ : list of float
        Mean training loss per minibatch.
    """

    def __init__(self, architecture="cnn", conv_channels=(8, 16), hidden=64, input_pool=1, epochs=8,
                 batch_size=32, learning_rate=2e-3, random_state=0):
        self.architecture = architecture
        self.conv_channels = conv_channels
        self.hidden = hidden
        self.input_pool = input_pool
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    # -- construction ------------------------------------------------------

    def _init_net(self, input_shape, classes):
        rng = np.random.default_rng(self.random_state)
        self.classes_ = np.asarray(classes)
        self.input_shape_ = tuple(int(s) for s in input_shape)
        self.net_ = _build(self.architecture, self.input_shape_, len(self.classes_),
                           tuple(self.conv_channels), self.hidden, rng, self.input_pool)
        return self

    def fit(self, X, y):
        X = to_unit(X)
        y = np.asarray(y)
        if len(X) == 0:
            raise ValueError("cannot train on an empty dataset")
        if len(X) != len(y):
            raise ValueError("X and y differ in length")
        classes, y_idx = np.unique(y, return_inverse=True)
        self._init_net(X.shape[1:], classes)
        rng = np.random.default_rng(self.random_state)
        params = list(self.net_.named_params())
        m = {name: np.zeros_like(layer.params[k]) for name, layer, k in params}
        v = {name: np.zeros_like(layer.params[k]) for name, layer, k in params}
        b1, b2, eps = 0.9, 0.999, 1e-8
        step = 0
        self.loss_curve_ = []
        for _ in range(self.epochs):
            order = rng.permutation(len(X))
            for start in range(0, len(X), self.batch_size):
                idx = order[start:start + self.batch_size]
                z = self.net_.forward(self._nchw(X[idx]))
                p = softmax(z)
                onehot = np.eye(len(classes))[y_idx[idx]]
                self.loss_curve_.append(float(-np.log(np.clip((p * onehot).sum(1), 1e-300, None)).mean()))
                self.net_.backward((p - onehot) / len(idx))
                step += 1
                for name, layer, k in params:
                    g = layer.grads[k]
                    m[name] = b1 * m[name] + (1 - b1) * g
                    v[name] = b2 * v[name] + (1 - b2) * g * g
                    mhat = m[name] / (1 - b1 ** step)
                    vhat = v[name] / (1 - b2 ** step)
                    layer.params[k] = layer.params[k] - self.learning_rate * mhat / (np.sqrt(vhat) + eps)
        for _, layer, k in params:
            layer.params[k] = layer.params[k].astype(np.float32).astype(np.float64)
        return self

    # -- inference ---------------------------------------------------------

    @staticmethod
    def _nchw(X):
        return X.transpose(0, 3, 1, 2)

    def _check_input(self, X):
        check_is_fitted(self, "net_")
        X = to_unit(X)
        if X.shape[1:] != self.input_shape_:
            raise ValueError(f"model expects images of shape {self.input_shape_}, got {X.shape[1:]}")
        return X

    def logits(self, X):
        return self.net_.forward(self._nchw(self._check_input(X)))

    decision_function = logits

    def predict_proba(self, X):
        return softmax(self.logits(X))

    def predict(self, X):
        return self.classes_[self.logits(X).argmax(axis=1)]

    def predict_index(self, X):
        return self.logits(X).argmax(axis=1)

    # -- gradients ---------------------------------------------------------

    def backprop(self, X, grad_logits):
        """Gradient w.r.t. the input of ``sum(grad_logits * logits(X))``; same shape as ``X``."""
        X = self._check_input(X)
        self.net_.forward(self._nchw(X))
        dx = self.net_.backward(np.asarray(grad_logits, dtype=np.float64))
        return dx.transpose(0, 2, 3, 1)

    def input_gradient(self, X, target, loss="ce", other=None):
        """Input gradient of a per-sample scalar loss.

        ``loss="ce"``: cross-entropy at class index ``target``;
        ``loss="logit"``: the logit ``target``;
        ``loss="diff"``: ``logit[target] - logit[other]``.
        """
        X = self._check_input(X)
        k = len(self.classes_)
        target = np.broadcast_to(np.asarray(target), (len(X),))
        if np.any((target < 0) | (target >= k)):
            raise ValueError(f"class index out of range 0..{k - 1}")
        onehot = np.eye(k)[target]
        if loss == "ce":
            z = self.net_.forward(self._nchw(X))
            g = softmax(z) - onehot
        elif loss == "logit":
            g = onehot
        elif loss == "diff":
            other = np.broadcast_to(np.asarray(other), (len(X),))
            g = onehot - np.eye(k)[other]
        else:
            raise ValueError(f"unknown loss {loss!r}")
        return self.backprop(X, g)

    def ce_loss(self, X, target):
        p = self.predict_proba(X)
        return -np.log(p[np.arange(len(p)), target])

    def jacobian(self, X):
        """Logits and their input gradients: ``(n, K)`` and ``(n, K, h, w, c)``."""
        X = self._check_input(X)
        z = self.net_.forward(self._nchw(X))
        k = z.shape[1]
        grads = []
        for i in range(k):
            g = np.zeros_like(z)
            g[:, i] = 1.0
            grads.append(self.net_.backward(g).transpose(0, 2, 3, 1))
        return z, np.stack(grads, axis=1)

    # -- persistence -------------------------------------------------------

    def get_weights(self):
        check_is_fitted(self, "net_")
        return {name: layer.params[k] for name, layer, k in self.net_.named_params()}

    def set_weights(self, weights):
        for name, layer, k in self.net_.named_params():
            arr = np.asarray(weights[name], dtype=np.float64)
            if arr.shape != layer.params[k].shape:
                raise ValueError(f"{name}: shape {arr.shape} != {layer.params[k].shape}")
            layer.params[k] = arr.copy()
        return self


def save_weights(model, path):
    """Weight file: magic line, one JSON manifest line, then little-endian float32 data."""
    weights = model.get_weights()
    manifest = {
        "estimator": model.get_params(),
        "classes": model.classes_.tolist(),
        "input_shape": list(model.input_shape_),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in weights.items()],
    }
    manifest["estimator"]["conv_channels"] = list(model.conv_channels)
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    buf.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
    for v in weights.values():
        buf.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_weights(path):
    data = Path(path).read_bytes()
    if not data.startswith(WEIGHTS_MAGIC):
        raise ValueError(f"{path} is not a weight file")
    rest = data[len(WEIGHTS_MAGIC):]
    nl = rest.index(b"\n")
    manifest = json.loads(rest[:nl])
    raw = rest[nl + 1:]
    params = manifest["estimator"]
    params["conv_channels"] = tuple(params["conv_channels"])
    model = ToyNetClassifier(**params)
    model._init_net(manifest["input_shape"], np.array(manifest["classes"]))
    weights, off = {}, 0
    for t in manifest["tensors"]:
        count = int(np.prod(t["shape"]))
        if off + 4 * count > len(raw):
            raise ValueError(f"{path}: truncated tensor {t['name']}")
        weights[t["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(t["shape"])
        off += 4 * count
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return model.set_weights(weights)
