"""Forward and backward passes of every layer kind, on NHWC numpy arrays.

Each op is a pair of plain functions: ``op(...) -> (out, cache)`` and
``op_backward(dout, cache) -> grads``.  The layer classes at the bottom hold
parameters and caches and are what ``Model`` strings together.
"""

from __future__ import annotations

import numpy as np

from . import rng
from .errors import ContractError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
PROB_FLOOR = 1e-12


# --- convolution -------------------------------------------------------------------


def _pads(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        return (size - k) // stride + 1, 0, 0
    raise ValueError(f"unknown padding {padding!r}")


def conv_output_size(h: int, w: int, kernel: tuple[int, int], stride: int, padding: str = "same") -> tuple[int, int]:
    return _pads(h, kernel[0], stride, padding)[0], _pads(w, kernel[1], stride, padding)[0]


def conv2d(x, w, b, stride: int = 1, padding: str = "same"):
    """Cross-correlation of ``x`` (N,H,W,C) with ``w`` (kh,kw,C,F) plus bias ``b`` (F,)."""
    n, h, wd, c = x.shape
    kh, kw, wc, f = w.shape
    if wc != c:
        raise ShapeError(f"input has {c} channels but kernel expects {wc}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    ho, pt, pb = _pads(h, kh, stride, padding)
    wo, pl, pr = _pads(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit a {h}x{wd} input")
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt or pb or pl or pr else x
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    out = cols @ w.reshape(kh * kw * c, f)
    out += b
    cache = (cols, w, x.shape, xp.shape, stride, (pt, pl))
    return out.reshape(n, ho, wo, f), cache


def conv2d_backward(dout, cache, need_input_grad: bool = True):
    cols, w, x_shape, xp_shape, stride, (pt, pl) = cache
    kh, kw, c, f = w.shape
    n, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, f)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_input_grad:
        return None, dw, db
    dcols = (d2 @ w.reshape(-1, f).T).reshape(n, ho, wo, kh, kw, c)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
    _, h, wd, _ = x_shape
    return dxp[:, pt : pt + h, pl : pl + wd, :], dw, db


# --- max pooling ---------------------------------------------------------------------


def pool_output_size(h: int, w: int, kernel: tuple[int, int], stride: int) -> tuple[int, int]:
    return (h - kernel[0]) // stride + 1, (w - kernel[1]) // stride + 1


def _window(a, i, j, stride, ho, wo):
    return a[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]


def maxpool(x, kernel=(2, 2), stride: int = 2):
    n, h, w, c = x.shape
    kh, kw = kernel
    ho, wo = pool_output_size(h, w, kernel, stride)
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool window {kh}x{kw} larger than {h}x{w} input")
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    out = _window(x, 0, 0, stride, ho, wo).copy()
    for i, j in offsets[1:]:
        np.maximum(out, _window(x, i, j, stride, ho, wo), out=out)
    # arg = first window position (row-major) holding the maximum
    found = _window(x, 0, 0, stride, ho, wo) == out
    arg = np.zeros(out.shape, dtype=np.uint8)
    for q, (i, j) in enumerate(offsets[1:], start=1):
        eq = _window(x, i, j, stride, ho, wo) == out
        first = eq > found
        arg += first.view(np.uint8) * np.uint8(q)
        found |= eq
    return out, (arg, x.shape, kernel, stride)


def maxpool_backward(dout, cache):
    arg, x_shape, (kh, kw), stride = cache
    _, ho, wo, _ = dout.shape
    dx = np.zeros(x_shape, dtype=dout.dtype)
    overlapping = stride < max(kh, kw)
    q = 0
    for i in range(kh):
        for j in range(kw):
            hit = arg == q
            view = _window(dx, i, j, stride, ho, wo)
            if overlapping:
                view += dout * hit
            else:
                np.multiply(dout, hit, out=view)
            q += 1
    return dx


# --- batch normalisation ---------------------------------------------------------------


def batchnorm(x, gamma, beta, running_mean, running_var, training: bool, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel normalisation over every axis but the last.

    In training mode the running statistics are updated in place.
    """
    c = x.shape[-1]
    x2 = x.reshape(-1, c)
    if training:
        m = x2.shape[0]
        if x.shape[0] < 2:
            raise ContractError("batch normalisation in training mode needs a batch of at least 2")
        mean = x2.mean(axis=0)
        xc = x2 - mean
        var = np.einsum("ij,ij->j", xc, xc) / m
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var * (m / (m - 1))  # unbiased estimate for inference
    else:
        mean, var = running_mean, running_var
        xc = x2 - mean
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xc *= inv_std
    out = xc * gamma
    out += beta
    return out.reshape(x.shape), (xc, inv_std, gamma, training)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, training = cache
    d2 = dout.reshape(xhat.shape)
    dgamma = np.einsum("ij,ij->j", d2, xhat)
    dbeta = d2.sum(axis=0)
    if training:
        m = xhat.shape[0]
        dx = xhat * (dgamma / m)
        dx += dbeta / m
        np.subtract(d2, dx, out=dx)
        dx *= gamma * inv_std
    else:
        dx = d2 * (gamma * inv_std)
    return dx.reshape(dout.shape), dgamma, dbeta


# --- activations and dropout ------------------------------------------------------------


def relu(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def dropout_mask(shape, p: float, key: tuple[int, ...], dtype=np.float64):
    """Inverted-dropout mask: 0 with probability p, 1/(1-p) otherwise."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = rng.uniforms(key, int(np.prod(shape))).reshape(shape) >= p
    return (keep / (1.0 - p)).astype(dtype)


def dropout(x, p: float, training: bool, key: tuple[int, ...] | None = None, mask=None):
    if not training or p == 0:
        return x, None
    if mask is None:
        if key is None:
            raise ContractError("training-mode dropout needs a key")
        mask = dropout_mask(x.shape, p, key, x.dtype)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


# --- dense -------------------------------------------------------------------------------


def dense(x, w, b):
    n = x.shape[0]
    x2 = x.reshape(n, -1)
    if x2.shape[1] != w.shape[0]:
        raise ShapeError(f"flattened input has {x2.shape[1]} features, weights expect {w.shape[0]}")
    return x2 @ w + b, (x2, w, x.shape)


def dense_backward(dout, cache, need_input_grad: bool = True, dw=None):
    """``dw`` may be a preallocated buffer to write the weight gradient into."""
    x2, w, x_shape = cache
    dw = np.matmul(x2.T, dout, out=dw)
    db = dout.sum(axis=0)
    dx = (dout @ w.T).reshape(x_shape) if need_input_grad else None
    return dx, dw, db


# --- softmax and loss ---------------------------------------------------------------------


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dprobs, probs):
    return probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))


def cross_entropy(probs, labels) -> float:
    labels = np.asarray(labels)
    p_true = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p_true, PROB_FLOOR))))


def l2_penalty(weights, lam: float) -> float:
    return float(lam * sum(float(np.vdot(w, w)) for w in weights))


def l2_grad(w, lam: float):
    return (2 * lam) * w


def loss(probs, labels, weights=(), lam: float = 0.0) -> float:
    if lam < 0:
        raise ValueError("regularisation strength must be >= 0")
    return cross_entropy(probs, labels) + l2_penalty(weights, lam)


def loss_grad_logits(probs, labels):
    """Gradient of the mean cross-entropy with respect to the pre-softmax logits."""
    n = probs.shape[0]
    g = probs.copy()
    g[np.arange(n), labels] -= 1
    g /= n
    return g


# --- layer objects ---------------------------------------------------------------------


class Layer:
    kind = ""
    regularized = ()

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.state: dict[str, np.ndarray] = {}
        self.need_input_grad = True

    def forward(self, x, training=False, key=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class Conv2D(Layer):
    kind = "conv2d"
    regularized = ("weight",)

    def __init__(self, weight, bias, stride=1, padding="same"):
        super().__init__()
        self.params = {"weight": weight, "bias": bias}
        self.stride, self.padding = stride, padding

    def forward(self, x, training=False, key=None):
        out, self._cache = conv2d(x, self.params["weight"], self.params["bias"], self.stride, self.padding)
        return out

    def backward(self, dout):
        dx, dw, db = conv2d_backward(dout, self._cache, self.need_input_grad)
        self.grads = {"weight": dw, "bias": db}
        self._cache = None
        return dx


class MaxPool(Layer):
    kind = "pool"

    def __init__(self, kernel=(2, 2), stride=2):
        super().__init__()
        self.kernel, self.stride = tuple(kernel), stride

    def forward(self, x, training=False, key=None):
        out, self._cache = maxpool(x, self.kernel, self.stride)
        return out

    def backward(self, dout):
        return maxpool_backward(dout, self._cache)


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, gamma, beta, running_mean, running_var):
        super().__init__()
        self.params = {"gamma": gamma, "beta": beta}
        self.state = {"running_mean": running_mean, "running_var": running_var}

    def forward(self, x, training=False, key=None):
        out, self._cache = batchnorm(
            x, self.params["gamma"], self.params["beta"], self.state["running_mean"], self.state["running_var"], training
        )
        return out

    def backward(self, dout):
        dx, dg, db = batchnorm_backward(dout, self._cache)
        self.grads = {"gamma": dg.astype(dout.dtype, copy=False), "beta": db.astype(dout.dtype, copy=False)}
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, key=None):
        out, self._mask = relu(x)
        return out

    def backward(self, dout):
        return relu_backward(dout, self._mask)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, p=0.5):
        super().__init__()
        self.p = p

    def forward(self, x, training=False, key=None):
        out, self._mask = dropout(x, self.p, training, key)
        return out

    def backward(self, dout):
        return dropout_backward(dout, self._mask)


class Dense(Layer):
    kind = "full"
    regularized = ("weight",)

    def __init__(self, weight, bias):
        super().__init__()
        self.params = {"weight": weight, "bias": bias}

    def forward(self, x, training=False, key=None):
        out, self._cache = dense(x, self.params["weight"], self.params["bias"])
        return out

    def backward(self, dout):
        buf = self.grads.get("weight")
        if buf is None or buf.shape != self.params["weight"].shape or buf.dtype != dout.dtype:
            buf = None
        dx, dw, db = dense_backward(dout, self._cache, self.need_input_grad, dw=buf)
        self.grads = {"weight": dw, "bias": db}
        self._cache = None
        return dx


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, training=False, key=None):
        self._probs = softmax(x)
        return self._probs

    def backward(self, dout):
        return softmax_backward(dout, self._probs)
