"""Layers with explicit forward and backward passes.

Image-like tensors are ``N x C x H x W`` float64 arrays. Each layer caches what
its backward pass needs during ``forward`` and fills ``self.grads`` in
``backward``; parameters live in ``self.params`` keyed by name.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from forcepipe.errors import BatchTooSmall, InvalidRate, ShapeMismatch

DTYPE = np.float64


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def same_padding(k: int) -> tuple[int, int]:
    """Zero padding that keeps the size for a length-``k`` kernel; extra goes after."""
    before = (k - 1) // 2
    return before, k - 1 - before


class Layer:
    tag = 0
    trainable = True

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        # non-trainable state that still belongs in a checkpoint
        self.buffers: dict[str, np.ndarray] = {}
        self.decay: set[str] = set()

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def zero_grad(self) -> None:
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def __repr__(self):
        return f"{type(self).__name__}()"


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _pads(kernel_hw, padding):
    if padding == "same":
        return same_padding(kernel_hw[0]), same_padding(kernel_hw[1])
    if padding == "valid":
        return (0, 0), (0, 0)
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _im2col(x, kh, kw, pads):
    (pt, pb), (pl, pr) = pads
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    n, c, hp, wp = x.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N C Ho Wo kh kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, (n, c, hp, wp, ho, wo)


def conv2d_forward(x, kernels, bias, padding: str = "same") -> np.ndarray:
    """Multi-channel 2-D convolution (cross-correlation, stride 1) plus bias.

    ``x`` is ``C x H x W`` or ``N x C x H x W``; ``kernels`` is ``R x C x m x m``.
    No activation is applied.
    """
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == 3
    if single:
        x = x[None]
    kernels = np.asarray(kernels, dtype=DTYPE)
    r, c, kh, kw = kernels.shape
    if x.shape[1] != c:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, kernels expect {c}")
    pads = _pads((kh, kw), padding)
    if kh > x.shape[2] + sum(pads[0]) or kw > x.shape[3] + sum(pads[1]):
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than padded input {x.shape[2:]}")
    cols, (n, _, _, _, ho, wo) = _im2col(x, kh, kw, pads)
    out = cols @ kernels.reshape(r, -1).T + np.asarray(bias, dtype=DTYPE)
    out = out.reshape(n, ho, wo, r).transpose(0, 3, 1, 2)
    return out[0] if single else np.ascontiguousarray(out)


class Conv2D(Layer):
    tag = 1

    def __init__(self, in_channels: int, n_filters: int, kernel_size, padding: str = "same",
                 rng: np.random.Generator | None = None):
        super().__init__()
        kh, kw = (kernel_size, kernel_size) if np.isscalar(kernel_size) else tuple(kernel_size)
        if n_filters < 1 or kh < 1 or kw < 1:
            raise ValueError("need at least one filter of size >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kh * kw
        self.params["W"] = uniform_init(rng, (n_filters, in_channels, kh, kw), fan_in)
        self.params["b"] = np.zeros(n_filters, dtype=DTYPE)
        self.decay = {"W"}
        self.padding = padding
        self.kernel = (kh, kw)
        # the first layer of a network can skip the (unused) input gradient
        self.input_grad = True
        self.zero_grad()

    def output_shape(self, shape):
        c, h, w = shape
        (pt, pb), (pl, pr) = _pads(self.kernel, self.padding)
        return self.params["W"].shape[0], h + pt + pb - self.kernel[0] + 1, w + pl + pr - self.kernel[1] + 1

    def forward(self, x, training=False):
        W = self.params["W"]
        r, c, kh, kw = W.shape
        if x.ndim != 4 or x.shape[1] != c:
            raise ShapeMismatch(f"Conv2D expects N x {c} x H x W, got {x.shape}")
        pads = _pads((kh, kw), self.padding)
        cols, geom = _im2col(x, kh, kw, pads)
        n, _, _, _, ho, wo = geom
        out = cols @ W.reshape(r, -1).T
        out += self.params["b"]
        self._cache = (cols, geom, pads, x.shape)
        return np.ascontiguousarray(out.reshape(n, ho, wo, r).transpose(0, 3, 1, 2))

    def backward(self, grad):
        cols, (n, c, hp, wp, ho, wo), ((pt, _), (pl, _)), in_shape = self._cache
        W = self.params["W"]
        r, _, kh, kw = W.shape
        d = grad.transpose(0, 2, 3, 1).reshape(-1, r)
        self.grads["W"] = (d.T @ cols).reshape(W.shape)
        self.grads["b"] = d.sum(axis=0)
        self._cache = None
        if not self.input_grad:
            return None
        dcols = (d @ W.reshape(r, -1)).reshape(n, ho, wo, c, kh, kw)
        # col2im in NHWC, one transpose at the end
        dxp = np.zeros((n, hp, wp, c), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + ho, j:j + wo, :] += dcols[..., i, j]
        dx = dxp[:, pt:pt + in_shape[2], pl:pl + in_shape[3], :]
        return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))

    def __repr__(self):
        r, c, kh, kw = self.params["W"].shape
        return f"Conv2D({c}->{r}, {kh}x{kw}, {self.padding})"


# --------------------------------------------------------------------------
# normalization, activation, pooling
# --------------------------------------------------------------------------

class BatchNorm2D(Layer):
    """Per-feature-map batch normalization with running statistics."""

    tag = 2

    def __init__(self, n_maps: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.params["gamma"] = np.ones(n_maps, dtype=DTYPE)
        self.params["beta"] = np.zeros(n_maps, dtype=DTYPE)
        self.buffers["running_mean"] = np.zeros(n_maps, dtype=DTYPE)
        self.buffers["running_var"] = np.ones(n_maps, dtype=DTYPE)
        self.momentum = momentum
        self.eps = eps
        self.zero_grad()

    def forward(self, x, training=False):
        g = self.params["gamma"][None, :, None, None]
        b = self.params["beta"][None, :, None, None]
        if not training:
            mu = self.buffers["running_mean"][None, :, None, None]
            var = self.buffers["running_var"][None, :, None, None]
            return (x - mu) / np.sqrt(var + self.eps) * g + b
        if x.shape[0] < 2:
            raise BatchTooSmall("batch normalization needs at least 2 samples in train mode")
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = self.momentum
        self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mu
        self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std)
        return xhat * g + b

    def backward(self, grad):
        xhat, inv_std = self._cache
        axes = (0, 2, 3)
        count = grad.shape[0] * grad.shape[2] * grad.shape[3]
        self.grads["gamma"] = (grad * xhat).sum(axis=axes)
        self.grads["beta"] = grad.sum(axis=axes)
        dxhat = grad * self.params["gamma"][None, :, None, None]
        mean_d = dxhat.sum(axis=axes, keepdims=True) / count
        mean_dx = (dxhat * xhat).sum(axis=axes, keepdims=True) / count
        self._cache = None
        return (dxhat - mean_d - xhat * mean_dx) * inv_std[None, :, None, None]


def relu(x):
    """Elementwise ``max(x, 0)``."""
    return np.maximum(x, 0.0)


def relu_backward(x, grad):
    return grad * (x > 0)


class ReLU(Layer):
    tag = 3
    trainable = False

    def forward(self, x, training=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


def _pool_hw(size):
    ph, pw = (size, size) if np.isscalar(size) else size
    return int(ph), int(pw)


def _pool_views(x, size):
    ph, pw = _pool_hw(size)
    h, w = x.shape[-2:]
    ho, wo = h // ph, w // pw
    return [x[..., a:ho * ph:ph, b:wo * pw:pw] for a in range(ph) for b in range(pw)]


def maxpool(x, size):
    """Non-overlapping max pooling over the last two axes.

    ``size`` is an int (square window) or ``(ph, pw)``. Trailing rows/columns
    that do not fill a window are dropped. Returns the pooled array and the
    flat in-window argmax (row-major, first maximum wins).
    """
    ph, pw = _pool_hw(size)
    *lead, h, w = x.shape
    ho, wo = h // ph, w // pw
    xr = x[..., :ho * ph, :wo * pw].reshape(*lead, ho, ph, wo, pw)
    xr = xr.swapaxes(-3, -2).reshape(*lead, ho, wo, ph * pw)
    idx = xr.argmax(axis=-1)
    return np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0], idx


class MaxPool2D(Layer):
    tag = 4
    trainable = False

    def __init__(self, size):
        super().__init__()
        self.size = _pool_hw(size)

    def output_shape(self, shape):
        c, h, w = shape
        return c, h // self.size[0], w // self.size[1]

    def forward(self, x, training=False):
        out, idx = maxpool(x, self.size)
        self._cache = (idx, x.shape)
        return out

    def backward(self, grad):
        idx, in_shape = self._cache
        dx = np.zeros(in_shape, dtype=DTYPE)
        for k, view in enumerate(_pool_views(dx, self.size)):
            view[...] = grad * (idx == k)
        return dx

    def __repr__(self):
        ph, pw = self.size
        return f"MaxPool2D({ph}x{pw})"


class Dropout(Layer):
    """Inverted dropout: survivors are rescaled by ``1 / (1 - rate)`` at train time."""

    tag = 5
    trainable = False

    def __init__(self, rate: float = 0.5, seed: int = 0):
        super().__init__()
        if not 0 <= rate < 1:
            raise InvalidRate(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = float(rate)
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reseed(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def forward(self, x, training=False):
        if not training or self.rate == 0:
            self._mask = None
            return x
        self._mask = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask

    def __repr__(self):
        return f"Dropout({self.rate})"


def dropout(x, rate: float = 0.5, training: bool = True, rng: np.random.Generator | None = None):
    if not 0 <= rate < 1:
        raise InvalidRate(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    return x * ((rng.random(np.shape(x)) >= rate) / (1.0 - rate))


class Flatten(Layer):
    tag = 6
    trainable = False

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, training=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


# --------------------------------------------------------------------------
# dense
# --------------------------------------------------------------------------

def dense_forward(x, W, b):
    """``W @ x + b`` for a vector ``x`` (or row-wise for a batch ``N x in``)."""
    x = np.asarray(x, dtype=DTYPE)
    W = np.asarray(W, dtype=DTYPE)
    if x.shape[-1] != W.shape[1] or W.shape[0] != np.shape(b)[0]:
        raise ShapeMismatch(f"W {W.shape} incompatible with x {x.shape} / b {np.shape(b)}")
    return x @ W.T + b


class Dense(Layer):
    tag = 7

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = uniform_init(rng, (n_out, n_in), n_in)
        self.params["b"] = np.zeros(n_out, dtype=DTYPE)
        self.decay = {"W"}
        self.zero_grad()

    def output_shape(self, shape):
        return (self.params["W"].shape[0],)

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.params["W"].shape[1]:
            raise ShapeMismatch(f"Dense expects N x {self.params['W'].shape[1]}, got {x.shape}")
        self._x = x
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, grad):
        self.grads["W"] = grad.T @ self._x
        self.grads["b"] = grad.sum(axis=0)
        self._x = None
        return grad @ self.params["W"]

    def __repr__(self):
        o, i = self.params["W"].shape
        return f"Dense({i}->{o})"


LAYER_TYPES = {cls.tag: cls for cls in (Conv2D, BatchNorm2D, ReLU, MaxPool2D, Dropout, Flatten, Dense)}


class Sequential:
    def __init__(self, layers=()):
        self.layers: list[Layer] = list(layers)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def parameters(self):
        """``(layer, name)`` pairs for every trainable array, in layer order."""
        return [(layer, name) for layer in self.layers for name in layer.params]

    def n_params(self) -> int:
        return sum(layer.params[name].size for layer, name in self.parameters())

    def __repr__(self):
        return "Sequential(" + ", ".join(map(repr, self.layers)) + ")"
