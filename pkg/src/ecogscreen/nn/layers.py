"""Layers with explicit forward/backward passes.

All tensors are channels-last: images are (batch, height, width, channels),
sequences (batch, time, features). Layers cache what backward needs during
forward, so a backward call always refers to the most recent forward.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.input_shape: tuple = ()
        self.output_shape: tuple = ()

    def build(self, input_shape: tuple, rng: np.random.Generator, dtype) -> tuple:
        self.input_shape = tuple(input_shape)
        self.output_shape = self.compute_output_shape(self.input_shape)
        return self.output_shape

    def compute_output_shape(self, input_shape):
        return input_shape

    def forward(self, x, train: bool = False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def config(self) -> dict:
        return {"type": self.kind}

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.config().items() if k != "type")
        return f"{type(self).__name__}({args})"


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, filters: int, kernel_h: int, kernel_w: int | None = None, stride: int = 1,
                 padding: str = "valid"):
        super().__init__()
        kernel_w = kernel_h if kernel_w is None else kernel_w
        if min(filters, kernel_h, kernel_w, stride) < 1:
            raise ValueError("Conv2D dimensions must be positive")
        if padding not in ("valid", "same"):
            raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")
        self.filters, self.kh, self.kw, self.stride, self.padding = filters, kernel_h, kernel_w, stride, padding

    def config(self):
        return {"type": self.kind, "filters": self.filters, "kernel_h": self.kh,
                "kernel_w": self.kw, "stride": self.stride, "padding": self.padding}

    def _pads(self, h, w):
        if self.padding == "valid":
            return (0, 0), (0, 0)
        ph = max((-(-h // self.stride) - 1) * self.stride + self.kh - h, 0)
        pw = max((-(-w // self.stride) - 1) * self.stride + self.kw - w, 0)
        return (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)

    def compute_output_shape(self, s):
        if len(s) != 3:
            raise ShapeError(f"Conv2D expects (height, width, channels), got {s}")
        h, w, _ = s
        (t, b), (l, r) = self._pads(h, w)
        ho = (h + t + b - self.kh) // self.stride + 1
        wo = (w + l + r - self.kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"Conv2D kernel {self.kh}x{self.kw} larger than input {h}x{w}")
        return (ho, wo, self.filters)

    def build(self, input_shape, rng, dtype):
        out = super().build(input_shape, rng, dtype)
        c = input_shape[2]
        fan_in, fan_out = self.kh * self.kw * c, self.kh * self.kw * self.filters
        self.params = {"W": glorot_uniform(rng, (self.kh, self.kw, c, self.filters), fan_in, fan_out, dtype),
                       "b": np.zeros(self.filters, dtype)}
        return out

    def forward(self, x, train=False, rng=None):
        (t, b), (l, r) = self._pads(x.shape[1], x.shape[2])
        xp = np.pad(x, ((0, 0), (t, b), (l, r), (0, 0))) if (t or b or l or r) else x
        ho, wo, _ = self.output_shape
        s = self.stride
        win = sliding_window_view(xp, (self.kh, self.kw), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
        # win: (N, ho, wo, C, kh, kw)
        self._xp_shape = xp.shape
        self._pad = (t, l)
        self._win = win
        W = self.params["W"]
        return np.einsum("nhwcij,ijcf->nhwf", win, W, optimize=True) + self.params["b"]

    def backward(self, grad):
        W = self.params["W"]
        self.grads["W"] = np.einsum("nhwcij,nhwf->ijcf", self._win, grad, optimize=True)
        self.grads["b"] = grad.sum(axis=(0, 1, 2))
        dxp = np.zeros(self._xp_shape, dtype=grad.dtype)
        ho, wo, _ = self.output_shape
        s = self.stride
        for i in range(self.kh):
            for j in range(self.kw):
                dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += grad @ W[i, j].T
        t, l = self._pad
        h, w = self.input_shape[0], self.input_shape[1]
        return dxp[:, t:t + h, l:l + w, :]


class MaxPool2D(Layer):
    kind = "maxpool2d"

    def __init__(self, pool_h: int = 2, pool_w: int | None = None):
        super().__init__()
        self.ph = pool_h
        self.pw = pool_h if pool_w is None else pool_w
        if self.ph < 1 or self.pw < 1:
            raise ValueError("pool sizes must be positive")

    def config(self):
        return {"type": self.kind, "pool_h": self.ph, "pool_w": self.pw}

    def compute_output_shape(self, s):
        if len(s) != 3:
            raise ShapeError(f"MaxPool2D expects (height, width, channels), got {s}")
        ho, wo = s[0] // self.ph, s[1] // self.pw
        if ho < 1 or wo < 1:
            raise ShapeError(f"MaxPool2D {self.ph}x{self.pw} larger than input {s[0]}x{s[1]}")
        return (ho, wo, s[2])

    def forward(self, x, train=False, rng=None):
        n, h, w, c = x.shape
        ho, wo, _ = self.output_shape
        blocks = x[:, :ho * self.ph, :wo * self.pw, :].reshape(n, ho, self.ph, wo, self.pw, c)
        blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, self.ph * self.pw)
        self._arg = blocks.argmax(axis=-1)
        self._in_shape = x.shape
        return np.take_along_axis(blocks, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, h, w, c = self._in_shape
        ho, wo, _ = self.output_shape
        blocks = np.zeros((n, ho, wo, c, self.ph * self.pw), dtype=grad.dtype)
        np.put_along_axis(blocks, self._arg[..., None], grad[..., None], axis=-1)
        blocks = blocks.reshape(n, ho, wo, c, self.ph, self.pw).transpose(0, 1, 4, 2, 5, 3)
        dx = np.zeros(self._in_shape, dtype=grad.dtype)
        dx[:, :ho * self.ph, :wo * self.pw, :] = blocks.reshape(n, ho * self.ph, wo * self.pw, c)
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        return grad * self._mask


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float = 0.5):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def config(self):
        return {"type": self.kind, "rate": self.rate}

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = ((rng.random(x.shape) < keep) / keep).astype(x.dtype)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


class Flatten(Layer):
    kind = "flatten"

    def compute_output_shape(self, s):
        return (int(np.prod(s)),)

    def forward(self, x, train=False, rng=None):
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape((grad.shape[0],) + self.input_shape)


class SequenceFlatten(Layer):
    """(batch, time, ...) -> (batch, time, features): one feature vector per time step."""

    kind = "sequence_flatten"

    def compute_output_shape(self, s):
        if len(s) < 2:
            raise ShapeError(f"SequenceFlatten needs a time axis, got {s}")
        return (s[0], int(np.prod(s[1:])))

    def forward(self, x, train=False, rng=None):
        return x.reshape(x.shape[0], x.shape[1], -1)

    def backward(self, grad):
        return grad.reshape((grad.shape[0],) + self.input_shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, units: int):
        super().__init__()
        if units < 1:
            raise ValueError("Dense units must be positive")
        self.units = units

    def config(self):
        return {"type": self.kind, "units": self.units}

    def compute_output_shape(self, s):
        if len(s) != 1:
            raise ShapeError(f"Dense expects a flat input, got {s}")
        return (self.units,)

    def build(self, input_shape, rng, dtype):
        out = super().build(input_shape, rng, dtype)
        d = input_shape[0]
        self.params = {"W": glorot_uniform(rng, (d, self.units), d, self.units, dtype),
                       "b": np.zeros(self.units, dtype)}
        return out

    def forward(self, x, train=False, rng=None):
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        self.grads["W"] = self._x.T @ grad
        self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["W"].T


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LSTM(Layer):
    """Single LSTM layer returning the last hidden state.

    Gate blocks in the packed weights are ordered input, forget, cell, output.
    """

    kind = "lstm"

    def __init__(self, units: int, forget_bias: float = 1.0):
        super().__init__()
        if units < 1:
            raise ValueError("LSTM units must be positive")
        self.units = units
        self.forget_bias = forget_bias

    def config(self):
        return {"type": self.kind, "units": self.units, "forget_bias": self.forget_bias}

    def compute_output_shape(self, s):
        if len(s) != 2:
            raise ShapeError(f"LSTM expects (time, features), got {s}")
        return (self.units,)

    def build(self, input_shape, rng, dtype):
        out = super().build(input_shape, rng, dtype)
        d, u = input_shape[1], self.units
        b = np.zeros(4 * u, dtype)
        b[u:2 * u] = self.forget_bias
        self.params = {"W": glorot_uniform(rng, (d, 4 * u), d, 4 * u, dtype),
                       "U": glorot_uniform(rng, (u, 4 * u), u, 4 * u, dtype),
                       "b": b}
        return out

    def forward(self, x, train=False, rng=None):
        n, T, _ = x.shape
        u = self.units
        W, U, b = self.params["W"], self.params["U"], self.params["b"]
        xw = x @ W + b                        # (n, T, 4u), input path for all steps at once
        h = np.zeros((n, u), x.dtype)
        c = np.zeros((n, u), x.dtype)
        cache = []
        for t in range(T):
            z = xw[:, t] + h @ U
            i = _sigmoid(z[:, :u])
            f = _sigmoid(z[:, u:2 * u])
            g = np.tanh(z[:, 2 * u:3 * u])
            o = _sigmoid(z[:, 3 * u:])
            c_prev, h_prev = c, h
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            cache.append((i, f, g, o, c_prev, h_prev, tc))
        self._x = x
        self._cache = cache
        return h

    def backward(self, grad):
        x = self._x
        n, T, _ = x.shape
        u = self.units
        U = self.params["U"]
        dz_all = np.empty((n, T, 4 * u), dtype=grad.dtype)
        dh = grad
        dc = np.zeros_like(grad)
        dU = np.zeros_like(U)
        for t in range(T - 1, -1, -1):
            i, f, g, o, c_prev, h_prev, tc = self._cache[t]
            do = dh * tc
            dc = dc + dh * o * (1 - tc * tc)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1)
            dz_all[:, t] = dz
            dU += h_prev.T @ dz
            dh = dz @ U.T
            dc = dc * f
        self.grads["W"] = np.einsum("ntd,ntk->dk", x, dz_all)
        self.grads["U"] = dU
        self.grads["b"] = dz_all.sum(axis=(0, 1))
        return dz_all @ self.params["W"].T


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, train=False, rng=None):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        self._p = e / e.sum(axis=-1, keepdims=True)
        return self._p

    def backward(self, grad):
        p = self._p
        return p * (grad - (grad * p).sum(axis=-1, keepdims=True))


class BatchNorm(Layer):
    """Normalization over every axis but the last; running stats used in eval mode."""

    kind = "batchnorm"

    def __init__(self, momentum: float = 0.99, eps: float = 1e-3):
        super().__init__()
        self.momentum, self.eps = momentum, eps

    def config(self):
        return {"type": self.kind, "momentum": self.momentum, "eps": self.eps}

    def build(self, input_shape, rng, dtype):
        out = super().build(input_shape, rng, dtype)
        c = input_shape[-1]
        self.params = {"gamma": np.ones(c, dtype), "beta": np.zeros(c, dtype)}
        self.state = {"mean": np.zeros(c, dtype), "var": np.ones(c, dtype)}
        return out

    def forward(self, x, train=False, rng=None):
        axes = tuple(range(x.ndim - 1))
        if train:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.state["mean"] = (m * self.state["mean"] + (1 - m) * mu).astype(x.dtype)
            self.state["var"] = (m * self.state["var"] + (1 - m) * var).astype(x.dtype)
        else:
            mu, var = self.state["mean"], self.state["var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv, train, axes)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, grad):
        xhat, inv, train, axes = self._cache
        gamma = self.params["gamma"]
        self.grads["gamma"] = (grad * xhat).sum(axis=axes)
        self.grads["beta"] = grad.sum(axis=axes)
        if not train:
            return grad * gamma * inv
        m = np.prod([grad.shape[a] for a in axes])
        dxhat = grad * gamma
        return inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))


LAYER_TYPES = {cls.kind: cls for cls in
               (Conv2D, MaxPool2D, ReLU, Dropout, Flatten, SequenceFlatten, Dense, LSTM, Softmax, BatchNorm)}


def layer_from_config(cfg: dict) -> Layer:
    cfg = dict(cfg)
    kind = cfg.pop("type")
    try:
        cls = LAYER_TYPES[kind]
    except KeyError:
        raise ValueError(f"unknown layer type {kind!r}") from None
    return cls(**cfg)
