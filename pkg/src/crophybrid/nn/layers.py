"""Layers with hand-written forward and backward passes.

All layers are channels-last: convolution inputs are (N, *spatial, C). A
layer caches what its backward pass needs during ``forward``; calling
``backward`` fills ``grads`` (same keys as ``params``) and returns the
gradient with respect to the input.
"""
from __future__ import annotations

from itertools import product
from math import prod

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from crophybrid.nn import parallel
from crophybrid.tensor import ShapeError, SqueezeError

PADDINGS = ("same", "valid")


class LabelError(ValueError):
    pass


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    name = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def astype(self, dtype) -> None:
        for store in (self.params, self.buffers):
            for k, v in store.items():
                store[k] = v.astype(dtype)

    def describe(self) -> str:
        return self.name

    def __repr__(self):
        return self.describe()


class ConvNd(Layer):
    """Stride-1 cross-correlation over the middle axes of (N, *spatial, C).

    Weights are laid out (filters, *kernel, C_in) with kernel axes in the
    same order as the input's spatial axes. ``padding`` gives 'same' or
    'valid' per spatial axis; kernel extents must be odd.
    """

    def __init__(self, in_channels, filters, kernel, padding, rng=None, dtype=np.float32):
        super().__init__()
        kernel = tuple(int(k) for k in kernel)
        if isinstance(padding, str):
            padding = (padding,) * len(kernel)
        padding = tuple(padding)
        if len(padding) != len(kernel):
            raise ShapeError("one padding mode per kernel axis")
        if any(k % 2 == 0 or k < 1 for k in kernel):
            raise ShapeError(f"kernel extents must be odd, got {kernel}")
        if any(p not in PADDINGS for p in padding):
            raise ValueError(f"padding must be one of {PADDINGS}, got {padding}")
        self.in_channels = int(in_channels)
        self.filters = int(filters)
        self.kernel = kernel
        self.padding = padding
        fan_in = prod(kernel) * self.in_channels
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = he_uniform(rng, (self.filters,) + kernel + (self.in_channels,), fan_in, dtype)
        self.params["bias"] = np.zeros(self.filters, dtype=dtype)
        self._x = None
        self._cols = None
        # the first layer of a network sees data, whose gradient nobody needs
        self.input_grad = True

    @property
    def _pads(self):
        return [((k - 1) // 2,) * 2 if p == "same" else (0, 0) for k, p in zip(self.kernel, self.padding)]

    def output_shape(self, in_shape):
        *spatial, c = in_shape
        if len(spatial) != len(self.kernel):
            raise ShapeError(f"{self.name} expects {len(self.kernel)} spatial axes, got shape {in_shape}")
        if c != self.in_channels:
            raise ShapeError(f"{self.name}: input has {c} channels, layer expects {self.in_channels}")
        out = []
        for s, k, p in zip(spatial, self.kernel, self.padding):
            o = s if p == "same" else s - k + 1
            if o < 1:
                raise ShapeError(f"{self.name}: extent {s} smaller than kernel {k} under valid padding")
            out.append(o)
        return tuple(out) + (self.filters,)

    def _columns(self, x: np.ndarray) -> np.ndarray:
        nd = len(self.kernel)
        pads = self._pads
        if any(lo for lo, _ in pads):
            shape = (x.shape[0],) + tuple(s + lo + hi for s, (lo, hi) in zip(x.shape[1:-1], pads)) + x.shape[-1:]
            xp = np.zeros(shape, dtype=x.dtype)
            xp[(slice(None),) + tuple(slice(lo, lo + s) for s, (lo, _) in zip(x.shape[1:-1], pads))] = x
        else:
            xp = x
        win = sliding_window_view(xp, self.kernel, axis=tuple(range(1, nd + 1)))
        # (n, *out, C, *kernel) -> (n, *out, *kernel, C)
        order = tuple(range(nd + 1)) + tuple(range(nd + 2, 2 * nd + 2)) + (nd + 1,)
        win = np.ascontiguousarray(win.transpose(order))
        return win.reshape(-1, prod(self.kernel) * self.in_channels)

    def forward(self, x, train=False):
        x = np.asarray(x)
        out_shape = self.output_shape(x.shape[1:])
        w = self.params["weight"].reshape(self.filters, -1).T
        b = self.params["bias"]
        y = np.empty((x.shape[0],) + out_shape, dtype=np.result_type(x, w))

        def run(s):
            cols = self._columns(x[s])
            out = cols @ w
            out += b
            y[s] = out.reshape((-1,) + out_shape)
            return cols if train else None

        self._cols = parallel.map_chunks(run, x.shape[0])
        self._x = x
        return y

    def backward(self, grad):
        x = self._x
        if grad.shape[1:] != self.output_shape(x.shape[1:]) or grad.shape[0] != x.shape[0]:
            raise ShapeError(f"{self.name}: gradient shape {grad.shape} does not match forward output")
        nd = len(self.kernel)
        w = self.params["weight"].reshape(self.filters, -1)
        out_sp = grad.shape[1:-1]
        pads = self._pads
        dx = np.empty(x.shape, dtype=np.result_type(x, grad)) if self.input_grad else None
        cached = dict(zip(range(0, x.shape[0], parallel.CHUNK), self._cols or []))

        def run(s):
            g = grad[s].reshape(-1, self.filters)
            cols = cached.get(s.start)
            if cols is None:
                cols = self._columns(x[s])
            dw = (cols.T @ g).T
            db = g.sum(axis=0)
            if dx is None:
                return dw, db
            dcols = (g @ w).reshape((-1,) + out_sp + self.kernel + (self.in_channels,))
            padded = tuple(xs + lo + hi for xs, (lo, hi) in zip(x.shape[1:-1], pads))
            dxp = np.zeros((dcols.shape[0],) + padded + (self.in_channels,), dtype=dx.dtype)
            for off in product(*(range(k) for k in self.kernel)):
                dst = (slice(None),) + tuple(slice(o, o + e) for o, e in zip(off, out_sp))
                src = (slice(None),) + (slice(None),) * nd + off
                dxp[dst] += dcols[src]
            crop = (slice(None),) + tuple(slice(lo, lo + xs) for (lo, _), xs in zip(pads, x.shape[1:-1]))
            dx[s] = dxp[crop]
            return dw, db

        parts = parallel.map_chunks(run, x.shape[0])
        self._cols = None
        self.grads["weight"] = parallel.ordered_sum([p[0] for p in parts]).reshape(self.params["weight"].shape)
        self.grads["bias"] = parallel.ordered_sum([p[1] for p in parts])
        return dx

    def describe(self):
        k = "x".join(map(str, self.kernel))
        pad = "/".join(self.padding)
        return f"{self.name}({self.in_channels}->{self.filters}, k={k}, pad={pad})"


class Conv3d(ConvNd):
    """3D convolution over (N, H, W, T, C) -- two spatial axes and time."""

    name = "conv3d"

    def __init__(self, in_channels, filters, kernel=(3, 3, 3), padding=("valid", "valid", "same"),
                 rng=None, dtype=np.float32):
        if len(kernel) != 3:
            raise ShapeError("conv3d kernel needs three extents (h, w, t)")
        super().__init__(in_channels, filters, kernel, padding, rng, dtype)


class Conv1d(ConvNd):
    """1D convolution over (N, T, C)."""

    name = "conv1d"

    def __init__(self, in_channels, filters, kernel=3, padding="same", rng=None, dtype=np.float32):
        if isinstance(kernel, int):
            kernel = (kernel,)
        super().__init__(in_channels, filters, kernel, padding, rng, dtype)


class BatchNorm(Layer):
    """Normalization over every axis but the last (channel) axis."""

    name = "batchnorm"

    def __init__(self, channels, momentum=0.9, epsilon=1e-5, dtype=np.float32):
        super().__init__()
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.channels = int(channels)
        self.momentum = momentum
        self.epsilon = epsilon
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self._cache = None

    def output_shape(self, in_shape):
        if in_shape[-1] != self.channels:
            raise ShapeError(f"batchnorm over {self.channels} channels got shape {in_shape}")
        return in_shape

    def forward(self, x, train=False):
        if x.shape[-1] != self.channels:
            raise ShapeError(f"batchnorm over {self.channels} channels got shape {x.shape}")
        gamma, beta = self.params["gamma"], self.params["beta"]
        flat = x.reshape(-1, self.channels)
        if train:
            mean = flat.mean(axis=0)
            xc = flat - mean
            var = np.square(xc).mean(axis=0)
            m = self.momentum
            self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * mean).astype(gamma.dtype)
            self.buffers["running_var"] = (m * self.buffers["running_var"] + (1 - m) * var).astype(gamma.dtype)
        else:
            xc = flat - self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = (1.0 / np.sqrt(var + self.epsilon)).astype(x.dtype)
        xc *= inv_std
        self._cache = (xc, inv_std, train)
        y = xc * gamma
        y += beta
        return y.reshape(x.shape)

    def backward(self, grad):
        xhat, inv_std, train = self._cache
        gamma = self.params["gamma"]
        g = grad.reshape(-1, self.channels)
        dgamma = np.einsum("ij,ij->j", g, xhat)
        dbeta = g.sum(axis=0)
        self.grads["gamma"] = dgamma
        self.grads["beta"] = dbeta
        scale = gamma * inv_std
        if not train:
            return (g * scale).reshape(grad.shape)
        # dx = scale * (g - mean(g) - xhat * mean(g * xhat)), per channel
        m = g.shape[0]
        dx = g * scale
        dx -= xhat * (scale * dgamma / m)
        dx -= scale * dbeta / m
        return dx.reshape(grad.shape)

    def describe(self):
        return f"batchnorm({self.channels})"


class Dense(Layer):
    name = "dense"

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        super().__init__()
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = he_uniform(rng, (self.out_features, self.in_features), self.in_features, dtype)
        self.params["bias"] = np.zeros(self.out_features, dtype=dtype)
        self._x = None

    def output_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ShapeError(f"dense expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"dense expects (N, {self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad):
        self.grads["weight"] = grad.T @ self._x
        self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"]

    def describe(self):
        return f"dense({self.in_features}->{self.out_features})"


class ReLU(Layer):
    name = "relu"

    def forward(self, x, train=False):
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, grad):
        return grad * self._mask


class Squeeze(Layer):
    """Remove unit axes (indexed per sample, i.e. excluding the batch axis)."""

    name = "squeeze"

    def __init__(self, axes):
        super().__init__()
        self.axes = tuple(axes)

    def output_shape(self, in_shape):
        for ax in self.axes:
            if ax >= len(in_shape):
                raise ShapeError(f"squeeze axis {ax} out of range for {in_shape}")
            if in_shape[ax] != 1:
                raise SqueezeError(f"cannot squeeze axis {ax} of extent {in_shape[ax]} in {in_shape}")
        return tuple(s for i, s in enumerate(in_shape) if i not in self.axes)

    def forward(self, x, train=False):
        self._in = x.shape
        return x.reshape((x.shape[0],) + self.output_shape(x.shape[1:]))

    def backward(self, grad):
        return grad.reshape(self._in)

    def describe(self):
        return f"squeeze{self.axes}"


class Flatten(Layer):
    name = "flatten"

    def output_shape(self, in_shape):
        return (prod(in_shape),)

    def forward(self, x, train=False):
        self._in = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._in)


class Standardize(Layer):
    """Fixed per-channel z-score; statistics are buffers, never trained."""

    name = "standardize"

    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        self.buffers["mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["std"] = np.ones(channels, dtype=dtype)

    def fit(self, x: np.ndarray) -> None:
        axes = tuple(range(x.ndim - 1))
        dtype = self.buffers["mean"].dtype
        mean = x.mean(axis=axes, dtype=np.float64)
        std = x.std(axis=axes, dtype=np.float64)
        self.buffers["mean"] = mean.astype(dtype)
        self.buffers["std"] = np.where(std > 1e-12, std, 1.0).astype(dtype)

    def forward(self, x, train=False):
        return ((x - self.buffers["mean"]) / self.buffers["std"]).astype(self.buffers["mean"].dtype, copy=False)

    def backward(self, grad):
        return grad / self.buffers["std"]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise LabelError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise LabelError(f"label outside [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n
