"""Dense 1-D network layers with manual forward/backward passes.

All layers operate on batched arrays: convolutional-style layers take
``(batch, channels, length)``, fully-connected layers flatten whatever they
receive to ``(batch, features)``. Parameters and activations are float32 by
default; float64 is supported for oracle-grade tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when an input does not match a layer's expected shape."""


KINDS = ("conv1d", "maxpool1d", "fully-connected", "relu", "softmax", "concat-channels")


@dataclass
class LayerSpec:
    """Declarative description of one layer.

    ``out_channels`` is required for conv and fully-connected layers,
    ``kernel_width`` for conv, ``pool_width`` for maxpool.
    """

    kind: str
    out_channels: Optional[int] = None
    kernel_width: Optional[int] = None
    pool_width: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv1d", "fully-connected"):
            if self.out_channels is None or self.out_channels < 1:
                raise ValueError(f"{self.kind} requires out_channels >= 1")
        if self.kind == "conv1d":
            if self.kernel_width is None or self.kernel_width < 1:
                raise ValueError("conv1d requires kernel_width >= 1")
        if self.kind == "maxpool1d":
            if self.pool_width is None or self.pool_width < 1:
                raise ValueError("maxpool1d requires pool_width >= 1")

    def to_json(self) -> dict:
        d = {"kind": self.kind}
        for f in ("out_channels", "kernel_width", "pool_width"):
            v = getattr(self, f)
            if v is not None:
                d[f] = v
        return d

    @classmethod
    def from_json(cls, d: dict) -> "LayerSpec":
        return cls(
            kind=d["kind"],
            out_channels=d.get("out_channels"),
            kernel_width=d.get("kernel_width"),
            pool_width=d.get("pool_width"),
        )


class Layer:
    """Base layer. Subclasses implement forward/backward as pure functions
    of their parameters plus an explicit cache (no hidden state)."""

    spec: LayerSpec
    params: dict

    def __init__(self):
        self.params = {}

    @property
    def kind(self) -> str:
        return self.spec.kind

    def out_shape(self, in_shape):
        raise NotImplementedError

    def forward(self, x):
        """Returns (output, cache)."""
        raise NotImplementedError

    def backward(self, dy, cache):
        """Returns (dx, grads) where grads mirrors self.params."""
        raise NotImplementedError

    def param_count(self) -> int:
        return sum(int(p.size) for p in self.params.values())


def _check_cl(x, in_shape, layer_name):
    if x.ndim != 3 or x.shape[1:] != tuple(in_shape):
        raise ShapeError(
            f"{layer_name}: expected input (batch, {in_shape[0]}, {in_shape[1]}), "
            f"got {x.shape}"
        )


class Conv1D(Layer):
    """1-D convolution, stride 1, zero padding 'same'; weight (F, C, K)."""

    def __init__(self, in_channels, length, out_channels, kernel_width, rng=None,
                 dtype=np.float32):
        super().__init__()
        self.spec = LayerSpec("conv1d", out_channels=out_channels,
                              kernel_width=kernel_width)
        self.in_channels = in_channels
        self.length = length
        fan_in = in_channels * kernel_width
        bound = np.sqrt(6.0 / fan_in)
        if rng is None:
            w = np.zeros((out_channels, in_channels, kernel_width))
        else:
            w = rng.uniform(-bound, bound, (out_channels, in_channels, kernel_width))
        self.params = {
            "w": np.asarray(w, dtype=dtype),
            "b": np.zeros(out_channels, dtype=dtype),
        }

    def out_shape(self, in_shape):
        return (self.spec.out_channels, in_shape[1])

    def _im2col(self, x):
        k = self.spec.kernel_width
        pl, pr = (k - 1) // 2, k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pl, pr)))
        win = sliding_window_view(xp, k, axis=2)  # (B, C, L, K)
        b, c, l, _ = win.shape
        return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(b, c * k, l)

    def forward(self, x):
        _check_cl(x, (self.in_channels, self.length), "conv1d")
        cols = self._im2col(x)
        f = self.spec.out_channels
        w2 = self.params["w"].reshape(f, -1)
        y = np.matmul(w2, cols) + self.params["b"][:, None]
        return y, cols

    def backward(self, dy, cache):
        cols = cache
        f, c, k = self.params["w"].shape
        w2 = self.params["w"].reshape(f, -1)
        dw = np.matmul(dy, cols.transpose(0, 2, 1)).sum(axis=0).reshape(f, c, k)
        db = dy.sum(axis=(0, 2))
        dcols = np.matmul(w2.T, dy)  # (B, C*K, L)
        b, _, l = dcols.shape
        dcols = dcols.reshape(b, c, k, l)
        pl, pr = (k - 1) // 2, k // 2
        dxp = np.zeros((b, c, l + pl + pr), dtype=dy.dtype)
        for j in range(k):
            dxp[:, :, j:j + l] += dcols[:, :, j, :]
        dx = dxp[:, :, pl:pl + l]
        return dx, {"w": dw, "b": db}


class MaxPool1D(Layer):
    """Non-overlapping max pooling; trailing remainder positions are dropped.
    Argmax ties break to the lowest index."""

    def __init__(self, in_channels, length, pool_width):
        super().__init__()
        self.spec = LayerSpec("maxpool1d", pool_width=pool_width)
        self.in_channels = in_channels
        self.length = length

    def out_shape(self, in_shape):
        return (in_shape[0], in_shape[1] // self.spec.pool_width)

    def forward(self, x):
        _check_cl(x, (self.in_channels, self.length), "maxpool1d")
        p = self.spec.pool_width
        out = self.length // p
        xw = x[:, :, :out * p].reshape(x.shape[0], x.shape[1], out, p)
        idx = np.argmax(xw, axis=3)
        y = np.take_along_axis(xw, idx[..., None], axis=3)[..., 0]
        return y, idx

    def backward(self, dy, cache):
        idx = cache
        p = self.spec.pool_width
        b, c, out = dy.shape
        dxw = np.zeros((b, c, out, p), dtype=dy.dtype)
        np.put_along_axis(dxw, cache[..., None], dy[..., None], axis=3)
        dx = np.zeros((b, c, self.length), dtype=dy.dtype)
        dx[:, :, :out * p] = dxw.reshape(b, c, out * p)
        return dx, {}


class ReLU(Layer):
    def __init__(self, in_shape):
        super().__init__()
        self.spec = LayerSpec("relu")
        self.in_shape = tuple(in_shape)

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        y = np.maximum(x, 0)
        return y, (x > 0)

    def backward(self, dy, cache):
        return dy * cache, {}


def softmax(z, axis=-1):
    """Numerically stable softmax (max-subtraction)."""
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Softmax(Layer):
    def __init__(self, in_shape):
        super().__init__()
        self.spec = LayerSpec("softmax")
        self.in_shape = tuple(in_shape)

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        y = softmax(x, axis=-1)
        return y, y

    def backward(self, dy, cache):
        y = cache
        dx = (dy - (dy * y).sum(axis=-1, keepdims=True)) * y
        return dx, {}


class FullyConnected(Layer):
    """Dense layer; flattens (B, C, L) inputs to (B, C*L). Weight (out, in)."""

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        super().__init__()
        if in_features < 1:
            raise ShapeError("fully-connected requires at least 1 input "
                             "feature (input too short for the conv stack?)")
        self.spec = LayerSpec("fully-connected", out_channels=out_features)
        self.in_features = in_features
        bound = np.sqrt(6.0 / in_features)
        if rng is None:
            w = np.zeros((out_features, in_features))
        else:
            w = rng.uniform(-bound, bound, (out_features, in_features))
        self.params = {
            "w": np.asarray(w, dtype=dtype),
            "b": np.zeros(out_features, dtype=dtype),
        }

    def out_shape(self, in_shape):
        return (self.spec.out_channels,)

    def forward(self, x):
        in_shape = x.shape[1:]
        xf = x.reshape(x.shape[0], -1)
        if xf.shape[1] != self.in_features:
            raise ShapeError(
                f"fully-connected: expected {self.in_features} input features, "
                f"got {xf.shape[1]} (input shape {x.shape})"
            )
        y = xf @ self.params["w"].T + self.params["b"]
        return y, (xf, in_shape)

    def backward(self, dy, cache):
        xf, in_shape = cache
        dw = dy.T @ xf
        db = dy.sum(axis=0)
        dx = (dy @ self.params["w"]).reshape((dy.shape[0],) + in_shape)
        return dx, {"w": dw, "b": db}


def concat_channels(arrays):
    """Channel-wise concatenation of (B, C, L) arrays with matching lengths."""
    lens = {a.shape[2] for a in arrays}
    if len(lens) != 1:
        raise ShapeError(f"concat-channels: mismatched lengths {sorted(lens)}")
    return np.concatenate(arrays, axis=1)
