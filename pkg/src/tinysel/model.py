"""Sequential model container, activation tape, exact backprop and SGD."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .layers import (
    Conv1D,
    FullyConnected,
    Layer,
    LayerSpec,
    MaxPool1D,
    ReLU,
    ShapeError,
    Softmax,
    concat_channels,
    softmax,
)

# Gradients mirror Model parameters: one dict of arrays per layer.
Gradients = List[Dict[str, np.ndarray]]


@dataclass
class SgdState:
    """Plain SGD with stepwise learning-rate decay."""

    learning_rate: float = 0.001
    decay_factor: float = 0.5
    decay_every_iterations: int = 5

    def lr_at(self, iteration: int) -> float:
        k = iteration // self.decay_every_iterations
        return self.learning_rate * self.decay_factor ** k


@dataclass
class ActivationTape:
    """Everything recorded by a forward pass that backward needs."""

    logits: np.ndarray
    caches: list = field(default_factory=list)
    outputs: list = field(default_factory=list)  # post-layer (post-tap) activations
    tap_inputs: dict = field(default_factory=dict)  # layer idx -> injected tap array
    recorded: bool = False


class Model:
    """A sequence of layers over a fixed (channels, length) input.

    ``tap_channels`` maps a layer index to a count of extra channels that are
    channel-concatenated onto that layer's output before the next layer runs
    (used for cross-network feature aggregation). Tap tensors are supplied to
    ``forward`` in tap-slot order; omitting them injects zeros.
    """

    def __init__(self, input_shape, specs: Sequence[LayerSpec], seed=None,
                 tap_channels: Optional[Dict[int, int]] = None,
                 dtype=np.float32):
        self.input_shape = tuple(input_shape)
        self.specs = list(specs)
        self.tap_channels = dict(tap_channels or {})
        self.tap_order = sorted(self.tap_channels)
        self.dtype = dtype
        self.seed = seed
        rng = None if seed is None else np.random.default_rng(seed)
        self.layers: List[Layer] = []
        shape = self.input_shape
        for i, spec in enumerate(self.specs):
            layer = self._make_layer(spec, shape, rng)
            self.layers.append(layer)
            shape = layer.out_shape(shape)
            if i in self.tap_channels:
                if len(shape) != 2:
                    raise ShapeError(f"tap after layer {i}: output is not (C, L)")
                shape = (shape[0] + self.tap_channels[i], shape[1])
        self.output_shape = shape

    def _make_layer(self, spec, shape, rng):
        if spec.kind == "conv1d":
            if len(shape) != 2:
                raise ShapeError(f"conv1d after flat output (shape {shape})")
            return Conv1D(shape[0], shape[1], spec.out_channels,
                          spec.kernel_width, rng=rng, dtype=self.dtype)
        if spec.kind == "maxpool1d":
            return MaxPool1D(shape[0], shape[1], spec.pool_width)
        if spec.kind == "relu":
            return ReLU(shape)
        if spec.kind == "softmax":
            return Softmax(shape)
        if spec.kind == "fully-connected":
            return FullyConnected(int(np.prod(shape)), spec.out_channels,
                                  rng=rng, dtype=self.dtype)
        raise ValueError(f"cannot instantiate layer kind {spec.kind!r}")

    # -- shape bookkeeping ------------------------------------------------

    def layer_output_shapes(self):
        """Per-layer output shape, after tap concatenation where applicable."""
        shapes = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            shape = layer.out_shape(shape)
            if i in self.tap_channels:
                shape = (shape[0] + self.tap_channels[i], shape[1])
            shapes.append(shape)
        return shapes

    def tap_shapes(self):
        """Expected (channels, length) of each tap tensor, in slot order."""
        shapes = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            shape = layer.out_shape(shape)
            if i in self.tap_channels:
                shapes.append((self.tap_channels[i], shape[1]))
                shape = (shape[0] + self.tap_channels[i], shape[1])
        return shapes

    def parameters(self):
        return [layer.params for layer in self.layers]

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def zero_grads(self) -> Gradients:
        return [{k: np.zeros_like(v) for k, v in layer.params.items()}
                for layer in self.layers]

    def copy(self) -> "Model":
        m = Model(self.input_shape, self.specs, seed=None,
                  tap_channels=self.tap_channels, dtype=self.dtype)
        for dst, src in zip(m.layers, self.layers):
            for k, v in src.params.items():
                dst.params[k] = v.copy()
        return m

    # -- forward / backward -----------------------------------------------

    def _zero_taps(self, batch):
        return [np.zeros((batch, c, l), dtype=self.dtype)
                for c, l in self.tap_shapes()]

    def forward(self, x, taps=None, record=False) -> ActivationTape:
        """Runs the network; returns a tape whose ``logits`` field holds the
        final output. With ``record`` the tape supports :meth:`backward`.

        ``x`` may be a single (C, L) sample or a (B, C, L) batch; logits come
        back correspondingly 1-D or 2-D.
        """
        single = (x.ndim == 2)
        xb = np.asarray(x, dtype=self.dtype)
        if single:
            xb = xb[None]
        if xb.shape[1:] != self.input_shape:
            raise ShapeError(
                f"model input: expected {self.input_shape}, got {x.shape}")
        if self.tap_channels:
            if taps is None:
                taps = self._zero_taps(xb.shape[0])
            taps = [np.asarray(t, dtype=self.dtype) for t in taps]
            if len(taps) != len(self.tap_order):
                raise ShapeError(
                    f"expected {len(self.tap_order)} tap tensors, got {len(taps)}")
        tape = ActivationTape(logits=None, recorded=record)
        out = xb
        for i, layer in enumerate(self.layers):
            try:
                out, cache = layer.forward(out)
            except ShapeError as e:
                raise ShapeError(f"layer {i} ({layer.kind}): {e}") from None
            if i in self.tap_channels:
                slot = self.tap_order.index(i)
                t = taps[slot]
                if t.ndim == 2:
                    t = t[None]
                out = concat_channels([out, t])
                if record:
                    tape.tap_inputs[i] = t
            if record:
                tape.caches.append(cache)
                tape.outputs.append(out)
        tape.logits = out[0] if single else out
        return tape

    def backward(self, tape: ActivationTape, loss_grad,
                 input_grad=False, tap_grads=False, output_grads=None):
        """Backpropagates ``loss_grad`` (matching the logits shape) through
        the tape. Returns ``grads`` or, when requested, a tuple
        ``(grads, dinput, tap_grad_list)`` with unrequested slots as None.

        ``output_grads`` maps a layer index to an extra gradient added at
        that layer's output (how downstream consumers of intermediate
        activations, e.g. aggregation taps, feed back into this network).
        """
        if not tape.recorded:
            raise ValueError("backward requires a tape recorded with record=True")
        dy = np.asarray(loss_grad, dtype=self.dtype)
        if dy.ndim == len(np.shape(tape.logits)) and np.shape(tape.logits) != dy.shape:
            raise ShapeError(
                f"loss_grad shape {dy.shape} != logits shape {np.shape(tape.logits)}")
        if dy.ndim + 1 == tape.outputs[-1].ndim:
            dy = dy[None]
        grads: Gradients = [None] * len(self.layers)
        dtaps = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if output_grads and i in output_grads:
                dy = dy + np.asarray(output_grads[i], dtype=self.dtype)
            if i in self.tap_channels:
                tap_c = self.tap_channels[i]
                dtaps[i] = dy[:, -tap_c:, :]
                dy = dy[:, :-tap_c, :]
            dy, g = layer.backward(dy, tape.caches[i])
            grads[i] = g
        if not (input_grad or tap_grads):
            return grads
        dtap_list = [dtaps[i] for i in self.tap_order] if tap_grads else None
        return grads, (dy if input_grad else None), dtap_list


def forward(model: Model, x, record: bool = False) -> ActivationTape:
    """Functional alias for :meth:`Model.forward` (no taps)."""
    return model.forward(x, record=record)


def backward(tape: ActivationTape, model: Model, loss_grad) -> Gradients:
    """Functional alias for :meth:`Model.backward`."""
    return model.backward(tape, loss_grad)


def sgd_step(model: Model, grads: Gradients, state: SgdState,
             iteration: int) -> Model:
    """In-place SGD update: p -= lr(iteration) * g. Returns the model."""
    lr = state.lr_at(iteration)
    for layer, g in zip(model.layers, grads):
        for k, p in layer.params.items():
            gk = g[k]
            if gk.shape != p.shape:
                raise ShapeError(f"grad shape {gk.shape} != param shape {p.shape}")
            p -= (lr * gk).astype(p.dtype, copy=False)
    return model


def accumulate_grads(total: Gradients, g: Gradients, scale=1.0) -> Gradients:
    for t, gi in zip(total, g):
        for k in t:
            t[k] += scale * gi[k]
    return total


def cross_entropy(logits, target_class: int, sign: int = 1):
    """Softmax cross-entropy on a single logit vector.

    Returns ``(loss, loss_grad)`` with loss = sign * (-log softmax[target])
    and grad = sign * (softmax - one_hot).
    """
    z = np.asarray(logits)
    if not 0 <= target_class < z.shape[-1]:
        raise IndexError(f"target {target_class} out of range for {z.shape[-1]} logits")
    p = softmax(z.astype(np.float64) if z.dtype == np.float32 else z)
    loss = sign * -np.log(max(p[target_class], np.finfo(np.float64).tiny))
    grad = sign * p
    grad[target_class] -= sign
    return float(loss), grad.astype(z.dtype)


def cross_entropy_batch(logits, targets, sign: int = 1):
    """Vectorized cross-entropy: (B, n) logits, (B,) int targets.

    Returns per-sample losses (B,) and logit gradients (B, n); gradients are
    NOT averaged over the batch.
    """
    z = np.asarray(logits)
    t = np.asarray(targets)
    p = softmax(z, axis=-1)
    picked = p[np.arange(z.shape[0]), t]
    losses = sign * -np.log(np.maximum(picked, np.finfo(z.dtype).tiny))
    grads = sign * p
    grads[np.arange(z.shape[0]), t] -= sign
    return losses, grads.astype(z.dtype)


def bce_multi_hot(logits, targets):
    """Sigmoid binary cross-entropy against multi-hot targets; mean over
    outputs per sample. Returns per-sample losses (B,) and grads (B, n)."""
    z = np.asarray(logits)
    t = np.asarray(targets, dtype=z.dtype)
    # log(1 + exp(-|z|)) formulation for stability
    losses_el = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    sig = 1.0 / (1.0 + np.exp(-z))
    n = z.shape[-1]
    return losses_el.mean(axis=-1), ((sig - t) / n).astype(z.dtype)
