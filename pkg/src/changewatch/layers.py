"""Convolutional and convolutional-LSTM layers with analytic gradients.

Tensors are `[N][C][H][W]`; kernels are `[out][in][kh][kw]` with odd sizes and
"same" zero padding, stride 1.
"""

# std
from __future__ import annotations
from typing import Any
from typing import List
from typing import Optional
from typing import Tuple
import dataclasses

# lib
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import NDArray

Array = NDArray[Any]
"""Floating-point tensor (float32 or float64)."""

CHUNK = 32
"""Images per im2col chunk; bounds the memory of the patch copy."""


def _patches(x: Array, kh: int, kw: int) -> Array:
    """View of all `kh`x`kw` neighborhoods `[N][C][H][W][kh][kw]`."""
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    return sliding_window_view(padded, (kh, kw), axis=(2, 3))


def conv2d(x: Array, kernel: Array, bias: Optional[Array] = None) -> Array:
    """Same-padded 2-D convolution (cross-correlation)."""
    n, _, h, w = x.shape
    out, _, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel sizes must be odd: {kh}x{kw}")
    y = np.empty((n, out, h, w), dtype=np.result_type(x, kernel))
    for s in range(0, n, CHUNK):
        cols = _patches(x[s : s + CHUNK], kh, kw)
        part = np.tensordot(cols, kernel, axes=([1, 4, 5], [1, 2, 3]))
        y[s : s + CHUNK] = part.transpose(0, 3, 1, 2)
    if bias is not None:
        y += bias[None, :, None, None]
    return y


def conv2d_grad_kernel(x: Array, dy: Array, kh: int, kw: int) -> Array:
    """Gradient of `conv2d` w.r.t. its kernel."""
    grad = np.zeros((dy.shape[1], x.shape[1], kh, kw), dtype=np.result_type(x, dy))
    for s in range(0, x.shape[0], CHUNK):
        cols = _patches(x[s : s + CHUNK], kh, kw)
        grad += np.tensordot(dy[s : s + CHUNK], cols, axes=([0, 2, 3], [0, 2, 3]))
    return grad


def conv2d_grad_input(dy: Array, kernel: Array) -> Array:
    """Gradient of `conv2d` w.r.t. its input."""
    flipped = kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return conv2d(dy, np.ascontiguousarray(flipped))


def relu(x: Array) -> Array:
    """Rectified linear unit."""
    return np.maximum(x, 0)


def sigmoid(x: Array) -> Array:
    """Logistic function (overflow-safe)."""
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(np.result_type(x, e))


def hard_sigmoid(x: Array) -> Array:
    """`clip(0.2 x + 0.5, 0, 1)`."""
    return np.clip(0.2 * x + 0.5, 0.0, 1.0)


def hard_sigmoid_grad(x: Array) -> Array:
    """Derivative of `hard_sigmoid` (0 outside `(-2.5, 2.5)`)."""
    return np.where((x > -2.5) & (x < 2.5), 0.2, 0.0).astype(x.dtype)


def dropout_mask(
    rng: np.random.Generator, shape: Tuple[int, ...], rate: float, dtype: Any
) -> Array:
    """Inverted-dropout mask: 0 with probability `rate`, else `1 / (1 - rate)`."""
    if rate <= 0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


@dataclasses.dataclass
class LSTMStep:
    """Values of one recurrent step kept for backpropagation."""

    inputs: Array
    """Concatenated `[x_t, h_{t-1}]`."""

    gates: Array
    """Gate pre-activations `[N][4F][H][W]` in order i, f, g, o."""

    cell: Array
    """Previous cell state."""

    valid: Array
    """Whether the step updated the state `[N][1][1][1]`."""


def _split(z: Array) -> Tuple[Array, Array, Array, Array]:
    f = z.shape[1] // 4
    return z[:, :f], z[:, f : 2 * f], z[:, 2 * f : 3 * f], z[:, 3 * f :]


def lstm_forward(
    x: Array,
    valid: Array,
    kernel: Array,
    recurrent: Array,
    bias: Array,
    keep: bool = False,
) -> Tuple[Array, List[LSTMStep]]:
    """Run a convolutional LSTM over `x` `[N][T][C][H][W]`.

    Gates i, f, o use the hard sigmoid, the candidate and output use tanh.
    Steps with `valid[n, t] == False` leave the state of sample `n` unchanged,
    so the returned hidden state is the one after the last valid step.
    """
    n, steps, _, h, w = x.shape
    filters = recurrent.shape[1]
    weights = np.concatenate([kernel, recurrent], axis=1)
    hidden = np.zeros((n, filters, h, w), dtype=np.result_type(x, kernel))
    cell = np.zeros_like(hidden)
    cache: List[LSTMStep] = []
    for t in range(steps):
        inputs = np.concatenate([x[:, t], hidden], axis=1)
        z = conv2d(inputs, weights, bias)
        zi, zf, zg, zo = _split(z)
        c_new = hard_sigmoid(zf) * cell + hard_sigmoid(zi) * np.tanh(zg)
        h_new = hard_sigmoid(zo) * np.tanh(c_new)
        v = valid[:, t].reshape(n, 1, 1, 1)
        if keep:
            cache.append(LSTMStep(inputs, z, cell, v))
        cell = np.where(v, c_new, cell)
        hidden = np.where(v, h_new, hidden)
    return hidden, cache


def lstm_backward(
    cache: List[LSTMStep],
    dh: Array,
    kernel: Array,
    recurrent: Array,
) -> Tuple[Array, Array, Array, Array]:
    """Backpropagate through time from the gradient of the final hidden state.

    Returns gradients for the input `[N][T][C][H][W]`, kernel, recurrent kernel
    and bias.
    """
    channels = kernel.shape[1]
    kh, kw = kernel.shape[2:]
    weights = np.concatenate([kernel, recurrent], axis=1)
    dweights = np.zeros_like(weights)
    dbias = np.zeros(weights.shape[0], dtype=weights.dtype)
    n, _, h, w = dh.shape
    dx = np.zeros((n, len(cache), channels, h, w), dtype=dh.dtype)
    dc = np.zeros_like(dh)
    for t in reversed(range(len(cache))):
        step = cache[t]
        zi, zf, zg, zo = _split(step.gates)
        i, f, o = hard_sigmoid(zi), hard_sigmoid(zf), hard_sigmoid(zo)
        g = np.tanh(zg)
        c_new = f * step.cell + i * g
        tc = np.tanh(c_new)

        dh_new = np.where(step.valid, dh, 0)
        dc_new = np.where(step.valid, dc, 0) + dh_new * o * (1 - tc * tc)
        dz = np.concatenate(
            [
                dc_new * g * hard_sigmoid_grad(zi),
                dc_new * step.cell * hard_sigmoid_grad(zf),
                dc_new * i * (1 - g * g),
                dh_new * tc * hard_sigmoid_grad(zo),
            ],
            axis=1,
        )
        dweights += conv2d_grad_kernel(step.inputs, dz, kh, kw)
        dbias += dz.sum(axis=(0, 2, 3))
        dinputs = conv2d_grad_input(dz, weights)
        dx[:, t] = dinputs[:, :channels]
        dh = dinputs[:, channels:] + np.where(step.valid, 0, dh)
        dc = dc_new * f + np.where(step.valid, 0, dc)
    return dx, dweights[:, :channels], dweights[:, channels:], dbias
