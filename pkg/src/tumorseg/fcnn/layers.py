"""Valid stride-1 convolution and max pooling with hand-written backward passes.

Feature maps are channels-last ``(N, H, W, C)``; convolution weights keep the
``(out, in, kh, kw)`` layout used on disk.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _check_fit(h, w, kh, kw):
    if kh > h or kw > w:
        raise ValueError(f"kernel {kh}x{kw} larger than input {h}x{w}")


def conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid cross-correlation. Output side = input side - kernel + 1."""
    n, h, w, c = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv expects {ci} input channels, got {c}")
    _check_fit(h, w, kh, kw)
    ho, wo = h - kh + 1, w - kw + 1
    taps = np.ascontiguousarray(weight.transpose(2, 3, 1, 0))  # kh, kw, ci, co
    y = np.empty((n, ho, wo, co), dtype=np.result_type(x, weight))
    y[...] = bias
    for a in range(kh):
        for b in range(kw):
            y += x[:, a : a + ho, b : b + wo, :] @ taps[a, b]
    return y


def conv_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray, need_input=True):
    """Return ``(grad_x, grad_weight, grad_bias)`` for :func:`conv_forward`.

    ``grad_x`` is None when ``need_input`` is false.
    """
    co, ci, kh, kw = weight.shape
    ho, wo = grad_out.shape[1:3]
    g = grad_out.reshape(-1, co)
    grad_bias = g.sum(axis=0)
    grad_taps = np.empty((kh, kw, ci, co), dtype=grad_out.dtype)
    for a in range(kh):
        for b in range(kw):
            window = np.ascontiguousarray(x[:, a : a + ho, b : b + wo, :]).reshape(-1, ci)
            grad_taps[a, b] = window.T @ g
    grad_weight = grad_taps.transpose(3, 2, 0, 1)
    if not need_input:
        return None, grad_weight, grad_bias
    taps_t = np.ascontiguousarray(weight.transpose(2, 3, 0, 1))  # kh, kw, co, ci
    grad_x = np.zeros(x.shape, dtype=grad_out.dtype)
    for a in range(kh):
        for b in range(kw):
            grad_x[:, a : a + ho, b : b + wo, :] += grad_out @ taps_t[a, b]
    return grad_x, grad_weight, grad_bias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(y > 0, grad_out, 0.0)


def max_pool_forward(x: np.ndarray, n: int):
    """Stride-1 ``n x n`` max pooling. Returns ``(output, argmax)``.

    Ties resolve to the first window element in row-major order.
    """
    h, w = x.shape[1:3]
    if n < 1 or n > h or n > w:
        raise ValueError(f"pool size {n} does not fit input {h}x{w}")
    if n == 1:
        return x, None
    win = sliding_window_view(x, (n, n), axis=(1, 2))  # N, Ho, Wo, C, n, n
    flat = win.reshape(*win.shape[:4], n * n)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def max_pool_backward(input_shape, n: int, arg, grad_out: np.ndarray) -> np.ndarray:
    if n == 1:
        return grad_out
    grad_x = np.zeros(input_shape, dtype=grad_out.dtype)
    ho, wo = grad_out.shape[1:3]
    for a in range(n):
        for b in range(n):
            hit = arg == a * n + b
            grad_x[:, a : a + ho, b : b + wo, :] += np.where(hit, grad_out, 0.0)
    return grad_x


def softmax(scores: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(scores: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = scores - scores.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_backward(prob: np.ndarray, grad_prob: np.ndarray, axis: int = 1) -> np.ndarray:
    """Gradient w.r.t. the softmax input given the gradient w.r.t. its output."""
    return prob * (grad_prob - (grad_prob * prob).sum(axis=axis, keepdims=True))
