"""Layer kernels on dense NHWC arrays.

Activations are ``(batch, height, width, channels)``; a single image may be
passed as ``(height, width, channels)``.  Convolution weights are
``(out_channels, in_channels, M, N)`` with ``M`` rows and ``N`` columns.
All kernels keep the dtype of their input, so the training path runs in
float32 and gradient checks can run the same code in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InvalidInputError, ShapeError

try:
    import numba as _nb
except ImportError:  # pragma: no cover - exercised only without numba
    _nb = None


@dataclass
class ConvLayerParams:
    weights: np.ndarray
    bias: np.ndarray

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    def copy(self) -> "ConvLayerParams":
        return ConvLayerParams(self.weights.copy(), self.bias.copy())


def _batched(x: np.ndarray):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected (H, W, C) or (B, H, W, C) input, got shape {x.shape}")
    return x, False


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Patch matrix ``(B*Ho*Wo, kh*kw*C)`` in (row, col, channel) order."""
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    if stride > 1:
        win = win[:, ::stride, ::stride]
    b, ho, wo, c = win.shape[:4]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, kh * kw * c)


def _weight_matrix(weights: np.ndarray, dtype) -> np.ndarray:
    """``(Cout, Cin, M, N)`` weights as ``(Cout, M*N*Cin)`` matching :func:`_im2col`."""
    cout = weights.shape[0]
    return weights.transpose(0, 2, 3, 1).reshape(cout, -1).astype(dtype, copy=False)


def _col2im_numpy(dcols: np.ndarray, x_shape, stride: int) -> np.ndarray:
    b, ho, wo, kh, kw, c = dcols.shape
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    span_h = (ho - 1) * stride + 1
    span_w = (wo - 1) * stride + 1
    for u in range(kh):
        for v in range(kw):
            dx[:, u:u + span_h:stride, v:v + span_w:stride, :] += dcols[:, :, :, u, v, :]
    return dx


if _nb is not None:
    @_nb.njit(cache=True)
    def _col2im_kernel(dcols, dx, stride):  # pragma: no cover - compiled
        b_n, ho, wo, kh, kw, c_n = dcols.shape
        for b in range(b_n):
            for i in range(ho):
                for u in range(kh):
                    r = i * stride + u
                    for j in range(wo):
                        for v in range(kw):
                            col = j * stride + v
                            for c in range(c_n):
                                dx[b, r, col, c] += dcols[b, i, j, u, v, c]
        return dx


def col2im(dcols: np.ndarray, x_shape, stride: int) -> np.ndarray:
    """Scatter-add patch gradients ``(B, Ho, Wo, kh, kw, C)`` back to an image."""
    if _nb is None:
        return _col2im_numpy(dcols, x_shape, stride)
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    return _col2im_kernel(np.ascontiguousarray(dcols), dx, stride)


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def conv_forward(x: np.ndarray, p: ConvLayerParams, stride: int = 1, return_cols: bool = False):
    """Valid-mode cross-correlation plus bias.

    ``out[b, i, j, k] = sum_{u, v, w} W[k, w, u, v] * x[b, i*s + u, j*s + v, w] + bias[k]``
    """
    xb, single = _batched(x)
    cout, cin, kh, kw = p.weights.shape
    b, h, w, c = xb.shape
    if c != cin:
        raise ShapeError(f"input shape {xb.shape[1:]} has {c} channels; weights {p.weights.shape} expect {cin}")
    if h < kh or w < kw:
        raise ShapeError(f"input shape {xb.shape[1:]} is smaller than kernel of weights {p.weights.shape}")
    if stride < 1:
        raise InvalidInputError("stride must be >= 1")
    ho, wo = conv_output_size(h, kh, stride), conv_output_size(w, kw, stride)
    cols = _im2col(xb, kh, kw, stride)
    wmat = _weight_matrix(p.weights, xb.dtype)
    out = cols @ wmat.T
    out += p.bias.astype(xb.dtype, copy=False)
    out = out.reshape(b, ho, wo, cout)
    if single:
        out = out[0]
    if return_cols:
        return out, cols
    return out


def conv_backward(dout: np.ndarray, cols: np.ndarray, x_shape, p: ConvLayerParams,
                  stride: int = 1, need_dx: bool = True):
    """Gradients of a convolution given the cached patch matrix.

    Returns ``(dx, dW, db)``; ``dx`` is ``None`` when ``need_dx`` is false.
    """
    cout, cin, kh, kw = p.weights.shape
    b, ho, wo, _ = dout.shape
    d2 = dout.reshape(b * ho * wo, cout)
    dw = (d2.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, np.ascontiguousarray(dw), db
    dcols = (d2 @ _weight_matrix(p.weights, dout.dtype)).reshape(b, ho, wo, kh, kw, cin)
    return col2im(dcols, x_shape, stride), np.ascontiguousarray(dw), db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def _pool_windows(xb: np.ndarray, window: int, stride: int):
    b, h, w, c = xb.shape
    ho, wo = conv_output_size(h, window, stride), conv_output_size(w, window, stride)
    if stride == window:
        trimmed = xb[:, :ho * window, :wo * window, :]
        win = trimmed.reshape(b, ho, window, wo, window, c).transpose(0, 1, 3, 5, 2, 4)
    else:
        win = sliding_window_view(xb, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    return win.reshape(b, ho, wo, c, window * window)


def _maxpool2_numpy(xb: np.ndarray):
    ho, wo = xb.shape[1] // 2, xb.shape[2] // 2
    q = [xb[:, u:2 * ho:2, v:2 * wo:2, :] for u in (0, 1) for v in (0, 1)]
    out = q[0].copy()
    arg = np.zeros(out.shape, dtype=np.int8)
    for k in (1, 2, 3):
        better = q[k] > out
        np.copyto(out, q[k], where=better)
        arg[better] = k
    return out, arg


if _nb is not None:
    @_nb.njit(cache=True)
    def _maxpool2_kernel(xb, out, arg):  # pragma: no cover - compiled
        b_n, ho, wo, c_n = out.shape
        for b in range(b_n):
            for i in range(ho):
                for j in range(wo):
                    for c in range(c_n):
                        best = xb[b, 2 * i, 2 * j, c]
                        k = 0
                        val = xb[b, 2 * i, 2 * j + 1, c]
                        if val > best:
                            best = val
                            k = 1
                        val = xb[b, 2 * i + 1, 2 * j, c]
                        if val > best:
                            best = val
                            k = 2
                        val = xb[b, 2 * i + 1, 2 * j + 1, c]
                        if val > best:
                            best = val
                            k = 3
                        out[b, i, j, c] = best
                        arg[b, i, j, c] = k
        return out, arg

    @_nb.njit(cache=True)
    def _unpool2_kernel(dout, arg, dx):  # pragma: no cover - compiled
        b_n, ho, wo, c_n = dout.shape
        for b in range(b_n):
            for i in range(ho):
                for j in range(wo):
                    for c in range(c_n):
                        k = arg[b, i, j, c]
                        dx[b, 2 * i + k // 2, 2 * j + k % 2, c] = dout[b, i, j, c]
        return dx


def _maxpool2(xb: np.ndarray):
    """2x2 / stride-2 max with the window position (0..3, row-major) of the first maximum."""
    if _nb is None:
        return _maxpool2_numpy(xb)
    b, h, w, c = xb.shape
    out = np.empty((b, h // 2, w // 2, c), dtype=xb.dtype)
    arg = np.empty(out.shape, dtype=np.int8)
    return _maxpool2_kernel(np.ascontiguousarray(xb), out, arg)


def maxpool(x: np.ndarray, window: int = 2, stride: int | None = None, return_argmax: bool = False):
    """Maximum over ``window`` x ``window`` regions (non-overlapping by default)."""
    stride = window if stride is None else stride
    xb, single = _batched(x)
    if xb.shape[1] < window or xb.shape[2] < window:
        raise ShapeError(f"pool window {window} exceeds spatial shape {xb.shape[1:3]}")
    if window < 1 or stride < 1:
        raise InvalidInputError("pool window and stride must be >= 1")
    if window == 2 and stride == 2:
        out, arg = _maxpool2(xb)
    else:
        win = _pool_windows(xb, window, stride)
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    if single:
        out, arg = out[0], arg[0]
    if return_argmax:
        return out, arg
    return out


def maxpool_backward(dout: np.ndarray, argmax: np.ndarray, x_shape, window: int, stride: int | None = None):
    """Route each pooled gradient to the first maximal input of its window."""
    stride = window if stride is None else stride
    b, h, w, c = x_shape
    _, ho, wo, _ = dout.shape
    dx = np.zeros(x_shape, dtype=dout.dtype)
    if window == 2 and stride == 2:
        if _nb is not None:
            return _unpool2_kernel(np.ascontiguousarray(dout), np.ascontiguousarray(argmax), dx)
        for k in range(4):
            u, v = divmod(k, 2)
            dx[:, u:2 * ho:2, v:2 * wo:2, :] = np.where(argmax == k, dout, 0)
        return dx
    du, dv = np.divmod(argmax, window)
    bi, ii, ji, ci = np.indices(dout.shape, sparse=True)
    rows = ii * stride + du
    cols = ji * stride + dv
    if stride == window:
        dx[bi, rows, cols, ci] = dout
    else:
        np.add.at(dx, (bi, rows, cols, ci), dout)
    return dx


def dropout(x: np.ndarray, rate: float, mode: str = "train", rng: np.random.Generator | None = None,
            mask: np.ndarray | None = None):
    """Inverted dropout.

    Returns ``(output, keep_mask)``.  In train mode each element survives with
    probability ``1 - rate`` and survivors are scaled by ``1 / (1 - rate)``;
    ``rate == 1`` zeroes everything.  Infer mode is the identity with an
    all-true mask.  A precomputed ``mask`` may be supplied to replay a pass.
    """
    if not 0.0 <= rate <= 1.0:
        raise InvalidInputError(f"dropout rate {rate} outside [0, 1]")
    if mode not in ("train", "infer"):
        raise InvalidInputError(f"unknown mode {mode!r}")
    if mode == "infer" or (rate == 0.0 and mask is None):
        return x, np.ones(x.shape, dtype=bool)
    if mask is None:
        if rng is None:
            raise InvalidInputError("train-mode dropout needs a random generator")
        mask = rng.random(x.shape) >= rate
    if rate >= 1.0:
        return np.zeros_like(x), mask
    return x * mask * x.dtype.type(1.0 / (1.0 - rate)), mask


def dropout_backward(dout: np.ndarray, mask: np.ndarray, rate: float) -> np.ndarray:
    if rate >= 1.0:
        return np.zeros_like(dout)
    return dout * mask * dout.dtype.type(1.0 / (1.0 - rate))


def softmax(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    x = np.asarray(x)
    if x.shape[-1] < 1:
        raise InvalidInputError("softmax needs at least one class")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_one_hot(y: np.ndarray) -> None:
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)):
        raise InvalidInputError("truth vector is not one-hot")


def cross_entropy(pred: np.ndarray, truth: np.ndarray) -> float:
    """Categorical cross-entropy ``-sum(y * log(pred))``, averaged over a batch."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} differs from truth shape {truth.shape}")
    _check_one_hot(truth)
    picked = np.sum(np.where(truth == 1, pred, 0.0), axis=-1)
    return float(np.mean(-np.log(picked))) + 0.0


def softmax_cross_entropy_grad(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Gradient of the fused softmax + cross-entropy head w.r.t. the logits."""
    return pred - truth


def one_hot(labels, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros(labels.shape + (num_classes,), dtype=dtype)
    np.put_along_axis(out, labels[..., None], 1, axis=-1)
    return out
