"""Dense 4-D tensor kernels with hand-derived adjoints.

Every tensor is a numpy ndarray laid out (batch, channel, height, width),
row-major. float32 is the production dtype; all kernels also run in float64
so the whole stack can be verified against central finite differences.
Kernels are pure functions of their inputs (batchnorm's running-statistics
update is the one documented exception) and bit-deterministic for fixed
inputs, so repeated calls agree exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeError

Tensor = np.ndarray  # alias used in signatures; always (n, c, h, w)


def _require_4d(name: str, x: np.ndarray) -> None:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        got = getattr(x, "shape", None)
        raise ShapeError(f"{name} must be a 4-D (n, c, h, w) array, got shape {got}")


@dataclass
class ConvParams:
    """Weights for one 2-D convolution.

    weights: (c_out, c_in, k, k) with k odd; bias: (c_out,); dilation >= 1.
    Same-padding is implied: outputs keep the input's spatial size for every
    dilation, with zero fill outside the border.
    """

    weights: np.ndarray
    bias: np.ndarray
    dilation: int = 1

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"weights must be 4-D (c_out, c_in, k, k), got shape {self.weights.shape}")
        c_out, _, kh, kw = self.weights.shape
        if kh != kw:
            raise ShapeError(f"kernel must be square, got {kh}x{kw}")
        if kh % 2 == 0:
            raise ShapeError(f"kernel size must be odd so same-padding is symmetric, got {kh}")
        if self.bias.ndim != 1 or self.bias.shape[0] != c_out:
            raise ShapeError(
                f"bias must have shape ({c_out},) to match c_out, got {self.bias.shape}"
            )
        if int(self.dilation) < 1:
            raise ShapeError(f"dilation must be >= 1, got {self.dilation}")
        self.dilation = int(self.dilation)

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]


def _conv_check(x: np.ndarray, params: ConvParams) -> None:
    _require_4d("conv2d input", x)
    if x.shape[1] != params.in_channels:
        raise ShapeError(
            f"conv2d input has {x.shape[1]} channels but the kernel expects {params.in_channels}"
        )
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"conv2d input must have positive spatial dims, got {x.shape}")


def _im2col(x: np.ndarray, k: int, d: int):
    """Return (col, padded_shape): col has shape (n, c*k*k, h*w).

    col[b, (i*k + u)*k + v, y*w + x] = padded[b, i, y + d*u, x + d*v] where
    the padding margin is d*(k-1)//2 on each side, so a matmul against the
    (c_out, c*k*k) weight matrix realises same-padded dilated convolution.
    """
    n, c, h, w = x.shape
    p = d * (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    sn, sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(n, c, k, k, h, w),
        strides=(sn, sc, d * sh, d * sw, sh, sw),
        writeable=False,
    )
    # reshape copies (the view is not contiguous), materialising the column matrix
    col = windows.reshape(n, c * k * k, h * w)
    return col, xp.shape


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Dilated same-padding convolution; output spatial size equals input's."""
    _conv_check(x, params)
    n, c, h, w = x.shape
    k, d = params.kernel_size, params.dilation
    col, _ = _im2col(x, k, d)
    wmat = params.weights.reshape(params.out_channels, c * k * k)
    out = np.matmul(wmat, col)  # (n, c_out, h*w)
    out = out.reshape(n, params.out_channels, h, w)
    out += params.bias.reshape(1, -1, 1, 1)
    return out


def conv2d_backward(x: Tensor, params: ConvParams, grad_out: Tensor):
    """Adjoints of conv2d: (grad_input, grad_weights, grad_bias).

    Exact partial derivatives of sum(grad_out * conv2d(x, params)).
    """
    _conv_check(x, params)
    n, c, h, w = x.shape
    k, d = params.kernel_size, params.dilation
    c_out = params.out_channels
    if grad_out.shape != (n, c_out, h, w):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match conv output {(n, c_out, h, w)}"
        )
    ckk = c * k * k
    wmat = params.weights.reshape(c_out, ckk)
    go = grad_out.reshape(n, c_out, h * w)

    grad_bias = grad_out.sum(axis=(0, 2, 3))

    # weight gradient: accumulate per batch element to keep transients small
    col, padded_shape = _im2col(x, k, d)
    gw = np.zeros((c_out, ckk), dtype=x.dtype)
    for b in range(n):
        gw += go[b] @ col[b].T
    grad_weights = gw.reshape(params.weights.shape)

    # input gradient: scatter the columns back through the padded array
    gcol = np.matmul(wmat.T, go).reshape(n, c, k, k, h, w)
    gxp = np.zeros(padded_shape, dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            gxp[:, :, u * d : u * d + h, v * d : v * d + w] += gcol[:, :, u, v]
    p = d * (k - 1) // 2
    grad_input = gxp[:, :, p : p + h, p : p + w].copy()
    return grad_input, grad_weights, grad_bias


def maxpool2(x: Tensor):
    """2x2 max pooling with stride 2; returns (output, argmax).

    argmax holds, for every pooled element, the flat row-major index (y*w + x)
    of the winning input position within its (n, c) plane. Ties go to the
    first occurrence in row-major window order.
    """
    _require_4d("maxpool2 input", x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got h={h}, w={w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    local = win.argmax(axis=-1)  # first max in row-major window order
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    ys = 2 * np.arange(h // 2).reshape(1, 1, -1, 1) + local // 2
    xs = 2 * np.arange(w // 2).reshape(1, 1, 1, -1) + local % 2
    argmax = ys * w + xs
    return out, argmax


def maxpool2_backward(grad_out: Tensor, argmax: np.ndarray, input_shape) -> Tensor:
    """Route each pooled cotangent to its argmax position; zeros elsewhere."""
    n, c, h, w = input_shape
    if grad_out.shape != argmax.shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match argmax shape {argmax.shape}"
        )
    flat = np.zeros((n, c, h * w), dtype=grad_out.dtype)
    # windows are disjoint so indices are unique per (n, c) plane
    np.put_along_axis(
        flat, argmax.reshape(n, c, -1), grad_out.reshape(n, c, -1), axis=2
    )
    return flat.reshape(n, c, h, w)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block."""
    _require_4d("upsample input", x)
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_nearest2_backward(grad_out: Tensor) -> Tensor:
    """Adjoint of upsample_nearest2: sum each 2x2 block."""
    n, c, h2, w2 = grad_out.shape
    if h2 % 2 or w2 % 2:
        raise ShapeError(f"upsample adjoint needs even dims, got {grad_out.shape}")
    return grad_out.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


@dataclass
class BatchNormState:
    """Per-channel affine parameters plus running statistics.

    gamma/beta are learned; running_mean/running_var are updated in train
    mode with momentum and consumed in eval mode.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape[0]
        for name in ("beta", "running_mean", "running_var"):
            arr = getattr(self, name)
            if arr.shape != (c,):
                raise ShapeError(f"batchnorm {name} must have shape ({c},), got {arr.shape}")
        if not 0.0 < self.momentum < 1.0:
            raise ShapeError(f"batchnorm momentum must lie in (0, 1), got {self.momentum}")
        if not self.epsilon > 0.0:
            raise ShapeError(f"batchnorm epsilon must be positive, got {self.epsilon}")
        if np.any(self.running_var < 0):
            raise ShapeError("batchnorm running_var must be non-negative")


def batchnorm(x: Tensor, state: BatchNormState, mode: str):
    """Normalize per channel; returns (out, cache).

    Train mode normalizes with batch statistics over (n, h, w) and updates
    the running statistics in place on `state` (the single deliberately
    stateful operation here). Eval mode uses the stored running statistics
    and never mutates. The cache feeds batchnorm_backward.
    """
    _require_4d("batchnorm input", x)
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    n, c, h, w = x.shape
    if c != state.gamma.shape[0]:
        raise ShapeError(
            f"batchnorm input has {c} channels but state holds {state.gamma.shape[0]}"
        )
    if mode == "train":
        if n * h * w == 1:
            raise ShapeError(
                "batchnorm train mode needs more than one value per channel "
                f"(n*h*w = 1 for input shape {x.shape})"
            )
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = np.asarray(state.momentum, dtype=x.dtype)
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(x.dtype)
        state.running_var = ((1 - m) * state.running_var + m * var).astype(x.dtype)
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + np.asarray(state.epsilon, dtype=x.dtype))
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = state.gamma.reshape(1, -1, 1, 1) * xhat + state.beta.reshape(1, -1, 1, 1)
    cache = {"mode": mode, "xhat": xhat, "inv_std": inv_std, "gamma": state.gamma}
    return out, cache


def batchnorm_backward(cache: dict, grad_out: Tensor):
    """Adjoints of batchnorm: (grad_input, grad_gamma, grad_beta).

    Train mode differentiates through the batch statistics; eval mode treats
    mean/var as constants (they are running statistics there).
    """
    xhat = cache["xhat"]
    inv_std = cache["inv_std"].reshape(1, -1, 1, 1)
    gamma = cache["gamma"].reshape(1, -1, 1, 1)
    if grad_out.shape != xhat.shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match batchnorm input {xhat.shape}"
        )
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    dxhat = grad_out * gamma
    if cache["mode"] == "eval":
        grad_input = dxhat * inv_std
    else:
        n, c, h, w = xhat.shape
        count = n * h * w
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        grad_input = (inv_std / count) * (count * dxhat - s1 - xhat * s2)
    return grad_input, grad_gamma, grad_beta


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(grad_out: Tensor, out: Tensor) -> Tensor:
    """Gate cotangents where the pre-activation was positive (out > 0 iff x > 0)."""
    return grad_out * (out > 0)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp for large negative inputs
    pos = x >= 0
    out = np.empty_like(x)
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out: Tensor, out: Tensor) -> Tensor:
    return grad_out * out * (1.0 - out)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, mode: str):
    """Inverted dropout; returns (out, mask).

    Train mode zeroes entries with probability `rate` and scales survivors by
    1/(1-rate) so the expectation matches the input. The returned mask already
    carries that scale; the backward pass multiplies by the same mask. Eval
    mode (or rate 0) is the identity with an all-ones mask.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x, np.ones_like(x)
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    keep = rng.random(x.shape) >= rate  # draws are float64 regardless of x.dtype
    mask = keep.astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    return x * mask, mask


def dropout_backward(grad_out: Tensor, mask: Tensor) -> Tensor:
    return grad_out * mask


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; batch and spatial dims must match."""
    _require_4d("concat first input", a)
    _require_4d("concat second input", b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat inputs must share batch and spatial dims, got {a.shape} and {b.shape}"
        )
    return np.concatenate([a, b], axis=1)


def split_channels(grad: Tensor, first_channels: int):
    """Adjoint of concat_channels: slice the cotangent back into two parts."""
    _require_4d("split input", grad)
    if not 0 < first_channels < grad.shape[1]:
        raise ShapeError(
            f"split point {first_channels} out of range for {grad.shape[1]} channels"
        )
    return grad[:, :first_channels].copy(), grad[:, first_channels:].copy()


BCE_CLAMP = 1e-7


def bce_loss(pred: Tensor, target: Tensor):
    """Mean binary cross-entropy with clamped predictions; returns (loss, grad).

    Predictions are clamped to [1e-7, 1 - 1e-7] before the logs. The gradient
    is the exact derivative of the clamped expression, so it vanishes where
    the clamp is active.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} does not match target {target.shape}")
    eps = np.asarray(BCE_CLAMP, dtype=pred.dtype)
    hi = np.asarray(1.0, dtype=pred.dtype) - eps
    p = np.clip(pred, eps, hi)
    loss = float(np.mean(-(target * np.log(p) + (1.0 - target) * np.log1p(-p))))
    inside = (pred >= eps) & (pred <= hi)
    grad = np.where(inside, (p - target) / (p * (1.0 - p)), 0.0) / pred.size
    return loss, grad.astype(pred.dtype, copy=False)


def mse_loss(pred: Tensor, target: Tensor):
    """Mean squared error; returns (loss, grad)."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} does not match target {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = (2.0 / pred.size) * diff
    return loss, grad.astype(pred.dtype, copy=False)


LOSSES = {"bce": bce_loss, "mse": mse_loss}
