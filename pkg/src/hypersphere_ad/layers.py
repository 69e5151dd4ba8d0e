"""Differentiable layers: 2-D convolution and deconvolution, max
pooling, batch normalization, linear maps, and parameter init.

Convolution uses the cross-correlation convention (no kernel flip).
Deconvolution is the exact adjoint of the matching convolution, so
``<conv2d(x), y> == <x, deconv2d(y)>`` holds for identical weights.
All ops take graph Tensors for inputs and parameters and register a
single fused backward rule on the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    DEFAULT_DTYPE,
    Rng,
    ShapeError,
    Tensor,
    _tape_of,
    add,
    matmul,
    transpose,
)


# slope of the leaky activation used throughout the model stacks
LEAKY_SLOPE = 0.01


@dataclass
class LayerParams:
    """One layer's parameters plus its fixed geometry.

    kind is one of "conv", "deconv", "linear".  Weight layouts:
      conv    (c_out, c_in, k, k)
      deconv  (c_in, c_out, k, k)
      linear  (d_out, d_in)
    """

    kind: str
    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    output_padding: int = 0

    @property
    def kernel_size(self) -> int:
        if self.kind == "linear":
            raise ShapeError("linear layers have no kernel size")
        return self.weight.shape[2]


@dataclass
class BatchNormState:
    """Per-channel affine and running statistics.

    Train mode normalizes with batch statistics (biased variance) and
    updates the running stats; eval mode uses the running stats.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=DEFAULT_DTYPE, momentum=0.1, eps=1e-5):
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )


# ---------------------------------------------------------------------------
# raw numpy kernels

def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """(n, c, H, W) -> (n, c*k*k, oh*ow) patch matrix (copies once)."""
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
    )
    return view.reshape(n, c * k * k, oh * ow)


def _col2im(dcols: np.ndarray, padded_shape, k: int, stride: int, oh: int, ow: int):
    n, c, H, W = padded_shape
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, k, k, oh, ow)
    for u in range(k):
        for v in range(k):
            dxp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += d6[
                :, :, u, v
            ]
    return dxp


def _conv_out_hw(h, w, k, stride, padding):
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"kernel {k} with stride {stride}, padding {padding} does not fit "
            f"input {h}x{w}"
        )
    return oh, ow


def conv2d_raw(x, w, stride, padding):
    """Forward cross-correlation; also returns the patch matrix for reuse."""
    n, ci, h, ww = x.shape
    co, ci_w, k, _ = w.shape
    if ci != ci_w:
        raise ShapeError(f"input has {ci} channels, kernel expects {ci_w}")
    oh, ow = _conv_out_hw(h, ww, k, stride, padding)
    cols = _im2col(_pad2d(x, padding), k, stride, oh, ow)
    y = np.matmul(w.reshape(co, -1), cols).reshape(n, co, oh, ow)
    return y, cols


def conv2d_input_grad_raw(g, w, stride, padding, in_hw):
    n, co, oh, ow = g.shape
    _, ci, k, _ = w.shape
    h, ww = in_hw
    dcols = np.matmul(w.reshape(co, -1).T, g.reshape(n, co, oh * ow))
    dxp = _col2im(dcols, (n, ci, h + 2 * padding, ww + 2 * padding), k, stride, oh, ow)
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def conv2d_weight_grad_raw(cols, g, kshape):
    n, co, oh, ow = g.shape
    dw = np.matmul(g.reshape(n, co, oh * ow), cols.transpose(0, 2, 1)).sum(axis=0)
    return dw.reshape(kshape)


# ---------------------------------------------------------------------------
# tape-aware ops

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0):
    """Batched 2-D cross-correlation, NCHW layout."""
    tape = _tape_of(x, w) if b is None else _tape_of(x, w, b)
    xv, wv = x.data, w.data
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input/kernel, got {xv.shape}, {wv.shape}")
    y, cols = conv2d_raw(xv, wv, stride, padding)
    if b is not None:
        y = y + b.data[:, None, None]
    in_hw = xv.shape[2:]
    kshape = wv.shape
    parents = (x, w) if b is None else (x, w, b)

    def backward_rule(g):
        dx = conv2d_input_grad_raw(g, wv, stride, padding, in_hw)
        dw = conv2d_weight_grad_raw(cols, g, kshape)
        if b is None:
            return [dx, dw]
        return [dx, dw, g.sum(axis=(0, 2, 3))]

    return tape.record(y, parents, backward_rule)


def deconv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride=1,
    padding=0,
    output_padding=0,
):
    """Transposed convolution: the adjoint of conv2d with the same kernel.

    Output spatial size is (h-1)*stride - 2*padding + k + output_padding;
    output_padding must be < stride (0 when stride is 1).
    """
    tape = _tape_of(x, w) if b is None else _tape_of(x, w, b)
    xv, wv = x.data, w.data
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"deconv2d needs 4-D input/kernel, got {xv.shape}, {wv.shape}")
    n, cin, h, ww_ = xv.shape
    cin_w, cout, k, _ = wv.shape
    if cin != cin_w:
        raise ShapeError(f"input has {cin} channels, kernel expects {cin_w}")
    if not 0 <= output_padding < max(stride, 1):
        raise ShapeError(f"output_padding {output_padding} must be in [0, stride)")
    oh = (h - 1) * stride - 2 * padding + k + output_padding
    ow = (ww_ - 1) * stride - 2 * padding + k + output_padding
    if oh < 1 or ow < 1:
        raise ShapeError(f"deconv output {oh}x{ow} is empty")

    # forward = conv input-grad with the kernel read as (c_in -> c_out)
    y = conv2d_input_grad_raw(xv, wv, stride, padding, (oh, ow))
    if b is not None:
        y = y + b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward_rule(g):
        dx, gcols = conv2d_raw(g, wv, stride, padding)
        dw = conv2d_weight_grad_raw(gcols, xv, wv.shape)
        if b is None:
            return [dx, dw]
        return [dx, dw, g.sum(axis=(0, 2, 3))]

    return tape.record(y, parents, backward_rule)


def maxpool2d(x: Tensor, kernel=2, stride=2):
    """Window maxima; gradient routes to the first max in row-major order."""
    xv = x.data
    if xv.ndim != 4:
        raise ShapeError(f"maxpool2d needs 4-D input, got {xv.shape}")
    n, c, h, w = xv.shape
    if h < kernel or w < kernel:
        raise ShapeError(f"spatial dims {h}x{w} smaller than pool kernel {kernel}")
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    s0, s1, s2, s3 = xv.strides
    windows = np.lib.stride_tricks.as_strided(
        xv,
        shape=(n, c, oh, ow, kernel, kernel),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
    ).reshape(n, c, oh, ow, kernel * kernel)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    iu = (arg // kernel) + stride * np.arange(oh)[None, None, :, None]
    iv = (arg % kernel) + stride * np.arange(ow)[None, None, None, :]
    ni = np.broadcast_to(np.arange(n)[:, None, None, None], arg.shape)
    ci = np.broadcast_to(np.arange(c)[None, :, None, None], arg.shape)

    def backward_rule(g):
        dx = np.zeros_like(xv)
        if stride >= kernel:
            dx[ni, ci, iu, iv] = g
        else:
            np.add.at(dx, (ni, ci, iu, iv), g)
        return [dx]

    return x.tape.record(out, (x,), backward_rule)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode="train"):
    """Channel-wise batch normalization for NC or NCHW tensors.

    Train mode uses batch statistics and updates state.running_* in
    place (running variance uses the unbiased estimate, momentum-mixed);
    eval mode normalizes with the stored running statistics.
    """
    if mode not in ("train", "eval"):
        raise ShapeError(f"unknown batchnorm mode {mode!r}")
    tape = _tape_of(x, gamma, beta)
    xv = x.data
    if xv.ndim == 2:
        axes, view = (0,), (1, -1)
    elif xv.ndim == 4:
        axes, view = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ShapeError(f"batchnorm supports 2-D or 4-D inputs, got {xv.shape}")
    if xv.shape[1] != state.gamma.shape[0]:
        raise ShapeError(
            f"channel dim {xv.shape[1]} does not match state ({state.gamma.shape[0]})"
        )
    gview = gamma.data.reshape(view)
    bview = beta.data.reshape(view)
    count = int(np.prod([xv.shape[a] for a in axes]))

    if mode == "train":
        mean = xv.mean(axis=axes)
        var = xv.var(axis=axes)  # biased
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (xv - mean.reshape(view)) * inv_std.reshape(view)
        m = state.momentum
        unbiased = var * (count / (count - 1)) if count > 1 else var
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(
            state.running_mean.dtype
        )
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(
            state.running_var.dtype
        )
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xv - state.running_mean.reshape(view)) * inv_std.reshape(view)

    y = gview * xhat + bview

    def backward_rule(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        if mode == "eval":
            dx = g * gview * inv_std.reshape(view)
        else:
            scale = gview * inv_std.reshape(view)
            dx = scale * (
                g
                - (dbeta / count).reshape(view)
                - xhat * (dgamma / count).reshape(view)
            )
        return [dx.astype(xv.dtype, copy=False), dgamma, dbeta]

    return tape.record(y.astype(xv.dtype, copy=False), (x, gamma, beta), backward_rule)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None):
    """x @ w.T + b with w laid out (d_out, d_in)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear needs 2-D input/weight, got {x.shape}, {w.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"input dim {x.data.shape[1]} != weight dim {w.data.shape[1]}")
    y = matmul(x, transpose(w))
    if b is not None:
        y = add(y, b)
    return y


# ---------------------------------------------------------------------------
# initialization

def kaiming_uniform(shape, fan_in: int, rng: Rng, dtype=DEFAULT_DTYPE) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape, dtype=dtype)


def init_params(layer_spec, rng: Rng, dtype=DEFAULT_DTYPE, with_bias=True, **geometry):
    """Initialize one layer from a (kind, s_in, s_out[, k]) tuple.

    Conv/deconv/linear weights are Kaiming-uniform over fan-in; biases
    start at zero.  Deterministic given the Rng.
    """
    kind = layer_spec[0]
    if kind == "conv":
        _, s_in, s_out, k = layer_spec
        w = kaiming_uniform((s_out, s_in, k, k), s_in * k * k, rng, dtype)
        bias = np.zeros(s_out, dtype=dtype) if with_bias else None
    elif kind == "deconv":
        _, s_in, s_out, k = layer_spec
        w = kaiming_uniform((s_in, s_out, k, k), s_in * k * k, rng, dtype)
        bias = np.zeros(s_out, dtype=dtype) if with_bias else None
    elif kind == "linear":
        _, s_in, s_out = layer_spec[:3]
        w = kaiming_uniform((s_out, s_in), s_in, rng, dtype)
        bias = np.zeros(s_out, dtype=dtype) if with_bias else None
    else:
        raise ShapeError(f"unknown layer kind {kind!r}")
    return LayerParams(kind=kind, weight=w, bias=bias, **geometry)
