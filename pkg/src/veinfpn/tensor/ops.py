"""Forward/backward pairs for the fixed op set.

The ``*_forward`` / ``*_backward`` functions work on raw numpy arrays and are
what the tests compare against oracles. The unsuffixed functions wrap them for
:class:`~veinfpn.tensor.core.Tensor` inputs and record the backward on the
tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DegenerateBatchError, GeometryError, ParameterError
from .core import DTYPE, Tensor, as_tensor

BCE_EPS = 1e-7

# Target size of one im2col block.
_BAND_BYTES = 1 << 20


# --------------------------------------------------------------------------
# parameter containers


@dataclass
class Conv2dParams:
    weight: Tensor  # (C_out, C_in, k_h, k_w)
    bias: Tensor  # (1, C_out, 1, 1)
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if self.weight.data.ndim != 4:
            raise ParameterError("conv weight must be (C_out, C_in, k_h, k_w)")
        c_out = self.weight.shape[0]
        if self.bias.shape != (1, c_out, 1, 1):
            raise ParameterError(f"conv bias must have shape (1, {c_out}, 1, 1), got {self.bias.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ParameterError("stride must be >= 1 and padding >= 0")

    @classmethod
    def create(
        cls,
        c_in: int,
        c_out: int,
        kernel: int,
        stride: int = 1,
        padding: int = 0,
        rng: np.random.Generator | None = None,
    ) -> "Conv2dParams":
        """Kaiming fan-in initialisation, zero bias."""
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = c_in * kernel * kernel
        w = rng.standard_normal((c_out, c_in, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        return cls(
            Tensor(w, requires_grad=True),
            Tensor(np.zeros((1, c_out, 1, 1)), requires_grad=True),
            stride,
            padding,
        )

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        return conv_output_size(h, kh, self.stride, self.padding), conv_output_size(
            w, kw, self.stride, self.padding
        )

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class BatchNormParams:
    gamma: Tensor  # (1, C, 1, 1)
    beta: Tensor  # (1, C, 1, 1)
    running_mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    running_var: np.ndarray = field(default=None)  # type: ignore[assignment]
    eps: float = 1e-5
    momentum: float = 0.1
    training: bool = True

    def __post_init__(self) -> None:
        c = self.gamma.shape[1]
        if self.gamma.shape != (1, c, 1, 1) or self.beta.shape != (1, c, 1, 1):
            raise ParameterError("gamma and beta must be (1, C, 1, 1)")
        if self.running_mean is None:
            self.running_mean = np.zeros(c, dtype=DTYPE)
        if self.running_var is None:
            self.running_var = np.ones(c, dtype=DTYPE)
        self.running_mean = np.asarray(self.running_mean, dtype=DTYPE)
        self.running_var = np.asarray(self.running_var, dtype=DTYPE)
        if self.eps <= 0 or not 0.0 < self.momentum < 1.0:
            raise ParameterError("batchnorm needs eps > 0 and momentum in (0, 1)")
        if np.any(self.running_var <= 0):
            raise ParameterError("running variance must be strictly positive")

    @classmethod
    def create(cls, channels: int, eps: float = 1e-5, momentum: float = 0.1) -> "BatchNormParams":
        return cls(
            Tensor(np.ones((1, channels, 1, 1)), requires_grad=True),
            Tensor(np.zeros((1, channels, 1, 1)), requires_grad=True),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


# --------------------------------------------------------------------------
# convolution


def _check_conv(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> tuple[int, int]:
    if x.ndim != 4:
        raise ParameterError(f"conv input must be NCHW, got shape {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ParameterError(f"conv expects {w.shape[1]} input channels, got {x.shape[1]}")
    kh, kw = w.shape[2:]
    hp, wp = x.shape[2] + 2 * pad, x.shape[3] + 2 * pad
    if kh > hp or kw > wp:
        raise GeometryError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    return conv_output_size(x.shape[2], kh, stride, pad), conv_output_size(x.shape[3], kw, stride, pad)


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided view (n, C, ho', wo', kh, kw) over every kernel placement."""
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _bands(ho: int, row_bytes: int) -> list[tuple[int, int]]:
    # Output rows per im2col block, sized so the block stays cache resident.
    step = max(1, _BAND_BYTES // max(row_bytes, 1))
    return [(r, min(r + step, ho)) for r in range(0, ho, step)]


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation of zero-padded ``x`` with ``w`` plus per-channel bias."""
    ho, wo = _check_conv(x, w, stride, pad)
    x = np.asarray(x, dtype=DTYPE)
    n = x.shape[0]
    c_out, c_in, kh, kw = w.shape
    w2 = np.ascontiguousarray(w.reshape(c_out, -1), dtype=DTYPE)
    out = np.empty((n, c_out, ho, wo), dtype=DTYPE)
    if kh == kw == 1 and pad == 0:
        xs = x[:, :, ::stride, ::stride]
        for i in range(n):
            out[i] = (w2 @ xs[i].reshape(c_in, -1)).reshape(c_out, ho, wo)
    else:
        win = _windows(_pad(x, pad), kh, kw, stride)
        k = c_in * kh * kw
        for i in range(n):
            for r0, r1 in _bands(ho, k * wo * 4):
                cols = win[i, :, r0:r1, :wo].transpose(0, 3, 4, 1, 2).reshape(k, (r1 - r0) * wo)
                out[i, :, r0:r1] = (w2 @ cols).reshape(c_out, r1 - r0, wo)
    out += b.reshape(1, c_out, 1, 1)
    return out


def conv2d_backward(
    x: np.ndarray,
    w: np.ndarray,
    stride: int,
    pad: int,
    grad_out: np.ndarray,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients w.r.t. input, weight and bias; the input grad is skipped on request."""
    ho, wo = _check_conv(x, w, stride, pad)
    x = np.asarray(x, dtype=DTYPE)
    n = x.shape[0]
    c_out, c_in, kh, kw = w.shape
    if grad_out.shape != (n, c_out, ho, wo):
        raise ParameterError(f"grad_out shape {grad_out.shape} != conv output {(n, c_out, ho, wo)}")
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    gb = grad_out.sum(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE).reshape(1, c_out, 1, 1)
    w2 = np.ascontiguousarray(w.reshape(c_out, -1), dtype=DTYPE)
    gw2 = np.zeros_like(w2)

    if kh == kw == 1 and pad == 0:
        xs = x[:, :, ::stride, ::stride]
        gx = np.zeros_like(x) if need_input_grad else None
        for i in range(n):
            g2 = grad_out[i].reshape(c_out, -1)
            gw2 += g2 @ xs[i].reshape(c_in, -1).T
            if gx is not None:
                gx[i, :, ::stride, ::stride] = (w2.T @ g2).reshape(c_in, ho, wo)
        return gx, gw2.reshape(w.shape), gb

    xp = _pad(x, pad)
    win = _windows(xp, kh, kw, stride)
    k = c_in * kh * kw
    transposed = need_input_grad and stride == 1 and kh == kw and pad <= kh - 1
    gxp = np.zeros_like(xp) if need_input_grad and not transposed else None
    for i in range(n):
        for r0, r1 in _bands(ho, k * wo * 4):
            rows = r1 - r0
            cols = win[i, :, r0:r1, :wo].transpose(0, 3, 4, 1, 2).reshape(k, rows * wo)
            g2 = grad_out[i, :, r0:r1].reshape(c_out, rows * wo)
            gw2 += g2 @ cols.T
            if gxp is not None:
                gcols = (w2.T @ g2).reshape(c_in, kh, kw, rows, wo)
                base = r0 * stride
                for a in range(kh):
                    for c in range(kw):
                        gxp[i, :, base + a : base + a + stride * (rows - 1) + 1 : stride,
                            c : c + stride * (wo - 1) + 1 : stride] += gcols[:, a, c]
    gx = None
    if transposed:
        # stride-1 input gradient is a full correlation with the flipped kernel
        w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = conv2d_forward(grad_out, w_t, np.zeros((1, c_in, 1, 1), DTYPE), 1, kh - 1 - pad)
    elif gxp is not None:
        gx = np.ascontiguousarray(gxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]])
    return gx, gw2.reshape(w.shape), gb


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    x = as_tensor(x)
    out = conv2d_forward(x.data, p.weight.data, p.bias.data, p.stride, p.padding)

    def backward(g: np.ndarray):
        gx, gw, gb = conv2d_backward(x.data, p.weight.data, p.stride, p.padding, g, x.requires_grad)
        return gx, gw, gb

    return Tensor.from_op(out, (x, p.weight, p.bias), backward)


# --------------------------------------------------------------------------
# elementwise


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0, dtype=DTYPE)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.multiply(grad_out, x > 0, dtype=DTYPE)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return Tensor.from_op(relu_forward(x.data), (x,), lambda g: (relu_backward(x.data, g),))


def sigmoid_forward(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x, dtype=DTYPE))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(DTYPE)


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Uses the forward *output* ``y``."""
    return (grad_out * y * (1.0 - y)).astype(DTYPE)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = sigmoid_forward(x.data)
    return Tensor.from_op(y, (x,), lambda g: (sigmoid_backward(y, g),))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ParameterError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g))


def add_scalars(terms: Sequence[Tensor]) -> Tensor:
    """Sum of 0-d tensors (loss terms)."""
    terms = [as_tensor(t) for t in terms]
    if any(t.data.ndim != 0 for t in terms):
        raise ParameterError("add_scalars expects 0-d tensors")
    total = np.asarray(sum(float(t.data) for t in terms), dtype=DTYPE)
    return Tensor.from_op(total, tuple(terms), lambda g: tuple(g for _ in terms))


# --------------------------------------------------------------------------
# batch normalisation


def batchnorm_forward(
    x: np.ndarray, p: BatchNormParams, update_stats: bool = True
) -> tuple[np.ndarray, tuple]:
    """Returns the output and the cache needed by :func:`batchnorm_backward`.

    In training mode the running statistics are updated in place on ``p``
    unless ``update_stats`` is false.
    """
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ParameterError(f"batchnorm expects {p.channels} channels, got shape {x.shape}")
    gamma = p.gamma.data
    beta = p.beta.data
    if not p.training:
        inv_std = (1.0 / np.sqrt(p.running_var + p.eps)).astype(DTYPE).reshape(1, -1, 1, 1)
        xhat = (x - p.running_mean.reshape(1, -1, 1, 1)) * inv_std
        return (xhat * gamma + beta).astype(DTYPE), (xhat, inv_std, False)

    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count < 2:
        raise DegenerateBatchError("batchnorm in training mode needs at least 2 values per channel")
    mean = x.mean(axis=(0, 2, 3), keepdims=True, dtype=np.float64).astype(DTYPE)
    xc = x - mean
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True, dtype=np.float64).astype(DTYPE)
    inv_std = (1.0 / np.sqrt(var + p.eps)).astype(DTYPE)
    xhat = xc * inv_std
    out = (xhat * gamma + beta).astype(DTYPE)
    if update_stats:
        m = p.momentum
        unbiased = var.reshape(-1) * (count / (count - 1))
        p.running_mean = ((1 - m) * p.running_mean + m * mean.reshape(-1)).astype(DTYPE)
        p.running_var = ((1 - m) * p.running_var + m * unbiased).astype(DTYPE)
    return out, (xhat, inv_std, True)


def batchnorm_backward(
    grad_out: np.ndarray, p: BatchNormParams, cache: tuple
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. input, gamma and beta."""
    xhat, inv_std, batch_stats = cache
    gamma = p.gamma.data
    gbeta = grad_out.sum(axis=(0, 2, 3), keepdims=True, dtype=np.float64).astype(DTYPE)
    ggamma = (grad_out * xhat).sum(axis=(0, 2, 3), keepdims=True, dtype=np.float64).astype(DTYPE)
    gxhat = grad_out * gamma
    if not batch_stats:
        return (gxhat * inv_std).astype(DTYPE), ggamma, gbeta
    count = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True, dtype=np.float64).astype(DTYPE)
    proj = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True, dtype=np.float64).astype(DTYPE) / count
    gx = inv_std * (gxhat - mean_g - xhat * proj)
    return gx.astype(DTYPE), ggamma, gbeta


def batchnorm(x: Tensor, p: BatchNormParams, update_stats: bool = True) -> Tensor:
    x = as_tensor(x)
    out, cache = batchnorm_forward(x.data, p, update_stats)
    return Tensor.from_op(out, (x, p.gamma, p.beta), lambda g: batchnorm_backward(g, p, cache))


# --------------------------------------------------------------------------
# resampling and channel plumbing


def upsample_nearest_forward(x: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ParameterError("upsample factor must be >= 1")
    if factor == 1:
        return x.copy()
    n, c, h, w = x.shape
    out = np.broadcast_to(x[:, :, :, None, :, None], (n, c, h, factor, w, factor))
    return out.reshape(n, c, h * factor, w * factor).copy()


def upsample_nearest_backward(grad_out: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return grad_out.copy()
    n, c, hf, wf = grad_out.shape
    g = grad_out.reshape(n, c, hf // factor, factor, wf // factor, factor)
    return g.sum(axis=(3, 5), dtype=DTYPE)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    x = as_tensor(x)
    out = upsample_nearest_forward(x.data, factor)
    return Tensor.from_op(out, (x,), lambda g: (upsample_nearest_backward(g, factor),))


def concat_channels_forward(xs: Sequence[np.ndarray]) -> np.ndarray:
    if not xs:
        raise ParameterError("concat needs at least one tensor")
    ref = xs[0].shape
    for x in xs:
        if x.ndim != 4 or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise ParameterError(f"concat spatial/batch mismatch: {x.shape} vs {ref}")
    return np.concatenate(xs, axis=1)


def concat_channels_backward(grad_out: np.ndarray, channels: Sequence[int]) -> list[np.ndarray]:
    bounds = np.cumsum([0, *channels])
    return [grad_out[:, bounds[i] : bounds[i + 1]].copy() for i in range(len(channels))]


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = concat_channels_forward([x.data for x in xs])
    channels = [x.shape[1] for x in xs]
    return Tensor.from_op(out, tuple(xs), lambda g: concat_channels_backward(g, channels))


# --------------------------------------------------------------------------
# loss


def bce_forward(y: np.ndarray, target: np.ndarray, eps: float = BCE_EPS) -> float:
    if y.shape != target.shape:
        raise ParameterError(f"bce shapes differ: {y.shape} vs {target.shape}")
    yc = np.clip(y.astype(np.float64), eps, 1.0 - eps)
    t = target.astype(np.float64)
    return float(-np.mean(t * np.log(yc) + (1.0 - t) * np.log1p(-yc)))


def bce_backward(y: np.ndarray, target: np.ndarray, eps: float = BCE_EPS) -> np.ndarray:
    """d(mean BCE)/dy; zero where the clamp is active."""
    y64 = y.astype(np.float64)
    yc = np.clip(y64, eps, 1.0 - eps)
    t = target.astype(np.float64)
    g = (yc - t) / (yc * (1.0 - yc)) / y.size
    g[(y64 < eps) | (y64 > 1.0 - eps)] = 0.0
    return g.astype(DTYPE)


def bce_loss(y: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; ``target`` may be any array broadcastable-equal to ``y``."""
    y = as_tensor(y)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if t.shape != y.shape:
        raise ParameterError(f"bce shapes differ: {y.shape} vs {t.shape}")
    loss = np.asarray(bce_forward(y.data, t), dtype=DTYPE)

    def backward(g: np.ndarray):
        return (bce_backward(y.data, t) * g,)

    return Tensor.from_op(loss, (y,), backward)
