"""Neural network operations on NCHW tensors.

Convolutions use chunked im2col so the column buffer stays bounded; the
transposed convolution is literally the input-gradient of ``conv2d`` with the
same weights, which keeps the two exact adjoints of each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result

# upper bound on elements in one im2col buffer
_COL_BUDGET = 1 << 23


def conv_output_size(size, k, stride, pad):
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ValueError(
            f"conv geometry does not tile: size={size}, kernel={k}, stride={stride}, padding={pad}"
        )
    return span // stride + 1


def _cols(xp, k, stride):
    # (n, c*k*k, ho*wo) column matrix, copied from a strided window view
    v = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = v.shape[:4]
    return v.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)


def _chunks(n, per_item):
    step = max(1, _COL_BUDGET // max(per_item, 1))
    for s in range(0, n, step):
        yield slice(s, min(n, s + step))


def _pad(x, pad):
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x


def _shift_conv(x, wt, pad):
    # stride-1 conv as k*k channels-last GEMMs over shifted views; faster than
    # im2col once there are enough input channels. wt is (k, k, c_in, c_out).
    n, c, h, wd = x.shape
    k = wt.shape[0]
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    xp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=np.result_type(x, wt))
    xp[:, pad:pad + h, pad:pad + wd] = x.transpose(0, 2, 3, 1)
    out = np.zeros((n, ho, wo, wt.shape[3]), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            out += xp[:, a:a + ho, b:b + wo, :] @ wt[a, b]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


_SHIFT_MIN_CHANNELS = 16


def _conv_fwd(x, w, stride, pad):
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(wd, k, stride, pad)
    if stride == 1 and ci >= _SHIFT_MIN_CHANNELS and k > 1:
        return _shift_conv(x, np.ascontiguousarray(w.transpose(2, 3, 1, 0)), pad)
    xp = _pad(x, pad)
    wmat = w.reshape(co, ci * k * k)
    out = np.empty((n, co, ho * wo), dtype=np.result_type(x, w))
    for sl in _chunks(n, ho * wo * ci * k * k):
        np.matmul(wmat, _cols(xp[sl], k, stride), out=out[sl])
    return out.reshape(n, co, ho, wo)


def _conv_grad_input(g, w, in_hw, stride, pad):
    n, co, ho, wo = g.shape
    _, ci, k, _ = w.shape
    h, wd = in_hw
    if stride == 1 and co >= _SHIFT_MIN_CHANNELS and 1 < k and pad <= k - 1:
        # adjoint of a stride-1 conv: conv with the flipped, transposed kernel
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(2, 3, 0, 1))
        return _shift_conv(g, wt, k - 1 - pad)
    gx = np.zeros((n, ci, h + 2 * pad, wd + 2 * pad), dtype=np.result_type(g, w))
    wmat_t = np.ascontiguousarray(w.reshape(co, ci * k * k).T)
    gflat = g.reshape(n, co, ho * wo)
    for sl in _chunks(n, ho * wo * ci * k * k):
        cols = np.matmul(wmat_t, gflat[sl]).reshape(-1, ci, k, k, ho, wo)
        gxs = gx[sl]
        for i in range(k):
            hi = i + stride * (ho - 1) + 1
            for j in range(k):
                wj = j + stride * (wo - 1) + 1
                gxs[:, :, i:hi:stride, j:wj:stride] += cols[:, :, i, j]
    if pad:
        gx = gx[:, :, pad:pad + h, pad:pad + wd]
    return np.ascontiguousarray(gx)


def _conv_grad_weight(x, g, k, stride, pad):
    n, ci = x.shape[:2]
    co, ho, wo = g.shape[1:]
    xp = _pad(x, pad)
    gflat = g.reshape(n, co, ho * wo)
    gw = np.zeros((co, ci * k * k), dtype=np.result_type(x, g))
    for sl in _chunks(n, ho * wo * ci * k * k):
        cols = _cols(xp[sl], k, stride)
        for s in range(cols.shape[0]):
            gw += gflat[sl][s] @ cols[s].T
    return gw.reshape(co, ci, k, k)


@dataclass
class ConvParams:
    """Weights and geometry of one (transposed) convolution."""

    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.data.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ValueError(f"conv weight must be (c_out, c_in, k, k), got {self.weight.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"bad stride/padding {self.stride}/{self.padding}")

    @property
    def kernel(self):
        return self.weight.shape[2]


def _bias_add(out, bias):
    b = bias.data.reshape(1, -1, 1, 1)
    return make_result(out.data + b, (out, bias), lambda g: (g, g.sum(axis=(0, 2, 3))), "bias")


def conv2d(x, p: ConvParams):
    """Cross-correlate ``x`` with ``p.weight`` using zero padding."""
    x, w = as_tensor(x), p.weight
    if x.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} does not match weight {w.shape}")
    stride, pad, k = p.stride, p.padding, p.kernel
    hw = x.shape[2:]
    xd, wd = x.data, w.data

    def grad(g):
        gx = _conv_grad_input(g, wd, hw, stride, pad) if x.requires_grad else None
        gw = _conv_grad_weight(xd, g, k, stride, pad) if w.requires_grad else None
        return gx, gw

    out = make_result(_conv_fwd(xd, wd, stride, pad), (x, w), grad, "conv2d")
    return _bias_add(out, p.bias) if p.bias is not None else out


def transposed_conv_output_size(size, k, stride, pad):
    return (size - 1) * stride - 2 * pad + k


def transposed_conv2d(x, p: ConvParams):
    """Adjoint of :func:`conv2d` for the same weight tensor.

    ``p.weight`` has shape (c_in, c_out, k, k) from the point of view of this
    call: it is the weight of the forward convolution mapping c_out -> c_in.
    """
    x, w = as_tensor(x), p.weight
    if x.data.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ValueError(f"transposed_conv2d: input {x.shape} does not match weight {w.shape}")
    stride, pad, k = p.stride, p.padding, p.kernel
    h, wd = (transposed_conv_output_size(s, k, stride, pad) for s in x.shape[2:])
    if h < 1 or wd < 1:
        raise ValueError(f"transposed_conv2d: non-positive output size {(h, wd)}")
    # the forward conv of the output must tile back onto the input exactly
    if (conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)) != x.shape[2:]:
        raise ValueError("transposed_conv2d: geometry is not invertible")
    xd, wdata = x.data, w.data

    def grad(g):
        gx = _conv_fwd(g, wdata, stride, pad) if x.requires_grad else None
        gw = _conv_grad_weight(g, xd, k, stride, pad) if w.requires_grad else None
        return gx, gw

    out = make_result(_conv_grad_input(xd, wdata, (h, wd), stride, pad), (x, w), grad, "transposed_conv2d")
    return _bias_add(out, p.bias) if p.bias is not None else out


def depthwise_conv2d(x, weight, padding):
    """Per-channel convolution: channel c is filtered only by ``weight[c, 0]``."""
    x = as_tensor(x)
    c, one, k, k2 = weight.shape
    if one != 1 or k != k2 or x.shape[1] != c:
        raise ValueError(f"depthwise_conv2d: input {x.shape} does not match weight {weight.shape}")
    n, _, h, wd = x.shape
    ho = conv_output_size(h, k, 1, padding)
    wo = conv_output_size(wd, k, 1, padding)
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad)
    w = weight.data[:, 0].reshape(1, c, k, k)
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(x.data, w))
    for i in range(k):
        for j in range(k):
            out += w[:, :, i:i + 1, j:j + 1] * xp[:, :, i:i + ho, j:j + wo]

    def grad(g):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(weight.data) if weight.requires_grad else None
        for i in range(k):
            for j in range(k):
                if gx is not None:
                    gx[:, :, i:i + ho, j:j + wo] += w[:, :, i:i + 1, j:j + 1] * g
                if gw is not None:
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, i:i + ho, j:j + wo])
        if gx is not None:
            gx = np.ascontiguousarray(gx[:, :, padding:padding + h, padding:padding + wd])
        return gx, gw

    return make_result(out, (x, weight), grad, "depthwise_conv2d")


def bilinear_kernel(k, channels, dtype=np.float64):
    """Bilinear interpolation weights for a (channels, channels, k, k) upsampling kernel.

    Off-diagonal channel pairs are zero, so each channel only feeds itself.
    """
    if k < 1:
        raise ValueError("kernel size must be >= 1")
    f = math.ceil(k / 2)
    center = (2 * f - 1 - k % 2) / (2 * f)
    tent = 1 - np.abs(np.arange(k) / f - center)
    w = np.zeros((channels, channels, k, k), dtype=dtype)
    w[np.arange(channels), np.arange(channels)] = np.outer(tent, tent)
    return Tensor(w, dtype=dtype)


def upsampling_kernel(k, channels, stride, dtype=np.float64):
    """Bilinear kernel rescaled so a stride-``stride`` transposed conv keeps flat fields flat.

    Each of the ``stride**2`` output phases of the kernel sums to one.
    """
    w = bilinear_kernel(k, channels, dtype).data
    if channels:
        phase = w[0, 0, ::stride, ::stride].sum()
        w = w / phase
    return Tensor(w, dtype=dtype)


class PoolIndices:
    """Argmax position of each 2x2 pooling window, coded 0..3 row-major (TL, TR, BL, BR)."""

    def __init__(self, codes):
        codes = np.asarray(codes, dtype=np.uint8)
        if codes.ndim != 4:
            raise ValueError(f"pool indices must be (n, c, h, w), got {codes.shape}")
        if codes.size and codes.max() > 3:
            raise ValueError("pool index codes must be in 0..3")
        self.codes = codes

    @property
    def shape(self):
        return self.codes.shape

    def packed(self):
        """Four 2-bit codes per byte, first code in the low bits."""
        flat = self.codes.reshape(-1)
        padded = np.zeros(-(-flat.size // 4) * 4, dtype=np.uint8)
        padded[: flat.size] = flat
        q = padded.reshape(-1, 4)
        return (q[:, 0] | (q[:, 1] << 2) | (q[:, 2] << 4) | (q[:, 3] << 6)).astype(np.uint8).tobytes()

    @classmethod
    def from_packed(cls, data, shape):
        b = np.frombuffer(data, dtype=np.uint8)
        codes = np.stack([(b >> s) & 3 for s in (0, 2, 4, 6)], axis=1).reshape(-1)
        count = int(np.prod(shape))
        if codes.size < count:
            raise ValueError("packed index buffer too short")
        return cls(codes[:count].reshape(shape))

    def storage_bytes(self):
        return index_storage_bytes(self.codes.size)

    def __eq__(self, other):
        return isinstance(other, PoolIndices) and np.array_equal(self.codes, other.codes)

    def __repr__(self):
        return f"PoolIndices(shape={self.shape}, bytes={self.storage_bytes()})"


def index_storage_bytes(windows):
    """Bytes needed to store ``windows`` pooling codes at 2 bits each."""
    return -(-2 * windows // 8)


def maxpool2x2(x):
    """2x2/2 max pooling returning the pooled tensor and the argmax codes.

    Ties go to the first position in row-major window order.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"maxpool2x2: spatial size {(h, w)} is smaller than the window")
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2: spatial size {(h, w)} must be even")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    codes = np.argmax(win, axis=-1).astype(np.uint8)
    vals = np.take_along_axis(win, codes[..., None].astype(np.intp), axis=-1)[..., 0]
    idx = PoolIndices(codes)

    def grad(g):
        return (_scatter(g, codes, h, w),)

    return make_result(np.ascontiguousarray(vals), (x,), grad, "maxpool2x2"), idx


def _scatter(vals, codes, out_h, out_w):
    n, c, h, w = vals.shape
    onehot = codes[..., None] == np.arange(4, dtype=np.uint8)
    win = np.where(onehot, vals[..., None], 0).astype(vals.dtype, copy=False)
    dense = win.reshape(n, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h, 2 * w)
    if (out_h, out_w) != (2 * h, 2 * w):
        out = np.zeros((n, c, out_h, out_w), dtype=vals.dtype)
        out[:, :, : 2 * h, : 2 * w] = dense
        return out
    return dense


def _gather(g, codes):
    n, c, h, w = codes.shape
    win = g[:, :, : 2 * h, : 2 * w].reshape(n, c, h, 2, w, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w, 4)
    return np.ascontiguousarray(np.take_along_axis(win, codes[..., None].astype(np.intp), axis=-1)[..., 0])


def max_unpool2x2(x, idx: PoolIndices, out_h=None, out_w=None):
    """Place each value at its recorded window position; the other three stay 0."""
    x = as_tensor(x)
    if x.shape != idx.shape:
        raise ValueError(f"max_unpool2x2: input {x.shape} does not match indices {idx.shape}")
    out_h = 2 * x.shape[2] if out_h is None else out_h
    out_w = 2 * x.shape[3] if out_w is None else out_w
    if out_h < 2 * x.shape[2] or out_w < 2 * x.shape[3]:
        raise ValueError(f"max_unpool2x2: output {(out_h, out_w)} too small for input {x.shape[2:]}")
    codes = idx.codes
    return make_result(_scatter(x.data, codes, out_h, out_w), (x,), lambda g: (_gather(g, codes),), "max_unpool2x2")


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"

    @classmethod
    def create(cls, channels, dtype=np.float64, momentum=0.1, epsilon=1e-5, name="bn"):
        return cls(
            scale=Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.scale"),
            shift=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.shift"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )

    @property
    def channels(self):
        return self.scale.shape[0]


def batch_norm(x, s: BatchNormState, mode=None):
    """Normalise each channel, then scale and shift.

    In train mode batch statistics are used and the running statistics are
    updated in place; in eval mode only the running statistics are used.
    """
    x = as_tensor(x)
    mode = mode or s.mode
    if x.data.ndim != 4 or x.shape[1] != s.channels:
        raise ValueError(f"batch_norm: input {x.shape} does not match {s.channels} channels")
    xd = x.data
    gamma = s.scale.data.reshape(1, -1, 1, 1)
    beta = s.shift.data.reshape(1, -1, 1, 1)
    if mode == "eval":
        inv = 1.0 / np.sqrt(s.running_var + s.epsilon)
        mean = s.running_mean.reshape(1, -1, 1, 1)
        xhat = (xd - mean) * inv.reshape(1, -1, 1, 1)

        def grad(g):
            return (g * (gamma * inv.reshape(1, -1, 1, 1)), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return make_result(xhat * gamma + beta, (x, s.scale, s.shift), grad, "batch_norm")
    if mode != "train":
        raise ValueError(f"unknown batch norm mode {mode!r}")

    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    mean = xd.mean(axis=(0, 2, 3))
    var = xd.var(axis=(0, 2, 3))
    inv = (1.0 / np.sqrt(var + s.epsilon)).reshape(1, -1, 1, 1)
    xhat = (xd - mean.reshape(1, -1, 1, 1)) * inv
    unbiased = var * m / (m - 1) if m > 1 else var
    s.running_mean[...] = (1 - s.momentum) * s.running_mean + s.momentum * mean
    s.running_var[...] = (1 - s.momentum) * s.running_var + s.momentum * unbiased

    def grad(g):
        gsum = g.sum(axis=(0, 2, 3))
        gxhat_sum = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gx = (gamma * inv / m) * (m * g - gsum.reshape(1, -1, 1, 1) - xhat * gxhat_sum.reshape(1, -1, 1, 1))
        return gx, gxhat_sum, gsum

    return make_result(xhat * gamma + beta, (x, s.scale, s.shift), grad, "batch_norm")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,), "relu")


def softmax_channels(x):
    """Softmax over the channel axis at every pixel."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def grad(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return make_result(p, (x,), grad, "softmax")


def dropout(x, rate, mode="train", seed=None):
    """Inverted dropout: survivors are scaled by 1/(1 - rate); eval is identity."""
    x = as_tensor(x)
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0:
        return x
    rng = np.random.default_rng(seed)
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1 - rate)
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def gaussian_window(size=9, sigma=2.0):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(x, g1):
    # separable filtering with edge reflection on the two spatial axes
    r = len(g1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)), mode="reflect")
    h, w = x.shape[2:]
    tmp = sum(g1[i] * xp[:, :, i:i + h, :] for i in range(len(g1)))
    return sum(g1[j] * tmp[:, :, :, j:j + w] for j in range(len(g1)))


def local_contrast_normalize(img, size=9, sigma=2.0, eps=1e-8):
    """Subtractive then divisive normalisation with a Gaussian window, per channel.

    The local standard deviation is floored at its per-image, per-channel
    mean so flat regions are not amplified. Preprocessing only: the result
    does not take part in differentiation.
    """
    x = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    g1 = gaussian_window(size, sigma)
    centered = x - _blur(x, g1)
    sd = np.sqrt(np.maximum(_blur(centered * centered, g1), 0))
    floor = sd.mean(axis=(2, 3), keepdims=True)
    div = np.maximum(sd, floor)
    out = np.where(div > eps, centered / np.where(div > eps, div, 1), 0.0)
    return Tensor(out.astype(x.dtype, copy=False))


def log_softmax_channels(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))
