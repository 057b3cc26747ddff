"""Layer forward and backward passes on NHWC arrays.

Every ``*_forward`` returns ``(output, ctx)`` where ``ctx`` is a dict holding
whatever the matching ``*_backward`` needs. Contexts are single use.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _out_size(size, k, stride, padding):
    if padding == "same":
        out = math.ceil(size / stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        return (size - k) // stride + 1, 0, 0
    raise DomainError(f"unknown padding {padding!r}")


def conv_output_shape(in_shape, kh, kw, stride, padding):
    n, h, w, _ = in_shape
    ho = _out_size(h, kh, stride, padding)[0]
    wo = _out_size(w, kw, stride, padding)[0]
    return ho, wo


def _pad_geometry(x_shape, kh, kw, stride, padding):
    _, h, w, _ = x_shape
    if stride < 1:
        raise DomainError(f"stride must be >= 1, got {stride}")
    ho, top, bottom = _out_size(h, kh, stride, padding)
    wo, left, right = _out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"window {kh}x{kw} stride {stride} ({padding}) does not fit input {h}x{w}"
        )
    return ho, wo, (top, bottom), (left, right)


def _windows(xp, kh, kw, stride, ho, wo):
    # -> [N, Ho, Wo, C, kh, kw] view
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _scatter_windows(dxp, dwin, stride, ho, wo):
    # inverse of _windows: dwin is [N, Ho, Wo, kh, kw, C]
    kh, kw = dwin.shape[3], dwin.shape[4]
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += dwin[
                :, :, :, i, j
            ]


def _unpad(dxp, pad_h, pad_w):
    h_end = dxp.shape[1] - pad_h[1]
    w_end = dxp.shape[2] - pad_w[1]
    return np.ascontiguousarray(dxp[:, pad_h[0] : h_end, pad_w[0] : w_end])


# -- convolution --------------------------------------------------------------


def conv2d_forward(x, kernel, bias, stride=1, padding="same"):
    """Cross-correlation of NHWC ``x`` with a ``[kh, kw, c_in, c_out]`` kernel."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input, got shape {x.shape}")
    kh, kw, c_in, c_out = kernel.shape
    if x.shape[3] != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[3]}, kernel expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({c_out},)")
    ho, wo, pad_h, pad_w = _pad_geometry(x.shape, kh, kw, stride, padding)
    n = x.shape[0]
    xp = np.pad(x, ((0, 0), pad_h, pad_w, (0, 0))) if (sum(pad_h) or sum(pad_w)) else x
    if kh == 1 and kw == 1:
        cols = xp[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride, :].reshape(-1, c_in)
    else:
        win = _windows(xp, kh, kw, stride, ho, wo)
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c_in)
    out = cols @ kernel.reshape(kh * kw * c_in, c_out)
    if bias is not None:
        out += bias
    ctx = {
        "cols": cols,
        "kernel": kernel,
        "x_shape": x.shape,
        "xp_shape": xp.shape,
        "stride": stride,
        "pad": (pad_h, pad_w),
        "out_shape": (n, ho, wo, c_out),
        "has_bias": bias is not None,
    }
    return out.reshape(n, ho, wo, c_out), ctx


def conv2d_backward(ctx, grad_out):
    if grad_out.shape != ctx["out_shape"]:
        raise ShapeError(f"grad shape {grad_out.shape} != forward output {ctx['out_shape']}")
    kernel = ctx["kernel"]
    kh, kw, c_in, c_out = kernel.shape
    n, ho, wo, _ = ctx["out_shape"]
    stride = ctx["stride"]
    g2 = grad_out.reshape(-1, c_out)
    grad_kernel = (ctx["cols"].T @ g2).reshape(kernel.shape)
    grad_bias = g2.sum(axis=0) if ctx["has_bias"] else None
    dcols = g2 @ kernel.reshape(kh * kw * c_in, c_out).T
    dxp = np.zeros(ctx["xp_shape"], dtype=grad_out.dtype)
    if kh == 1 and kw == 1:
        dxp[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride, :] += dcols.reshape(
            n, ho, wo, c_in
        )
    else:
        _scatter_windows(dxp, dcols.reshape(n, ho, wo, kh, kw, c_in), stride, ho, wo)
    grad_x = _unpad(dxp, *ctx["pad"])
    return grad_x, grad_kernel, grad_bias


def depthwise_conv2d_forward(x, kernel, bias, stride=1, padding="same"):
    """Per-channel spatial filtering with a ``[kh, kw, C, 1]`` kernel."""
    if x.ndim != 4:
        raise ShapeError(f"depthwise conv expects NHWC input, got shape {x.shape}")
    kh, kw, c, mult = kernel.shape
    if mult != 1:
        raise ShapeError(f"depthwise kernel must have multiplier 1, got shape {kernel.shape}")
    if x.shape[3] != c:
        raise ShapeError(f"depthwise channel mismatch: input has {x.shape[3]}, kernel expects {c}")
    ho, wo, pad_h, pad_w = _pad_geometry(x.shape, kh, kw, stride, padding)
    xp = np.pad(x, ((0, 0), pad_h, pad_w, (0, 0))) if (sum(pad_h) or sum(pad_w)) else x
    win = _windows(xp, kh, kw, stride, ho, wo)
    k = kernel[:, :, :, 0]
    out = np.einsum("nhwckl,klc->nhwc", win, k, optimize=True)
    if bias is not None:
        out = out + bias
    ctx = {
        "win": win,
        "kernel": kernel,
        "xp_shape": xp.shape,
        "stride": stride,
        "pad": (pad_h, pad_w),
        "out_shape": out.shape,
        "has_bias": bias is not None,
    }
    return out, ctx


def depthwise_conv2d_backward(ctx, grad_out):
    if grad_out.shape != ctx["out_shape"]:
        raise ShapeError(f"grad shape {grad_out.shape} != forward output {ctx['out_shape']}")
    kernel = ctx["kernel"]
    kh, kw, c, _ = kernel.shape
    _, ho, wo, _ = grad_out.shape
    stride = ctx["stride"]
    grad_kernel = np.einsum("nhwckl,nhwc->klc", ctx["win"], grad_out, optimize=True)[..., None]
    grad_bias = grad_out.sum(axis=(0, 1, 2)) if ctx["has_bias"] else None
    dxp = np.zeros(ctx["xp_shape"], dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += (
                grad_out * kernel[i, j, :, 0]
            )
    return _unpad(dxp, *ctx["pad"]), grad_kernel, grad_bias


def pointwise_conv2d_forward(x, kernel, bias):
    if kernel.shape[:2] != (1, 1):
        raise ShapeError(f"pointwise kernel must be 1x1, got {kernel.shape}")
    return conv2d_forward(x, kernel, bias, stride=1, padding="valid")


pointwise_conv2d_backward = conv2d_backward


# -- normalization ------------------------------------------------------------


def batchnorm_forward(
    x, gamma, beta, running_mean, running_var, mode="train", momentum=BN_MOMENTUM, eps=BN_EPS
):
    """Per-channel batch normalization over every axis but the last.

    Returns ``(out, ctx, (new_running_mean, new_running_var))``; running
    statistics are returned rather than mutated.
    """
    c = x.shape[-1]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p.shape != (c,):
            raise ShapeError(f"batchnorm {name} shape {p.shape} != ({c},)")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        if x.shape[0] < 2:
            raise ShapeError("batchnorm in train mode needs a batch of at least 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        new_stats = (
            momentum * running_mean + (1.0 - momentum) * mean,
            momentum * running_var + (1.0 - momentum) * var,
        )
    elif mode == "infer":
        mean, var = running_mean, running_var
        new_stats = (running_mean, running_var)
    else:
        raise DomainError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    out = xhat * gamma + beta
    ctx = {"xhat": xhat, "inv_std": inv_std, "gamma": gamma, "mode": mode, "shape": x.shape}
    return out, ctx, new_stats


def batchnorm_backward(ctx, grad_out):
    if grad_out.shape != ctx["shape"]:
        raise ShapeError(f"grad shape {grad_out.shape} != forward output {ctx['shape']}")
    xhat = ctx["xhat"]
    axes = tuple(range(grad_out.ndim - 1))
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    scale = ctx["gamma"] * ctx["inv_std"]
    if ctx["mode"] == "infer":
        return grad_out * scale, grad_gamma, grad_beta
    m = grad_out.size // grad_out.shape[-1]
    grad_x = (scale / m) * (m * grad_out - grad_beta - xhat * grad_gamma)
    return grad_x, grad_gamma, grad_beta


# -- activations, pooling, dropout -------------------------------------------


def relu_forward(x):
    mask = x > 0
    return x * mask, {"mask": mask}


def relu_backward(ctx, grad_out):
    return grad_out * ctx["mask"]


def maxpool2d_forward(x, pool=3, stride=2, padding="valid"):
    """Window max; ties resolve to the first position in row-major order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool expects NHWC input, got shape {x.shape}")
    if padding == "valid" and (pool > x.shape[1] or pool > x.shape[2]):
        raise ShapeError(f"pool window {pool}x{pool} larger than input {x.shape[1]}x{x.shape[2]}")
    ho, wo, pad_h, pad_w = _pad_geometry(x.shape, pool, pool, stride, padding)
    if sum(pad_h) or sum(pad_w):
        xp = np.pad(x, ((0, 0), pad_h, pad_w, (0, 0)), constant_values=-np.inf)
    else:
        xp = x
    win = _windows(xp, pool, pool, stride, ho, wo)
    n, _, _, c = x.shape
    flat = win.reshape(n, ho, wo, c, pool * pool)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    ctx = {
        "arg": arg,
        "pool": pool,
        "stride": stride,
        "xp_shape": xp.shape,
        "pad": (pad_h, pad_w),
        "out_shape": out.shape,
    }
    return np.ascontiguousarray(out), ctx


def maxpool2d_backward(ctx, grad_out):
    if grad_out.shape != ctx["out_shape"]:
        raise ShapeError(f"grad shape {grad_out.shape} != forward output {ctx['out_shape']}")
    pool, stride, arg = ctx["pool"], ctx["stride"], ctx["arg"]
    _, ho, wo, _ = grad_out.shape
    dxp = np.zeros(ctx["xp_shape"], dtype=grad_out.dtype)
    for i in range(pool):
        for j in range(pool):
            routed = grad_out * (arg == i * pool + j)
            dxp[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += routed
    return _unpad(dxp, *ctx["pad"])


def dropout_forward(x, rate, rng, mode="train"):
    """Inverted dropout; ``rng`` is a ``numpy.random.Generator``."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x, {"mask": None}
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / (1.0 - rate)
    return x * mask, {"mask": mask}


def dropout_backward(ctx, grad_out):
    if ctx["mask"] is None:
        return grad_out
    return grad_out * ctx["mask"]


# -- dense and loss -----------------------------------------------------------


def dense_forward(x, weight, bias):
    if x.ndim != 2:
        raise ShapeError(f"dense expects [N, d_in] input, got {x.shape}")
    if weight.shape[0] != x.shape[1]:
        raise ShapeError(f"dense weight {weight.shape} does not accept input width {x.shape[1]}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense bias shape {bias.shape} != ({weight.shape[1]},)")
    return x @ weight + bias, {"x": x, "weight": weight}


def dense_backward(ctx, grad_out):
    x, w = ctx["x"], ctx["weight"]
    if grad_out.shape != (x.shape[0], w.shape[1]):
        raise ShapeError(f"grad shape {grad_out.shape} != forward output {(x.shape[0], w.shape[1])}")
    return grad_out @ w.T, x.T @ grad_out, grad_out.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [N, K], got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DomainError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad /= n
    return float(loss), grad
