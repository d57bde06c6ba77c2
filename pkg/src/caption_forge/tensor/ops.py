"""Forward and backward kernels for the fixed op vocabulary.

Every forward function returns ``(output, cache)`` and every backward
function takes ``(upstream, cache)`` and returns one gradient per
differentiable input, in argument order.  Tensors are plain float64
numpy arrays in NCHW layout.
"""

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives inputs whose extents do not agree."""


@dataclass
class ConvParams:
    weight: np.ndarray  # (out_channels, in_channels, kh, kw)
    bias: np.ndarray  # (out_channels,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"conv bias shape {self.bias.shape} does not match out_channels={self.weight.shape[0]}"
            )
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def output_hw(self, h, w):
        kh, kw = self.weight.shape[2:]
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        return ho, wo


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = self.gamma.shape
        if any(getattr(self, k).shape != n for k in ("beta", "running_mean", "running_var")):
            raise ShapeError("batch norm parameter vectors must share one length")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def identity(cls, channels, **kwargs):
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            **kwargs,
        )


# -- conv2d ---------------------------------------------------------------


def _im2col(x, kh, kw, stride, padding):
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, ho, wo, c, kh, kw))
    for i in range(kh):
        for j in range(kw):
            patch = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    return cols, ho, wo


def conv2d_forward(x, weight, bias, stride=1, padding=0):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"input channels {c} != kernel in_channels {ci}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"input spatial extent {h}x{w} too small for kernel {kh}x{kw} "
            f"with stride {stride} and padding {padding}"
        )
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    cols2d = cols.reshape(n * ho * wo, c * kh * kw)
    out = cols2d @ weight.reshape(o, -1).T + bias
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    return out, (x.shape, cols2d, weight, stride, padding)


def conv2d_backward(dout, cache):
    x_shape, cols2d, weight, stride, padding = cache
    n, c, h, w = x_shape
    o, _, kh, kw = weight.shape
    ho, wo = dout.shape[2:]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dweight = (d2.T @ cols2d).reshape(weight.shape)
    dbias = d2.sum(axis=0)
    dcols = (d2 @ weight.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
    return np.ascontiguousarray(dx), dweight, dbias


def conv2d(x, params):
    """Convolve an NCHW tensor with ``params`` (zero padding, cross-correlation)."""
    x = np.asarray(x, dtype=np.float64)
    return conv2d_forward(x, params.weight, params.bias, params.stride, params.padding)[0]


# -- batch norm -----------------------------------------------------------


def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_view(v, ndim):
    return v if ndim == 2 else v[None, :, None, None]


def batch_norm_forward(x, gamma, beta, params, mode="train"):
    """Normalize per channel.

    In train mode the batch statistics are used and ``params`` running
    statistics are updated in place; that update is the op's only side
    effect.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm expects (N, C) or NCHW input, got {x.shape}")
    if x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"channel dim {x.shape[1]} != batch norm length {gamma.shape[0]}")
    axes = _bn_axes(x)
    if mode == "train":
        if x.shape[0] == 0:
            raise ValueError("batch_norm in train mode needs a non-empty batch")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = params.momentum
        params.running_mean = (1 - m) * params.running_mean + m * mean
        params.running_var = (1 - m) * params.running_var + m * var
    elif mode == "infer":
        mean, var = params.running_mean, params.running_var
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + params.epsilon)
    xhat = (x - _bn_view(mean, x.ndim)) * _bn_view(inv_std, x.ndim)
    out = xhat * _bn_view(gamma, x.ndim) + _bn_view(beta, x.ndim)
    return out, (xhat, inv_std, gamma, mode, axes)


def batch_norm_backward(dout, cache):
    xhat, inv_std, gamma, mode, axes = cache
    nd = xhat.ndim
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * _bn_view(gamma, nd)
    if mode == "infer":
        return dxhat * _bn_view(inv_std, nd), dgamma, dbeta
    m = xhat.size // xhat.shape[1]
    dx = (
        _bn_view(inv_std, nd)
        / m
        * (
            m * dxhat
            - _bn_view(dxhat.sum(axis=axes), nd)
            - xhat * _bn_view((dxhat * xhat).sum(axis=axes), nd)
        )
    )
    return dx, dgamma, dbeta


def batch_norm(x, params, mode="train"):
    x = np.asarray(x, dtype=np.float64)
    return batch_norm_forward(x, params.gamma, params.beta, params, mode)[0]


# -- elementwise ----------------------------------------------------------


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(dout, mask):
    # relu'(0) is 0
    return (dout * mask,)


def relu(x):
    return relu_forward(np.asarray(x, dtype=np.float64))[0]


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_OPEN_UNIT = (np.finfo(np.float64).tiny, np.nextafter(1.0, 0.0))


def sigmoid_forward(x):
    # keep outputs strictly inside (0, 1) where float64 would round to 0 or 1
    s = np.clip(_stable_sigmoid(np.asarray(x, dtype=np.float64)), *_OPEN_UNIT)
    return s, s


def sigmoid_backward(dout, s):
    return (dout * s * (1.0 - s),)


def sigmoid(x):
    """Elementwise logistic function; never normalizes across elements."""
    return sigmoid_forward(x)[0]


def tanh_forward(x):
    t = np.tanh(x)
    return t, t


def tanh_backward(dout, t):
    return (dout * (1.0 - t * t),)


def add_forward(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ in shape: {a.shape} vs {b.shape}")
    return a + b, None


def add_backward(dout, cache):
    return dout, dout


# -- pooling / dense ------------------------------------------------------


def global_avg_pool_forward(x):
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dout, shape):
    h, w = shape[2:]
    return (np.broadcast_to(dout[:, :, None, None] / (h * w), shape).copy(),)


def global_avg_pool(x):
    """Mean over each channel's spatial plane; any H, W >= 1."""
    return global_avg_pool_forward(np.asarray(x, dtype=np.float64))[0]


def affine_forward(x, weight, bias):
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"affine expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine inner dimensions disagree: input {x.shape[1]} vs weight {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine bias shape {bias.shape} != ({weight.shape[1]},)")
    return x @ weight + bias, (x, weight)


def affine_backward(dout, cache):
    x, weight = cache
    return dout @ weight.T, x.T @ dout, dout.sum(axis=0)


def affine(x, weight, bias):
    """``x @ weight + bias`` with weight laid out (in_dim, out_dim)."""
    return affine_forward(
        np.asarray(x, dtype=np.float64), np.asarray(weight, dtype=np.float64), np.asarray(bias, dtype=np.float64)
    )[0]


def l2_normalize_forward(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero vector")
    y = x / norms
    return y, (y, norms)


def l2_normalize_backward(dout, cache):
    y, norms = cache
    return ((dout - y * (dout * y).sum(axis=1, keepdims=True)) / norms,)


# -- losses ---------------------------------------------------------------


def bce_with_logits_forward(logits, targets):
    """Mean per-tag binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {logits.shape} and targets {targets.shape} differ")
    loss = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    return loss.mean(), (logits, targets)


def bce_with_logits_backward(dout, cache):
    logits, targets = cache
    return (dout * (_stable_sigmoid(logits) - targets) / logits.size,)


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def dmsm_softmax_loss_forward(image_emb, caption_emb, negatives, gamma):
    """Mean of -log softmax over [positive, R negatives] of gamma * cosine.

    ``negatives`` is an (B, R) index array into the caption rows; row i's
    positive is caption row i.  Embeddings are expected unit-norm so the
    dot product is the cosine.
    """
    b = image_emb.shape[0]
    if caption_emb.shape != image_emb.shape:
        raise ShapeError(f"image {image_emb.shape} and caption {caption_emb.shape} embeddings differ")
    idx = np.concatenate([np.arange(b)[:, None], np.asarray(negatives, dtype=np.intp)], axis=1)
    cos = np.einsum("bd,brd->br", image_emb, caption_emb[idx])
    logp = _log_softmax(gamma * cos)
    return -logp[:, 0].mean(), (image_emb, caption_emb, idx, np.exp(logp), gamma)


def dmsm_softmax_loss_backward(dout, cache):
    image_emb, caption_emb, idx, p, gamma = cache
    b = image_emb.shape[0]
    dlogit = p.copy()
    dlogit[:, 0] -= 1.0
    dcos = dout * gamma * dlogit / b
    dimg = np.einsum("br,brd->bd", dcos, caption_emb[idx])
    dcap = np.zeros_like(caption_emb)
    np.add.at(dcap, idx.ravel(), (dcos[:, :, None] * image_emb[:, None, :]).reshape(-1, image_emb.shape[1]))
    return dimg, dcap


def logistic_loss_forward(logits, targets):
    """Mean negative log-likelihood of 0/1 targets under sigmoid(logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {logits.shape} and targets {targets.shape} differ")
    loss = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    return loss.mean(), (logits, targets)


def logistic_loss_backward(dout, cache):
    logits, targets = cache
    return (dout * (_stable_sigmoid(logits) - targets) / logits.size,)


@dataclass(frozen=True)
class OpSpec:
    forward: object
    backward: object
    n_inputs: int
    attrs: tuple = field(default=())


OPS = {
    "conv2d": OpSpec(conv2d_forward, conv2d_backward, 3, ("stride", "padding")),
    "batch_norm": OpSpec(batch_norm_forward, batch_norm_backward, 3, ("params", "mode")),
    "relu": OpSpec(relu_forward, relu_backward, 1),
    "sigmoid": OpSpec(sigmoid_forward, sigmoid_backward, 1),
    "tanh": OpSpec(tanh_forward, tanh_backward, 1),
    "add": OpSpec(add_forward, add_backward, 2),
    "global_avg_pool": OpSpec(global_avg_pool_forward, global_avg_pool_backward, 1),
    "affine": OpSpec(affine_forward, affine_backward, 3),
    "l2_normalize": OpSpec(l2_normalize_forward, l2_normalize_backward, 1),
    "bce_with_logits": OpSpec(bce_with_logits_forward, bce_with_logits_backward, 1, ("targets",)),
    "dmsm_softmax_loss": OpSpec(
        dmsm_softmax_loss_forward, dmsm_softmax_loss_backward, 2, ("negatives", "gamma")
    ),
    "logistic_loss": OpSpec(logistic_loss_forward, logistic_loss_backward, 1, ("targets",)),
}
