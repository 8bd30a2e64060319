"""Parameterized 1D layers: conv, transposed conv, pooling, norms, attention.

Convolutions use the cross-correlation convention (no kernel flip) and are
implemented as a short loop over kernel taps, each tap a BLAS matmul via
tensordot, so batched forward/backward stay fast in pure numpy.

Backward rules live in module-level ``_*_grads`` helpers so a verification
harness can swap one out and confirm the gradient checker catches it.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    ShapeMismatch,
    Tensor,
    accumulate_grad,
    add,
    apply_op,
    bmm,
    cat,
    matmul,
    mul,
    narrow,
    relu,
    reshape,
    softmax_last,
    transpose_last,
)

__all__ = [
    "Conv1d",
    "ConvTranspose1d",
    "BatchNorm1d",
    "LayerNorm",
    "Linear",
    "MultiHeadSelfAttention",
    "FeedForward",
    "TransformerEncoderLayer",
    "conv1d",
    "conv_transpose1d",
    "maxpool1d",
    "layer_norm",
    "positional_encoding",
]


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# convolution


def conv_out_len(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def _conv1d_forward(x, w, stride, padding):
    batch, _, length = x.shape
    c_out, _, kernel = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    out_len = conv_out_len(length, kernel, stride, padding)
    out = np.zeros((batch, c_out, out_len))
    span = (out_len - 1) * stride + 1
    for t in range(kernel):
        # (B, L', C_in) @ (C_in, C_out) per tap
        tap = np.tensordot(xp[:, :, t : t + span : stride], w[:, :, t], axes=([1], [1]))
        out += tap.transpose(0, 2, 1)
    return out, xp


def _conv1d_grads(g, xp, w, stride, padding, in_len):
    c_out, _, kernel = w.shape
    out_len = g.shape[2]
    span = (out_len - 1) * stride + 1
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for t in range(kernel):
        seg = xp[:, :, t : t + span : stride]
        gw[:, :, t] = np.tensordot(g, seg, axes=([0, 2], [0, 2]))
        gxp[:, :, t : t + span : stride] += np.tensordot(
            g, w[:, :, t], axes=([1], [0])
        ).transpose(0, 2, 1)
    gx = gxp[:, :, padding : padding + in_len] if padding else gxp
    gb = g.sum(axis=(0, 2))
    return gx, gw, gb


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate (B, C_in, L) with (C_out, C_in, k) weights."""
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeMismatch("conv1d", x.shape, weight.shape, detail="expects rank-3 input and weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatch("conv1d", x.shape, weight.shape, detail="channel counts differ")
    kernel = weight.shape[2]
    if x.shape[2] + 2 * padding < kernel:
        raise ShapeMismatch("conv1d", x.shape, weight.shape, detail="input shorter than kernel")

    out_data, xp = _conv1d_forward(x.data, weight.data, stride, padding)
    out_data += bias.data.reshape(1, -1, 1)
    in_len = x.shape[2]

    def backward(g, x=x, weight=weight, bias=bias, xp=xp):
        gx, gw, gb = _conv1d_grads(g, xp, weight.data, stride, padding, in_len)
        accumulate_grad(x, gx)
        accumulate_grad(weight, gw)
        accumulate_grad(bias, gb)

    return apply_op(out_data, (x, weight, bias), backward)


def _conv_transpose1d_forward(x, w, stride):
    batch, _, length = x.shape
    _, c_out, kernel = w.shape
    out_len = (length - 1) * stride + kernel
    out = np.zeros((batch, c_out, out_len))
    span = (length - 1) * stride + 1
    for t in range(kernel):
        out[:, :, t : t + span : stride] += np.tensordot(
            x, w[:, :, t], axes=([1], [0])
        ).transpose(0, 2, 1)
    return out


def _conv_transpose1d_grads(g, x, w, stride):
    _, _, kernel = w.shape
    length = x.shape[2]
    span = (length - 1) * stride + 1
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for t in range(kernel):
        seg = g[:, :, t : t + span : stride]
        gx += np.tensordot(seg, w[:, :, t], axes=([1], [1])).transpose(0, 2, 1)
        gw[:, :, t] = np.tensordot(x, seg, axes=([0, 2], [0, 2]))
    gb = g.sum(axis=(0, 2))
    return gx, gw, gb


def conv_transpose1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int) -> Tensor:
    """Adjoint of a stride-s conv: (B, C_in, L) -> (B, C_out, (L-1)*s + k)."""
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeMismatch("conv_transpose1d", x.shape, weight.shape)
    if x.shape[1] != weight.shape[0]:
        raise ShapeMismatch("conv_transpose1d", x.shape, weight.shape, detail="channel counts differ")

    out_data = _conv_transpose1d_forward(x.data, weight.data, stride)
    out_data += bias.data.reshape(1, -1, 1)

    def backward(g, x=x, weight=weight, bias=bias):
        gx, gw, gb = _conv_transpose1d_grads(g, x.data, weight.data, stride)
        accumulate_grad(x, gx)
        accumulate_grad(weight, gw)
        accumulate_grad(bias, gb)

    return apply_op(out_data, (x, weight, bias), backward)


def maxpool1d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping window maxima; ties route gradient to the first index."""
    if x.ndim != 3:
        raise ShapeMismatch("maxpool1d", x.shape, detail="expects rank 3")
    batch, channels, length = x.shape
    if length % window != 0:
        raise ShapeMismatch("maxpool1d", x.shape, detail=f"length not divisible by {window}")
    blocks = x.data.reshape(batch, channels, length // window, window)
    arg = blocks.argmax(axis=-1)  # argmax picks the first maximal index
    out_data = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g, x=x, arg=arg, shape=(batch, channels, length // window, window)):
        gb = np.zeros(shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        accumulate_grad(x, gb.reshape(x.shape))

    return apply_op(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# normalization


def _batchnorm_grads(g, x_hat, inv_std, gamma):
    m = g.shape[0] * g.shape[2]
    gg = g * gamma.reshape(1, -1, 1)
    mean_gg = gg.mean(axis=(0, 2), keepdims=True)
    mean_ggx = (gg * x_hat).mean(axis=(0, 2), keepdims=True)
    gx = inv_std.reshape(1, -1, 1) * (gg - mean_gg - x_hat * mean_ggx)
    ggamma = (g * x_hat).sum(axis=(0, 2))
    gbeta = g.sum(axis=(0, 2))
    return gx, ggamma, gbeta, m


class BatchNorm1d:
    """Per-channel normalization over (batch, length) with running statistics.

    Training mode normalizes with biased batch statistics and updates the
    running estimates by exponential moving average; eval mode uses the
    running estimates only.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor, training: bool) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.gamma.size:
            raise ShapeMismatch("batchnorm1d", x.shape, (self.gamma.size,))
        if training:
            if x.shape[0] * x.shape[2] < 2:
                raise ShapeMismatch("batchnorm1d", x.shape, detail="need batch*length >= 2 to estimate statistics")
            mean = x.data.mean(axis=(0, 2))
            var = x.data.var(axis=(0, 2))
            self.running_mean += self.momentum * (mean - self.running_mean)
            self.running_var += self.momentum * (var - self.running_var)
        else:
            mean, var = self.running_mean, self.running_var

        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x.data - mean.reshape(1, -1, 1)) * inv_std.reshape(1, -1, 1)
        out_data = self.gamma.data.reshape(1, -1, 1) * x_hat + self.beta.data.reshape(1, -1, 1)

        gamma, beta = self.gamma, self.beta
        if training:

            def backward(g, x=x, x_hat=x_hat, inv_std=inv_std):
                gx, ggamma, gbeta, _ = _batchnorm_grads(g, x_hat, inv_std, gamma.data)
                accumulate_grad(x, gx)
                accumulate_grad(gamma, ggamma)
                accumulate_grad(beta, gbeta)

        else:
            scale = (gamma.data * inv_std).reshape(1, -1, 1)

            def backward(g, x=x, x_hat=x_hat, scale=scale):
                accumulate_grad(x, g * scale)
                accumulate_grad(gamma, (g * x_hat).sum(axis=(0, 2)))
                accumulate_grad(beta, g.sum(axis=(0, 2)))

        return apply_op(out_data, (x, gamma, beta), backward)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def state_arrays(self):
        """Non-trained buffers that still belong in a checkpoint."""
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (feature) axis, one token at a time."""
    if x.shape[-1] != gamma.size:
        raise ShapeMismatch("layer_norm", x.shape, gamma.shape)
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean) * inv_std
    gshape = (1,) * (x.ndim - 1) + (gamma.size,)
    out_data = gamma.data.reshape(gshape) * x_hat + beta.data.reshape(gshape)
    lead_axes = tuple(range(x.ndim - 1))

    def backward(g, x=x, gamma=gamma, beta=beta, x_hat=x_hat, inv_std=inv_std):
        gg = g * gamma.data.reshape(gshape)
        mean_gg = gg.mean(axis=-1, keepdims=True)
        mean_ggx = (gg * x_hat).mean(axis=-1, keepdims=True)
        accumulate_grad(x, inv_std * (gg - mean_gg - x_hat * mean_ggx))
        accumulate_grad(gamma, (g * x_hat).sum(axis=lead_axes))
        accumulate_grad(beta, g.sum(axis=lead_axes))

    return apply_op(out_data, (x, gamma, beta), backward)


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


# ---------------------------------------------------------------------------
# layer classes


class Conv1d:
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, *, rng: np.random.Generator):
        fan_in = in_channels * kernel_size
        self.weight = Tensor(
            _uniform_init(rng, (out_channels, in_channels, kernel_size), fan_in),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class ConvTranspose1d:
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int, *, rng: np.random.Generator):
        fan_in = in_channels * kernel_size
        self.weight = Tensor(
            _uniform_init(rng, (in_channels, out_channels, kernel_size), fan_in),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose1d(x, self.weight, self.bias, self.stride)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class Linear:
    def __init__(self, in_features: int, out_features: int, *, rng: np.random.Generator,
                 bias: bool = True):
        self.weight = Tensor(
            _uniform_init(rng, (in_features, out_features), in_features),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        orig_shape = x.shape
        if x.ndim == 3:
            x = reshape(x, (orig_shape[0] * orig_shape[1], orig_shape[2]))
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = add(y, self.bias)
        if len(orig_shape) == 3:
            y = reshape(y, (orig_shape[0], orig_shape[1], self.weight.shape[1]))
        return y

    def parameters(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out


def positional_encoding(tokens: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal table: even columns sin, odd columns cos."""
    if dim % 2 != 0:
        raise ShapeMismatch("positional_encoding", (tokens, dim), detail="dim must be even")
    pos = np.arange(tokens)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((tokens, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


class MultiHeadSelfAttention:
    """Scaled dot-product attention across H heads, concatenated and projected.

    Input is (B, T, d); each batch element's sequence attends to itself only.
    Projections carry no bias terms.
    """

    def __init__(self, dim: int, heads: int, *, rng: np.random.Generator):
        if dim % heads != 0:
            raise ShapeMismatch("mhsa", (dim,), (heads,), detail="heads must divide dim")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.w_q = Tensor(_uniform_init(rng, (dim, dim), dim), requires_grad=True)
        self.w_k = Tensor(_uniform_init(rng, (dim, dim), dim), requires_grad=True)
        self.w_v = Tensor(_uniform_init(rng, (dim, dim), dim), requires_grad=True)
        self.w_o = Tensor(_uniform_init(rng, (dim, dim), dim), requires_grad=True)

    def _project(self, x2: Tensor, w: Tensor, batch: int, tokens: int) -> Tensor:
        return reshape(matmul(x2, w), (batch, tokens, self.dim))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[2] != self.dim:
            raise ShapeMismatch("mhsa", x.shape, (self.dim,))
        batch, tokens, dim = x.shape
        x2 = reshape(x, (batch * tokens, dim))
        q = self._project(x2, self.w_q, batch, tokens)
        k = self._project(x2, self.w_k, batch, tokens)
        v = self._project(x2, self.w_v, batch, tokens)

        scale = 1.0 / math.sqrt(self.head_dim)
        heads_out = []
        for h in range(self.heads):
            lo = h * self.head_dim
            qh = narrow(q, 2, lo, self.head_dim)
            kh = narrow(k, 2, lo, self.head_dim)
            vh = narrow(v, 2, lo, self.head_dim)
            scores = mul(bmm(qh, transpose_last(kh)), scale)
            attn = softmax_last(scores)
            heads_out.append(bmm(attn, vh))
        merged = cat(heads_out, axis=2)
        out = matmul(reshape(merged, (batch * tokens, dim)), self.w_o)
        return reshape(out, (batch, tokens, dim))

    def attention_weights(self, x: Tensor) -> np.ndarray:
        """Per-head attention rows for inspection: (H, B, T, T)."""
        batch, tokens, dim = x.shape
        x2 = reshape(x, (batch * tokens, dim))
        q = self._project(x2, self.w_q, batch, tokens)
        k = self._project(x2, self.w_k, batch, tokens)
        scale = 1.0 / math.sqrt(self.head_dim)
        rows = []
        for h in range(self.heads):
            lo = h * self.head_dim
            qh = narrow(q, 2, lo, self.head_dim)
            kh = narrow(k, 2, lo, self.head_dim)
            rows.append(softmax_last(mul(bmm(qh, transpose_last(kh)), scale)).data)
        return np.stack(rows)

    def parameters(self):
        return [("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v), ("w_o", self.w_o)]


class FeedForward:
    """Position-wise two-layer MLP with ReLU."""

    def __init__(self, dim: int, hidden: int, *, rng: np.random.Generator):
        self.lin1 = Linear(dim, hidden, rng=rng)
        self.lin2 = Linear(hidden, dim, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.lin2.forward(relu(self.lin1.forward(x)))

    def parameters(self):
        return [(f"lin1.{n}", t) for n, t in self.lin1.parameters()] + [
            (f"lin2.{n}", t) for n, t in self.lin2.parameters()
        ]


class TransformerEncoderLayer:
    """Post-norm encoder layer: LN(x + attention(x)), then LN(u + mlp(u))."""

    def __init__(self, dim: int, heads: int, d_ff: int, *, rng: np.random.Generator):
        self.attn = MultiHeadSelfAttention(dim, heads, rng=rng)
        self.ff = FeedForward(dim, d_ff, rng=rng)
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        u = self.norm1.forward(add(x, self.attn.forward(x)))
        return self.norm2.forward(add(u, self.ff.forward(u)))

    def parameters(self):
        out = []
        for prefix, sub in (("attn", self.attn), ("ff", self.ff), ("norm1", self.norm1), ("norm2", self.norm2)):
            out.extend((f"{prefix}.{name}", t) for name, t in sub.parameters())
        return out
