"""Layers of the from-scratch CNN substrate.

Every layer implements forward(x, training) and backward(dy); backward
returns the input gradient and accumulates parameter gradients on the
layer's Tensors.  Convolution runs as im2col + one BLAS matmul in the
storage dtype; statistical reductions (batch-norm moments, pooling means,
bias sums, softmax internals) accumulate in float64 regardless of the
storage dtype.  Layout is NCHW throughout.
"""

import numpy as np

from .tensor import Tensor, he_normal


def softmax(logits):
    """Row-wise stable softmax; rows sum to 1."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return out.astype(np.asarray(logits).dtype)


class Layer:
    """Base class; subclasses fill in _cache during forward."""

    def __init__(self):
        self._cache = None

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def params(self):
        """Trainable (name, Tensor) pairs."""
        return []

    def state(self):
        """Persistent non-trainable (name, Tensor) pairs (running stats)."""
        return []

    def _take_cache(self):
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        cache = self._cache
        self._cache = None
        return cache


class Conv2d(Layer):
    """2-D convolution (cross-correlation) with square-agnostic kernels.

    Weight shape is (out_channels, in_channels, kH, kW).  Layers feeding
    a batch norm are built without bias.
    """

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 bias=True, stream=None, dtype=np.float32):
        super().__init__()
        if stride < 1 or padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        if stream is None:
            w = np.zeros((out_channels, in_channels, kernel, kernel), dtype=dtype)
        else:
            w = he_normal(stream, (out_channels, in_channels, kernel, kernel), fan_in, dtype)
        self.weight = Tensor(w)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype)) if bias else None

    def params(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def _out_size(self, size):
        return (size + 2 * self.padding - self.kernel) // self.stride + 1

    def forward(self, x, training=False):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(
                f"conv2d expected {self.in_channels} input channels, got {c} "
                f"(input shape {x.shape})")
        oh, ow = self._out_size(h), self._out_size(w)
        if oh < 1 or ow < 1:
            raise ValueError(f"conv2d kernel {self.kernel} does not fit input {x.shape}")
        p, k, s = self.padding, self.kernel, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = xp[:, :, i : i + s * oh : s, j : j + s * ow : s]
        mat = np.ascontiguousarray(cols.transpose(0, 4, 5, 1, 2, 3)).reshape(n * oh * ow, -1)
        wmat = self.weight.data.reshape(self.out_channels, -1)
        out = mat @ wmat.T
        if self.bias is not None:
            out += self.bias.data
        self._cache = (mat, x.shape, (oh, ow))
        return np.ascontiguousarray(
            out.reshape(n, oh, ow, self.out_channels).transpose(0, 3, 1, 2))

    def backward(self, dy):
        mat, xshape, (oh, ow) = self._take_cache()
        n, c, h, w = xshape
        p, k, s = self.padding, self.kernel, self.stride
        dmat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(n * oh * ow, -1)
        self.weight.add_grad((dmat.T @ mat).reshape(self.weight.shape))
        if self.bias is not None:
            self.bias.add_grad(dmat.sum(axis=0, dtype=np.float64))
        dcols = (dmat @ self.weight.data.reshape(self.out_channels, -1))
        dcols = dcols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += dcols[:, :, i, j]
        return dxp[:, :, p : p + h, p : p + w] if p else dxp


class BatchNorm2d(Layer):
    """Per-channel batch normalization with affine scale and shift.

    Training mode normalizes by biased batch statistics and refreshes the
    running estimates as (1 - momentum)*old + momentum*new, with the
    unbiased variance feeding the running buffer.  Inference mode uses the
    running statistics.  Batch moments are computed in float64.
    """

    def __init__(self, channels, epsilon=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.channels = channels
        self.epsilon = epsilon
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype))
        self.beta = Tensor(np.zeros(channels, dtype=dtype))
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def state(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x, training=False):
        n, c, h, w = x.shape
        if c != self.channels:
            raise ValueError(f"batchnorm expected {self.channels} channels, got {c}")
        if training:
            if n < 2:
                raise ValueError("batchnorm training mode needs batch size >= 2")
            m = n * h * w
            mean64 = x.mean(axis=(0, 2, 3), dtype=np.float64)
            mean = mean64.astype(x.dtype)
            xm = x - mean.reshape(1, c, 1, 1)
            var64 = np.einsum("nchw,nchw->c", xm, xm, dtype=np.float64) / m
            invstd = (1.0 / np.sqrt(var64 + self.epsilon)).astype(x.dtype)
            xhat = xm * invstd.reshape(1, c, 1, 1)
            unbiased = var64 * m / (m - 1) if m > 1 else var64
            mom = self.momentum
            rdtype = self.running_mean.dtype
            self.running_mean.data = ((1 - mom) * self.running_mean.data
                                      + mom * mean64.astype(rdtype))
            self.running_var.data = ((1 - mom) * self.running_var.data
                                     + mom * unbiased.astype(rdtype))
            self._cache = (xhat, invstd, m)
        else:
            mean = self.running_mean.data.astype(x.dtype)
            invstd = (1.0 / np.sqrt(self.running_var.data.astype(np.float64)
                                    + self.epsilon)).astype(x.dtype)
            xhat = (x - mean.reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)
            self._cache = (xhat, invstd, None)
        return xhat * self.gamma.data.reshape(1, c, 1, 1) + self.beta.data.reshape(1, c, 1, 1)

    def backward(self, dy):
        xhat, invstd, m = self._take_cache()
        c = self.channels
        dbeta = dy.sum(axis=(0, 2, 3), dtype=np.float64)
        self.beta.add_grad(dbeta)
        dgamma = np.einsum("nchw,nchw->c", dy, xhat, dtype=np.float64)
        self.gamma.add_grad(dgamma)
        if m is None:  # inference mode: running stats are constants
            return dy * (self.gamma.data * invstd).reshape(1, c, 1, 1)
        scale = (self.gamma.data * invstd).reshape(1, c, 1, 1) / m
        dx = scale * (m * dy
                      - xhat * dgamma.astype(dy.dtype).reshape(1, c, 1, 1)
                      - dbeta.astype(dy.dtype).reshape(1, c, 1, 1))
        return dx.astype(dy.dtype, copy=False)


class ReLU(Layer):
    def forward(self, x, training=False):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._take_cache()


class GlobalAvgPool(Layer):
    """NCHW -> NC mean over the spatial axes."""

    def forward(self, x, training=False):
        self._cache = x.shape
        return x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def backward(self, dy):
        n, c, h, w = self._take_cache()
        return np.broadcast_to((dy / (h * w)).reshape(n, c, 1, 1), (n, c, h, w)).astype(dy.dtype)


class Dense(Layer):
    """Fully connected layer; weight shape (out_features, in_features)."""

    def __init__(self, in_features, out_features, stream=None, dtype=np.float32):
        super().__init__()
        if stream is None:
            w = np.zeros((out_features, in_features), dtype=dtype)
        else:
            w = he_normal(stream, (out_features, in_features), in_features, dtype)
        self.weight = Tensor(w)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype))

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, training=False):
        if x.shape[1] != self.weight.shape[1]:
            raise ValueError(
                f"dense expected {self.weight.shape[1]} features, got {x.shape[1]}")
        self._cache = x
        return x @ self.weight.data.T + self.bias.data

    def backward(self, dy):
        x = self._take_cache()
        self.weight.add_grad(dy.T @ x)
        self.bias.add_grad(dy.sum(axis=0, dtype=np.float64))
        return dy @ self.weight.data


class Sequential(Layer):
    """Named composition of layers."""

    def __init__(self, children):
        super().__init__()
        self.children = list(children)  # (name, layer) pairs

    def forward(self, x, training=False):
        for _, layer in self.children:
            x = layer.forward(x, training=training)
        self._cache = True
        return x

    def backward(self, dy):
        self._take_cache()
        for _, layer in reversed(self.children):
            dy = layer.backward(dy)
        return dy

    def params(self):
        return [(f"{name}/{sub}", t) for name, layer in self.children
                for sub, t in layer.params()]

    def state(self):
        return [(f"{name}/{sub}", t) for name, layer in self.children
                for sub, t in layer.state()]


class Residual(Layer):
    """Main branch plus skip branch, joined by addition and a ReLU."""

    def __init__(self, main, skip=None):
        super().__init__()
        self.main = main
        self.skip = skip  # None means identity

    def forward(self, x, training=False):
        y = self.main.forward(x, training=training)
        s = self.skip.forward(x, training=training) if self.skip is not None else x
        if y.shape != s.shape:
            raise ValueError(f"residual branches disagree: {y.shape} vs {s.shape}")
        z = y + s
        mask = z > 0
        self._cache = mask
        return z * mask

    def backward(self, dy):
        d = dy * self._take_cache()
        dx_main = self.main.backward(d)
        dx_skip = self.skip.backward(d) if self.skip is not None else d
        return dx_main + dx_skip

    def params(self):
        out = [(f"main/{n}", t) for n, t in self.main.params()]
        if self.skip is not None:
            out += [(f"skip/{n}", t) for n, t in self.skip.params()]
        return out

    def state(self):
        out = [(f"main/{n}", t) for n, t in self.main.state()]
        if self.skip is not None:
            out += [(f"skip/{n}", t) for n, t in self.skip.state()]
        return out
