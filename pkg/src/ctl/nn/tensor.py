"""Parameter tensors: a float array plus an optional gradient buffer.

Activations flowing between layers are plain numpy arrays; Tensor wraps
the learnable state so optimizers and checkpoints can treat parameters
uniformly.  Storage is float32 by default; gradient-check mode builds
everything in float64.
"""

import numpy as np


class Tensor:
    """A parameter array with a lazily allocated gradient slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def add_grad(self, g):
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype})"


def he_normal(stream, shape, fan_in, dtype=np.float32):
    """He-normal initialization: std = sqrt(2 / fan_in)."""
    std = np.sqrt(2.0 / fan_in)
    return stream.normal_field(shape, std=std).astype(dtype)
