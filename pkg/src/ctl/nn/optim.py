"""Adam and SGD-with-momentum, the two update rules used for training.

Weight decay is decoupled: parameters shrink by lr * weight_decay * theta
immediately before the gradient-based update, so the decay never enters
the moment estimates.  Updates are plain numpy arithmetic in parameter
order, hence bit-deterministic for identical inputs.
"""

import numpy as np


class Adam:
    """Bias-corrected Adam (pretraining default: lr 1e-2, decay 1e-6)."""

    kind = "adam"

    def __init__(self, params, learning_rate=1e-2, beta1=0.9, beta2=0.999,
                 epsilon=1e-8, weight_decay=1e-6):
        self.params = list(params)  # (name, Tensor) pairs
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(t.data) for _, t in self.params]
        self.v = [np.zeros_like(t.data) for _, t in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        lr, b1, b2 = self.learning_rate, self.beta1, self.beta2
        bias1 = 1.0 - b1 ** t
        bias2 = 1.0 - b2 ** t
        for i, (name, p) in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if g.shape != self.m[i].shape:
                raise ValueError(f"gradient shape {g.shape} does not match "
                                 f"moment shape {self.m[i].shape} for {name!r}")
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / bias1
            v_hat = self.v[i] / bias2
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.epsilon)

    def state_blobs(self):
        """Moment buffers as named arrays, for optional checkpointing."""
        out = {"step_count": np.array([self.step_count], dtype=np.float32)}
        for i, (name, _) in enumerate(self.params):
            out[f"m/{name}"] = self.m[i]
            out[f"v/{name}"] = self.v[i]
        return out


class SgdMomentum:
    """v <- momentum*v - lr*g; theta <- theta + v (downstream default)."""

    kind = "sgd_momentum"

    def __init__(self, params, learning_rate=5e-3, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.step_count = 0
        self.velocity = [np.zeros_like(t.data) for _, t in self.params]

    def step(self):
        self.step_count += 1
        lr = self.learning_rate
        for i, (name, p) in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if g.shape != self.velocity[i].shape:
                raise ValueError(f"gradient shape {g.shape} does not match "
                                 f"velocity shape {self.velocity[i].shape} for {name!r}")
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            self.velocity[i] = self.momentum * self.velocity[i] - lr * g
            p.data += self.velocity[i]

    def state_blobs(self):
        out = {"step_count": np.array([self.step_count], dtype=np.float32)}
        for i, (name, _) in enumerate(self.params):
            out[f"velocity/{name}"] = self.velocity[i]
        return out
