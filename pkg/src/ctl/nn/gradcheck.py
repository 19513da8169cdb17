"""Central finite-difference verification of analytic gradients.

The scalar probe loss is sum(T * output) for a fixed random T, so the
analytic gradient is one backward pass with upstream gradient T.  Checks
run in float64 (build layers with dtype=np.float64) with step h = 1e-3.
Agreement is measured per tensor over the sampled coordinates as
||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8) and must
stay below 1e-4; the vector norm keeps near-zero gradient coordinates,
whose central differences are dominated by h^2 truncation, from masking
the comparison of the gradient directions that matter.  Large tensors
are subsampled rather than swept coordinate by coordinate.
"""

import numpy as np

from ..rng import Stream
from .layers import BatchNorm2d, Conv2d, Dense, GlobalAvgPool, ReLU
from .network import NetworkSpec, build_network

DEFAULT_STEP = 1e-3
DEFAULT_BOUND = 1e-4


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def vector_relative_error(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def _sample_indices(n, samples, stream):
    if samples is None or n <= samples:
        return list(range(n))
    return sorted({stream.randint(n) for _ in range(samples)})


def fd_check_function(fn, x, h=DEFAULT_STEP, samples=None, stream=None):
    """Check a function returning (scalar_loss, grad_wrt_x).

    Returns the max relative error over the checked coordinates of x.
    """
    x = np.asarray(x, dtype=np.float64)
    _, grad = fn(x)
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    flat = x.reshape(-1)
    stream = stream or Stream(0, "fd")
    worst = 0.0
    for idx in _sample_indices(flat.size, samples, stream):
        orig = flat[idx]
        flat[idx] = orig + h
        up, _ = fn(x)
        flat[idx] = orig - h
        down, _ = fn(x)
        flat[idx] = orig
        numeric = (up - down) / (2.0 * h)
        worst = max(worst, relative_error(grad[idx], numeric))
    return worst


def check_module(module, x, stream, h=DEFAULT_STEP, samples=24, training=True):
    """FD-check input and parameter gradients of a layer or network.

    The module must expose forward/backward/params.  Returns the max
    relative error across all checked coordinates.
    """
    x = np.asarray(x, dtype=np.float64)
    probe = stream.spawn("probe")
    y = module.forward(x, training=training)
    t = probe.normal_field(y.shape)
    for _, p in module.params():
        p.zero_grad()
    dx = module.backward(t.astype(y.dtype))

    def loss_at():
        out = module.forward(x, training=training)
        return float((t * out).sum(dtype=np.float64))

    worst = 0.0
    targets = [("input", x.reshape(-1), np.asarray(dx, dtype=np.float64).reshape(-1))]
    for name, p in module.params():
        g = np.zeros(p.data.size) if p.grad is None else p.grad.reshape(-1)
        targets.append((name, p.data.reshape(-1), np.asarray(g, dtype=np.float64)))
    pick = stream.spawn("pick")
    for name, flat, grad in targets:
        analytic, numeric = [], []
        for idx in _sample_indices(flat.size, samples, pick.spawn(name)):
            orig = flat[idx]
            flat[idx] = orig + h
            up = loss_at()
            flat[idx] = orig - h
            down = loss_at()
            flat[idx] = orig
            analytic.append(grad[idx])
            numeric.append((up - down) / (2.0 * h))
        worst = max(worst, vector_relative_error(analytic, numeric))
    return worst


def _kink_free_normal(stream, shape, clearance=0.15):
    x = stream.normal_field(shape)
    return x + np.where(x >= 0, clearance, -clearance)


def _walk_layers(module):
    yield module
    for attr in ("encoder", "gap", "head", "main", "skip"):
        child = getattr(module, attr, None)
        if child is not None and hasattr(child, "forward"):
            yield from _walk_layers(child)
    for _, child in getattr(module, "children", []):
        yield from _walk_layers(child)


def condition_for_fd(module, stream):
    """Bias every pre-ReLU activation away from zero.

    Central differences cannot cross a ReLU kink without picking up an
    O(h) error, so composed networks are checked at a parameter point
    where every preactivation is far from zero: batch-norm shifts
    alternate +-8 per channel (the same alternation on both residual
    branches, so the joined activations sit near +-16), while gains stay
    near 1 so that the h = 1e-3 probe remains a small relative
    perturbation.  Dense layers get the same bias treatment.  Gradients
    remain fully generic; the function is simply smooth in the checked
    neighborhood.
    """
    jitter = stream.spawn("jitter")
    for layer in _walk_layers(module):
        if isinstance(layer, BatchNorm2d):
            c = layer.channels
            signs = np.where(np.arange(c) % 2 == 0, 1.0, -1.0)
            layer.gamma.data = (1.0 + 0.1 * jitter.normal_field(c)).astype(
                layer.gamma.dtype)
            layer.beta.data = (signs * (8.0 + 0.5 * jitter.normal_field(c))).astype(
                layer.beta.dtype)
        elif isinstance(layer, Dense):
            out_f = layer.weight.shape[0]
            signs = np.where(np.arange(out_f) % 2 == 0, 1.0, -1.0)
            layer.weight.data = (0.1 * layer.weight.data).astype(layer.weight.dtype)
            layer.bias.data = (signs * (8.0 + 0.5 * jitter.normal_field(out_f))).astype(
                layer.bias.dtype)


def run_suite(seed=2024, samples=24, bound=DEFAULT_BOUND):
    """FD-check every layer type plus the composed encoder, in float64.

    Returns a list of (name, max_relative_error, passed) records.
    """
    root = Stream(seed, "gradcheck")
    f64 = np.float64
    records = []

    def run(name, module, x):
        err = check_module(module, x, root.spawn(f"check/{name}"), samples=samples)
        records.append((name, err, err < bound))

    s = root.spawn("build")
    run("conv2d-3x3", Conv2d(3, 4, 3, stride=1, padding=1, stream=s.spawn("c1"), dtype=f64),
        root.spawn("x1").normal_field((2, 3, 6, 6)))
    run("conv2d-3x3-stride2", Conv2d(3, 5, 3, stride=2, padding=1, stream=s.spawn("c2"), dtype=f64),
        root.spawn("x2").normal_field((2, 3, 7, 7)))
    run("conv2d-1x1-stride2", Conv2d(4, 6, 1, stride=2, padding=0, stream=s.spawn("c3"), dtype=f64),
        root.spawn("x3").normal_field((2, 4, 6, 6)))
    bn = BatchNorm2d(4, dtype=f64)
    bn.gamma.data = 1.0 + 0.3 * root.spawn("bng").normal_field(4)
    bn.beta.data = 0.2 * root.spawn("bnb").normal_field(4)
    run("batchnorm", bn, root.spawn("x4").normal_field((3, 4, 5, 5)))
    run("relu", ReLU(), _kink_free_normal(root.spawn("x5"), (2, 3, 4, 4)))
    run("gap", GlobalAvgPool(), root.spawn("x6").normal_field((2, 5, 4, 4)))
    run("dense", Dense(7, 4, stream=s.spawn("d1"), dtype=f64),
        root.spawn("x7").normal_field((3, 7)))

    spec = NetworkSpec()
    encoder_net = build_network(spec, root.spawn("net"), dtype=f64)
    condition_for_fd(encoder_net, root.spawn("cond"))
    run("ctl-small-composed", encoder_net, root.spawn("x8").normal_field((2, 1, 16, 16)))
    return records
