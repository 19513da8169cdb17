"""Contrastive pretraining on augmented texture maps.

The pretext task never sees labels: each normalized texture map is
augmented twice, the two views form a positive pair, and every other
view in the mini-batch is a negative.  Directed losses are averaged over
all 2B anchors.  Augmentation streams are keyed by (epoch, origin
index), so worker scheduling can never change the realized views.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetManifest
from .imageio import read_pgm
from .lbp import LbpConfig, extract_texture_map
from .nn import Adam, Network, NetworkSpec, build_network, network_blobs
from .rng import Stream


@dataclass
class AugmentedPair:
    view_a: np.ndarray
    view_b: np.ndarray
    origin_id: str

    def __post_init__(self):
        if self.view_a.shape != self.view_b.shape:
            raise ValueError("paired views must share a shape")


@dataclass
class PretrainConfig:
    temperature: float = 0.5
    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 1e-2
    weight_decay: float = 1e-6
    flips: bool = True
    quarter_turns: bool = True
    free_angle: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for a non-degenerate negative set")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def _rotate_free(view, angle):
    """Bilinear rotation about the map center, clamped at the borders."""
    h, w = view.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    src_y = np.clip(cos_a * ys + sin_a * xs + cy, 0.0, h - 1.0)
    src_x = np.clip(-sin_a * ys + cos_a * xs + cx, 0.0, w - 1.0)
    y0 = np.minimum(src_y.astype(int), h - 2)
    x0 = np.minimum(src_x.astype(int), w - 2)
    fy = src_y - y0
    fx = src_x - x0
    top = view[y0, x0] + fx * (view[y0, x0 + 1] - view[y0, x0])
    bot = view[y0 + 1, x0] + fx * (view[y0 + 1, x0 + 1] - view[y0 + 1, x0])
    return (top + fy * (bot - top)).astype(view.dtype)


def augment(view, stream, flips=True, quarter_turns=True, free_angle=False):
    """One random view: coin-flip flips plus a k*90-degree turn.

    With the default transforms the result is a pure pixel permutation
    of the input.  Free-angle rotation resamples bilinearly and is off
    unless requested.
    """
    out = view
    if flips:
        if stream.random() < 0.5:
            out = out[:, ::-1]
        if stream.random() < 0.5:
            out = out[::-1, :]
    if quarter_turns:
        k = stream.randint(4)
        if k:
            out = np.rot90(out, k)
    if free_angle:
        out = _rotate_free(np.ascontiguousarray(out), 2.0 * math.pi * stream.random())
    return np.ascontiguousarray(out)


def make_pair(texture_map, origin_id, stream_a, stream_b, config):
    kwargs = dict(flips=config.flips, quarter_turns=config.quarter_turns,
                  free_angle=config.free_angle)
    return AugmentedPair(augment(texture_map, stream_a, **kwargs),
                         augment(texture_map, stream_b, **kwargs), origin_id)


# -- loss ----------------------------------------------------------------------


def _unit_rows(embeddings):
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("embeddings must be a 2-D array")
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm embedding has no cosine direction")
    return z / norms[:, None], norms


def contrastive_pair_loss(z_i, z_j, all_z, temperature):
    """Directed loss for anchor z_i with positive z_j among all 2B views.

    z_i and z_j may be row indices into all_z, or the row vectors
    themselves (matched by exact equality).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    unit, _ = _unit_rows(all_z)

    def locate(z):
        if isinstance(z, (int, np.integer)):
            return int(z)
        z = np.asarray(z, dtype=np.float64)
        hits = np.nonzero((np.asarray(all_z, dtype=np.float64) == z).all(axis=1))[0]
        if hits.size == 0:
            raise ValueError("embedding is not a row of all_z")
        return int(hits[0])

    i, j = locate(z_i), locate(z_j)
    if i == j:
        raise ValueError("a view cannot be its own positive")
    sims = unit @ unit[i]
    logits = np.delete(sims, i) / temperature
    peak = logits.max()
    log_denom = peak + math.log(np.exp(logits - peak).sum())
    return float(log_denom - sims[j] / temperature)


def _pair_index(count):
    idx = np.arange(count)
    return idx ^ 1  # 0<->1, 2<->3, ...


def batch_loss_and_grad(embeddings, temperature):
    """Mean directed loss over all anchors, plus its gradient.

    Views are paired (0,1), (2,3), ...  Gradient is exact for the
    cosine-of-unnormalized-embeddings parameterization.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    unit, norms = _unit_rows(embeddings)
    n = unit.shape[0]
    if n % 2:
        raise ValueError("view count must be even")
    pair = _pair_index(n)

    sims = unit @ unit.T
    logits = sims / temperature
    np.fill_diagonal(logits, -np.inf)
    peak = logits.max(axis=1, keepdims=True)
    expw = np.exp(logits - peak)
    denom = expw.sum(axis=1, keepdims=True)
    log_denom = (peak + np.log(denom))[:, 0]
    losses = log_denom - sims[np.arange(n), pair] / temperature
    psi = float(losses.mean())

    # dPsi/dsims, then back through the row normalization.
    probs = expw / denom
    grad_s = probs / (n * temperature)
    grad_s[np.arange(n), pair] -= 1.0 / (n * temperature)
    np.fill_diagonal(grad_s, 0.0)
    sym = grad_s + grad_s.T
    gu = sym @ unit
    grad = (gu - (gu * unit).sum(axis=1, keepdims=True) * unit) / norms[:, None]
    return psi, losses, grad


def batch_loss(embeddings, temperature):
    psi, _, _ = batch_loss_and_grad(embeddings, temperature)
    return psi


# -- training loop -------------------------------------------------------------


def load_texture_maps(manifest, entries, lbp_config):
    """Normalized texture maps for the given manifest entries, in order."""
    maps = []
    for e in entries:
        img = read_pgm(manifest.resolve(e))
        maps.append(extract_texture_map(img, lbp_config).normalized)
    return maps


def _assemble_batch(maps, indices, epoch, root_stream, config):
    views = []
    for idx in indices:
        key = f"aug/{epoch}/{idx}"
        pair = make_pair(maps[idx], str(idx), root_stream.spawn(key + "/a"),
                         root_stream.spawn(key + "/b"), config)
        views.append(pair.view_a)
        views.append(pair.view_b)
    return np.stack(views)[:, None, :, :].astype(np.float32)


def _epoch_batches(n_items, batch_size, epoch, root_stream, shuffled):
    if shuffled:
        order = root_stream.spawn(f"order/{epoch}").permutation(n_items)
    else:
        order = list(range(n_items))
    full = (n_items // batch_size) * batch_size
    for start in range(0, full, batch_size):
        yield order[start : start + batch_size]


def pretrain(manifest, config, lbp_config, seed, texture_maps=None):
    """Train encoder + projection head; returns (network, trajectory).

    trajectory[0] is the mean loss of an update-free evaluation pass at
    initialization; entries 1..epochs are per-epoch training means.
    """
    entries = manifest.entries
    if not entries:
        raise ValueError("manifest has no patches")
    if config.batch_size > len(entries):
        raise ValueError("batch_size exceeds the dataset size")
    maps = texture_maps if texture_maps is not None else load_texture_maps(
        manifest, entries, lbp_config)

    root = Stream(seed, "pretrain")
    net_spec = NetworkSpec(head="projection_mlp")
    network = build_network(net_spec, root.spawn("init"))
    optimizer = Adam(network.params(), learning_rate=config.learning_rate,
                     weight_decay=config.weight_decay)

    trajectory = [_run_epoch(network, None, maps, config, root, epoch=0, shuffled=False)]
    for epoch in range(1, config.epochs + 1):
        trajectory.append(_run_epoch(network, optimizer, maps, config, root,
                                     epoch=epoch, shuffled=True))
    return network, trajectory


def _run_epoch(network, optimizer, maps, config, root_stream, epoch, shuffled):
    training = optimizer is not None
    if not training:
        saved = {name: t.data.copy() for name, t in network.state()}
    total, batches = 0.0, 0
    for indices in _epoch_batches(len(maps), config.batch_size, epoch,
                                  root_stream, shuffled):
        x = _assemble_batch(maps, indices, epoch, root_stream, config)
        z = network.forward(x, training=True)
        psi, _, grad = batch_loss_and_grad(z.astype(np.float64), config.temperature)
        total += psi
        batches += 1
        if training:
            network.zero_grads()
            network.backward(grad.astype(np.float32))
            optimizer.step()
    if not training:
        for name, t in network.state():
            t.data[...] = saved[name]
    if batches == 0:
        raise ValueError("batch_size exceeds the dataset size")
    return total / batches


def write_trajectory_csv(path, trajectory):
    with open(path, "w") as fh:
        fh.write("epoch,mean_psi\n")
        for epoch, psi in enumerate(trajectory):
            fh.write(f"{epoch},{psi:.9f}\n")
