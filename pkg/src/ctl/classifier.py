"""Downstream five-class head: fine-tuning, prediction, risk aggregation.

The encoder from pretraining (or a fresh one) is capped with global
average pooling and a linear layer over the five tissue classes.  The
binary risk probability is the sum of the two high-risk class
probabilities, so it always complements the low-risk sum to one.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .data import (CLASS_NAMES, HIGH_RISK_CLASSES, entry_key,
                   label_fraction_subset, oversample)
from .imageio import read_pgm
from .lbp import extract_texture_map
from .nn import Network, NetworkSpec, SgdMomentum, build_network, load_blobs_into
from .nn.layers import softmax
from .pretrain import load_texture_maps
from .rng import Stream

_HIGH_RISK_IDX = [CLASS_NAMES.index(c) for c in HIGH_RISK_CLASSES]


@dataclass
class ClassProbabilities:
    p: np.ndarray
    predicted_label: str
    high_risk_prob: float

    @classmethod
    def from_probs(cls, p):
        p = np.asarray(p, dtype=np.float64)
        if p.shape != (len(CLASS_NAMES),):
            raise ValueError(f"expected {len(CLASS_NAMES)} probabilities")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
            raise ValueError("probabilities must be non-negative and sum to 1")
        return cls(p, CLASS_NAMES[int(p.argmax())], float(p[_HIGH_RISK_IDX].sum()))


@dataclass
class FinetuneConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    momentum: float = 0.9
    label_fraction: float = 1.0
    init: str = "from_checkpoint"
    freeze_encoder: bool = False
    balance: bool = True
    head_warmup_epochs: int = 5

    def __post_init__(self):
        if self.init not in ("from_checkpoint", "random"):
            raise ValueError("init must be 'from_checkpoint' or 'random'")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError("label_fraction must be in (0, 1]")
        if self.epochs < 0 or self.batch_size < 2:
            raise ValueError("need epochs >= 0 and batch_size >= 2")
        if self.head_warmup_epochs < 0:
            raise ValueError("head_warmup_epochs must be >= 0")


def build_downstream(seed, checkpoint_blobs=None, net_spec=None):
    """Fresh GAP + linear network, optionally with encoder weights loaded."""
    spec = net_spec or NetworkSpec(head="gap_linear")
    if spec.head != "gap_linear":
        raise ValueError("downstream head must be gap_linear")
    network = build_network(spec, Stream(seed, "downstream"))
    if checkpoint_blobs is not None:
        load_blobs_into(network, checkpoint_blobs, prefix="encoder/")
    return network


def cross_entropy_loss(probabilities, onehot):
    """Mean negative log-likelihood; true-class zeros clamp at 1e-12."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 2 or p.shape[0] < 1:
        raise ValueError("need matching (N, classes) probability and label arrays")
    picked = (p * y).sum(axis=1)
    if (picked <= 0.0).any():
        warnings.warn("zero probability at a true class; clamping at 1e-12",
                      RuntimeWarning, stacklevel=2)
        picked = np.maximum(picked, 1e-12)
    return float(-np.log(picked).mean())


def _forward_logits(network, x, training):
    if network.spec.head != "gap_linear":
        raise ValueError("network lacks the downstream head")
    feats = network.encoder.forward(x, training=training)
    network.feature_maps = feats
    pooled = network.gap.forward(feats, training=training)
    return network.head.forward(pooled, training=training)


def _onehot(labels):
    y = np.zeros((len(labels), len(CLASS_NAMES)), dtype=np.float64)
    for row, label in enumerate(labels):
        y[row, CLASS_NAMES.index(label)] = 1.0
    return y


def finetune(network, manifest, train_entries, config, lbp_config, seed,
             texture_maps=None):
    """Train on labeled patches; returns per-epoch (loss, accuracy) history.

    history[0] is an update-free evaluation at the starting weights.
    Label-fraction subsetting is patient-grouped, then the subset is
    oversampled to class balance.  The first head_warmup_epochs epochs
    update only the head, letting a fresh head calibrate to the encoder
    before full gradients may reshape it.  With freeze_encoder the whole
    run stays head-only and encoder batch-norm runs in inference mode.
    """
    if not train_entries:
        raise ValueError("no training entries")
    subset = label_fraction_subset(train_entries, config.label_fraction, seed)
    entries = oversample(subset) if config.balance else list(subset)
    if texture_maps is None:
        texture_maps = {entry_key(e): m for e, m in
                        zip(subset, load_texture_maps(manifest, subset, lbp_config))}
    maps = [texture_maps[entry_key(e)] for e in entries]
    labels = [e.label for e in entries]

    root = Stream(seed, "finetune")
    optimizer = None
    optimizer_is_head_only = None

    history = [_classify_epoch(network, None, maps, labels, config, root, 0, True)]
    for epoch in range(1, config.epochs + 1):
        head_only = config.freeze_encoder or epoch <= config.head_warmup_epochs
        if optimizer is None or head_only != optimizer_is_head_only:
            params = network.head.params() if head_only else network.params()
            optimizer = SgdMomentum(params, learning_rate=config.learning_rate,
                                    momentum=config.momentum)
            optimizer_is_head_only = head_only
        history.append(_classify_epoch(network, optimizer, maps, labels, config,
                                       root, epoch, head_only))
    return history


def _classify_epoch(network, optimizer, maps, labels, config, root_stream, epoch,
                    head_only):
    training = optimizer is not None
    if not training:
        saved = {name: t.data.copy() for name, t in network.state()}
    n = len(maps)
    if training:
        order = root_stream.spawn(f"order/{epoch}").permutation(n)
    else:
        order = list(range(n))
    encoder_training = training and not head_only
    loss_sum, hit_sum, seen = 0.0, 0, 0
    for start in range(0, n, config.batch_size):
        idx = order[start : start + config.batch_size]
        if len(idx) < 2:
            continue  # batch norm needs at least two samples
        x = np.stack([maps[i] for i in idx])[:, None, :, :].astype(np.float32)
        y = _onehot([labels[i] for i in idx])
        logits = _forward_logits(network, x, training=encoder_training)
        probs = softmax(logits)
        loss_sum += cross_entropy_loss(probs, y) * len(idx)
        hit_sum += int((probs.argmax(axis=1) == y.argmax(axis=1)).sum())
        seen += len(idx)
        if training:
            network.zero_grads()
            grad = ((probs - y) / len(idx)).astype(np.float32)
            dpooled = network.head.backward(grad)
            if not head_only:
                network.encoder.backward(network.gap.backward(dpooled))
            optimizer.step()
    if not training:
        for name, t in network.state():
            t.data[...] = saved[name]
    if seen == 0:
        raise ValueError("no usable batches (dataset smaller than 2?)")
    return loss_sum / seen, hit_sum / seen


def predict_texture_batch(network, maps):
    """Softmax probabilities for a batch of normalized texture maps."""
    x = np.stack(maps)[:, None, :, :].astype(np.float32)
    logits = _forward_logits(network, x, training=False)
    return softmax(logits)


def predict_patch(network, image, lbp_config):
    """Full pipeline for one grayscale patch image."""
    texture = extract_texture_map(image, lbp_config)
    probs = predict_texture_batch(network, [texture.normalized])[0]
    return ClassProbabilities.from_probs(probs)


def predict_image_file(network, path, lbp_config):
    return predict_patch(network, read_pgm(path), lbp_config)


def evaluate_accuracy(network, manifest, entries, lbp_config, texture_maps=None,
                      batch_size=64):
    """Five-class accuracy plus per-patch probabilities over the entries."""
    if texture_maps is None:
        maps = load_texture_maps(manifest, entries, lbp_config)
    else:
        maps = [texture_maps[entry_key(e)] for e in entries]
    probs = np.zeros((len(entries), len(CLASS_NAMES)))
    for start in range(0, len(entries), batch_size):
        chunk = maps[start : start + batch_size]
        probs[start : start + len(chunk)] = predict_texture_batch(network, chunk)
    truth = np.array([CLASS_NAMES.index(e.label) for e in entries])
    accuracy = float((probs.argmax(axis=1) == truth).mean()) if entries else 0.0
    return accuracy, probs
