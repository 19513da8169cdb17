"""Class activation maps from the GAP + linear downstream head.

The raw map is the head-weighted sum of last-convolution feature maps,
so spatially averaging it reproduces the class logit minus the bias.
Negative raw values are kept; min-max normalization (not a ReLU clamp)
brings the upsampled map into [0, 1].
"""

from dataclasses import dataclass

import numpy as np

from .imageio import colormap_rgb, write_ppm
from .lbp import extract_texture_map


@dataclass
class ActivationMap:
    raw: np.ndarray
    upsampled: np.ndarray
    class_index: int


def bilinear_upsample(array, out_h, out_w):
    """Endpoint-aligned bilinear resize of a 2-D float array."""
    array = np.asarray(array, dtype=np.float64)
    h, w = array.shape
    ys = (np.arange(out_h) * (h - 1) / (out_h - 1) if out_h > 1
          else np.zeros(out_h))
    xs = (np.arange(out_w) * (w - 1) / (out_w - 1) if out_w > 1
          else np.zeros(out_w))
    y0 = np.minimum(ys.astype(int), max(h - 2, 0))
    x0 = np.minimum(xs.astype(int), max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = array[np.ix_(y0, x0)] + fx * (array[np.ix_(y0, x1)] - array[np.ix_(y0, x0)])
    bot = array[np.ix_(y1, x0)] + fx * (array[np.ix_(y1, x1)] - array[np.ix_(y1, x0)])
    return top + fy * (bot - top)


def _head_weight(network):
    if network.spec.head != "gap_linear":
        raise ValueError("activation maps need the GAP + linear head")
    return dict(network.head.params())["linear/weight"].data  # (classes, channels)


def raw_cam(feature_maps, class_weights):
    """Weighted sum of feature maps; the oracle-checkable core."""
    return np.tensordot(class_weights, feature_maps, axes=([0], [0]))


def compute_cam(network, image, class_index, lbp_config):
    """Activation map of one patch image for one class."""
    texture = extract_texture_map(image, lbp_config)
    x = texture.normalized[None, None, :, :].astype(np.float32)
    network.forward(x, training=False)
    feats = network.feature_maps[0].astype(np.float64)
    weights = _head_weight(network)
    if not 0 <= class_index < weights.shape[0]:
        raise ValueError(f"class index {class_index} out of range")
    raw = raw_cam(feats, weights[class_index].astype(np.float64))
    up = bilinear_upsample(raw, *texture.normalized.shape)
    span = up.max() - up.min()
    normalized = (up - up.min()) / span if span > 0 else np.zeros_like(up)
    return ActivationMap(raw, normalized, class_index)


def emit_overlay(image, activation_map, alpha, path=None):
    """Blend a grayscale image with the colormapped activation map.

    The image must match the upsampled map's size; pass the interior
    crop of the source patch (texture maps shed the sampling margin).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    gray = np.asarray(image, dtype=np.float64)
    if gray.ndim != 2 or gray.shape != activation_map.upsampled.shape:
        raise ValueError(f"image shape {gray.shape} does not match "
                         f"activation map {activation_map.upsampled.shape}")
    if gray.max() > 255.0:
        gray = gray * (255.0 / 65535.0)
    heat = colormap_rgb(activation_map.upsampled).astype(np.float64)
    blended = (1.0 - alpha) * gray[:, :, None] + alpha * heat
    out = np.clip(np.round(blended), 0, 255).astype(np.uint8)
    if path is not None:
        write_ppm(path, out)
    return out


def interior_crop(image, lbp_config):
    """The sub-image the texture map actually covers (margin removed)."""
    m = lbp_config.margin
    return np.asarray(image)[m:-m, m:-m]
