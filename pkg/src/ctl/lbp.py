"""Rotation-invariant local binary pattern (LBP) texture maps.

A code compares the P neighbors on a radius-R circle against the center
pixel: bit p fires when the sampled neighbor is >= the center (ties count
as 1).  Off-grid neighbors are bilinearly interpolated.  Codes are made
rotation invariant by taking the minimum over all P circular bit
rotations, then min-max normalized into a float map that downstream
networks consume.  Output covers interior pixels only: a margin of
ceil(R) is dropped on every side so no border texture is invented.

Bilinear samples use the two-stage lerp form ``v0 + f*(v1 - v0)`` so that
constant neighborhoods reproduce the center value exactly and the >= tie
rule is hit deterministically.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .imageio import write_pgm


@dataclass
class LbpConfig:
    """Circle geometry for LBP extraction."""

    neighbors: int = 32
    radius: float = 4.0
    interpolation: str = "bilinear"

    def __post_init__(self):
        if not 4 <= self.neighbors <= 64:
            raise ValueError("neighbors must be in [4, 64]")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.interpolation != "bilinear":
            raise ValueError("only bilinear interpolation is supported")

    @property
    def margin(self):
        return int(math.ceil(self.radius))


@dataclass
class TextureMap:
    codes: np.ndarray       # uint64, interior pixels
    normalized: np.ndarray  # float32 in [0, 1], same shape
    source_size: tuple
    config: LbpConfig


@dataclass
class TextureHistogram:
    bins: np.ndarray = field(repr=False)  # P + 2 floats, L1-normalized


def _snap(value):
    return float(round(value)) if abs(value - round(value)) < 1e-9 else value


def _neighbor_offsets(config):
    """(dy, dx) offsets of the P circle points, center at the origin.

    Neighbor p sits at (-R*sin(2*pi*p/P), R*cos(2*pi*p/P)) in (row, col)
    coordinates, so p = 0 is the pixel R columns to the right.  Offsets
    within 1e-9 of a grid point are snapped onto it, and when P is a
    multiple of 4 only the first quadrant is evaluated trigonometrically;
    the rest are exact 90-degree copies.  Both rules remove the ~1e-16
    trig residue that would otherwise break exact ties on the axes, and
    they make the circle exactly symmetric under quarter turns.
    """
    p_count = config.neighbors
    radius = config.radius
    quarter, rem = divmod(p_count, 4)
    base_count = quarter if rem == 0 else p_count
    base = []
    for p in range(base_count):
        angle = 2.0 * math.pi * p / p_count
        base.append((_snap(-radius * math.sin(angle)), _snap(radius * math.cos(angle))))
    if rem != 0:
        return base
    out = list(base)
    for _ in range(3):
        base = [(-dx, dy) for dy, dx in base]
        out.extend(base)
    return out


def _sample_bilinear(image, y, x):
    y0 = math.floor(y)
    x0 = math.floor(x)
    fy = y - y0
    fx = x - x0
    y1 = y0 + 1 if fy > 0 else y0
    x1 = x0 + 1 if fx > 0 else x0
    v00 = image[y0, x0]
    v01 = image[y0, x1]
    v10 = image[y1, x0]
    v11 = image[y1, x1]
    top = v00 + fx * (v01 - v00)
    bottom = v10 + fx * (v11 - v10)
    return top + fy * (bottom - top)


def lbp_code_at(image, center, config):
    """Raw LBP code of one pixel (no rotation normalization).

    Args:
        image: 2-D grayscale array.
        center: (row, col) at least ceil(R) pixels from every border.
        config: LbpConfig.

    Returns:
        Integer code in [0, 2^P).
    """
    image = np.asarray(image, dtype=np.float64)
    row, col = center
    m = config.margin
    if not (m <= row < image.shape[0] - m and m <= col < image.shape[1] - m):
        raise ValueError("center too close to the border for this radius")
    g_c = image[row, col]
    code = 0
    for p, (dy, dx) in enumerate(_neighbor_offsets(config)):
        g_p = _sample_bilinear(image, row + dy, col + dx)
        if g_p - g_c >= 0:
            code |= 1 << p
    return code


def rotation_invariant(code, neighbors):
    """Minimum of the code over all circular bit rotations in a P-bit word."""
    if code >= 1 << neighbors:
        raise ValueError("code does not fit in the given bit width")
    mask = (1 << neighbors) - 1
    best = code
    for i in range(1, neighbors):
        rotated = ((code >> i) | (code << (neighbors - i))) & mask
        if rotated < best:
            best = rotated
    return best


def _rotation_invariant_map(codes, neighbors):
    mask = np.uint64((1 << neighbors) - 1)
    best = codes.copy()
    for i in range(1, neighbors):
        lo = codes >> np.uint64(i)
        hi = (codes << np.uint64(neighbors - i)) & mask
        np.minimum(best, lo | hi, out=best)
    return best


def extract_texture_map(image, config):
    """Rotation-invariant LBP codes plus the min-max normalized map.

    Interior-only: the output is (H - 2*ceil(R)) x (W - 2*ceil(R)).
    Normalization runs in 64-bit and is stored as float32; a constant
    code map normalizes to all zeros.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("image must be 2-D")
    m = config.margin
    if image.shape[0] < 2 * m + 2 or image.shape[1] < 2 * m + 2:
        raise ValueError("image too small for this radius")
    hi = image.shape[0] - 2 * m
    wi = image.shape[1] - 2 * m
    center = image[m : m + hi, m : m + wi]
    codes = np.zeros((hi, wi), dtype=np.uint64)
    for p, (dy, dx) in enumerate(_neighbor_offsets(config)):
        iy = math.floor(dy)
        ix = math.floor(dx)
        fy = dy - iy
        fx = dx - ix
        oy = 1 if fy > 0 else 0
        ox = 1 if fx > 0 else 0
        r0 = m + iy
        c0 = m + ix
        v00 = image[r0 : r0 + hi, c0 : c0 + wi]
        v01 = image[r0 : r0 + hi, c0 + ox : c0 + ox + wi]
        v10 = image[r0 + oy : r0 + oy + hi, c0 : c0 + wi]
        v11 = image[r0 + oy : r0 + oy + hi, c0 + ox : c0 + ox + wi]
        top = v00 + fx * (v01 - v00)
        bottom = v10 + fx * (v11 - v10)
        sampled = top + fy * (bottom - top)
        codes |= (sampled - center >= 0).astype(np.uint64) << np.uint64(p)
    codes = _rotation_invariant_map(codes, config.neighbors)

    as_float = codes.astype(np.float64)
    lo = as_float.min()
    hi_v = as_float.max()
    if hi_v > lo:
        normalized = ((as_float - lo) / (hi_v - lo)).astype(np.float32)
    else:
        normalized = np.zeros_like(as_float, dtype=np.float32)
    return TextureMap(codes, normalized, tuple(image.shape), config)


def _circular_transitions(codes, neighbors):
    mask = np.uint64((1 << neighbors) - 1)
    rot1 = ((codes >> np.uint64(1)) | (codes << np.uint64(neighbors - 1))) & mask
    return np.bitwise_count(codes ^ rot1)


def texture_histogram(texture_map):
    """Uniform-pattern histogram with P + 2 bins.

    Codes with at most 2 circular bit transitions land in their popcount
    bin (0..P); everything else goes to the overflow bin P + 1.
    """
    codes = texture_map.codes
    if codes.size == 0:
        raise ValueError("empty texture map")
    p = texture_map.config.neighbors
    popcounts = np.bitwise_count(codes)
    transitions = _circular_transitions(codes, p)
    bin_index = np.where(transitions <= 2, popcounts, p + 1).astype(np.int64)
    counts = np.bincount(bin_index.reshape(-1), minlength=p + 2).astype(np.float64)
    return TextureHistogram(counts / counts.sum())


def patch_similarity(a, b):
    """Cosine similarity of two texture histograms, in [0, 1]."""
    va = np.asarray(a.bins if isinstance(a, TextureHistogram) else a, dtype=np.float64)
    vb = np.asarray(b.bins if isinstance(b, TextureHistogram) else b, dtype=np.float64)
    if va.shape != vb.shape:
        raise ValueError("histograms have different bin counts")
    na = math.sqrt(float(va @ va))
    nb = math.sqrt(float(vb @ vb))
    if na == 0.0 or nb == 0.0:
        raise ValueError("zero-norm histogram")
    return float(va @ vb) / (na * nb)


def similarity_distribution(patches_a, patches_b, config):
    """All cross-group pairwise similarities plus quartile summary.

    Args:
        patches_a, patches_b: non-empty lists of 2-D grayscale images.
        config: LbpConfig used for feature extraction.

    Returns:
        (similarities, summary) where summary has median, q1, q3, n.
    """
    if not patches_a or not patches_b:
        raise ValueError("both groups must be non-empty")
    feats_a = [texture_histogram(extract_texture_map(p, config)) for p in patches_a]
    feats_b = [texture_histogram(extract_texture_map(p, config)) for p in patches_b]
    sims = [patch_similarity(fa, fb) for fa in feats_a for fb in feats_b]
    q1, med, q3 = np.percentile(sims, [25, 50, 75])
    summary = {"median": float(med), "q1": float(q1), "q3": float(q3), "n": len(sims)}
    return sims, summary


# -- exports ----------------------------------------------------------------


def write_codes_csv(path, texture_map):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in texture_map.codes:
            writer.writerow(int(c) for c in row)


def write_normalized_pgm(path, texture_map):
    scaled = np.round(texture_map.normalized.astype(np.float64) * 65535.0)
    write_pgm(path, scaled.astype(np.uint16))


def write_histograms_csv(path, rows):
    """Write (patch_id, TextureHistogram) pairs, one CSV row per patch."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for patch_id, hist in rows:
            writer.writerow([patch_id] + [repr(float(v)) for v in hist.bins])
