"""Cross-shaped threshold voting over a volume's patch prediction matrix.

A volume is called positive when some thresholded cell sits inside a
vertical run (down the frames) of sufficient length AND a horizontal
run (across a frame) of sufficient length.  The witness is the union of
the two maximal runs through the first such cell in row-major order.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .data import sliding_windows
from .imageio import colormap_rgb, write_ppm
from .lbp import extract_texture_map


@dataclass
class PatchPredictionMatrix:
    probs: np.ndarray  # rows = frames in acquisition order, columns = windows
    volume_id: str = "volume"

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or self.probs.size == 0:
            raise ValueError("prediction matrix must be 2-D and non-empty")
        if (self.probs < 0).any() or (self.probs > 1).any():
            raise ValueError("probabilities must lie in [0, 1]")


@dataclass
class VoteConfig:
    threshold: float = 0.8
    run_length: int = 3

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie strictly inside (0, 1)")
        if self.run_length < 2:
            raise ValueError("run_length must be >= 2")


@dataclass
class VoteResult:
    positive: bool
    witness: list  # sorted (row, col) cells; empty for negative volumes


def _maximal_run(flags, pos):
    """Closed interval [lo, hi] of the True run through pos (flags[pos] holds)."""
    lo = pos
    while lo > 0 and flags[lo - 1]:
        lo -= 1
    hi = pos
    while hi + 1 < len(flags) and flags[hi + 1]:
        hi += 1
    return lo, hi


def scan_cross(probs, threshold, run_length):
    """Threshold-vote a raw matrix; the config-free core of cross_vote.

    Exposed separately so the degenerate thresholds 0 and 1 (which
    VoteConfig refuses) stay reachable for boundary analysis.
    """
    probs = np.asarray(probs, dtype=np.float64)
    hot = probs >= threshold
    rows, cols = hot.shape
    for i in range(rows):
        for j in range(cols):
            if not hot[i, j]:
                continue
            top, bottom = _maximal_run(hot[:, j], i)
            if bottom - top + 1 < run_length:
                continue
            left, right = _maximal_run(hot[i, :], j)
            if right - left + 1 < run_length:
                continue
            witness = {(r, j) for r in range(top, bottom + 1)}
            witness |= {(i, c) for c in range(left, right + 1)}
            return True, sorted(witness)
    return False, []


def cross_vote(matrix, config):
    positive, witness = scan_cross(matrix.probs, config.threshold, config.run_length)
    return VoteResult(positive, witness)


def heat_matrix_export(matrix, csv_path=None, ppm_path=None):
    """Raw probabilities as CSV and a blue-to-green-to-red cell image."""
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in matrix.probs:
                writer.writerow([f"{v:.9f}" for v in row])
    if ppm_path is not None:
        write_ppm(ppm_path, colormap_rgb(matrix.probs))


def read_matrix_csv(path, volume_id="volume"):
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return PatchPredictionMatrix(np.array(rows), volume_id)


def predict_volume(network, frames, lbp_config, vote_config, patch_size,
                   stride=None, volume_id="volume"):
    """Window every frame, score patches, and vote the volume.

    Frames must share one shape; the matrix has one row per frame and
    one column per sliding window.
    """
    from .classifier import CLASS_NAMES, predict_texture_batch
    from .data import HIGH_RISK_CLASSES

    if not frames:
        raise ValueError("no frames")
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise ValueError("frames differ in size")
    stride = stride or patch_size // 2
    offsets = sliding_windows(shape[1], patch_size, stride)
    maps = [extract_texture_map(np.ascontiguousarray(f[:, off : off + patch_size]),
                                lbp_config).normalized
            for f in frames for off in offsets]
    probs = predict_texture_batch(network, maps)
    risk_idx = [CLASS_NAMES.index(c) for c in HIGH_RISK_CLASSES]
    high_risk = probs[:, risk_idx].sum(axis=1).reshape(len(frames), len(offsets))
    matrix = PatchPredictionMatrix(np.clip(high_risk, 0.0, 1.0), volume_id)
    return cross_vote(matrix, vote_config), matrix
