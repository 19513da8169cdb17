"""Synthetic grayscale corpus, manifests, and patient-grouped splitting.

Five texture families stand in for the five tissue categories:

    MI    smooth horizontal layering (soft sinusoidal bands)
    EP    bright papillary bump contours on a mid-gray field
    CY    dark elliptical voids punched into a bright field
    HSIL  vertical icicle-like streaks fading with depth
    CC    dense speckle with rapid intensity decay

Appearance is hierarchical: the family fixes the motif, per-patient
draws move its scale, density, contrast, grain, and focus, and per-frame
draws place the individual features.  Patients of one class therefore
differ far more than frames of one patient, and held-out patients are a
real generalization test rather than a reshuffle of seen pixels.

Each patient owns one volume of full-width frames; patches are cut from
frames with the same sliding windows used at prediction time.  Every
random draw comes from streams derived from the generator seed, so equal
seeds produce byte-identical files.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import write_pgm
from .rng import Stream

CLASS_NAMES = ("MI", "EP", "CY", "HSIL", "CC")
CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}
HIGH_RISK_CLASSES = ("HSIL", "CC")


def risk_group(label):
    """Binary risk group of a five-class label."""
    if label not in CLASS_NAMES:
        raise ValueError(f"unknown class label {label!r}")
    return "high_risk" if label in HIGH_RISK_CLASSES else "low_risk"


@dataclass
class ManifestEntry:
    patient_id: str
    volume_id: str
    frame_index: int
    patch_index: int
    image_path: str  # relative to the manifest directory
    label: str


@dataclass
class DatasetManifest:
    entries: list
    generator_seed: int
    patch_size: int
    root: Path = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        triples = set()
        volume_owner = {}
        for e in self.entries:
            key = (e.volume_id, e.frame_index, e.patch_index)
            if key in triples:
                raise ValueError(f"duplicate patch identity {key}")
            triples.add(key)
            owner = (e.patient_id, e.label)
            if volume_owner.setdefault(e.volume_id, owner) != owner:
                raise ValueError(f"volume {e.volume_id} maps to multiple patients/labels")

    def resolve(self, entry):
        if self.root is None:
            return Path(entry.image_path)
        return Path(self.root) / entry.image_path

    def patients(self):
        return sorted({e.patient_id for e in self.entries})


def entry_key(entry):
    """Hashable identity of a patch entry, for caches and joins."""
    return (entry.volume_id, entry.frame_index, entry.patch_index)


def save_manifest(manifest, path):
    path = Path(path)
    payload = {
        "generator_seed": manifest.generator_seed,
        "patch_size": manifest.patch_size,
        "entries": [
            {
                "patient_id": e.patient_id,
                "volume_id": e.volume_id,
                "frame_index": e.frame_index,
                "patch_index": e.patch_index,
                "image_path": e.image_path,
                "label": e.label,
            }
            for e in manifest.entries
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    manifest.root = path.parent


def load_manifest(path):
    path = Path(path)
    with open(path) as fh:
        payload = json.load(fh)
    entries = [ManifestEntry(**e) for e in payload["entries"]]
    return DatasetManifest(entries, payload["generator_seed"], payload["patch_size"],
                           root=path.parent)


# -- texture families ---------------------------------------------------------


def _smooth_noise(stream, h, w, cell, amp):
    """Low-frequency value noise: a coarse Gaussian grid, bilinearly upsampled."""
    gh = h // cell + 2
    gw = w // cell + 2
    grid = stream.normal_field((gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = grid[y0][:, x0]
    b = grid[y0][:, x0 + 1]
    c = grid[y0 + 1][:, x0]
    d = grid[y0 + 1][:, x0 + 1]
    top = a + fx * (b - a)
    bottom = c + fx * (d - c)
    return amp * (top + fy * (bottom - top))


def _box_blur3(img):
    """One pass of the separable 3-tap binomial kernel, edges clamped."""
    padded = np.pad(img, 1, mode="edge")
    img = (padded[:-2, 1:-1] + 2.0 * padded[1:-1, 1:-1] + padded[2:, 1:-1]) / 4.0
    padded = np.pad(img, 1, mode="edge")
    return (padded[1:-1, :-2] + 2.0 * padded[1:-1, 1:-1] + padded[1:-1, 2:]) / 4.0


def _texture_mi(stream, patient, h, w):
    phase = 2.0 * math.pi * stream.random()
    yy = np.arange(h, dtype=np.float64)[:, None]
    xx = np.arange(w, dtype=np.float64)[None, :]
    u = 2.0 * math.pi * (yy + patient["tilt"] * xx) / patient["wavelength"]
    return 120.0 + patient["amp"] * (np.sin(u + phase)
                                     + patient["harmonic"] * np.sin(2.0 * u + 2.0 * phase))


def _texture_ep(stream, patient, h, w):
    img = np.full((h, w), patient["base"])
    yy = np.arange(h, dtype=np.float64)[:, None]
    xx = np.arange(w, dtype=np.float64)[None, :]
    for _ in range(patient["bumps"]):
        cy = stream.random() * h
        cx = stream.random() * w
        sigma = patient["sigma_lo"] + patient["sigma_span"] * stream.random()
        amp = patient["amp_lo"] + patient["amp_span"] * stream.random()
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma * sigma))
    return img


def _texture_cy(stream, patient, h, w):
    img = np.full((h, w), patient["base"])
    yy = np.arange(h, dtype=np.float64)[:, None]
    xx = np.arange(w, dtype=np.float64)[None, :]
    for _ in range(patient["voids"]):
        cy = stream.random() * h
        cx = stream.random() * w
        ay = patient["size"] * (3.0 + 5.0 * stream.random())
        ax = patient["size"] * (4.0 + 6.0 * stream.random())
        d = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2
        img *= 1.0 - 0.75 / (1.0 + np.exp(np.clip(patient["sharp"] * (d - 1.0), -40.0, 40.0)))
    return img


def _texture_hsil(stream, patient, h, w):
    profile = np.zeros(w)
    xs = np.arange(w, dtype=np.float64)
    for _ in range(patient["streaks"]):
        center = stream.random() * w
        sigma = patient["sigma_scale"] * (1.2 + 1.3 * stream.random())
        amp = patient["amp_scale"] * (0.7 + 0.6 * stream.random())
        profile += amp * np.exp(-((xs - center) ** 2) / (2.0 * sigma * sigma))
    depth = np.exp(-np.arange(h, dtype=np.float64) / patient["decay"])
    return patient["base"] + 200.0 * np.clip(profile, 0.0, 1.4)[None, :] * depth[:, None]


def _texture_cc(stream, patient, h, w):
    speckle = stream.uniform_field((h, w)) ** patient["exponent"]
    depth = np.exp(-np.arange(h, dtype=np.float64) / patient["decay"])
    return 20.0 + patient["peak"] * speckle * depth[:, None]


def _finish(img, stream, patient, h, w):
    """Per-patient nuisance dressing shared by every family.

    Background grain, pixel noise, focus, and contrast all sit at the
    patient level, so two patients of one class can look as far apart in
    code space as two classes do on a quiet day.
    """
    img = img + _smooth_noise(stream, h, w, patient["grain_cell"], patient["grain_amp"])
    img = img + stream.uniform_field((h, w), -patient["noise"], patient["noise"])
    for _ in range(patient["blur"]):
        img = _box_blur3(img)
    return patient["gain"] * img + patient["offset"]


_TEXTURES = {
    "MI": _texture_mi,
    "EP": _texture_ep,
    "CY": _texture_cy,
    "HSIL": _texture_hsil,
    "CC": _texture_cc,
}


def _patient_params(label, stream):
    """Patient-level appearance: structure scales plus shared nuisance dials."""
    params = {
        "noise": 1.0 + 4.0 * stream.random(),
        "grain_amp": 3.0 + 7.0 * stream.random(),
        "grain_cell": (4, 6, 8, 12)[stream.randint(4)],
        "blur": stream.randint(3),
        "gain": 0.7 + 0.45 * stream.random(),
        "offset": -18.0 + 38.0 * stream.random(),
    }
    if label == "MI":
        params.update(wavelength=8.0 + 12.0 * stream.random(),
                      amp=35.0 + 35.0 * stream.random(),
                      harmonic=0.45 * stream.random(),
                      tilt=-0.12 + 0.24 * stream.random())
    elif label == "EP":
        params.update(bumps=12 + stream.randint(17),
                      sigma_lo=1.8 + 1.7 * stream.random(),
                      sigma_span=1.0 + 2.0 * stream.random(),
                      amp_lo=35.0 + 25.0 * stream.random(),
                      amp_span=20.0 + 25.0 * stream.random(),
                      base=70.0 + 40.0 * stream.random())
    elif label == "CY":
        params.update(voids=3 + stream.randint(6),
                      size=0.7 + 0.9 * stream.random(),
                      sharp=3.0 + 6.0 * stream.random(),
                      base=130.0 + 40.0 * stream.random())
    elif label == "HSIL":
        params.update(streaks=8 + stream.randint(11),
                      decay=28.0 + 44.0 * stream.random(),
                      sigma_scale=0.8 + stream.random(),
                      amp_scale=0.75 + 0.5 * stream.random(),
                      base=20.0 + 25.0 * stream.random())
    else:
        params.update(decay=9.0 + 17.0 * stream.random(),
                      exponent=1.4 + 1.6 * stream.random(),
                      peak=190.0 + 60.0 * stream.random())
    return params


def render_frame(label, patient_params, frame_stream, height, width):
    """One frame of the given class as a uint8 array."""
    img = _TEXTURES[label](frame_stream, patient_params, height, width)
    img = _finish(img, frame_stream, patient_params, height, width)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


# -- windows, splits, balancing ----------------------------------------------


def sliding_windows(frame_width, patch_size, stride):
    """Strictly increasing column offsets covering the frame.

    Offsets are 0, s, 2s, ...; when the last regular window stops short
    of the right edge an extra window is appended at W - w, so every
    column is covered whenever s <= w.
    """
    if patch_size > frame_width:
        raise ValueError("patch wider than frame")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    last = frame_width - patch_size
    offsets = list(range(0, last + 1, stride))
    if offsets[-1] != last:
        offsets.append(last)
    return offsets


def split_by_patient(manifest, ratio=0.8, seed=0):
    """Shuffle patients deterministically and cut at the ratio.

    Both sides end up non-empty; a patient's patches never straddle the
    cut.  Stratification by class is deliberately not enforced.
    """
    patients = manifest.patients() if isinstance(manifest, DatasetManifest) else sorted(set(manifest))
    if len(patients) < 2:
        raise ValueError("need at least 2 patients to split")
    stream = Stream(seed, "split").spawn("patients")
    order = list(patients)
    stream.shuffle(order)
    n_train = int(math.floor(ratio * len(order) + 0.5))
    n_train = min(max(n_train, 1), len(order) - 1)
    return SplitPlan(sorted(order[:n_train]), sorted(order[n_train:]), [])


@dataclass
class SplitPlan:
    train_patient_ids: list
    test_patient_ids: list
    folds: list  # (train_ids, validation_ids) pairs

    def __post_init__(self):
        overlap = set(self.train_patient_ids) & set(self.test_patient_ids)
        if overlap:
            raise ValueError(f"patients on both sides of the split: {sorted(overlap)}")


def make_folds(train_patients, k=10, seed=0):
    """k near-equal validation folds over the training patients."""
    patients = sorted(set(train_patients))
    if len(patients) < k:
        raise ValueError(f"cannot make {k} folds from {len(patients)} patients")
    stream = Stream(seed, "folds").spawn("order")
    order = list(patients)
    stream.shuffle(order)
    base, extra = divmod(len(order), k)
    folds = []
    pos = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        val = sorted(order[pos : pos + size])
        train = sorted(set(order) - set(val))
        folds.append((train, val))
        pos += size
    return folds


def entries_for_patients(manifest, patient_ids):
    wanted = set(patient_ids)
    return [e for e in manifest.entries if e.patient_id in wanted]


def oversample(entries):
    """Duplicate minority-class entries round-robin up to the majority count."""
    if not entries:
        raise ValueError("no entries to oversample")
    by_class = {}
    for e in entries:
        by_class.setdefault(e.label, []).append(e)
    majority = max(len(v) for v in by_class.values())
    out = list(entries)
    for label in sorted(by_class):
        bucket = by_class[label]
        deficit = majority - len(bucket)
        out.extend(bucket[i % len(bucket)] for i in range(deficit))
    return out


def label_fraction_subset(entries, fraction, seed):
    """Patient-grouped deterministic subset with the given label fraction.

    Patients are subsampled per class (at least one patient per present
    class survives), so no class disappears and the leakage ban holds.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    if fraction == 1.0:
        return list(entries)
    by_class = {}
    for e in entries:
        by_class.setdefault(e.label, set()).add(e.patient_id)
    stream = Stream(seed, "label-fraction")
    keep = set()
    for label in sorted(by_class):
        patients = sorted(by_class[label])
        sub = stream.spawn(label)
        sub.shuffle(patients)
        n = max(1, int(math.floor(fraction * len(patients) + 0.5)))
        keep.update(patients[:n])
    return [e for e in entries if e.patient_id in keep]


# -- corpus generation ---------------------------------------------------------


def generate_corpus(out_dir, seed, patients_per_class=15, frames_per_volume=10,
                    frame_width=128, patch_size=64, stride=None):
    """Write frames, patches, and manifest.json; returns the manifest."""
    if patch_size > frame_width:
        raise ValueError("patch_size must not exceed frame_width")
    if frames_per_volume < 1 or patients_per_class < 1:
        raise ValueError("need at least one frame and one patient per class")
    stride = stride or patch_size // 2
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    (out_dir / "patches").mkdir(parents=True, exist_ok=True)
    root_stream = Stream(seed, "corpus")
    offsets = sliding_windows(frame_width, patch_size, stride)
    entries = []
    for label in CLASS_NAMES:
        for idx in range(patients_per_class):
            patient_id = f"{label}{idx:03d}"
            volume_id = f"{patient_id}-V0"
            pstream = root_stream.spawn(f"patient/{patient_id}")
            params = _patient_params(label, pstream.spawn("params"))
            frame_dir = out_dir / "frames" / volume_id
            patch_dir = out_dir / "patches" / volume_id
            frame_dir.mkdir(exist_ok=True)
            patch_dir.mkdir(exist_ok=True)
            for f in range(frames_per_volume):
                frame = render_frame(label, params, pstream.spawn(f"frame/{f}"),
                                     patch_size, frame_width)
                write_pgm(frame_dir / f"frame{f:03d}.pgm", frame)
                for p, off in enumerate(offsets):
                    patch = frame[:, off : off + patch_size]
                    rel = f"patches/{volume_id}/f{f:03d}_p{p:02d}.pgm"
                    write_pgm(out_dir / rel, patch)
                    entries.append(ManifestEntry(patient_id, volume_id, f, p, rel, label))
    manifest = DatasetManifest(entries, seed, patch_size, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
