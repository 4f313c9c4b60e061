"""Synthetic phantoms standing in for CT slices.

Each image has two elliptical lung fields on a dark background. CAP
phantoms carry sharp-edged bright discs; COVID phantoms carry smooth
medium-intensity blobs (ground-glass-like) whose half-maximum support is
the infection mask; NP phantoms carry nothing.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError, UsageError
from .pgm import read_pgm, to_gray16, write_pgm

CLASSES = ("NP", "CAP", "COVID")
NP, CAP, COVID = 0, 1, 2
NOISE_SIGMA = 0.02
BACKGROUND = 0.05
_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, sample_id: str) -> int:
    """Per-sample seed: splitmix64 chained over the utf-8 bytes of the id."""
    h = splitmix64(seed & _MASK64)
    for byte in sample_id.encode():
        h = splitmix64(h ^ byte)
    return h


def class_index(name) -> int:
    if isinstance(name, (int, np.integer)):
        if not 0 <= int(name) < 3:
            raise UsageError(f"class index out of range: {name}")
        return int(name)
    try:
        return CLASSES.index(str(name).upper())
    except ValueError:
        raise UsageError(f"unknown class {name!r}; expected one of {CLASSES}") from None


@dataclass
class PhantomSample:
    image: np.ndarray
    label: int
    mask: np.ndarray
    labelled: bool = True
    id: str = ""

    @property
    def class_name(self) -> str:
        return CLASSES[self.label]


def _lungs(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    lungs = []
    for side in (0.3, 0.7):
        cy = size * (0.5 + rng.uniform(-0.03, 0.03))
        cx = size * (side + rng.uniform(-0.02, 0.02))
        ry = size * rng.uniform(0.30, 0.36)
        rx = size * rng.uniform(0.14, 0.18)
        lungs.append((cy, cx, ry, rx))
    mask = np.zeros((size, size), dtype=bool)
    for cy, cx, ry, rx in lungs:
        mask |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return yy, xx, lungs, mask


def _point_in_lung(rng, lungs, shrink=0.65):
    cy, cx, ry, rx = lungs[rng.integers(len(lungs))]
    r = shrink * np.sqrt(rng.uniform())
    t = rng.uniform(0, 2 * np.pi)
    return cy + r * ry * np.sin(t), cx + r * rx * np.cos(t)


def generate_phantom(seed: int, label, size: int = 64, sample_id: str = "",
                     labelled: bool = True) -> PhantomSample:
    """Deterministic phantom for ``(seed, label, size)``."""
    if size <= 0 or size % 32:
        raise UsageError(f"phantom size must be a positive multiple of 32, got {size}")
    label = class_index(label)
    rng = np.random.default_rng(seed)
    scale = size / 64.0
    yy, xx, lungs, lung_mask = _lungs(rng, size)
    img = np.full((size, size), BACKGROUND)
    img[lung_mask] = rng.uniform(0.25, 0.32)
    mask = np.zeros((size, size), dtype=np.uint8)
    n_lesions = int(rng.integers(1, 5))
    if label == CAP:
        for _ in range(n_lesions):
            cy, cx = _point_in_lung(rng, lungs)
            radius = scale * rng.uniform(2.0, 4.0)
            disc = ((yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2) & lung_mask
            img[disc] = rng.uniform(0.85, 0.95)
    elif label == COVID:
        field = np.zeros((size, size))
        for _ in range(n_lesions):
            cy, cx = _point_in_lung(rng, lungs)
            sigma = scale * rng.uniform(2.0, 3.5)
            amp = rng.uniform(0.25, 0.35)
            r2 = (yy - cy) ** 2 + (xx - cx) ** 2
            field += amp * np.exp(-r2 / (2 * sigma**2))
            # half-maximum support of this blob
            mask |= (r2 <= 2 * np.log(2) * sigma**2).astype(np.uint8)
        img += field * lung_mask
        mask &= lung_mask.astype(np.uint8)
    img = np.clip(img + rng.normal(0.0, NOISE_SIGMA, size=img.shape), 0.0, 1.0)
    return PhantomSample(image=img, label=label, mask=mask, labelled=labelled, id=sample_id)


def lung_area(seed: int, size: int = 64) -> int:
    """Pixel count of the lung fields a phantom with this seed would get."""
    _, _, _, m = _lungs(np.random.default_rng(seed), size)
    return int(m.sum())


def box_blur3(image: np.ndarray) -> np.ndarray:
    padded = np.pad(image, 1, mode="edge")
    h, w = image.shape
    acc = np.zeros_like(image, dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy:dy + h, dx:dx + w]
    return acc / 9.0


def augment_strong(image: np.ndarray, contrast_k: float | None = None, sharp_a: float | None = None,
                   seed: int | None = None) -> np.ndarray:
    """Contrast then sharpness adjustment; unset factors are drawn from ``seed``.

    contrast: clamp(mean + k (x - mean), 0, 1), k in [0.5, 1.5]
    sharpness: clamp(x + a (x - blur3(x)), 0, 1), a in [0, 1]
    """
    rng = np.random.default_rng(seed)
    if contrast_k is None:
        contrast_k = rng.uniform(0.5, 1.5)
    if sharp_a is None:
        sharp_a = rng.uniform(0.0, 1.0)
    x = np.asarray(image, dtype=np.float64)
    m = x.mean()
    x = np.clip(m + contrast_k * (x - m), 0.0, 1.0)
    return np.clip(x + sharp_a * (x - box_blur3(x)), 0.0, 1.0)


def pixel_oracle_class(image: np.ndarray) -> int:
    """Hand-written classifier from pixel statistics (feasibility check).

    CAP discs are the only pixels far above the lung level; COVID blobs
    leave a smooth bump well above the median lung intensity.
    """
    img = np.asarray(image, dtype=np.float64)
    smooth = box_blur3(img)
    if smooth.max() > 0.75:
        return CAP
    lung = smooth[smooth > 0.15]
    if lung.size and smooth.max() - np.median(lung) > 0.12:
        return COVID
    return NP


@dataclass
class SplitManifest:
    labelled_train: list = field(default_factory=list)
    unlabelled_train: list = field(default_factory=list)
    test_classification: list = field(default_factory=list)
    test_segmentation: list = field(default_factory=list)
    labels: dict = field(default_factory=dict)
    seed: int = 0
    size: int = 64

    def partitions(self) -> dict:
        return {"labelled_train": self.labelled_train, "unlabelled_train": self.unlabelled_train,
                "test_classification": self.test_classification,
                "test_segmentation": self.test_segmentation}

    def train_ids(self) -> list:
        return self.labelled_train + self.unlabelled_train


def build_splits(counts, labelled_fraction: float, seed: int, test_counts=None, size: int = 64) -> SplitManifest:
    """Partition per-class training counts into labelled and unlabelled sets.

    ``counts`` and ``test_counts`` give per-class sample numbers in
    NP/CAP/COVID order. The segmentation test set is the COVID part of the
    classification test set.
    """
    if not 0.0 < labelled_fraction <= 1.0:
        raise UsageError(f"labelled_fraction must lie in (0, 1], got {labelled_fraction}")
    counts = [int(c) for c in counts]
    test_counts = counts if test_counts is None else [int(c) for c in test_counts]
    if len(counts) != 3 or len(test_counts) != 3:
        raise UsageError("need one count per class (NP, CAP, COVID)")
    rng = np.random.default_rng(seed)
    man = SplitManifest(seed=seed, size=size)
    for cls, n in enumerate(counts):
        n_lab = int(round(labelled_fraction * n))
        if n <= 0 or n_lab < 1:
            raise UsageError(f"class {CLASSES[cls]}: {n} samples cannot fill a labelled partition "
                             f"at fraction {labelled_fraction}")
        ids = [f"train-{CLASSES[cls]}-{i:05d}" for i in range(n)]
        chosen = set(rng.permutation(n)[:n_lab].tolist())
        for i, sid in enumerate(ids):
            man.labels[sid] = cls
            (man.labelled_train if i in chosen else man.unlabelled_train).append(sid)
    for cls, n in enumerate(test_counts):
        if n <= 0:
            raise UsageError(f"class {CLASSES[cls]}: test count must be positive")
        for i in range(n):
            sid = f"test-{CLASSES[cls]}-{i:05d}"
            man.labels[sid] = cls
            man.test_classification.append(sid)
            if cls == COVID:
                man.test_segmentation.append(sid)
    return man


def make_sample(manifest: SplitManifest, sample_id: str) -> PhantomSample:
    labelled = sample_id not in set(manifest.unlabelled_train)
    return generate_phantom(derive_seed(manifest.seed, sample_id), manifest.labels[sample_id],
                            manifest.size, sample_id=sample_id, labelled=labelled)


def materialize(manifest: SplitManifest) -> dict:
    """Generate every sample in the manifest (order independent)."""
    unl = set(manifest.unlabelled_train)
    out = {}
    for sid, label in manifest.labels.items():
        out[sid] = generate_phantom(derive_seed(manifest.seed, sid), label, manifest.size,
                                    sample_id=sid, labelled=sid not in unl)
    return out


# ------------------------------------------------------------------ disk io

MANIFEST_HEADER = ["id", "path", "class", "labelled", "mask_path"]


def write_dataset(directory, manifest: SplitManifest, samples: dict) -> str:
    """Write images (16-bit), masks (8-bit, labelled and test only) and manifest.csv."""
    directory = os.fspath(directory)
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    os.makedirs(os.path.join(directory, "masks"), exist_ok=True)
    unl = set(manifest.unlabelled_train)
    rows = []
    for sid in manifest.train_ids() + manifest.test_classification:
        s = samples[sid]
        img_rel = f"images/{sid}.pgm"
        write_pgm(os.path.join(directory, img_rel), to_gray16(s.image))
        mask_rel = ""
        if sid not in unl:
            mask_rel = f"masks/{sid}.pgm"
            write_pgm(os.path.join(directory, mask_rel), (s.mask > 0).astype(np.uint8) * 255)
        rows.append([sid, img_rel, CLASSES[s.label], "0" if sid in unl else "1", mask_rel])
    path = os.path.join(directory, "manifest.csv")
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(MANIFEST_HEADER)
        wr.writerows(rows)
    with open(os.path.join(directory, "split.txt"), "w") as f:
        f.write(f"seed={manifest.seed}\nsize={manifest.size}\n")
    return path


def read_dataset(directory) -> tuple[SplitManifest, dict]:
    """Inverse of :func:`write_dataset`."""
    directory = os.fspath(directory)
    path = os.path.join(directory, "manifest.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    meta = {}
    split_path = os.path.join(directory, "split.txt")
    if os.path.exists(split_path):
        with open(split_path) as f:
            meta = dict(line.strip().split("=", 1) for line in f if "=" in line)
    man = SplitManifest(seed=int(meta.get("seed", 0)))
    samples = {}
    with open(path, newline="") as f:
        rd = csv.reader(f)
        header = next(rd, None)
        if header != MANIFEST_HEADER:
            raise FormatError(f"{path}: header {header}, expected {MANIFEST_HEADER}")
        for lineno, row in enumerate(rd, start=2):
            if len(row) != 5:
                raise FormatError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            sid, img_rel, cls_name, lab, mask_rel = row
            label = class_index(cls_name)
            raw = read_pgm(os.path.join(directory, img_rel))
            img = raw.astype(np.float64) / (65535.0 if raw.dtype == np.uint16 else 255.0)
            if mask_rel:
                mask = (read_pgm(os.path.join(directory, mask_rel)) > 0).astype(np.uint8)
            else:
                mask = np.zeros(img.shape, dtype=np.uint8)
            labelled = lab == "1"
            samples[sid] = PhantomSample(image=img, label=label, mask=mask, labelled=labelled, id=sid)
            man.labels[sid] = label
            if sid.startswith("test-"):
                man.test_classification.append(sid)
                if label == COVID:
                    man.test_segmentation.append(sid)
            elif labelled:
                man.labelled_train.append(sid)
            else:
                man.unlabelled_train.append(sid)
            man.size = img.shape[0]
    if not samples:
        raise FormatError(f"{path}: manifest lists no samples")
    return man, samples
