"""Deterministic ultrasound-like phantom generator.

Brain and abdomen phantoms are bright elliptical rings over multiplicative
speckle; femur phantoms are bright oriented bars.  Every sample carries its
ground-truth mask, geometric parameters, subject id and pixel spacing, so
biometric errors are measurable in millimetres.  Datasets persist as PGM
files plus a CSV manifest with subject-disjoint train/val/test splits.

Brain rings are thin and higher-contrast, abdomen rings thicker and
dimmer: together with the bar-shaped femur this keeps the three classes
separable from simple mask/intensity features.  Within every image the
mask region (ring interior or bar) is the brightest structure, rings and
background sit well below it, and the ring hugs the truth ellipse from
outside, so the mask boundary coincides with a sharp intensity step.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .geometry import (EllipseParams, rasterize_ellipse_mask, rasterize_line_mask,
                       cross_template)
from .network import ORGAN_BY_NAME, ORGAN_NAMES, OrganClass
from .pgm import read_pgm, write_pgm

PIXEL_SPACING_MM = 0.5
SPECKLE_SIGMA = 0.3
BACKGROUND_LEVEL = 0.25

# per-class appearance: axis range as fraction of size, ring (thickness px,
# added brightness), interior/bar added brightness.  Each class's mask
# region has a distinct shade and is the brightest structure in its own
# image, so both the organ identity and the region extent stay readable
# through the speckle.
_BRAIN_AXIS_FRAC = (0.18, 0.30)
_ABDOMEN_AXIS_FRAC = (0.23, 1 / 3)
_BRAIN_RING = (2.0, 0.10)
_ABDOMEN_RING = (5.0, 0.06)
_BRAIN_INTERIOR = 0.60
_ABDOMEN_INTERIOR = 0.40
_FEMUR_LEVEL = 0.35
_ANNOT_DASH = (4.0, 4.0)
_ANNOT_ARM = 3


@dataclass
class FemurTruth:
    """Ground truth for a femur phantom: endpoints and bar width."""

    x1: float
    y1: float
    x2: float
    y2: float
    width: int

    @property
    def length(self) -> float:
        return math.hypot(self.x2 - self.x1, self.y2 - self.y1)


@dataclass
class ScanSample:
    """One phantom scan with its ground truth."""

    image: np.ndarray            # (H, W) float64 in [0, 1]
    mask: np.ndarray             # (H, W) bool, rasterization of `truth`
    organ: OrganClass
    truth: EllipseParams | FemurTruth
    subject_id: int
    pixel_spacing_mm: float = PIXEL_SPACING_MM
    stem: str = ""
    split: str = ""


def true_biometric_mm(sample: ScanSample) -> float:
    """Ground-truth biometric in mm: circumference for rings, length for bars."""
    from .geometry import ellipse_circumference
    if isinstance(sample.truth, EllipseParams):
        return ellipse_circumference(sample.truth) * sample.pixel_spacing_mm
    return sample.truth.length * sample.pixel_spacing_mm


def _speckle(rng: np.random.Generator, size: int) -> np.ndarray:
    """Multiplicative log-normal speckle smoothed with a 3x3 box filter."""
    field = rng.lognormal(mean=-SPECKLE_SIGMA ** 2 / 2, sigma=SPECKLE_SIGMA,
                          size=(size + 2, size + 2))
    acc = np.zeros((size, size))
    for dy in range(3):
        for dx in range(3):
            acc += field[dy:dy + size, dx:dx + size]
    return acc / 9.0


def _random_ellipse(rng: np.random.Generator, size: int, frac) -> EllipseParams:
    a = rng.uniform(frac[0] * size, frac[1] * size)
    b = rng.uniform(0.65 * a, a)
    cx = rng.uniform(size / 3, 2 * size / 3)
    cy = rng.uniform(size / 3, 2 * size / 3)
    theta = rng.uniform(0.0, math.pi)
    return EllipseParams(cx=cx, cy=cy, a=a, b=b, theta=theta)


def generate_sample(organ: OrganClass, size: int, rng: np.random.Generator) -> ScanSample:
    """Generate one phantom; bit-identical for identical generator state."""
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    level = np.full((size, size), BACKGROUND_LEVEL)

    if organ in (OrganClass.BRAIN, OrganClass.ABDOMEN):
        frac = _BRAIN_AXIS_FRAC if organ == OrganClass.BRAIN else _ABDOMEN_AXIS_FRAC
        thick, bright = _BRAIN_RING if organ == OrganClass.BRAIN else _ABDOMEN_RING
        truth = _random_ellipse(rng, size, frac)
        # the ring hugs the truth contour from outside, so the mask boundary
        # sits exactly on the interior-to-ring intensity step
        outer = rasterize_ellipse_mask(
            replace(truth, a=truth.a + thick, b=truth.b + thick), size, size)
        interior = _BRAIN_INTERIOR if organ == OrganClass.BRAIN else _ABDOMEN_INTERIOR
        mask = rasterize_ellipse_mask(truth, size, size)
        level[mask] += interior
        level[outer & ~mask] += bright
    else:
        length = rng.uniform(size / 4, size / 2)
        width = int(rng.integers(3, 6))
        angle = rng.uniform(0.0, math.pi)
        cx = rng.uniform(size / 3, 2 * size / 3)
        cy = rng.uniform(size / 3, 2 * size / 3)
        dx = 0.5 * length * math.cos(angle)
        dy = 0.5 * length * math.sin(angle)
        truth = FemurTruth(x1=cx - dx, y1=cy - dy, x2=cx + dx, y2=cy + dy, width=width)
        mask = rasterize_line_mask((truth.x1, truth.y1), (truth.x2, truth.y2),
                                   width, size, size)
        level[mask] += _FEMUR_LEVEL

    image = np.clip(level * _speckle(rng, size), 0.0, 1.0)
    return ScanSample(image=image, mask=mask, organ=organ, truth=truth,
                      subject_id=-1)


def overlay_annotations(sample: ScanSample) -> np.ndarray:
    """Annotation channel for the preprocessing pipeline.

    Rings get a dashed outline of the true ellipse; femurs get a cross
    marker at each endpoint.  Unannotated pixels stay zero.
    """
    h, w = sample.image.shape
    if isinstance(sample.truth, EllipseParams):
        return rasterize_ellipse_mask(sample.truth, w, h, filled=False,
                                      dash=_ANNOT_DASH).astype(np.float64)
    annot = np.zeros((h, w))
    tmpl = cross_template(_ANNOT_ARM)
    for px, py in ((sample.truth.x1, sample.truth.y1), (sample.truth.x2, sample.truth.y2)):
        cx, cy = int(round(px)), int(round(py))
        for dy in range(-_ANNOT_ARM, _ANNOT_ARM + 1):
            for dx in range(-_ANNOT_ARM, _ANNOT_ARM + 1):
                if tmpl[dy + _ANNOT_ARM, dx + _ANNOT_ARM] and \
                        0 <= cy + dy < h and 0 <= cx + dx < w:
                    annot[cy + dy, cx + dx] = 1.0
    return annot


# ---------------------------------------------------------------------------
# dataset assembly and persistence
# ---------------------------------------------------------------------------

MANIFEST_HEADER = ["stem", "organ", "subject_id", "truth", "spacing_mm", "split"]


def split_subjects(subject_ids, seed: int) -> dict[int, str]:
    """Subject-disjoint 80/20 train/test split, then 10% of train as val."""
    ids = sorted(subject_ids)
    rng = np.random.default_rng([seed, 0x5B17])
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_test = max(1, round(0.2 * len(ids)))
    test = set(order[:n_test])
    train_pool = order[n_test:]
    n_val = max(1, round(0.1 * len(train_pool)))
    val = set(train_pool[:n_val])
    return {s: ("test" if s in test else "val" if s in val else "train") for s in ids}


def _truth_str(truth) -> str:
    if isinstance(truth, EllipseParams):
        vals = [truth.cx, truth.cy, truth.a, truth.b, truth.theta]
    else:
        vals = [truth.x1, truth.y1, truth.x2, truth.y2, truth.width]
    return ";".join(f"{v:.6f}" for v in vals)


def _truth_from_str(organ: OrganClass, text: str):
    vals = [float(v) for v in text.split(";")]
    if len(vals) != 5:
        raise ValueError(f"truth needs 5 parameters, got {len(vals)}")
    if organ == OrganClass.FEMUR:
        return FemurTruth(x1=vals[0], y1=vals[1], x2=vals[2], y2=vals[3],
                          width=int(round(vals[4])))
    return EllipseParams(cx=vals[0], cy=vals[1], a=vals[2], b=vals[3], theta=vals[4])


def generate_dataset(out_dir: str, n_subjects: int, scans_per_subject: int,
                     size: int, seed: int, annotate: bool = False) -> list[ScanSample]:
    """Generate and persist a phantom dataset.

    Organs rotate round-robin over the scan index so class counts stay
    balanced; each sample's random stream derives from (seed, subject,
    scan), making generation order-independent and reproducible.
    """
    if n_subjects < 5:
        raise ValueError(f"need at least 5 subjects, got {n_subjects}")
    for sub in ["images", "masks"] + (["annot"] if annotate else []):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    splits = split_subjects(range(n_subjects), seed)
    samples: list[ScanSample] = []
    for subject in range(n_subjects):
        for scan in range(scans_per_subject):
            organ = OrganClass((subject * scans_per_subject + scan) % 3)
            rng = np.random.default_rng([seed, subject, scan])
            sample = generate_sample(organ, size, rng)
            sample.subject_id = subject
            sample.stem = f"s{subject:04d}_{scan:02d}_{ORGAN_NAMES[organ]}"
            sample.split = splits[subject]
            write_pgm(os.path.join(out_dir, "images", sample.stem + ".pgm"), sample.image)
            write_pgm(os.path.join(out_dir, "masks", sample.stem + ".pgm"), sample.mask)
            if annotate:
                write_pgm(os.path.join(out_dir, "annot", sample.stem + ".pgm"),
                          overlay_annotations(sample))
            samples.append(sample)

    manifest = os.path.join(out_dir, "manifest.csv")
    tmp = manifest + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for s in samples:
            writer.writerow([s.stem, ORGAN_NAMES[s.organ], s.subject_id,
                             _truth_str(s.truth), f"{s.pixel_spacing_mm:.6f}", s.split])
    os.replace(tmp, manifest)
    return samples


def load_dataset(manifest_path: str) -> list[ScanSample]:
    """Load a dataset written by :func:`generate_dataset`.

    Raises ``ValueError`` naming the offending manifest row on malformed
    rows or image/mask dimension mismatches.
    """
    base = os.path.dirname(os.path.abspath(manifest_path))
    samples: list[ScanSample] = []
    with open(manifest_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ValueError(f"{manifest_path}: unexpected manifest header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_HEADER):
                raise ValueError(
                    f"{manifest_path} row {lineno}: expected {len(MANIFEST_HEADER)} "
                    f"fields, got {len(row)}")
            stem, organ_name, subject, truth_s, spacing, split = row
            try:
                organ = ORGAN_BY_NAME[organ_name]
                truth = _truth_from_str(organ, truth_s)
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{manifest_path} row {lineno}: {exc}") from exc
            img_path = os.path.join(base, "images", stem + ".pgm")
            mask_path = os.path.join(base, "masks", stem + ".pgm")
            if not os.path.exists(img_path):
                raise ValueError(f"{manifest_path} row {lineno}: missing file {img_path}")
            if not os.path.exists(mask_path):
                raise ValueError(f"{manifest_path} row {lineno}: missing file {mask_path}")
            image = read_pgm(img_path).astype(np.float64) / 255.0
            mask = read_pgm(mask_path) > 127
            if image.shape != mask.shape:
                raise ValueError(
                    f"{manifest_path} row {lineno}: image {image.shape} vs mask "
                    f"{mask.shape} dimension mismatch")
            samples.append(ScanSample(image=image, mask=mask, organ=organ, truth=truth,
                                      subject_id=int(subject),
                                      pixel_spacing_mm=float(spacing),
                                      stem=stem, split=split))
    return samples


def split_of(samples: list[ScanSample], split: str) -> list[ScanSample]:
    return [s for s in samples if s.split == split]
