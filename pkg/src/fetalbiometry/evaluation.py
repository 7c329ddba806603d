"""Biometric estimation from predicted masks, MAE and accuracy reporting.

Head/abdomen circumference comes from an ellipse fit of the largest
component's boundary; femur length is the long side of the minimum-area
rectangle.  Samples whose mask is empty or whose fit degenerates are
flagged failed: they are excluded from the MAE but counted per class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as G
from .network import OrganClass, UNetModel
from .synthdata import ScanSample, true_biometric_mm
from .tensor import Tensor

SEG_THRESHOLD = 0.5


class EstimationError(ValueError):
    """Raised when no biometric can be extracted from a mask."""


@dataclass
class EvalRecord:
    stem: str
    organ_true: OrganClass
    organ_pred: OrganClass
    biometric_true_mm: float
    biometric_pred_mm: float  # nan when failed
    failed: bool = False


@dataclass
class ReportRow:
    """One table row: accuracy plus per-class MAE mean and std in mm."""

    lam: float
    accuracy_pct: float
    mae_mm: dict[OrganClass, float] = field(default_factory=dict)
    std_mm: dict[OrganClass, float] = field(default_factory=dict)
    failed_count: dict[OrganClass, int] = field(default_factory=dict)


def estimate_biometric(mask: np.ndarray, organ: OrganClass, spacing_mm: float) -> float:
    """Millimetre biometric from a binary mask.

    Rings: largest component -> boundary -> ellipse fit -> circumference.
    Femur: largest component -> min-area rectangle -> long side.
    Falls back to a second-moments ellipse fit when the direct conic fit
    degenerates (noisy predicted masks).
    """
    comp = G.largest_component(mask, connectivity=8)
    if not comp.any():
        raise EstimationError("empty mask")
    if organ == OrganClass.FEMUR:
        rect = G.fit_min_rect(comp)
        return rect.length * spacing_mm
    comp = G.fill_holes(comp)
    try:
        ell = G.fit_filled_ellipse(comp)
    except G.FitError:
        ell = G.fit_ellipse_moments(comp)
    return G.ellipse_circumference(ell) * spacing_mm


def mae(records: list[EvalRecord]) -> tuple[float, float]:
    """Mean and population std of |true - pred| over unfailed records."""
    errs = [abs(r.biometric_true_mm - r.biometric_pred_mm)
            for r in records if not r.failed]
    if not errs:
        raise ValueError("no unfailed records to average")
    arr = np.asarray(errs)
    return float(arr.mean()), float(arr.std())


def accuracy(records: list[EvalRecord]) -> float:
    """Classification accuracy in percent."""
    if not records:
        raise ValueError("no records")
    hits = sum(1 for r in records if r.organ_pred == r.organ_true)
    return 100.0 * hits / len(records)


def evaluate(model: UNetModel, samples: list[ScanSample], routing: str = "predicted",
             batch_size: int = 16) -> tuple[list[EvalRecord], ReportRow]:
    """Eval-mode forward over all samples, then biometric extraction.

    ``routing`` chooses which organ label drives the post-processing:
    "predicted" (the deployed pipeline) or "true" (for runs where the
    classification head is untrained).
    """
    if routing not in ("predicted", "true"):
        raise ValueError(f"routing must be 'predicted' or 'true', got {routing!r}")
    if not samples:
        raise ValueError("no samples to evaluate")
    size = model.config.input_size
    for s in samples:
        if s.image.shape != (size, size):
            raise ValueError(
                f"sample {s.stem or '<unnamed>'} is {s.image.shape}, "
                f"model expects {size}x{size}")

    records: list[EvalRecord] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = Tensor(np.stack([s.image for s in chunk])[:, None, :, :])
        out = model.forward(images, mode="eval")
        probs = 1.0 / (1.0 + np.exp(-np.clip(out.seg_logits.data, -500, 500)))
        preds = out.class_logits.data.argmax(axis=1)
        for i, s in enumerate(chunk):
            organ_pred = OrganClass(int(preds[i]))
            route = organ_pred if routing == "predicted" else s.organ
            pred_mask = probs[i, 0] >= SEG_THRESHOLD
            true_mm = true_biometric_mm(s)
            try:
                pred_mm = estimate_biometric(pred_mask, route, s.pixel_spacing_mm)
                failed = False
            except (EstimationError, G.FitError):
                pred_mm = math.nan
                failed = True
            records.append(EvalRecord(stem=s.stem, organ_true=s.organ,
                                      organ_pred=organ_pred,
                                      biometric_true_mm=true_mm,
                                      biometric_pred_mm=pred_mm, failed=failed))

    row = ReportRow(lam=math.nan, accuracy_pct=accuracy(records))
    for organ in OrganClass:
        cls_records = [r for r in records if r.organ_true == organ]
        row.failed_count[organ] = sum(1 for r in cls_records if r.failed)
        ok = [r for r in cls_records if not r.failed]
        if ok:
            row.mae_mm[organ], row.std_mm[organ] = mae(ok)
        else:
            row.mae_mm[organ] = math.nan
            row.std_mm[organ] = math.nan
    return records, row


REPORT_COLUMNS = ["lambda", "accuracy_pct", "brain_mae_mm", "brain_std_mm",
                  "abdomen_mae_mm", "abdomen_std_mm", "femur_mae_mm", "femur_std_mm"]


def report_csv_row(row: ReportRow) -> list[str]:
    vals = [row.lam, row.accuracy_pct]
    for organ in (OrganClass.BRAIN, OrganClass.ABDOMEN, OrganClass.FEMUR):
        vals += [row.mae_mm[organ], row.std_mm[organ]]
    return [f"{v:.6g}" for v in vals]


RECORD_COLUMNS = ["stem", "organ_true", "organ_pred", "true_mm", "pred_mm", "failed"]


def record_csv_row(r: EvalRecord) -> list[str]:
    from .network import ORGAN_NAMES
    return [r.stem, ORGAN_NAMES[r.organ_true], ORGAN_NAMES[r.organ_pred],
            f"{r.biometric_true_mm:.6f}",
            "" if r.failed else f"{r.biometric_pred_mm:.6f}",
            "1" if r.failed else "0"]
