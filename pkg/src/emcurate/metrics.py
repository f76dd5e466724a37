"""Segmentation and detection metrics.

Implements the full evaluation suite: Dice similarity (DSC), normalized
surface distance (NSD), sensitivity/specificity/F1 from confusion counts,
patient-wise and tumor-wise detection, multi-class diagnosis confusion
matrices, and ROC curves over probability maps.

Empty-set conventions (applied consistently everywhere):

* DSC(empty, empty) = 1.0 - perfect agreement on absence. This makes the
  DSC = 0 trigger used by the annotation audit fire exactly when one side
  asserts presence and the other denies it, or when both are nonempty but
  spatially disjoint.
* NSD(empty, empty) = 1.0; NSD(empty, nonempty) = 0.0.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ShapeError, UndefinedRateError
from .grid import LabelMap, StructureCatalog, connected_components

FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ShapeError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class SurfaceDistanceSpec:
    """NSD parameters: tolerance (mm) and the voxel spacing of the masks."""

    tolerance_mm: float
    spacing: tuple[float, float, float]

    def __post_init__(self):
        if self.tolerance_mm <= 0:
            raise ShapeError("tolerance_mm must be > 0")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ShapeError(f"spacing must be a positive triple, got {self.spacing}")


@dataclass(frozen=True)
class StructureScores:
    dsc: float
    nsd: Optional[float]
    pred_voxels: int
    ref_voxels: int


@dataclass(frozen=True)
class MetricReport:
    """Per-structure scores for one (prediction, reference) pair of label maps."""

    per_structure: dict[int, StructureScores]

    @property
    def mean_dsc(self) -> float:
        return float(np.mean([s.dsc for s in self.per_structure.values()]))


class DetectionOutcome(str, Enum):
    TP = "TP"
    TN = "TN"
    FP = "FP"
    FN = "FN"


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    sensitivity: float
    fp_per_scan: float
    specificity: float


@dataclass(frozen=True)
class RocCurve:
    points: tuple[RocPoint, ...]

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        thresholds = [p.threshold for p in self.points]
        if any(nxt >= prev for nxt, prev in zip(thresholds[1:], thresholds[:-1])):
            raise ShapeError("thresholds must be strictly decreasing")
        sens = [p.sensitivity for p in self.points]
        if any(a < b for a, b in zip(sens[1:], sens[:-1])):
            raise ShapeError("sensitivity must be non-decreasing as threshold decreases")


def _as_mask_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask dims differ: {a.shape} vs {b.shape}")
    return a, b


def dsc(a, b) -> float:
    """Dice similarity 2|A.B| / (|A|+|B|); 1.0 when both masks are empty."""
    a, b = _as_mask_pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Surface voxels: in the mask with a face neighbor outside it or on the grid border."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=FACE_STRUCTURE, border_value=0)
    return mask & ~interior


def nsd(a, b, spec: SurfaceDistanceSpec) -> float:
    """Normalized surface distance at tolerance spec.tolerance_mm.

    Boundary voxels of each mask are tested against the exact Euclidean
    distance (in mm, via the spacing-scaled distance transform) to the other
    mask's boundary; the score is the fraction strictly within tolerance.
    """
    a, b = _as_mask_pair(a, b)
    surf_a = boundary_voxels(a)
    surf_b = boundary_voxels(b)
    n_a = int(np.count_nonzero(surf_a))
    n_b = int(np.count_nonzero(surf_b))
    if n_a == 0 and n_b == 0:
        return 1.0
    if n_a == 0 or n_b == 0:
        return 0.0
    dist_to_b = ndimage.distance_transform_edt(~surf_b, sampling=spec.spacing)
    dist_to_a = ndimage.distance_transform_edt(~surf_a, sampling=spec.spacing)
    close_a = int(np.count_nonzero(dist_to_b[surf_a] < spec.tolerance_mm))
    close_b = int(np.count_nonzero(dist_to_a[surf_b] < spec.tolerance_mm))
    return (close_a + close_b) / (n_a + n_b)


def sensitivity(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        raise UndefinedRateError("sensitivity")
    return c.tp / (c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    if c.tn + c.fp == 0:
        raise UndefinedRateError("specificity")
    return c.tn / (c.tn + c.fp)


def f1_score(c: ConfusionCounts) -> float:
    if c.tp + c.fp == 0:
        raise UndefinedRateError("precision")
    precision = c.tp / (c.tp + c.fp)
    recall = sensitivity(c)
    if precision + recall == 0:
        raise UndefinedRateError("f1")
    return 2 * precision * recall / (precision + recall)


def classification_rates(c: ConfusionCounts) -> tuple[float, float, float]:
    """(sensitivity, specificity, f1); raises UndefinedRateError naming any zero-denominator rate."""
    return sensitivity(c), specificity(c), f1_score(c)


def patient_wise_detection(pred_tumor, ref_tumor) -> DetectionOutcome:
    """Case-level outcome: predicted/reference positivity is mask non-emptiness."""
    pred, ref = _as_mask_pair(pred_tumor, ref_tumor)
    pred_pos = bool(pred.any())
    ref_pos = bool(ref.any())
    if ref_pos:
        return DetectionOutcome.TP if pred_pos else DetectionOutcome.FN
    return DetectionOutcome.FP if pred_pos else DetectionOutcome.TN


def tumor_wise_detection(pred_tumor, ref_tumor, connectivity: int = 6,
                         fp_min_voxels: int = 1) -> ConfusionCounts:
    """Instance-level counts: a reference component is TP iff it meets the
    prediction; predicted components meeting no reference voxel are FP.
    TN is undefined at instance level and reported as 0.
    """
    pred, ref = _as_mask_pair(pred_tumor, ref_tumor)
    ref_comp = connected_components(ref, connectivity)
    tp = fn = 0
    for k in range(1, ref_comp.count + 1):
        if bool(pred[ref_comp.ids == k].any()):
            tp += 1
        else:
            fn += 1
    pred_comp = connected_components(pred, connectivity)
    fp = 0
    for k in range(1, pred_comp.count + 1):
        inst = pred_comp.ids == k
        if int(pred_comp.sizes[k - 1]) < fp_min_voxels:
            continue
        if not bool(ref[inst].any()):
            fp += 1
    return ConfusionCounts(tp=tp, tn=0, fp=fp, fn=fn)


def diagnosis_confusion(pred: Sequence, ref: Sequence,
                        classes: Sequence) -> tuple[np.ndarray, float]:
    """Square count matrix (rows = reference, cols = predicted) and accuracy."""
    if len(pred) != len(ref):
        raise ShapeError(f"pred/ref length mismatch: {len(pred)} vs {len(ref)}")
    if len(ref) == 0:
        raise ShapeError("diagnosis_confusion requires at least one case")
    index = {c: i for i, c in enumerate(classes)}
    matrix = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, r in zip(pred, ref):
        matrix[index[r], index[p]] += 1
    accuracy = float(np.trace(matrix) / len(ref))
    return matrix, accuracy


def _check_thresholds(thresholds: Sequence[float]) -> list[float]:
    ts = [float(t) for t in thresholds]
    if not ts:
        raise ShapeError("threshold list must be nonempty")
    if any(b >= a for a, b in zip(ts, ts[1:])):
        raise ShapeError("thresholds must be strictly decreasing")
    if ts[0] > 1.0 or ts[-1] < 0.0:
        raise ShapeError("thresholds must lie within [0, 1]")
    return ts


def default_threshold_grid(n: int = 101) -> list[float]:
    """n evenly spaced thresholds over [0, 1], descending."""
    return list(np.linspace(1.0, 0.0, n))


def build_roc(prob_maps: Sequence[np.ndarray], refs: Sequence[np.ndarray],
              thresholds: Sequence[float], connectivity: int = 6,
              fp_min_voxels: int = 1) -> RocCurve:
    """Sweep thresholds over per-case tumor probability maps.

    At each threshold t a case is binarized as prob > t; sensitivity is
    tumor-wise over all reference instances pooled across cases, fp_per_scan
    is the mean count of false-positive components per case, and specificity
    is patient-wise over reference-negative cases (nan if there are none).
    """
    if len(prob_maps) == 0 or len(prob_maps) != len(refs):
        raise ShapeError("need matching, nonempty prob_maps and refs")
    ts = _check_thresholds(thresholds)
    probs = [np.asarray(p, dtype=np.float64) for p in prob_maps]
    masks = [np.asarray(r, dtype=bool) for r in refs]
    for p, r in zip(probs, masks):
        if p.shape != r.shape:
            raise ShapeError(f"probability map shape {p.shape} != reference {r.shape}")

    # Per reference instance, detection at threshold t only depends on the
    # max probability over the instance; precompute it once per instance.
    inst_max: list[float] = []
    n_neg_cases = 0
    for p, r in zip(probs, masks):
        comp = connected_components(r, connectivity)
        if comp.count == 0:
            n_neg_cases += 1
        for k in range(1, comp.count + 1):
            inst_max.append(float(p[comp.ids == k].max()))
    inst_max_arr = np.array(inst_max, dtype=np.float64)
    n_instances = len(inst_max)

    points = []
    for t in ts:
        tp = int(np.count_nonzero(inst_max_arr > t)) if n_instances else 0
        sens = tp / n_instances if n_instances else 0.0
        fp_total = 0
        tn_cases = 0
        fp_cases = 0
        for p, r in zip(probs, masks):
            pred = p > t
            counts = tumor_wise_detection(pred, r, connectivity, fp_min_voxels)
            fp_total += counts.fp
            if not r.any():
                if pred.any():
                    fp_cases += 1
                else:
                    tn_cases += 1
        spec = tn_cases / n_neg_cases if n_neg_cases else float("nan")
        points.append(RocPoint(threshold=t, sensitivity=sens,
                               fp_per_scan=fp_total / len(probs), specificity=spec))
    return RocCurve(points=tuple(points))


def evaluate_pair(pred: LabelMap, ref: LabelMap, spec: SurfaceDistanceSpec,
                  with_nsd: bool = True) -> MetricReport:
    """Per-structure DSC (and optionally NSD) between two label maps."""
    if pred.dims != ref.dims or pred.spacing != ref.spacing:
        raise ShapeError("label map lattices differ")
    scores: dict[int, StructureScores] = {}
    for label in pred.catalog.labels:
        a = pred.labels == label
        b = ref.labels == label
        scores[label] = StructureScores(
            dsc=dsc(a, b),
            nsd=nsd(a, b, spec) if with_nsd else None,
            pred_voxels=int(a.sum()),
            ref_voxels=int(b.sum()),
        )
    return MetricReport(per_structure=scores)


def corpus_summary(reports: dict[str, MetricReport],
                   catalog: StructureCatalog) -> dict:
    """Aggregate per-case reports into median (Q1-Q3) per structure plus corpus means."""
    summary: dict = {"per_structure": {}, "n_cases": len(reports)}
    all_dsc = []
    for label in catalog.labels:
        ds = [r.per_structure[label].dsc for r in reports.values()]
        ns = [r.per_structure[label].nsd for r in reports.values()
              if r.per_structure[label].nsd is not None]
        all_dsc.extend(ds)
        entry = {
            "name": catalog.entry(label).name,
            "dsc_median": float(np.median(ds)),
            "dsc_q1": float(np.percentile(ds, 25)),
            "dsc_q3": float(np.percentile(ds, 75)),
            "dsc_mean": float(np.mean(ds)),
        }
        if ns:
            entry.update({
                "nsd_median": float(np.median(ns)),
                "nsd_q1": float(np.percentile(ns, 25)),
                "nsd_q3": float(np.percentile(ns, 75)),
                "nsd_mean": float(np.mean(ns)),
            })
        summary["per_structure"][str(label)] = entry
    summary["mean_dsc"] = float(np.mean(all_dsc)) if all_dsc else float("nan")
    return summary
