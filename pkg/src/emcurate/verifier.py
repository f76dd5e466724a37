"""Annotation audit: retrainable intensity model, per-structure consistency
check, and the DSC-thresholded update rule.

The audit compares a fitted model's prediction against the current pseudo
annotation structure by structure. Zero overlap (DSC = 0, i.e. exactly one
side claims the structure, or both do in disjoint places) triggers an
automatic replacement by the prediction; low but nonzero agreement
(DSC < 0.5) routes the structure to the projection judge; everything else
is kept untouched. Both thresholds are configuration constants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import numpy as np

from .errors import ModelError, ShapeError
from .grid import (
    BACKGROUND,
    CaseRecord,
    LabelMap,
    StructureCatalog,
    StructureKind,
    VoxelGrid,
    connected_components,
    largest_component,
)
from .metrics import dsc

STD_FLOOR = 1e-3
PROB_FLOOR = 0.01  # posterior below this is clamped to exact zero (sparse maps)
PRIOR_MARGIN_VOXELS = 2


class AuditAction(str, Enum):
    KEEP = "keep"
    AUTO_REPLACE = "auto_replace"
    ROUTE_TO_EXPERT = "route_to_expert"


def classify_action(d: float, auto_replace_dsc: float = 0.0,
                    route_dsc: float = 0.5) -> AuditAction:
    """Map an audit DSC onto an action; thresholds default to 0 and 0.5."""
    if d <= auto_replace_dsc:
        return AuditAction.AUTO_REPLACE
    if d < route_dsc:
        return AuditAction.ROUTE_TO_EXPERT
    return AuditAction.KEEP


@dataclass(frozen=True)
class StructureAudit:
    label: int
    dsc: float
    action: AuditAction


@dataclass(frozen=True)
class AuditOutcome:
    """Per-structure audit verdicts plus the prediction they were scored against."""

    case_id: str
    per_structure: dict[int, StructureAudit]
    prediction: LabelMap

    @property
    def mean_dsc(self) -> float:
        return float(np.mean([a.dsc for a in self.per_structure.values()]))

    def actions(self, action: AuditAction) -> list[int]:
        return [s for s, a in self.per_structure.items() if a.action is action]


@dataclass(frozen=True)
class ChangeLogEntry:
    case_id: str
    structure: int
    action: str
    voxels_before: int
    voxels_after: int
    conflicts: int = 0

    def to_dict(self) -> dict:
        return {"case_id": self.case_id, "structure": self.structure, "action": self.action,
                "voxels_before": self.voxels_before, "voxels_after": self.voxels_after,
                "conflicts": self.conflicts}


class SegmentationModel(Protocol):
    def fit(self, corpus: Sequence[CaseRecord],
            weights: Optional[Sequence[float]] = None) -> None: ...

    def predict(self, volume: VoxelGrid) -> LabelMap: ...

    def predict_prob(self, volume: VoxelGrid, tumor_label: int) -> np.ndarray: ...


@dataclass
class _StructureParams:
    mean: float = 0.0
    std: float = STD_FLOOR
    bbox_lo: tuple[int, int, int] = (0, 0, 0)   # inclusive voxel index bounds
    bbox_hi: tuple[int, int, int] = (0, 0, 0)
    modeled: bool = False


class GaussianIntensityModel:
    """Per-structure Gaussian intensity statistics gated by learned bounding boxes.

    A desk-scale stand-in for a deep segmentation network: voxels are assigned
    to the structure with the highest Gaussian log-likelihood among those
    whose learned (weighted union) bounding box contains the voxel, provided
    that likelihood beats the background's; each structure's prediction is
    then reduced to its largest connected component.
    """

    def __init__(self, catalog: StructureCatalog,
                 organ_connectivity: int = 26, tumor_connectivity: int = 6,
                 tumor_min_component_voxels: int = 20):
        self.catalog = catalog
        self.organ_connectivity = organ_connectivity
        self.tumor_connectivity = tumor_connectivity
        self.tumor_min_component_voxels = tumor_min_component_voxels
        self.params: dict[int, _StructureParams] = {}
        self.background: Optional[tuple[float, float]] = None

    @property
    def fitted(self) -> bool:
        return self.background is not None

    def _connectivity(self, label: int) -> int:
        kind = self.catalog.entry(label).kind
        return self.tumor_connectivity if kind is StructureKind.TUMOR else self.organ_connectivity

    def fit(self, corpus: Sequence[CaseRecord],
            weights: Optional[Sequence[float]] = None) -> None:
        """Weighted per-structure intensity statistics from pseudo annotations.

        Structures with zero (weighted) labeled voxels corpus-wide are marked
        unmodeled and predict empty.
        """
        if len(corpus) == 0:
            raise ModelError("fit requires a nonempty corpus")
        if weights is None:
            weights = [1.0] * len(corpus)
        weights = [float(w) for w in weights]
        if len(weights) != len(corpus):
            raise ShapeError("one weight per case required")
        if any(w < 0 for w in weights) or sum(weights) == 0:
            raise ModelError("weights must be nonnegative and not all zero")

        labels_of_interest = [BACKGROUND] + self.catalog.labels
        acc = {s: np.zeros(3) for s in labels_of_interest}  # [sum_w, sum_wx, sum_wx2]
        boxes: dict[int, Optional[np.ndarray]] = {s: None for s in self.catalog.labels}
        for case, w in zip(corpus, weights):
            if w == 0.0:
                continue
            intensities = case.volume.data.astype(np.float64)
            lab = case.pseudo.labels
            for s in labels_of_interest:
                m = lab == s
                n = int(np.count_nonzero(m))
                if n == 0:
                    continue
                vals = intensities[m]
                acc[s] += (w * n, w * vals.sum(), w * (vals * vals).sum())
                if s != BACKGROUND:
                    idx = np.nonzero(m)
                    lo = np.array([a.min() for a in idx])
                    hi = np.array([a.max() for a in idx])
                    if boxes[s] is None:
                        boxes[s] = np.concatenate([lo, hi])
                    else:
                        boxes[s][:3] = np.minimum(boxes[s][:3], lo)
                        boxes[s][3:] = np.maximum(boxes[s][3:], hi)

        def stats(s: int) -> tuple[float, float, float]:
            sw, sx, sx2 = acc[s]
            if sw == 0:
                return 0.0, 0.0, STD_FLOOR
            mean = sx / sw
            var = max(sx2 / sw - mean * mean, 0.0)
            return sw, mean, max(float(np.sqrt(var)), STD_FLOOR)

        _, bg_mean, bg_std = stats(BACKGROUND)
        self.background = (bg_mean, bg_std)
        self.params = {}
        for s in self.catalog.labels:
            sw, mean, std = stats(s)
            box = boxes[s]
            if sw == 0 or box is None:
                self.params[s] = _StructureParams(modeled=False)
            else:
                self.params[s] = _StructureParams(
                    mean=mean, std=std,
                    bbox_lo=tuple(int(v) for v in box[:3]),
                    bbox_hi=tuple(int(v) for v in box[3:]),
                    modeled=True)

    def _require_fitted(self) -> None:
        if not self.fitted:
            raise ModelError("model must be fitted before prediction")

    @staticmethod
    def _loglik(data: np.ndarray, mean: float, std: float) -> np.ndarray:
        return -np.log(std) - 0.5 * ((data - mean) / std) ** 2

    def predict(self, volume: VoxelGrid) -> LabelMap:
        """Maximum-likelihood labeling gated by spatial priors, then component
        cleanup: single-instance structures keep their largest connected
        component; tumor-kind structures keep every component at least
        tumor_min_component_voxels large (tumors are legitimately
        multi-instance, so largest-only would drop real instances)."""
        self._require_fitted()
        data = volume.data.astype(np.float64)
        bg_mean, bg_std = self.background
        best = self._loglik(data, bg_mean, bg_std)
        out = np.zeros(volume.dims, dtype=np.uint16)
        for s in self.catalog.labels:
            p = self.params[s]
            if not p.modeled:
                continue
            sl = tuple(slice(lo, hi + 1) for lo, hi in zip(p.bbox_lo, p.bbox_hi))
            ll = self._loglik(data[sl], p.mean, p.std)
            better = ll > best[sl]
            out[sl][better] = s
            best[sl][better] = ll[better]
        for s in self.catalog.labels:
            m = out == s
            if not m.any():
                continue
            if self.catalog.entry(s).kind is StructureKind.TUMOR:
                comp = connected_components(m, self.tumor_connectivity)
                small = np.flatnonzero(comp.sizes < self.tumor_min_component_voxels) + 1
                if small.size:
                    out[np.isin(comp.ids, small)] = BACKGROUND
            else:
                kept = largest_component(m, self._connectivity(s))
                out[m & ~kept] = BACKGROUND
        return LabelMap(dims=volume.dims, spacing=volume.spacing, labels=out,
                        catalog=self.catalog)

    def predict_prob(self, volume: VoxelGrid, tumor_label: int) -> np.ndarray:
        """Per-voxel tumor posterior among background and all modeled structures.

        The posterior is evaluated inside the tumor's plausible region (the
        union of the learned tumor box and its host organ's box, padded by a
        couple of voxels) and is exactly zero elsewhere; values below
        PROB_FLOOR are clamped to zero to keep the maps sparse.
        """
        self._require_fitted()
        tp = self.params.get(tumor_label)
        probs = np.zeros(volume.dims, dtype=np.float64)
        if tp is None or not tp.modeled:
            return probs
        lo = np.array(tp.bbox_lo)
        hi = np.array(tp.bbox_hi)
        for s in self.catalog.labels:
            p = self.params[s]
            if p.modeled and self.catalog.entry(s).kind is StructureKind.ORGAN \
                    and self._boxes_intersect(p, tp):
                lo = np.minimum(lo, p.bbox_lo)
                hi = np.maximum(hi, p.bbox_hi)
        lo = np.maximum(lo - PRIOR_MARGIN_VOXELS, 0)
        hi = np.minimum(hi + PRIOR_MARGIN_VOXELS, np.array(volume.dims) - 1)
        sl = tuple(slice(int(a), int(b) + 1) for a, b in zip(lo, hi))

        data = volume.data[sl].astype(np.float64)
        bg_mean, bg_std = self.background
        logliks = [self._loglik(data, bg_mean, bg_std)]
        tumor_idx = None
        for s in self.catalog.labels:
            p = self.params[s]
            if not p.modeled:
                continue
            if s == tumor_label:
                tumor_idx = len(logliks)
            logliks.append(self._loglik(data, p.mean, p.std))
        stack = np.stack(logliks)
        stack -= stack.max(axis=0, keepdims=True)
        weights_ = np.exp(stack)
        post = weights_[tumor_idx] / weights_.sum(axis=0)
        post[post < PROB_FLOOR] = 0.0
        probs[sl] = post
        return probs

    @staticmethod
    def _boxes_intersect(a: _StructureParams, b: _StructureParams) -> bool:
        return all(alo <= bhi and blo <= ahi for alo, ahi, blo, bhi
                   in zip(a.bbox_lo, a.bbox_hi, b.bbox_lo, b.bbox_hi))

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        self._require_fitted()
        return {
            "kind": "gaussian_intensity",
            "catalog_id": self.catalog.catalog_id,
            "organ_connectivity": self.organ_connectivity,
            "tumor_connectivity": self.tumor_connectivity,
            "background": {"mean": self.background[0], "std": self.background[1]},
            "structures": {
                str(s): {
                    "mean": p.mean, "std": p.std, "modeled": p.modeled,
                    "bbox_lo": list(p.bbox_lo), "bbox_hi": list(p.bbox_hi),
                } for s, p in self.params.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict, catalog: StructureCatalog) -> "GaussianIntensityModel":
        model = cls(catalog, d["organ_connectivity"], d["tumor_connectivity"])
        model.background = (float(d["background"]["mean"]), float(d["background"]["std"]))
        model.params = {
            int(s): _StructureParams(
                mean=float(p["mean"]), std=float(p["std"]), modeled=bool(p["modeled"]),
                bbox_lo=tuple(p["bbox_lo"]), bbox_hi=tuple(p["bbox_hi"]))
            for s, p in d["structures"].items()
        }
        return model

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True,
                                         separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path], catalog: StructureCatalog) -> "GaussianIntensityModel":
        return cls.from_dict(json.loads(Path(path).read_text()), catalog)


def fit_model(corpus: Sequence[CaseRecord], weights: Optional[Sequence[float]] = None,
              organ_connectivity: int = 26, tumor_connectivity: int = 6,
              tumor_min_component_voxels: int = 20) -> GaussianIntensityModel:
    """Fit the reference intensity model on a corpus' pseudo annotations."""
    if len(corpus) == 0:
        raise ModelError("fit_model requires a nonempty corpus")
    model = GaussianIntensityModel(corpus[0].pseudo.catalog,
                                   organ_connectivity, tumor_connectivity,
                                   tumor_min_component_voxels)
    model.fit(corpus, weights)
    return model


def audit_case(model: SegmentationModel, case: CaseRecord,
               auto_replace_dsc: float = 0.0, route_dsc: float = 0.5) -> AuditOutcome:
    """Score every catalog structure's pseudo mask against the model prediction."""
    prediction = model.predict(case.volume)
    per_structure: dict[int, StructureAudit] = {}
    for s in case.pseudo.catalog.labels:
        d = dsc(case.pseudo.labels == s, prediction.labels == s)
        per_structure[s] = StructureAudit(label=s, dsc=d,
                                          action=classify_action(d, auto_replace_dsc, route_dsc))
    return AuditOutcome(case_id=case.case_id, per_structure=per_structure,
                        prediction=prediction)


def apply_update_rule(case: CaseRecord, outcome: AuditOutcome
                      ) -> tuple[CaseRecord, list[ChangeLogEntry]]:
    """Replace auto_replace structures with the audited prediction.

    Keep/route structures are untouched voxel-for-voxel. When a replacement
    would overwrite a voxel already holding another label, tumor labels take
    precedence over organ/vessel labels; otherwise the replaced structure
    wins over the stale label. Conflicting voxels are counted in the log.
    """
    catalog = case.pseudo.catalog
    to_replace = outcome.actions(AuditAction.AUTO_REPLACE)
    if not to_replace:
        return case, []
    labels = case.pseudo.labels.copy()
    tumor_labels = set(catalog.tumor_labels)
    log: list[ChangeLogEntry] = []
    for s in sorted(to_replace):
        pred_mask = outcome.prediction.labels == s
        before = int(np.count_nonzero(labels == s))
        labels[labels == s] = BACKGROUND
        occupied = labels != BACKGROUND
        if s in tumor_labels:
            blocked = np.zeros_like(pred_mask)
        else:
            blocked = np.isin(labels, list(tumor_labels)) if tumor_labels else \
                np.zeros_like(pred_mask)
        writable = pred_mask & ~blocked
        conflicts = int(np.count_nonzero(pred_mask & occupied & ~blocked)) + \
            int(np.count_nonzero(pred_mask & blocked))
        labels[writable] = s
        log.append(ChangeLogEntry(case_id=case.case_id, structure=s, action="auto_replace",
                                  voxels_before=before,
                                  voxels_after=int(np.count_nonzero(labels == s)),
                                  conflicts=conflicts))
    return case.with_pseudo(case.pseudo.with_labels(labels)), log
