"""Core lattice types: volumes, label maps, structure catalogs, case records.

Conventions used throughout the package:

* Arrays are indexed ``[x, y, z]`` with dims ``(nx, ny, nz)``.
* The anatomical frame is +x = patient left, +y = anterior, +z = superior.
  The "front view" projects along y onto the x-z plane.
* On disk (and wherever a flat voxel order matters) voxels are laid out
  x-fastest: linear index ``ix + nx*(iy + ny*iz)``.

All types are immutable after construction (array buffers are marked
read-only) and every operation here is a pure function, so values can be
shared freely across threads.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import CatalogError, ShapeError

BACKGROUND = 0


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _check_dims_spacing(dims, spacing) -> tuple[tuple[int, int, int], tuple[float, float, float]]:
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ShapeError(f"dims must be a positive integer triple, got {dims}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ShapeError(f"spacing must be a positive real triple, got {spacing}")
    return dims, spacing


class StructureKind(str, Enum):
    ORGAN = "organ"
    VESSEL = "vessel"
    TUMOR = "tumor"


class Sex(str, Enum):
    FEMALE = "F"
    MALE = "M"


class ContrastPhase(str, Enum):
    ARTERIAL = "arterial"
    VENOUS = "venous"
    NONCONTRAST = "noncontrast"


class TumorType(str, Enum):
    PDAC = "PDAC"
    CYST = "cyst"
    PNET = "PNET"


@dataclass(frozen=True)
class StructureEntry:
    label: int
    name: str
    kind: StructureKind


@dataclass(frozen=True)
class StructureCatalog:
    """Ordered set of annotatable structures; label 0 is background."""

    entries: tuple[StructureEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        labels = [e.label for e in self.entries]
        if labels != list(range(1, len(labels) + 1)):
            raise CatalogError(f"labels must be unique and dense from 1, got {labels}")

    @property
    def labels(self) -> list[int]:
        return [e.label for e in self.entries]

    @property
    def tumor_labels(self) -> list[int]:
        return [e.label for e in self.entries if e.kind is StructureKind.TUMOR]

    def entry(self, label: int) -> StructureEntry:
        for e in self.entries:
            if e.label == label:
                return e
        raise CatalogError(f"label {label} not in catalog")

    def __contains__(self, label: int) -> bool:
        return 1 <= label <= len(self.entries)

    @property
    def catalog_id(self) -> str:
        blob = json.dumps([[e.label, e.name, e.kind.value] for e in self.entries])
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def to_dict(self) -> list[dict]:
        return [{"label": e.label, "name": e.name, "kind": e.kind.value} for e in self.entries]

    @classmethod
    def from_dict(cls, entries: list[dict]) -> "StructureCatalog":
        return cls(tuple(StructureEntry(int(d["label"]), str(d["name"]), StructureKind(d["kind"]))
                         for d in entries))


@dataclass(frozen=True)
class VoxelGrid:
    """Dense scalar intensity volume on a regular lattice.

    Attributes:
        dims: voxel counts (nx, ny, nz)
        spacing: mm per voxel along each axis
        data: float32 intensities, shape == dims
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self):
        dims, spacing = _check_dims_spacing(self.dims, self.spacing)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.shape != dims:
            raise ShapeError(f"data shape {data.shape} != dims {dims}")
        if not np.isfinite(data).all():
            raise ShapeError("intensities must be finite")
        object.__setattr__(self, "data", _freeze(data))


@dataclass(frozen=True)
class LabelMap:
    """Per-voxel structure labels on the same lattice as a VoxelGrid."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    labels: np.ndarray
    catalog: StructureCatalog

    def __post_init__(self):
        dims, spacing = _check_dims_spacing(self.dims, self.spacing)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        if labels.shape != dims:
            raise ShapeError(f"labels shape {labels.shape} != dims {dims}")
        top = int(labels.max(initial=0))
        if top > len(self.catalog.entries):
            raise CatalogError(f"label {top} not in catalog '{self.catalog.catalog_id}'")
        object.__setattr__(self, "labels", _freeze(labels))

    @property
    def catalog_id(self) -> str:
        return self.catalog.catalog_id

    def with_labels(self, labels: np.ndarray) -> "LabelMap":
        return replace(self, labels=labels)


@dataclass(frozen=True)
class StructuredReport:
    """Structured stand-in for a radiology report."""

    tumor_present: bool
    tumor_count: int
    tumor_type: Optional[TumorType] = None

    def __post_init__(self):
        if self.tumor_count < 0:
            raise ShapeError("tumor_count must be >= 0")
        if self.tumor_present != (self.tumor_count > 0):
            raise ShapeError("tumor_present must equal (tumor_count > 0)")
        if self.tumor_present != (self.tumor_type is not None):
            raise ShapeError("tumor_type must be present iff tumor_present")

    def to_dict(self) -> dict:
        return {
            "tumor_present": self.tumor_present,
            "tumor_count": self.tumor_count,
            "tumor_type": None if self.tumor_type is None else self.tumor_type.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StructuredReport":
        t = d.get("tumor_type")
        return cls(bool(d["tumor_present"]), int(d["tumor_count"]),
                   None if t is None else TumorType(t))


@dataclass(frozen=True)
class CaseMeta:
    age: int
    sex: Sex
    phase: ContrastPhase
    is_gold: bool = False

    def to_dict(self) -> dict:
        return {"age": self.age, "sex": self.sex.value, "phase": self.phase.value,
                "is_gold": self.is_gold}

    @classmethod
    def from_dict(cls, d: dict) -> "CaseMeta":
        return cls(int(d["age"]), Sex(d["sex"]), ContrastPhase(d["phase"]), bool(d["is_gold"]))


@dataclass(frozen=True)
class CaseRecord:
    """One synthetic "patient": volume, annotations, report, metadata."""

    case_id: str
    volume: VoxelGrid
    pseudo: LabelMap
    report: StructuredReport
    meta: CaseMeta
    gold: Optional[LabelMap] = None

    def __post_init__(self):
        maps = [self.pseudo] + ([self.gold] if self.gold is not None else [])
        for m in maps:
            if m.dims != self.volume.dims or m.spacing != self.volume.spacing:
                raise ShapeError(f"case {self.case_id}: label map lattice differs from volume")
        if self.meta.is_gold and self.gold is None:
            raise ShapeError(f"case {self.case_id}: is_gold requires a gold label map")

    def with_pseudo(self, pseudo: LabelMap) -> "CaseRecord":
        return replace(self, pseudo=pseudo)

    def without_gold(self) -> "CaseRecord":
        meta = CaseMeta(self.meta.age, self.meta.sex, self.meta.phase, is_gold=False)
        return replace(self, gold=None, meta=meta)


@dataclass(frozen=True)
class ComponentLabeling:
    """Connected-component decomposition of a binary mask.

    ids holds a dense component id per voxel (0 = background, components
    numbered 1..count in raster order); sizes[k] is the voxel count of
    component k+1.
    """

    ids: np.ndarray
    count: int
    sizes: np.ndarray


@dataclass(frozen=True)
class Projection2D:
    """Front-view projection: mean intensity and any-hit overlay on (x, z)."""

    intensity: np.ndarray
    overlay: np.ndarray
    spacing: tuple[float, float]  # mm per pixel along (x, z)


_STRUCTS = {
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}


def extract_structure_mask(label_map: LabelMap, label: int) -> np.ndarray:
    """Boolean mask of one catalog structure; raises CatalogError for unknown labels."""
    if label not in label_map.catalog:
        raise CatalogError(f"label {label} not in catalog '{label_map.catalog_id}'")
    return label_map.labels == label


def connected_components(mask: np.ndarray, connectivity: int = 26) -> ComponentLabeling:
    """Label connected components of a 3D boolean mask.

    connectivity 6 joins face neighbors only; 26 joins faces, edges and
    corners. Component ids are dense from 1 in raster order; 0 is background.
    """
    if connectivity not in _STRUCTS:
        raise ShapeError(f"connectivity must be 6 or 26, got {connectivity}")
    mask = np.asarray(mask, dtype=bool)
    ids, count = ndimage.label(mask, structure=_STRUCTS[connectivity])
    sizes = np.bincount(ids.ravel(), minlength=count + 1)[1:] if count else np.zeros(0, dtype=np.int64)
    return ComponentLabeling(ids=_freeze(ids), count=int(count), sizes=_freeze(sizes))


def largest_component(mask: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Keep only the largest connected component (first in raster order on ties)."""
    comp = connected_components(mask, connectivity)
    if comp.count <= 1:
        return np.asarray(mask, dtype=bool)
    keep = int(np.argmax(comp.sizes)) + 1
    return comp.ids == keep


def front_view_projection(volume: VoxelGrid, mask: np.ndarray) -> Projection2D:
    """Project a volume + mask along y onto the x-z plane.

    The intensity pixel (x, z) is the mean intensity along y; the overlay
    pixel is true iff any mask voxel along that y-column is true.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != volume.dims:
        raise ShapeError(f"mask shape {mask.shape} != volume dims {volume.dims}")
    intensity = volume.data.mean(axis=1, dtype=np.float64)
    overlay = mask.any(axis=1)
    sx, _, sz = volume.spacing
    return Projection2D(intensity=_freeze(intensity), overlay=_freeze(overlay), spacing=(sx, sz))
