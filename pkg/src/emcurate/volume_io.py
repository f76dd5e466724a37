"""On-disk formats: binary volumes, JSON sidecars, corpus directories.

Binary volume layout (little-endian throughout)::

    magic     4 bytes  b"SMAI"
    version   u16      currently 1
    dtype     u8       1 = f32 intensities, 2 = u16 labels
    dims      3 x u32  (nx, ny, nz)
    spacing   3 x f32  mm per voxel
    payload   raw voxels, x fastest: index = ix + nx*(iy + ny*iz)

Each case additionally gets a JSON sidecar (<case_id>.json) holding the
report, metadata and relative file paths; a corpus directory carries a
manifest.json with the catalog and per-file sha256 checksums so byte-level
reproducibility can be asserted cheaply.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import VolumeFormatError
from .grid import CaseMeta, CaseRecord, LabelMap, StructureCatalog, StructuredReport, VoxelGrid

MAGIC = b"SMAI"
FORMAT_VERSION = 1
DTYPE_F32 = 1
DTYPE_U16 = 2
SCHEMA_VERSION = 1

_HEADER = struct.Struct("<4sHB3I3f")


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def write_json(path: Union[str, Path], obj: dict) -> None:
    obj = dict(obj)
    obj.setdefault("schema_version", SCHEMA_VERSION)
    Path(path).write_text(_canonical_json(obj))


def read_json(path: Union[str, Path]) -> dict:
    return json.loads(Path(path).read_text())


def volume_bytes(dims, spacing, payload: np.ndarray, dtype_code: int) -> bytes:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, dtype_code, *map(int, dims), *map(float, spacing))
    return header + payload.tobytes(order="F")


def write_voxel_grid(path: Union[str, Path], grid: VoxelGrid) -> None:
    Path(path).write_bytes(volume_bytes(grid.dims, grid.spacing, grid.data, DTYPE_F32))


def write_label_map(path: Union[str, Path], label_map: LabelMap) -> None:
    Path(path).write_bytes(volume_bytes(label_map.dims, label_map.spacing,
                                        label_map.labels, DTYPE_U16))


def _read_volume(path: Union[str, Path]) -> tuple[int, tuple, tuple, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header")
    magic, version, dtype_code, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"{path}: unsupported format version {version}")
    if dtype_code == DTYPE_F32:
        np_dtype = np.dtype("<f4")
    elif dtype_code == DTYPE_U16:
        np_dtype = np.dtype("<u2")
    else:
        raise VolumeFormatError(f"{path}: unknown dtype code {dtype_code}")
    dims = (nx, ny, nz)
    expected = nx * ny * nz * np_dtype.itemsize
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise VolumeFormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype=np_dtype).reshape(dims, order="F")
    return dtype_code, dims, (sx, sy, sz), data


def read_voxel_grid(path: Union[str, Path]) -> VoxelGrid:
    dtype_code, dims, spacing, data = _read_volume(path)
    if dtype_code != DTYPE_F32:
        raise VolumeFormatError(f"{path}: expected intensity volume, found dtype {dtype_code}")
    return VoxelGrid(dims=dims, spacing=spacing, data=data)


def read_label_map(path: Union[str, Path], catalog: StructureCatalog) -> LabelMap:
    dtype_code, dims, spacing, data = _read_volume(path)
    if dtype_code != DTYPE_U16:
        raise VolumeFormatError(f"{path}: expected label volume, found dtype {dtype_code}")
    return LabelMap(dims=dims, spacing=spacing, labels=data, catalog=catalog)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_case(out_dir: Union[str, Path], case: CaseRecord) -> list[str]:
    """Write one case (volume, label maps, sidecar); returns relative file names."""
    out_dir = Path(out_dir)
    files = {
        "volume": f"{case.case_id}_vol.smai",
        "pseudo": f"{case.case_id}_pseudo.smai",
    }
    write_voxel_grid(out_dir / files["volume"], case.volume)
    write_label_map(out_dir / files["pseudo"], case.pseudo)
    if case.gold is not None:
        files["gold"] = f"{case.case_id}_gold.smai"
        write_label_map(out_dir / files["gold"], case.gold)
    sidecar = {
        "case_id": case.case_id,
        "report": case.report.to_dict(),
        "meta": case.meta.to_dict(),
        "files": files,
        "catalog_id": case.pseudo.catalog_id,
    }
    write_json(out_dir / f"{case.case_id}.json", sidecar)
    return [f"{case.case_id}.json"] + sorted(files.values())


def read_case(corpus_dir: Union[str, Path], case_id: str, catalog: StructureCatalog) -> CaseRecord:
    corpus_dir = Path(corpus_dir)
    sidecar = read_json(corpus_dir / f"{case_id}.json")
    files = sidecar["files"]
    gold = None
    if "gold" in files:
        gold = read_label_map(corpus_dir / files["gold"], catalog)
    return CaseRecord(
        case_id=sidecar["case_id"],
        volume=read_voxel_grid(corpus_dir / files["volume"]),
        pseudo=read_label_map(corpus_dir / files["pseudo"], catalog),
        gold=gold,
        report=StructuredReport.from_dict(sidecar["report"]),
        meta=CaseMeta.from_dict(sidecar["meta"]),
    )


def write_corpus(out_dir: Union[str, Path], cases: list[CaseRecord],
                 catalog: StructureCatalog) -> dict:
    """Write a corpus directory with a checksummed manifest; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    all_files: list[str] = []
    for case in cases:
        all_files.extend(write_case(out_dir, case))
    manifest = {
        "catalog": catalog.to_dict(),
        "case_ids": [c.case_id for c in cases],
        "checksums": {name: _sha256(out_dir / name) for name in sorted(all_files)},
    }
    write_json(out_dir / "manifest.json", manifest)
    return manifest


def read_corpus(corpus_dir: Union[str, Path]) -> tuple[list[CaseRecord], StructureCatalog]:
    corpus_dir = Path(corpus_dir)
    manifest = read_json(corpus_dir / "manifest.json")
    catalog = StructureCatalog.from_dict(manifest["catalog"])
    cases = [read_case(corpus_dir, cid, catalog) for cid in manifest["case_ids"]]
    return cases, catalog


def strip_gold(corpus_dir: Union[str, Path], out_dir: Union[str, Path]) -> None:
    """Copy a corpus without its gold annotations (for no-gold deployments)."""
    cases, catalog = read_corpus(corpus_dir)
    write_corpus(out_dir, [c.without_gold() for c in cases], catalog)
