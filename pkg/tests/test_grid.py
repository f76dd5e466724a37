import numpy as np
import pytest

from emcurate import (
    CatalogError,
    ShapeError,
    StructureCatalog,
    StructureEntry,
    StructureKind,
    VoxelGrid,
    connected_components,
    extract_structure_mask,
    front_view_projection,
    largest_component,
)
from emcurate.grid import StructuredReport, TumorType

from conftest import make_label_map
from oracles import brute_components, brute_front_overlay

CAT = StructureCatalog((
    StructureEntry(1, "a", StructureKind.ORGAN),
    StructureEntry(2, "b", StructureKind.ORGAN),
    StructureEntry(3, "c", StructureKind.TUMOR),
))


def test_catalog_requires_dense_labels():
    with pytest.raises(CatalogError):
        StructureCatalog((StructureEntry(2, "x", StructureKind.ORGAN),))
    with pytest.raises(CatalogError):
        StructureCatalog((StructureEntry(1, "x", StructureKind.ORGAN),
                          StructureEntry(1, "y", StructureKind.ORGAN)))


def test_voxel_grid_validation():
    with pytest.raises(ShapeError):
        VoxelGrid(dims=(2, 2, 2), spacing=(1, 1, 1), data=np.zeros((2, 2, 3)))
    with pytest.raises(ShapeError):
        VoxelGrid(dims=(2, 2, 2), spacing=(1, 0, 1), data=np.zeros((2, 2, 2)))
    with pytest.raises(ShapeError):
        VoxelGrid(dims=(2, 2, 2), spacing=(1, 1, 1),
                  data=np.full((2, 2, 2), np.nan))


def test_label_map_rejects_unknown_labels():
    with pytest.raises(CatalogError):
        make_label_map(np.full((2, 2, 2), 9), CAT)


def test_grid_arrays_are_frozen():
    grid = VoxelGrid(dims=(2, 2, 2), spacing=(1, 1, 1), data=np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        grid.data[0, 0, 0] = 1.0


def test_report_invariants():
    with pytest.raises(ShapeError):
        StructuredReport(tumor_present=True, tumor_count=0, tumor_type=TumorType.PDAC)
    with pytest.raises(ShapeError):
        StructuredReport(tumor_present=True, tumor_count=1, tumor_type=None)
    StructuredReport(tumor_present=False, tumor_count=0)  # valid


def test_extract_structure_mask_saturated_and_empty():
    lm = make_label_map(np.full((2, 2, 2), 3), CAT)
    assert extract_structure_mask(lm, 3).all()
    assert not extract_structure_mask(lm, 2).any()


def test_extract_structure_mask_direct():
    lm = make_label_map(np.array([1, 2, 1, 0], dtype=np.uint16).reshape(2, 2, 1), CAT)
    mask = extract_structure_mask(lm, 1)
    assert mask.ravel().tolist() == [True, False, True, False]


def test_extract_structure_mask_unknown_label():
    lm = make_label_map(np.zeros((2, 2, 2)), CAT)
    with pytest.raises(CatalogError):
        extract_structure_mask(lm, 9)


def test_label_masks_partition_voxels():
    rng = np.random.default_rng(7)
    lm = make_label_map(rng.integers(0, 4, size=(5, 5, 5)), CAT)
    total = np.zeros(lm.dims, dtype=int)
    for label in [0] + CAT.labels:
        total += (lm.labels == label).astype(int)
    assert (total == 1).all()


def test_connected_components_empty_and_solid():
    assert connected_components(np.zeros((3, 3, 3), bool), 6).count == 0
    comp = connected_components(np.ones((3, 3, 3), bool), 6)
    assert comp.count == 1
    assert comp.sizes.tolist() == [27]


def test_connected_components_bridge():
    mask = np.zeros((3, 1, 1), bool)
    mask[0, 0, 0] = mask[2, 0, 0] = True
    assert connected_components(mask, 6).count == 2
    mask[1, 0, 0] = True
    comp = connected_components(mask, 6)
    assert comp.count == 1
    assert comp.sizes.tolist() == [3]


def test_connected_components_invalid_connectivity():
    with pytest.raises(ShapeError):
        connected_components(np.zeros((2, 2, 2), bool), 18)


@pytest.mark.parametrize("connectivity", [6, 26])
def test_connected_components_match_flood_fill(connectivity):
    rng = np.random.default_rng(42)
    for _ in range(25):
        mask = rng.random((6, 6, 6)) < 0.3
        comp = connected_components(mask, connectivity)
        expected = brute_components(mask, connectivity)
        assert comp.count == len(expected)
        # permutation-invariant: compare as sets of voxel sets
        got = [set(map(tuple, np.argwhere(comp.ids == k)))
               for k in range(1, comp.count + 1)]
        assert sorted(map(sorted, got)) == sorted(map(sorted, expected))
        assert sorted(comp.sizes.tolist()) == sorted(len(c) for c in expected)


def test_largest_component_deterministic_tie():
    mask = np.zeros((5, 1, 1), bool)
    mask[0] = mask[2] = True  # two single-voxel components
    kept = largest_component(mask, 6)
    assert kept[0, 0, 0] and not kept[2, 0, 0]  # first in raster order wins


def test_projection_trivial_cases():
    vol = VoxelGrid(dims=(3, 4, 5), spacing=(1, 1, 1),
                    data=np.zeros((3, 4, 5)))
    proj = front_view_projection(vol, np.zeros((3, 4, 5), bool))
    assert proj.overlay.shape == (3, 5)
    assert not proj.overlay.any()

    column = np.zeros((3, 4, 5), bool)
    column[1, :, 2] = True
    proj = front_view_projection(vol, column)
    assert proj.overlay[1, 2]
    assert proj.overlay.sum() == 1


def test_projection_mismatched_dims():
    vol = VoxelGrid(dims=(3, 4, 5), spacing=(1, 1, 1), data=np.zeros((3, 4, 5)))
    with pytest.raises(ShapeError):
        front_view_projection(vol, np.zeros((3, 4, 4), bool))


def test_projection_matches_loop_oracle_and_intensity_mean():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(4, 4, 4)).astype(np.float32)
    vol = VoxelGrid(dims=(4, 4, 4), spacing=(1, 1, 1), data=data)
    mask = rng.random((4, 4, 4)) < 0.4
    proj = front_view_projection(vol, mask)
    assert np.array_equal(proj.overlay, brute_front_overlay(mask))
    assert np.allclose(proj.intensity, data.mean(axis=1))


def test_projection_overlay_monotone_under_mask_growth():
    rng = np.random.default_rng(11)
    vol = VoxelGrid(dims=(5, 5, 5), spacing=(1, 1, 1), data=np.zeros((5, 5, 5)))
    for _ in range(20):
        small = rng.random((5, 5, 5)) < 0.2
        grown = small | (rng.random((5, 5, 5)) < 0.2)
        o_small = front_view_projection(vol, small).overlay
        o_grown = front_view_projection(vol, grown).overlay
        assert not (o_small & ~o_grown).any()
