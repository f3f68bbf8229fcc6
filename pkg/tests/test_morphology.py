import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from airwaytopo import testkit
from airwaytopo.errors import EmptyMaskWarning, EmptyTargetSet, InvalidParams
from airwaytopo.morphology import (
    DtiParams,
    connected_components,
    distance_to_points,
    dual_threshold_iteration,
    fill_holes,
    largest_component,
    postprocess,
)
from airwaytopo.volume import Kind, VoxelGrid

from oracles import boundary_fill, brute_distance, flood_labels, grow_hysteresis


def prob(values):
    return VoxelGrid(np.asarray(values, dtype=np.float32), kind=Kind.PROBABILITY)


def test_diagonal_pair_connectivity():
    m = np.zeros((3, 3, 3), bool)
    m[0, 0, 0] = m[1, 1, 1] = True
    g = VoxelGrid.from_mask(m)
    assert connected_components(g, 26).count == 1
    assert connected_components(g, 6).count == 2


@pytest.mark.parametrize("connectivity", [6, 26])
def test_components_match_flood_fill(rng, connectivity):
    for _ in range(10):
        m = rng.random((8, 8, 8)) < 0.3
        lg = connected_components(VoxelGrid.from_mask(m), connectivity)
        np.testing.assert_array_equal(lg.labels, flood_labels(m, connectivity))
        assert sum(lg.component_sizes.values()) == m.sum()


def test_largest_component_tie_break():
    m = np.zeros((5, 5, 9), bool)
    m[3, 3, 0:5] = True  # seed index larger
    m[0, 0, 4:9] = True  # seed index smaller, same size
    m[0, 0, 3] = False
    out = largest_component(VoxelGrid.from_mask(m)).mask()
    assert out[0, 0, 4] and not out[3, 3, 0]


def test_largest_component_sizes_and_empty():
    m = np.zeros((6, 6, 6), bool)
    m[0, 0, :] = True
    m[0, 0, 0:4] = True
    m[4, 4, 0:3] = True
    m[0, 0, 5] = False
    m[0, 0, :] = False
    m[0, 0, 0:5] = True  # 5 voxels
    out = largest_component(VoxelGrid.from_mask(m)).mask()
    assert out.sum() == 5
    with pytest.warns(EmptyMaskWarning):
        e = largest_component(VoxelGrid.from_mask(np.zeros((3, 3, 3))))
    assert not e.mask().any()


def test_fill_hollow_cube():
    m = np.zeros((7, 7, 7), bool)
    m[1:6, 1:6, 1:6] = True
    solid = m.copy()
    m[2:5, 2:5, 2:5] = False
    np.testing.assert_array_equal(fill_holes(VoxelGrid.from_mask(m)).mask(), solid)


def test_fill_matches_boundary_oracle(rng):
    for _ in range(10):
        m = rng.random((8, 8, 8)) < 0.55
        out = fill_holes(VoxelGrid.from_mask(m)).mask()
        np.testing.assert_array_equal(out, boundary_fill(m))
        # idempotent
        np.testing.assert_array_equal(fill_holes(VoxelGrid.from_mask(out)).mask(), out)


def test_distance_examples():
    d = distance_to_points((1, 4, 5), [(0, 0, 0)])
    assert d[0, 3, 4] == 5.0
    assert d[0, 0, 0] == 0.0
    with pytest.raises(EmptyTargetSet):
        distance_to_points((2, 2, 2), [])


def test_distance_matches_brute_force(rng):
    for _ in range(5):
        shape = (12, 12, 12)
        t = np.argwhere(rng.random(shape) < 0.01)
        if len(t) == 0:
            continue
        np.testing.assert_array_equal(distance_to_points(shape, t), brute_distance(shape, t))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(*(st.integers(0, 6),) * 3), min_size=1, max_size=6), st.tuples(*(st.integers(0, 6),) * 3))
def test_distance_properties(points, extra):
    shape = (7, 7, 7)
    d = distance_to_points(shape, points)
    assert (d >= 0).all()
    for p in points:
        assert d[p] == 0
    # 1-Lipschitz along each axis step
    for ax in range(3):
        assert np.abs(np.diff(d, axis=ax)).max() <= 1.0 + 1e-12
    d2 = distance_to_points(shape, points + [extra])
    assert (d2 <= d).all()


def test_dti_bridge_and_blob():
    v = np.zeros((3, 3, 12), np.float32)
    v[1, 1, 0:4] = [0.6, 0.4, 0.4, 0.6]
    v[1, 1, 8:10] = 0.4
    out = dual_threshold_iteration(prob(v)).mask()
    assert out[1, 1, 0:4].all()
    assert not out[1, 1, 8:10].any()
    assert out.sum() == 4


def test_dti_uniform():
    out = dual_threshold_iteration(prob(np.full((4, 4, 4), 0.9)))
    assert out.mask().all()


def test_dti_matches_growth_oracle(rng):
    for _ in range(5):
        v = rng.random((10, 10, 10))
        out = dual_threshold_iteration(prob(v), DtiParams(0.9, 0.5)).mask()
        np.testing.assert_array_equal(out, grow_hysteresis(v, 0.5, 0.9))


def test_dti_params_validated():
    with pytest.raises(InvalidParams):
        DtiParams(0.3, 0.5)
    d = DtiParams()
    assert (d.t_high, d.t_low) == (0.5, 0.35)


def test_postprocess_recovers_tree(tree1):
    p = testkit.to_probability(tree1.mask, 0.9, 0.05)
    assert postprocess(p) == tree1.mask


def test_postprocess_removes_blob_and_fills_cavity():
    v = np.full((12, 12, 20), 0.05, np.float32)
    v[2:9, 2:9, 2:14] = 0.9
    v[5, 5, 7] = 0.0  # cavity
    v[10:12, 10:12, 17:20] = 0.9  # detached blob
    out = postprocess(prob(v)).mask()
    assert out[5, 5, 7]
    assert not out[10:12, 10:12, 17:20].any()
    assert out.sum() == 7 * 7 * 12


def test_postprocess_empty_warns():
    with pytest.warns(EmptyMaskWarning):
        out = postprocess(prob(np.full((3, 3, 3), 0.1)))
    assert not out.mask().any()


def test_postprocess_single_component(rng):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyMaskWarning)
        out = postprocess(prob(rng.random((10, 10, 10))))
    assert connected_components(out).count <= 1
