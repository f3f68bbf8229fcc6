import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from airwaytopo import testkit
from airwaytopo.errors import DimMismatch, OutOfRange, UnlabeledTree
from airwaytopo.metrics import (
    BdParams,
    branch_detected,
    dsc,
    evaluate_case,
    hierarchical_metrics,
    precision,
    summarize,
    tree_length_detected,
    weighted_mean_score,
)
from airwaytopo.tree_parsing import AirwayTree, Branch, Label, parse_pipeline
from airwaytopo.volume import VoxelGrid

TABLE1 = [
    ("neu204", (90.974, 86.670, 94.056, 93.027), 90.710),
    ("YangLab", (94.512, 91.920, 94.800, 94.707), 93.831),
    ("deeptree_damo", (97.853, 97.129, 92.819, 87.928), 94.644),
    ("timi", (95.919, 94.729, 93.910, 93.553), 94.687),
    ("Ours", (96.425, 95.479, 93.827, 91.781), 94.693),
]


@pytest.fixture(scope="module")
def gt_tree3(tree3):
    return parse_pipeline(tree3.mask)


def line_tree(n_steps=100, dims=(4, 4, 120)):
    pts = np.zeros((n_steps + 1, 3), dtype=np.int64) + np.array([1, 1, 5])
    pts[:, 2] += np.arange(n_steps + 1)
    b = Branch(0, None, [], pts, pts.astype(float), np.ones(len(pts)), (1.0, 1.0, 1.0), 0, Label.TRACHEA)
    return AirwayTree({0: b}, 0, (1.0, 1.0, 1.0), dims), pts


def test_dsc_cases():
    a = np.zeros((2, 2, 1), bool)
    b = np.zeros((2, 2, 1), bool)
    a[0, 0] = a[0, 1] = True
    b[0, 0] = b[1, 0] = True
    assert dsc(a, b) == 0.5
    assert dsc(a, a) == 1.0
    assert dsc(a, ~a) == 0.0
    assert dsc(np.zeros_like(a), np.zeros_like(a)) == 1.0
    with pytest.raises(DimMismatch):
        dsc(a, np.zeros((3, 3, 3), bool))


def test_precision_cases():
    p = np.zeros((4, 2, 1), bool)
    g = np.zeros((4, 2, 1), bool)
    p[:, 0] = True
    g[:3, 0] = True
    g[:, 1] = True
    assert precision(p, g) == 0.75
    assert precision(p & g, g) == 1.0
    assert precision(p, ~p) == 0.0
    assert precision(np.zeros_like(p), g) == 1.0


def test_td_single_branch_ninety_percent():
    tree, pts = line_tree()
    pred = np.zeros(tree.dims, bool)
    pred[tuple(pts[:91].T)] = True  # 91 points -> 90 covered steps
    td, frac = tree_length_detected(tree, pred)
    assert td == pytest.approx(0.9)
    assert frac[0] == pytest.approx(0.9)
    assert tree_length_detected(tree, np.zeros(tree.dims, bool))[0] == 0.0
    assert tree_length_detected(tree, np.ones(tree.dims, bool))[0] == 1.0


def test_bd_threshold_is_inclusive():
    tree, pts = line_tree()
    pred = np.zeros(tree.dims, bool)
    pred[tuple(pts[:81].T)] = True
    bd, flags = branch_detected(tree, pred)
    assert flags[0] and bd == 1.0
    pred[tuple(pts[80].T)] = False
    assert branch_detected(tree, pred)[0] == 0.0
    assert branch_detected(tree, pred, BdParams(0.5))[0] == 1.0


def test_td_is_length_weighted_mean_of_fractions(gt_tree3, tree3):
    pred = testkit.ablate_branch(tree3, 5, "interior_gap", gap_len=4.0)
    td, frac = tree_length_detected(gt_tree3, pred)
    lengths = {b.id: b.length_mm for b in gt_tree3}
    weighted = sum(frac[i] * lengths[i] for i in lengths) / sum(lengths.values())
    assert td == pytest.approx(weighted, abs=1e-12)


@pytest.mark.parametrize("name,row,expected", TABLE1, ids=[r[0] for r in TABLE1])
def test_wms_table_rows(name, row, expected):
    assert weighted_mean_score(*row) == pytest.approx(expected, abs=1e-3)


def test_wms_bounds():
    assert weighted_mean_score(1, 1, 1, 1) == pytest.approx(1.0)
    with pytest.raises(OutOfRange):
        weighted_mean_score(-0.1, 1, 1, 1)
    with pytest.raises(OutOfRange):
        weighted_mean_score(float("nan"), 1, 1, 1)


def test_identical_volumes_all_ones(tree3, gt_tree3):
    r = evaluate_case(tree3.mask, tree3.mask, gt_tree=gt_tree3)
    assert (r.td, r.bd, r.dsc, r.pre, r.wms) == (1.0, 1.0, 1.0, 1.0, 1.0)
    assert (r.td_large, r.bd_large, r.td_small, r.bd_small) == (1.0, 1.0, 1.0, 1.0)


def test_segmental_ablation_hits_small_class_only(tree3, gt_tree3):
    leaf = next(s for s in tree3.segments if s.generation == 3)
    pred = testkit.ablate_branch(tree3, leaf.id, "whole")
    r = evaluate_case(pred, tree3.mask, gt_tree=gt_tree3)
    n_small = sum(b.label is Label.SEGMENTAL for b in gt_tree3)
    assert r.td_large == 1.0 and r.bd_large == 1.0
    assert r.bd_small == pytest.approx((n_small - 1) / n_small)
    assert r.bd == pytest.approx(14 / 15)
    missed = [pb for pb in r.per_branch if not pb.detected]
    assert len(missed) == 1 and missed[0].label == "Segmental"


def test_interior_gap_lowers_td_and_dsc(tree3, gt_tree3):
    pred = testkit.ablate_branch(tree3, 1, "interior_gap", gap_len=6.0)
    r = evaluate_case(pred, tree3.mask, gt_tree=gt_tree3)
    assert r.td < 1.0 and r.dsc < 1.0 and r.pre == 1.0


def test_extra_blob_lowers_precision_only(tree3, gt_tree3):
    m = tree3.mask.mask().copy()
    m[:3, :3, :3] = True
    r = evaluate_case(VoxelGrid.from_mask(m), tree3.mask, gt_tree=gt_tree3)
    assert r.pre < 1.0 and r.td == 1.0 and r.bd == 1.0


def test_depth_one_small_class_absent(tree1):
    r = evaluate_case(tree1.mask, tree1.mask)
    assert r.td_small is None and r.bd_small is None
    assert r.td_large == 1.0


def test_hierarchical_needs_labels():
    tree, pts = line_tree()
    tree[0].label = Label.UNLABELED
    with pytest.raises(UnlabeledTree):
        hierarchical_metrics(tree, np.ones(tree.dims, bool))


def test_large_and_small_classes_disjoint(gt_tree3):
    large = {b.id for b in gt_tree3 if b.label in (Label.TRACHEA, Label.MAIN_BRONCHUS, Label.LOBAR)}
    small = {b.id for b in gt_tree3 if b.label is Label.SEGMENTAL}
    assert not large & small
    assert len(large) + len(small) == len(gt_tree3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_growing_prediction_never_lowers_topology_metrics(seed):
    tree, pts = line_tree(40, dims=(4, 4, 60))
    rng = np.random.default_rng(seed)
    a = rng.random(tree.dims) < 0.6
    b = a | (rng.random(tree.dims) < 0.3)
    assert tree_length_detected(tree, b)[0] >= tree_length_detected(tree, a)[0]
    assert branch_detected(tree, b)[0] >= branch_detected(tree, a)[0]


def test_dsc_monotone_for_growth_inside_gt(rng):
    g = rng.random((10, 10, 10)) < 0.5
    a = g & (rng.random(g.shape) < 0.3)
    b = a | (g & (rng.random(g.shape) < 0.3))
    assert dsc(b, g) >= dsc(a, g)


def test_summarize_mean_std(tree1):
    r1 = evaluate_case(tree1.mask, tree1.mask)
    r2 = evaluate_case(testkit.ablate_branch(tree1, 1, "whole"), tree1.mask)
    s = summarize([r1, r2])
    assert s["bd"]["mean"] == pytest.approx((r1.bd + r2.bd) / 2)
    assert s["bd"]["std"] == pytest.approx(abs(r1.bd - r2.bd) / 2)
    assert s["td_small"] == {"mean": None, "std": None, "n": 0}
