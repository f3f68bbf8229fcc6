"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import time

import numpy as np
import pytest

from airwaytopo import testkit
from airwaytopo.cli import main
from airwaytopo.losses import atrl, dice_loss, gradient, gul, stage3_loss
from airwaytopo.metrics import evaluate_case, weighted_mean_score
from airwaytopo.morphology import (
    DtiParams,
    connected_components,
    distance_to_points,
    dual_threshold_iteration,
    fill_holes,
    postprocess,
)
from airwaytopo.netshape import NetConfig, infer_shapes
from airwaytopo.errors import ShapeMismatch
from airwaytopo.skeleton import detect_breakages, skeletonize
from airwaytopo.tree_parsing import Label, ParseParams, parse_pipeline
from airwaytopo.volume import Kind, VoxelGrid, save_volume

from oracles import boundary_fill, brute_distance, central_difference, flood_labels, relative_error


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


TABLE1 = [
    ("neu204", (90.974, 86.670, 94.056, 93.027), 90.710),
    ("YangLab", (94.512, 91.920, 94.800, 94.707), 93.831),
    ("deeptree_damo", (97.853, 97.129, 92.819, 87.928), 94.644),
    ("timi", (95.919, 94.729, 93.910, 93.553), 94.687),
    ("Ours", (96.425, 95.479, 93.827, 91.781), 94.693),
]


def test_criterion_01_wms_reproduction(report):
    t0 = time.perf_counter()
    errs = [abs(weighted_mean_score(*cols) - wms) for _, cols, wms in TABLE1]
    dt = time.perf_counter() - t0
    report(1, max(errs) <= 0.001 + 1e-12 and dt < 1.0, f"max |wMS error| = {max(errs):.4f} over 5 rows, {dt:.3f} s")


def test_criterion_02_oracle_tree_recovery(report):
    t0 = time.perf_counter()
    ok = 0
    failures = []
    for i in range(50):
        b = testkit.generate(testkit.random_spec(1 + i % 4, seed=1000 + i))
        t = parse_pipeline(b.mask, ParseParams(prune_min_len_vox=3.0))
        got = sorted(x.generation for x in t)
        want = sorted(x.generation for x in b.tree)
        if got == want:
            ok += 1
        else:
            failures.append(i)
    dt = time.perf_counter() - t0
    report(2, ok == 50 and dt < 60, f"{ok}/50 trees recovered exactly, {dt:.1f} s, failures {failures}")


def test_criterion_03_perfect_prediction(report, tree3):
    r = evaluate_case(tree3.mask, tree3.mask)
    g = tree3.mask.mask().astype(float)
    cl = tree3.centerline
    vals = {
        "td": r.td, "bd": r.bd, "dsc": r.dsc, "pre": r.pre,
        "dice": dice_loss(g, g), "gul": gul(g, g, np.ones_like(g)),
        "atrl": atrl(g, g, cl), "stage3": stage3_loss(g, g, None, cl, None),
    }
    want = {"td": 1, "bd": 1, "dsc": 1, "pre": 1, "dice": 0, "gul": 0, "atrl": 0.5, "stage3": 0.5}
    worst = max(abs(vals[k] - want[k]) for k in want)
    report(3, worst <= 1e-9, f"max deviation {worst:.1e} over {sorted(want)}")


def test_criterion_04_ablation_arithmetic(report, tree3):
    gt_tree = parse_pipeline(tree3.mask)
    segmental = [b for b in gt_tree if b.label is Label.SEGMENTAL]
    seg = tree3.segment(next(s.id for s in tree3.segments if s.generation == 3))
    base = evaluate_case(tree3.mask, tree3.mask, gt_tree=gt_tree)
    r = evaluate_case(testkit.ablate_branch(tree3, seg.id, "whole"), tree3.mask, gt_tree=gt_tree)
    d_bd = base.bd - r.bd
    d_td = base.td - r.td
    expected = seg.length / tree3.tree.total_length_mm()
    ok = (len(segmental) == 8 and abs(d_bd - 1 / 15) <= 1e-12
          and abs(d_td - expected) <= 0.02 and r.td_large == 1.0)
    report(4, ok, f"dBD = {d_bd:.6f} (1/15 = {1 / 15:.6f}), dTD = {d_td:.4f} vs L/total = {expected:.4f}, "
                  f"td_large = {r.td_large}")


def tip_ablation(bundle, seg, cut):
    """Drop the part of a leaf tube beyond ``cut`` (fraction of its length)."""
    mask = bundle.mask.mask().copy()
    idx = np.argwhere(mask)
    pts = idx.astype(float)
    own, t = seg.distance(pts)
    others = np.full(len(pts), np.inf)
    for s in bundle.segments:
        if s.id != seg.id:
            others = np.minimum(others, s.distance(pts)[0])
    drop = (t >= cut) & (own <= seg.radius_at(t) + 1.0) & (own < others)
    mask[tuple(idx[drop].T)] = False
    return mask


def test_criterion_05_breakage_rule(report):
    rng = np.random.default_rng(5)
    gap_ok = tip_ok = 0
    for i in range(20):
        b = testkit.generate(testkit.random_spec(1 + i % 3, seed=300 + i))
        sk = skeletonize(b.mask)
        fits = [s for s in b.segments if testkit.gap_fits(s, 4.0, 0.5)]
        seg = fits[rng.integers(len(fits))]
        centre = 0.5
        for _ in range(20):
            c = float(rng.uniform(0.3, 0.7))
            if testkit.gap_fits(seg, 4.0, c):
                centre = c
                break
        bs = detect_breakages(sk, testkit.ablate_branch(b, seg.id, "interior_gap", 4.0, centre))
        gap_ok += len(bs.groups) == 1 and bs.groups[0].is_breakage

        leaves = [s for s in b.segments if not s.children]
        leaf = leaves[rng.integers(len(leaves))]
        bs = detect_breakages(sk, tip_ablation(b, leaf, float(rng.uniform(0.5, 0.8))))
        tip_ok += len(bs.groups) >= 1 and bs.n_breakages == 0
    report(5, gap_ok + tip_ok == 40, f"interior gaps {gap_ok}/20, leaf tips {tip_ok}/20")


def test_criterion_06_gradient_checks(report):
    rng = np.random.default_rng(6)
    worst = {}
    for loss_id in ("dice", "gul", "atrl"):
        p = rng.uniform(0.05, 0.95, (6, 6, 6))
        g = (rng.random(p.shape) < 0.4).astype(float)
        cl = np.argwhere(rng.random(p.shape) < 0.3)
        w = rng.uniform(0.5, 3.0, p.shape)
        f = {
            "dice": lambda q: dice_loss(q, g),
            "gul": lambda q: gul(q, g, w),
            "atrl": lambda q: atrl(q, g, cl, w),
        }[loss_id]
        grad = gradient(loss_id, p, g, w_l=w, centerline=cl, w=w)
        idx = rng.choice(p.size, size=100, replace=False)
        worst[loss_id] = float(relative_error(grad.flat[idx], central_difference(f, p, idx)).max())
    ok = max(worst.values()) < 1e-4
    report(6, ok, "max relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def test_criterion_07_morphology_oracles(report):
    rng = np.random.default_rng(7)
    bad = 0
    for i in range(100):
        shape = tuple(int(n) for n in rng.integers(8, 13, size=3))
        m = rng.random(shape) < rng.uniform(0.2, 0.6)
        conn = (6, 26)[i % 2]
        bad += not np.array_equal(connected_components(VoxelGrid.from_mask(m), conn).labels, flood_labels(m, conn))
        bad += not np.array_equal(fill_holes(VoxelGrid.from_mask(m)).mask(), boundary_fill(m))
        t = np.argwhere(rng.random(shape) < 0.02)
        if len(t) == 0:
            t = np.array([[0, 0, 0]])
        bad += not np.array_equal(distance_to_points(shape, t), brute_distance(shape, t))
    report(7, bad == 0, f"{300 - bad}/300 exact matches (labels, fill, distance) on 100 masks")


def test_criterion_08_dti_properties(report):
    rng = np.random.default_rng(8)

    def dti(v, hi, lo):
        return dual_threshold_iteration(VoxelGrid(v, kind=Kind.PROBABILITY), DtiParams(hi, lo)).mask()

    checks = []
    for _ in range(20):
        v = rng.random((10, 10, 10))
        t = float(rng.uniform(0.2, 0.8))
        checks.append(np.array_equal(dti(v, t, t), v >= t))
        hi, lo = sorted(rng.uniform(0.3, 0.9, 2))[::-1]
        base = dti(v, hi, lo)
        checks.append(not (dti(v, hi, lo + 0.05 if lo + 0.05 <= hi else lo) & ~base).any())
        checks.append(not (dti(v, hi + 0.05, lo) & ~base).any())
        checks.append(not (base & ~dti(v, hi, lo - 0.05)).any())
    v = np.zeros((3, 3, 12))
    v[1, 1, 0:4] = [0.6, 0.4, 0.4, 0.6]
    v[1, 1, 8:10] = 0.4
    out = dti(v, 0.5, 0.35)
    bridge = bool(out[1, 1, 0:4].all() and not out[1, 1, 8:10].any())
    report(8, all(checks) and bridge, f"{sum(checks)}/{len(checks)} equality/monotonicity checks, bridge case {bridge}")


def test_criterion_09_determinism(report, tmp_path, capsys):
    def run(argv):
        code = main([str(a) for a in argv])
        capsys.readouterr()
        return code

    data = tmp_path / "data"
    run(["synth", data, "--generations", "2", "--seed", "9", "--probability", "--blur-radius", "1"])
    mask, prob = data / "mask.nii.gz", data / "prob.nii.gz"
    b = testkit.generate(testkit.random_spec(2, seed=9))
    save_volume(testkit.ablate_branch(b, 1, "interior_gap"), tmp_path / "pred.nii.gz")
    pred = tmp_path / "pred.nii.gz"
    commands = {
        "synth": lambda o: ["synth", o, "--generations", "2", "--seed", "9", "--probability"],
        "postprocess": lambda o: ["postprocess", prob, o],
        "parse": lambda o: ["parse", mask, o],
        "evaluate": lambda o: ["evaluate", pred, mask, "-o", o],
        "sample": lambda o: ["sample", mask, "--pred", pred, "--stage", "3", "--size", "32", "--seed", "3", "-o", o],
        "loss": lambda o: ["loss", prob, mask, "-o", o],
        "netshape": lambda o: ["netshape", "-o", o],
    }
    same = []
    for name, argv in commands.items():
        a, c = tmp_path / f"{name}_a", tmp_path / f"{name}_b"
        codes = (run(argv(a)), run(argv(c)))
        if a.is_dir():
            equal = sorted(p.name for p in a.iterdir()) == sorted(p.name for p in c.iterdir()) and all(
                p.read_bytes() == (c / p.name).read_bytes() for p in a.iterdir())
        else:
            equal = a.read_bytes() == c.read_bytes()
        same.append(codes == (0, 0) and equal)

    pdir, gdir = tmp_path / "pd", tmp_path / "gd"
    pdir.mkdir()
    gdir.mkdir()
    for i in range(4):
        bi = testkit.generate(testkit.random_spec(1 + i % 3, seed=60 + i))
        save_volume(bi.mask, gdir / f"c{i}.nii.gz")
        save_volume(testkit.ablate_branch(bi, bi.segments[-1].id), pdir / f"c{i}.nii.gz")
    outs = []
    for w in (1, 8):
        run(["evaluate", "--pred-dir", pdir, "--gt-dir", gdir, "--out-dir", tmp_path / f"w{w}", "--workers", w])
        outs.append({p.name: p.read_bytes() for p in (tmp_path / f"w{w}").iterdir()})
    batch = outs[0] == outs[1] and len(outs[0]) == 5
    report(9, all(same) and batch, f"{sum(same)}/{len(same)} subcommands byte-identical, batch 1 vs 8 workers {batch}")


def big_case():
    spec = testkit.random_spec(
        5, seed=3, dims=(256, 256, 256), root_radius_vox=9.0, radius_decay=0.7,
        branch_length_vox=tuple(60 * 0.78**g for g in range(6)),
    )
    return testkit.generate(spec)


@pytest.mark.slow
def test_criterion_10_performance(report):
    b = big_case()
    prob = testkit.to_probability(b.mask, 0.9, 0.05, blur_radius=1)
    t0 = time.perf_counter()
    skeletonize(b.mask)
    t_skel = time.perf_counter() - t0
    t0 = time.perf_counter()
    pred = postprocess(prob)
    parse_pipeline(pred)
    r = evaluate_case(pred, b.mask)
    t_full = time.perf_counter() - t0
    ok = t_full < 30 and t_skel < 15 and r.td > 0.99
    report(10, ok, f"256^3 postprocess+parse+evaluate {t_full:.1f} s (< 30), skeletonize {t_skel:.2f} s (< 15), "
                   f"{len(b.tree)} branches")


def test_criterion_11_netshape(report):
    stages = {s.stage: s for s in infer_shapes(NetConfig())}
    concat = stages["enc1.concat"].channels
    residual_ok = all(
        (stages[f"enc{i}.pyramid"].spatial, stages[f"enc{i}.pyramid"].channels)
        == (stages[f"enc{i}.die"].spatial, stages[f"enc{i}.die"].channels)
        for i in range(1, 5)
    )
    try:
        infer_shapes(NetConfig(residual_channels=[32, 64, 100, 256]))
        rejected = False
    except ShapeMismatch:
        rejected = True
    report(11, concat == 56 and residual_ok and rejected,
           f"DIE1 concat = {concat}, residual additions consistent {residual_ok}, mismatch rejected {rejected}")
