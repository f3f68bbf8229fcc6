"""Overlap and topology metrics for airway segmentations.

All length-based metrics walk the ground-truth centerlines of a parsed tree
and measure mm step lengths; a step counts as detected when both of its
voxels lie inside the prediction.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimMismatch, InvalidParams, OutOfRange, UnlabeledTree
from .tree_parsing import (
    LARGE_LABELS,
    SMALL_LABELS,
    AirwayTree,
    Label,
    ParseParams,
    parse_pipeline,
)
from .volume import VoxelGrid

__all__ = [
    "BdParams",
    "EvalParams",
    "EvalReport",
    "dsc",
    "precision",
    "branch_coverage",
    "tree_length_detected",
    "branch_detected",
    "hierarchical_metrics",
    "weighted_mean_score",
    "evaluate_case",
    "summarize",
]

WMS_WEIGHTS = (0.3, 0.3, 0.2, 0.2)


@dataclass(frozen=True)
class BdParams:
    branch_detect_threshold: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.branch_detect_threshold <= 1.0:
            raise InvalidParams("branch_detect_threshold must lie in (0, 1]")


@dataclass(frozen=True)
class EvalParams:
    parse: ParseParams = field(default_factory=ParseParams)
    bd: BdParams = field(default_factory=BdParams)


@dataclass
class BranchResult:
    branch_id: int
    label: str
    detected_fraction: float
    detected: bool


@dataclass
class EvalReport:
    td: float
    bd: float
    dsc: float
    pre: float
    td_large: float | None
    bd_large: float | None
    td_small: float | None
    bd_small: float | None
    wms: float
    per_branch: list[BranchResult]

    def to_json(self) -> dict:
        return asdict(self)


def _mask(grid) -> np.ndarray:
    return grid.mask() if isinstance(grid, VoxelGrid) else np.asarray(grid).astype(bool)


def _pair(pred, gt):
    p, g = _mask(pred), _mask(gt)
    if p.shape != g.shape:
        raise DimMismatch(f"prediction {p.shape} vs ground truth {g.shape}")
    return p, g


def dsc(pred, gt) -> float:
    p, g = _pair(pred, gt)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def precision(pred, gt) -> float:
    p, g = _pair(pred, gt)
    n = int(p.sum())
    if n == 0:
        return 1.0
    return int(np.logical_and(p, g).sum()) / n


def branch_coverage(tree: AirwayTree, pred) -> dict[int, tuple[float, float]]:
    """Detected and total centerline length (mm) per branch."""
    p = _mask(pred)
    if tree.dims is not None and tuple(tree.dims) != p.shape:
        raise DimMismatch(f"tree dims {tree.dims} vs prediction {p.shape}")
    spacing = np.asarray(tree.spacing, dtype=np.float64)
    out = {}
    for b in tree.bfs():
        pts = b.centerline
        if np.any(pts < 0) or np.any(pts >= np.array(p.shape)):
            raise DimMismatch(f"branch {b.id} centerline leaves the prediction volume")
        if len(pts) < 2:
            out[b.id] = (0.0, 0.0)
            continue
        inside = p[tuple(pts.T)]
        steps = np.sqrt(((np.diff(b.coords, axis=0) * spacing) ** 2).sum(axis=1))
        hit = inside[:-1] & inside[1:]
        out[b.id] = (float(steps[hit].sum()), float(steps.sum()))
    return out


def _fraction(detected: float, total: float, point_inside: bool) -> float:
    if total > 0:
        return detected / total
    return 1.0 if point_inside else 0.0


def _branch_fractions(tree: AirwayTree, pred):
    p = _mask(pred)
    cov = branch_coverage(tree, p)
    fractions = {}
    for b in tree.bfs():
        det, tot = cov[b.id]
        fractions[b.id] = _fraction(det, tot, bool(p[tuple(b.centerline.T)].all()))
    return cov, fractions


def tree_length_detected(tree: AirwayTree, pred) -> tuple[float, dict[int, float]]:
    cov, fractions = _branch_fractions(tree, pred)
    total = sum(t for _, t in cov.values())
    td = sum(d for d, _ in cov.values()) / total if total > 0 else 1.0
    return td, fractions


def branch_detected(tree: AirwayTree, pred, params: BdParams = BdParams()):
    _, fractions = _branch_fractions(tree, pred)
    flags = {bid: f >= params.branch_detect_threshold for bid, f in fractions.items()}
    bd = sum(flags.values()) / len(flags) if flags else 1.0
    return bd, flags


def hierarchical_metrics(tree: AirwayTree, pred, params: BdParams = BdParams()) -> dict:
    """TD and BD restricted to large (trachea to lobar) and small (segmental) airways.

    A class without branches yields ``None`` rather than a number.
    """
    if any(b.label is Label.UNLABELED for b in tree):
        raise UnlabeledTree("hierarchical metrics need anatomical labels")
    cov, fractions = _branch_fractions(tree, pred)
    out = {}
    for name, labels in (("large", LARGE_LABELS), ("small", SMALL_LABELS)):
        ids = [b.id for b in tree.bfs() if b.label in labels]
        if not ids:
            out[f"td_{name}"] = None
            out[f"bd_{name}"] = None
            continue
        total = sum(cov[i][1] for i in ids)
        det = sum(cov[i][0] for i in ids)
        out[f"td_{name}"] = det / total if total > 0 else 1.0
        out[f"bd_{name}"] = sum(fractions[i] >= params.branch_detect_threshold for i in ids) / len(ids)
    return out


def weighted_mean_score(td: float, bd: float, dsc: float, pre: float) -> float:
    """0.3 TD + 0.3 BD + 0.2 DSC + 0.2 Pre.

    Inputs may be fractions or percentages; they are combined as given, so
    they must share one scale.  Values outside ``[0, 100]`` are rejected.
    """
    vals = (td, bd, dsc, pre)
    if any(not math.isfinite(v) or v < 0 or v > 100 for v in vals):
        raise OutOfRange(f"metric values must lie in [0, 1] or [0, 100], got {vals}")
    return sum(w * v for w, v in zip(WMS_WEIGHTS, vals))


def evaluate_case(pred, gt, params: EvalParams = EvalParams(), gt_tree: AirwayTree | None = None) -> EvalReport:
    """Parse ``gt`` (unless a tree is given) and compute every metric."""
    p, g = _pair(pred, gt)
    if gt_tree is None:
        gt_tree = parse_pipeline(gt if isinstance(gt, VoxelGrid) else VoxelGrid.from_mask(g), params.parse)
    td, fractions = tree_length_detected(gt_tree, p)
    thr = params.bd.branch_detect_threshold
    flags = {bid: f >= thr for bid, f in fractions.items()}
    bd = sum(flags.values()) / len(flags) if flags else 1.0
    d, pr = dsc(p, g), precision(p, g)
    hier = hierarchical_metrics(gt_tree, p, params.bd)
    per_branch = [
        BranchResult(b.id, b.label.value, fractions[b.id], flags[b.id]) for b in gt_tree.bfs()
    ]
    return EvalReport(
        td=td, bd=bd, dsc=d, pre=pr,
        td_large=hier["td_large"], bd_large=hier["bd_large"],
        td_small=hier["td_small"], bd_small=hier["bd_small"],
        wms=weighted_mean_score(td, bd, d, pr),
        per_branch=per_branch,
    )


SUMMARY_FIELDS = ("td", "bd", "dsc", "pre", "td_large", "bd_large", "td_small", "bd_small", "wms")


def summarize(reports: list[EvalReport]) -> dict:
    """Mean and (population) standard deviation of each metric over cases.

    Absent class metrics are skipped; ``n`` records how many cases contributed.
    """
    out = {}
    for name in SUMMARY_FIELDS:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if vals:
            arr = np.asarray(vals, dtype=np.float64)
            out[name] = {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(vals)}
        else:
            out[name] = {"mean": None, "std": None, "n": 0}
    return out
