"""Curve skeletons, neighbour counting and breakage detection.

The skeleton is computed by 3D directional thinning (see ``_thinning``),
which removes simple, non-end points in six fixed border-direction
sub-iterations.  The result is deterministic and preserves the 26/6
topology of the mask.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from ._thinning import thin as _thin

from .errors import DimMismatch, EmptyMask
from .morphology import STRUCT_26, crop_box
from .volume import VoxelGrid

__all__ = [
    "SkeletonPointSet",
    "BreakageGroup",
    "BreakageSet",
    "skeletonize",
    "neighbor_counts",
    "classify_skeleton_vs_prediction",
    "detect_breakages",
]


@dataclass(frozen=True, eq=False)
class SkeletonPointSet:
    """Ordered, duplicate-free set of voxel coordinates inside ``dims``."""

    points: np.ndarray
    dims: tuple[int, int, int]
    _index: dict = field(init=False, repr=False, default=None)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.int64).reshape(-1, 3)
        dims = tuple(int(d) for d in self.dims)
        if pts.size and (np.any(pts < 0) or np.any(pts >= np.array(dims))):
            raise ValueError("skeleton point outside the volume")
        # canonical raster order, duplicates dropped
        flat = np.unique(np.ravel_multi_index(pts.T, dims)) if pts.size else np.zeros(0, np.int64)
        pts = np.stack(np.unravel_index(flat, dims), axis=1).astype(np.int64) if flat.size else pts
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "dims", dims)

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "SkeletonPointSet":
        return cls(np.argwhere(mask), mask.shape)

    @property
    def index(self) -> dict:
        if self._index is None:
            object.__setattr__(
                self, "_index", {tuple(int(c) for c in p): i for i, p in enumerate(self.points)}
            )
        return self._index

    def __len__(self):
        return len(self.points)

    def __contains__(self, coord):
        return tuple(int(c) for c in coord) in self.index

    def __iter__(self):
        return (tuple(int(c) for c in p) for p in self.points)

    def as_mask(self) -> np.ndarray:
        m = np.zeros(self.dims, dtype=bool)
        if len(self.points):
            m[tuple(self.points.T)] = True
        return m

    def subset(self, keep: np.ndarray) -> "SkeletonPointSet":
        return SkeletonPointSet(self.points[np.asarray(keep, dtype=bool)], self.dims)

    def to_json(self) -> dict:
        return {"dims": list(self.dims), "points": self.points.tolist()}

    @classmethod
    def from_json(cls, obj) -> "SkeletonPointSet":
        return cls(np.asarray(obj["points"], dtype=np.int64).reshape(-1, 3), tuple(obj["dims"]))


@dataclass(frozen=True)
class BreakageGroup:
    points: np.ndarray  # (n, 3) int
    is_breakage: bool


@dataclass(frozen=True)
class BreakageSet:
    groups: tuple[BreakageGroup, ...]
    dims: tuple[int, int, int]

    @property
    def breakage_points(self) -> np.ndarray:
        pts = [g.points for g in self.groups if g.is_breakage]
        return np.concatenate(pts) if pts else np.zeros((0, 3), dtype=np.int64)

    @property
    def n_breakages(self) -> int:
        return sum(g.is_breakage for g in self.groups)

    def to_json(self) -> dict:
        return {
            "dims": list(self.dims),
            "groups": [
                {"is_breakage": g.is_breakage, "points": g.points.tolist()} for g in self.groups
            ],
        }


def _mask_of(grid) -> np.ndarray:
    return grid.mask() if isinstance(grid, VoxelGrid) else np.asarray(grid).astype(bool)


def skeletonize(mask: VoxelGrid) -> SkeletonPointSet:
    """One-voxel-wide, topology-preserving curve skeleton of a binary mask."""
    m = _mask_of(mask)
    box = crop_box(m, pad=1)
    if box is None:
        raise EmptyMask("cannot skeletonize an empty mask")
    sub = _thin(np.ascontiguousarray(m[box]))
    offset = np.array([s.start for s in box], dtype=np.int64)
    return SkeletonPointSet(np.argwhere(sub) + offset, m.shape)


def _count_field(indicator: np.ndarray) -> np.ndarray:
    # all-ones 3x3x3 kernel, centre included; caller subtracts one
    return ndimage.convolve(indicator.astype(np.int16), STRUCT_26.astype(np.int16), mode="constant")


def neighbor_counts(sk: SkeletonPointSet) -> np.ndarray:
    """Number of other skeleton points in each point's 3x3x3 neighbourhood."""
    if len(sk) == 0:
        return np.zeros(0, dtype=np.int64)
    lo = sk.points.min(axis=0) - 1
    hi = sk.points.max(axis=0) + 2
    local = sk.points - lo
    indicator = np.zeros(tuple(hi - lo), dtype=bool)
    indicator[tuple(local.T)] = True
    counts = _count_field(indicator)
    return counts[tuple(local.T)].astype(np.int64) - 1


def classify_skeleton_vs_prediction(gt_skeleton: SkeletonPointSet, pred):
    """Split skeleton points into those inside ``pred`` and those it misses."""
    m = _mask_of(pred)
    if tuple(m.shape) != tuple(gt_skeleton.dims):
        raise DimMismatch(f"skeleton dims {gt_skeleton.dims} vs prediction {m.shape}")
    if len(gt_skeleton) == 0:
        return gt_skeleton, gt_skeleton
    hit = m[tuple(gt_skeleton.points.T)]
    return gt_skeleton.subset(hit), gt_skeleton.subset(~hit)


def detect_breakages(gt_skeleton: SkeletonPointSet, pred) -> BreakageSet:
    """Group missed skeleton points and flag the groups that break the tree.

    A group of 26-connected missed points is a breakage when none of its
    points has at most one neighbour in the full ground-truth skeleton, i.e.
    the group contains no skeleton tip and sits strictly inside the tree.
    """
    _, missed = classify_skeleton_vs_prediction(gt_skeleton, pred)
    if len(missed) == 0:
        return BreakageSet((), gt_skeleton.dims)

    counts = neighbor_counts(gt_skeleton)
    count_of = {p: int(c) for p, c in zip(gt_skeleton, counts)}

    lo = missed.points.min(axis=0) - 1
    hi = missed.points.max(axis=0) + 2
    local = missed.points - lo
    indicator = np.zeros(tuple(hi - lo), dtype=bool)
    indicator[tuple(local.T)] = True
    labels, n = ndimage.label(indicator, structure=STRUCT_26)
    point_labels = labels[tuple(local.T)]

    # missed.points is in raster order, so groups come out ordered by their
    # first (smallest linear index) point
    order = dict.fromkeys(point_labels.tolist())
    tip_of = {}
    for p, lab in zip(missed, point_labels.tolist()):
        tip_of[lab] = tip_of.get(lab, False) or count_of[p] <= 1
    groups = []
    for lab in order:
        pts = missed.points[point_labels == lab]
        tip = tip_of[lab]
        groups.append(BreakageGroup(pts, not tip))
    return BreakageSet(tuple(groups), gt_skeleton.dims)
