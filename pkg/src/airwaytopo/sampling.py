"""Curriculum crop sampling and the stage-wise ratio scheduler.

Only patch specifications are produced here; loading voxels into a training
framework is left to the caller.  Every draw is a pure function of its inputs
and an integer seed.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmptyMask, EmptySet, InconsistentCounts, InvalidParams, PatchTooLarge
from .morphology import crop_box
from .skeleton import BreakageSet, SkeletonPointSet
from .volume import VoxelGrid

__all__ = [
    "Strategy",
    "PatchSpec",
    "SchedulerParams",
    "SchedulerState",
    "random_crop",
    "hard_mining_crop",
    "breakage_crop",
    "scheduler_update",
    "make_batch_plan",
]

DEFAULT_PATCH = 128


class Strategy(str, enum.Enum):
    RANDOM = "Random"
    HARD_MINING = "HardMining"
    BREAKAGE = "Breakage"


@dataclass(frozen=True)
class PatchSpec:
    origin: tuple[int, int, int]
    size: int
    strategy: Strategy
    anchor: tuple[int, int, int] | None = None

    def to_json(self) -> dict:
        return {
            "origin": list(self.origin),
            "size": self.size,
            "strategy": self.strategy.value,
            "anchor": None if self.anchor is None else list(self.anchor),
        }

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + self.size) for o in self.origin)


def _dims_of(x) -> tuple[int, int, int]:
    if isinstance(x, VoxelGrid):
        return x.dims
    if isinstance(x, (SkeletonPointSet, BreakageSet)):
        return tuple(x.dims)
    return tuple(np.shape(x))


def _check_size(dims, size: int):
    if size <= 0:
        raise InvalidParams("patch size must be positive")
    if any(d < size for d in dims):
        raise PatchTooLarge(f"patch size {size} exceeds volume dims {tuple(dims)}")


def _origin_for_center(center, dims, size) -> tuple[int, int, int]:
    half = size // 2
    return tuple(int(min(max(c - half, 0), d - size)) for c, d in zip(center, dims))


def random_crop(gt, size: int = DEFAULT_PATCH, rng_seed: int = 0) -> PatchSpec:
    """Patch whose centre is uniform over the foreground box grown by ``size/2``."""
    m = gt.mask() if isinstance(gt, VoxelGrid) else np.asarray(gt).astype(bool)
    dims = m.shape
    _check_size(dims, size)
    box = crop_box(m, pad=0)
    if box is None:
        raise EmptyMask("random crop needs a nonempty ground truth")
    rng = np.random.default_rng(rng_seed)
    half = size // 2
    center = []
    for s, d in zip(box, dims):
        lo = max(s.start - half, 0)
        hi = min(s.stop - 1 + half, d - 1)
        center.append(int(rng.integers(lo, hi + 1)))
    return PatchSpec(_origin_for_center(center, dims, size), size, Strategy.RANDOM)


def _anchored(points: np.ndarray, dims, size, rng_seed, strategy) -> PatchSpec:
    _check_size(dims, size)
    rng = np.random.default_rng(rng_seed)
    anchor = tuple(int(c) for c in points[rng.integers(len(points))])
    return PatchSpec(_origin_for_center(anchor, dims, size), size, strategy, anchor)


def hard_mining_crop(missed: SkeletonPointSet, size: int = DEFAULT_PATCH, rng_seed: int = 0) -> PatchSpec:
    """Patch centred on a skeleton point the previous stage failed to extract."""
    if len(missed) == 0:
        raise EmptySet("no missed skeleton points to mine")
    return _anchored(missed.points, missed.dims, size, rng_seed, Strategy.HARD_MINING)


def breakage_crop(breakages: BreakageSet, size: int = DEFAULT_PATCH, rng_seed: int = 0) -> PatchSpec:
    """Patch centred on a breakage point.  An empty set means every airway is continuous."""
    pts = breakages.breakage_points
    if len(pts) == 0:
        raise EmptySet("no breakage points; all airways are continuous")
    return _anchored(pts, breakages.dims, size, rng_seed, Strategy.BREAKAGE)


@dataclass(frozen=True)
class SchedulerParams:
    boost: float = 4.0
    hard_min: float = 0.2
    hard_max: float = 0.6
    breakage_min: float = 0.1
    breakage_max: float = 0.4

    def __post_init__(self):
        if not (0 <= self.hard_min <= self.hard_max <= 1 and 0 <= self.breakage_min <= self.breakage_max <= 1):
            raise InvalidParams("scheduler bounds must satisfy 0 <= min <= max <= 1")
        if self.boost < 0:
            raise InvalidParams("boost must be nonnegative")


@dataclass(frozen=True)
class SchedulerState:
    stage: int = 1
    n_missed: int = 0
    n_breakage: int = 0
    ratios: tuple[float, float, float] = (1.0, 0.0, 0.0)
    params: SchedulerParams = field(default_factory=SchedulerParams)

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise InvalidParams(f"stage must be 1, 2 or 3, got {self.stage}")
        r = self.ratios
        if len(r) != 3 or min(r) < 0 or abs(sum(r) - 1.0) > 1e-9:
            raise InvalidParams(f"ratios must be a probability vector, got {r}")

    def to_json(self) -> dict:
        return {
            "stage": self.stage,
            "n_missed": self.n_missed,
            "n_breakage": self.n_breakage,
            "ratios": list(self.ratios),
        }


def _clamp(x, lo, hi):
    return min(max(x, lo), hi)


def scheduler_update(state: SchedulerState, n_missed: int, n_breakage: int, n_total_skeleton: int) -> SchedulerState:
    """Recompute sampling ratios from the latest skeleton-point counts.

    Stage 2 sends ``clamp(boost * missed / total, hard_min, hard_max)`` of
    the patches to hard mining.  Stage 3 first reserves
    ``clamp(boost * breakage / missed, breakage_min, breakage_max)`` for
    breakage crops and scales the stage-2 hard ratio into what is left.
    """
    if min(n_missed, n_breakage, n_total_skeleton) < 0:
        raise InconsistentCounts("counts must be nonnegative")
    if n_missed > n_total_skeleton or n_breakage > n_missed:
        raise InconsistentCounts(
            f"need breakage <= missed <= total, got {n_breakage}, {n_missed}, {n_total_skeleton}"
        )
    p = state.params
    if state.stage == 1:
        ratios = (1.0, 0.0, 0.0)
    else:
        frac = n_missed / n_total_skeleton if n_total_skeleton else 0.0
        r_hard = _clamp(frac * p.boost, p.hard_min, p.hard_max)
        r_brk = 0.0
        if state.stage == 3:
            r_brk = _clamp(n_breakage / max(n_missed, 1) * p.boost, p.breakage_min, p.breakage_max)
            r_hard *= 1.0 - r_brk
        ratios = (1.0 - r_hard - r_brk, r_hard, r_brk)
    return replace(state, n_missed=n_missed, n_breakage=n_breakage, ratios=ratios)


def make_batch_plan(state: SchedulerState, count: int, rng_seed: int = 0) -> list[Strategy]:
    """Multinomial draw of ``count`` strategy tags with the state's ratios."""
    if count < 0:
        raise InvalidParams("count must be nonnegative")
    rng = np.random.default_rng(rng_seed)
    tags = list(Strategy)
    idx = rng.choice(len(tags), size=count, p=np.asarray(state.ratios, dtype=np.float64))
    return [tags[i] for i in idx]
