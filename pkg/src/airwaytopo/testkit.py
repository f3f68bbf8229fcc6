"""Synthetic airway trees with exact ground truth.

Trees are unions of tapered capsules around straight axis segments.  A voxel
belongs to a branch tube when its centre lies within the (linearly tapering)
radius of the branch's axis segment.  Bifurcation planes rotate by roughly
90 degrees from one generation to the next, which keeps the tree genuinely
three-dimensional and non-self-intersecting for moderate angles.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import BranchNotFound, GapTooLarge, InvalidParams, SpecDoesNotFit
from .skeleton import SkeletonPointSet
from .tree_parsing import AirwayTree, Branch, label_for_generation
from .volume import Kind, VoxelGrid

__all__ = [
    "TreeSpec",
    "Segment",
    "GroundTruthBundle",
    "generate",
    "random_spec",
    "ablate_branch",
    "to_probability",
    "rasterize",
]


@dataclass(frozen=True)
class TreeSpec:
    generations: int = 3
    branching_factor: int = 2
    trifurcation_at: int | None = None  # branch index (BFS order) with 3 children
    root_radius_vox: float = 4.0
    radius_decay: float = 0.75
    taper: float = 0.9  # end radius / start radius within a branch
    branch_length_vox: tuple[float, ...] | None = None
    branch_angle_deg: float = 35.0
    azimuth_jitter_deg: float = 20.0
    angle_jitter_deg: float = 0.0
    dims: tuple[int, int, int] | None = None
    margin: int = 4
    min_gap_vox: float = 2.5
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    rng_seed: int = 0

    def lengths(self) -> tuple[float, ...]:
        if self.branch_length_vox is not None:
            if len(self.branch_length_vox) != self.generations + 1:
                raise InvalidParams("branch_length_vox needs one entry per generation")
            return tuple(float(v) for v in self.branch_length_vox)
        return tuple(24.0 * 0.85**g for g in range(self.generations + 1))

    def radius(self, gen: int) -> float:
        return self.root_radius_vox * self.radius_decay**gen

    def validate(self):
        if self.generations < 0:
            raise InvalidParams("generations must be >= 0")
        if self.branching_factor not in (2, 3):
            raise InvalidParams("branching_factor must be 2 or 3")
        if not 0 < self.radius_decay < 1:
            raise InvalidParams("radius_decay must lie in (0, 1)")
        if not 0 < self.taper <= 1:
            raise InvalidParams("taper must lie in (0, 1]")
        if self.radius(self.generations) * self.taper < 1.0:
            raise InvalidParams("branches at the deepest generation would be thinner than 1 voxel")
        if min(self.lengths()) < 4.0:
            raise InvalidParams("branches must be at least 4 voxels long")


@dataclass
class Segment:
    id: int
    parent: int | None
    generation: int
    start: np.ndarray  # float (z, y, x), voxel units
    end: np.ndarray
    r_start: float
    r_end: float
    children: list[int] = field(default_factory=list)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))

    @property
    def direction(self) -> np.ndarray:
        v = self.end - self.start
        return v / np.linalg.norm(v)

    def distance(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Distance from ``pts`` (n, 3) to the axis segment, and the clamped
        axis parameter in [0, 1]."""
        d = self.end - self.start
        t = np.clip(((pts - self.start) @ d) / float(d @ d), 0.0, 1.0)
        closest = self.start + t[:, None] * d
        return np.linalg.norm(pts - closest, axis=1), t

    def radius_at(self, t):
        return self.r_start + (self.r_end - self.r_start) * t


@dataclass
class GroundTruthBundle:
    mask: VoxelGrid
    tree: AirwayTree
    centerline: SkeletonPointSet
    segments: list[Segment]
    spec: TreeSpec

    def segment(self, branch_id: int) -> Segment:
        for s in self.segments:
            if s.id == branch_id:
                return s
        raise BranchNotFound(f"no branch {branch_id}")


def _perpendicular(d: np.ndarray) -> np.ndarray:
    helper = np.array([0.0, 1.0, 0.0]) if abs(d[1]) < 0.9 else np.array([0.0, 0.0, 1.0])
    v = np.cross(d, helper)
    return v / np.linalg.norm(v)


def _rotate(v: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation of ``v`` about unit ``axis``."""
    c, s = math.cos(angle), math.sin(angle)
    return v * c + np.cross(axis, v) * s + axis * float(axis @ v) * (1 - c)


def _layout(spec: TreeSpec) -> list[Segment]:
    rng = np.random.default_rng(spec.rng_seed)
    lengths = spec.lengths()
    root_dir = np.array([1.0, 0.0, 0.0])
    segs = [
        Segment(0, None, 0, np.zeros(3), root_dir * lengths[0],
                spec.radius(0), spec.radius(0) * spec.taper)
    ]
    # per-segment "in-plane" vector used to place the next bifurcation plane
    plane = {0: _rotate(_perpendicular(root_dir), root_dir, rng.uniform(0, 2 * math.pi))}
    frontier = [0]
    while frontier:
        nxt = []
        for sid in frontier:
            seg = segs[sid]
            if seg.generation >= spec.generations:
                continue
            d = seg.direction
            e1 = plane[sid]
            k = 3 if (spec.branching_factor == 3 or spec.trifurcation_at == sid) else 2
            theta0 = math.radians(spec.branch_angle_deg)
            gen = seg.generation + 1
            for j in range(k):
                az = 2 * math.pi * j / k
                theta = theta0 + math.radians(rng.uniform(-1, 1) * spec.angle_jitter_deg)
                radial = _rotate(e1, d, az)
                cdir = math.cos(theta) * d + math.sin(theta) * radial
                cdir /= np.linalg.norm(cdir)
                cid = len(segs)
                child = Segment(cid, sid, gen, seg.end.copy(), seg.end + cdir * lengths[gen],
                                spec.radius(gen), spec.radius(gen) * spec.taper)
                segs.append(child)
                seg.children.append(cid)
                # next plane: normal of this bifurcation plane, jittered about the child axis
                normal = np.cross(d, radial)
                normal -= cdir * float(normal @ cdir)
                normal /= np.linalg.norm(normal)
                jitter = math.radians(rng.uniform(-1, 1) * spec.azimuth_jitter_deg)
                plane[cid] = _rotate(normal, cdir, jitter)
                nxt.append(cid)
        frontier = nxt
    return segs


def _check_overlap(segs: list[Segment], min_gap: float):
    samples = {}
    for s in segs:
        n = max(int(math.ceil(s.length / 0.5)), 2)
        t = np.linspace(0.0, 1.0, n)
        samples[s.id] = (s.start + t[:, None] * (s.end - s.start), s.radius_at(t))
    for a in segs:
        for b in segs:
            if b.id <= a.id:
                continue
            if a.parent == b.id or b.parent == a.id or (a.parent is not None and a.parent == b.parent):
                continue
            pa, ra = samples[a.id]
            pb, rb = samples[b.id]
            d = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2)
            clearance = d - ra[:, None] - rb[None, :]
            if clearance.min() < min_gap:
                raise SpecDoesNotFit(
                    f"branches {a.id} and {b.id} come within {clearance.min():.2f} voxels"
                )


def rasterize(segs: list[Segment], dims) -> np.ndarray:
    """Union of tapered capsules as a boolean array."""
    mask = np.zeros(dims, dtype=bool)
    for s in segs:
        r = max(s.r_start, s.r_end)
        lo = np.maximum(np.floor(np.minimum(s.start, s.end) - r).astype(int), 0)
        hi = np.minimum(np.ceil(np.maximum(s.start, s.end) + r).astype(int) + 1, dims)
        if np.any(hi <= lo):
            continue
        grid = np.stack(
            np.meshgrid(*(np.arange(a, b) for a, b in zip(lo, hi)), indexing="ij"), axis=-1
        ).reshape(-1, 3).astype(np.float64)
        dist, t = s.distance(grid)
        inside = (dist <= s.radius_at(t)).reshape(tuple(hi - lo))
        mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= inside
    return mask


def _axis_voxels(s: Segment) -> tuple[np.ndarray, np.ndarray]:
    """Rounded axis voxels in order and their projections on the axis."""
    n = max(int(math.ceil(s.length / 0.25)), 1) + 1
    t = np.linspace(0.0, 1.0, n)
    pts = s.start + t[:, None] * (s.end - s.start)
    vox = np.rint(pts).astype(np.int64)
    keep = np.ones(len(vox), dtype=bool)
    keep[1:] = np.any(vox[1:] != vox[:-1], axis=1)
    vox = vox[keep]
    proj = np.clip(((vox - s.start) @ s.direction) / s.length, 0.0, 1.0)
    proj[0], proj[-1] = 0.0, 1.0
    coords = s.start + proj[:, None] * (s.end - s.start)
    return vox, coords


def generate(spec: TreeSpec) -> GroundTruthBundle:
    spec.validate()
    segs = _layout(spec)
    _check_overlap(segs, spec.min_gap_vox)

    lo = np.min([np.minimum(s.start, s.end) - s.r_start for s in segs], axis=0)
    hi = np.max([np.maximum(s.start, s.end) + s.r_start for s in segs], axis=0)
    extent = np.ceil(hi - lo).astype(int) + 1
    if spec.dims is None:
        dims = tuple(int(e + 2 * spec.margin) for e in extent)
        offset = spec.margin - np.floor(lo)
    else:
        dims = tuple(int(d) for d in spec.dims)
        if np.any(extent + 2 > np.array(dims)):
            raise SpecDoesNotFit(f"tree extent {tuple(extent)} does not fit in {dims}")
        offset = np.floor((np.array(dims) - extent) / 2.0) - np.floor(lo)
    for s in segs:
        s.start = s.start + offset
        s.end = s.end + offset

    mask = rasterize(segs, dims)
    spacing = tuple(float(v) for v in spec.spacing)
    branches = {}
    all_axis = []
    for s in segs:
        vox, coords = _axis_voxels(s)
        all_axis.append(vox)
        radii = np.full(len(vox), 0.5 * (s.r_start + s.r_end))
        branches[s.id] = Branch(
            s.id, s.parent, list(s.children), vox, coords, radii, spacing,
            generation=s.generation, label=label_for_generation(s.generation),
        )
    tree = AirwayTree(branches, 0, spacing, dims)
    centerline = SkeletonPointSet(np.concatenate(all_axis), dims)
    return GroundTruthBundle(VoxelGrid.from_mask(mask, spacing), tree, centerline, segs, spec)


def random_spec(generations: int, seed: int, **overrides) -> TreeSpec:
    """A TreeSpec with seed-dependent angles and radii that generates cleanly."""
    rng = np.random.default_rng([seed, generations])
    params = dict(
        generations=generations,
        root_radius_vox=float(rng.uniform(4.2, 5.0)),
        radius_decay=float(rng.uniform(0.74, 0.78)),
        branch_angle_deg=float(rng.uniform(30.0, 40.0)),
        azimuth_jitter_deg=20.0,
        rng_seed=int(seed),
    )
    params.update(overrides)
    return TreeSpec(**params)


def _foreground_points(mask: np.ndarray):
    idx = np.argwhere(mask)
    return idx, idx.astype(np.float64)


def ablate_branch(
    bundle: GroundTruthBundle,
    branch_id: int,
    mode: str = "whole",
    gap_len: float = 4.0,
    gap_center: float = 0.5,
) -> VoxelGrid:
    """Remove one branch (``whole``) or a slab across its tube (``interior_gap``).

    ``whole`` deletes every voxel strictly closer to this branch's axis than
    to any other axis, except voxels that also lie inside another branch's
    tube (the junction cap stays with the parent).  ``interior_gap`` deletes the voxels of this branch's
    tube whose projection on the axis falls within ``gap_len`` voxels around
    ``gap_center`` (a fraction of the branch length).
    """
    seg = bundle.segment(branch_id)
    mask = bundle.mask.mask().copy()
    idx, pts = _foreground_points(mask)
    own, t = seg.distance(pts)
    others = np.full(len(pts), np.inf)
    shared = np.zeros(len(pts), dtype=bool)
    for s in bundle.segments:
        if s.id != seg.id:
            d, ts = s.distance(pts)
            others = np.minimum(others, d)
            shared |= d <= s.radius_at(ts)

    if mode == "whole":
        drop = (own < others) & ~shared
    elif mode == "interior_gap":
        L = seg.length
        lo = gap_center * L - gap_len / 2.0
        hi = gap_center * L + gap_len / 2.0
        if gap_len <= 0 or lo < seg.r_start + 2.0 or hi > L - seg.r_end - 2.0:
            raise GapTooLarge(
                f"gap [{lo:.1f}, {hi:.1f}] does not fit inside branch {branch_id} (length {L:.1f})"
            )
        s_axis = (pts - seg.start) @ seg.direction
        drop = (s_axis >= lo) & (s_axis <= hi) & (own <= seg.radius_at(t) + 1.0) & (own <= others)
    else:
        raise InvalidParams(f"unknown ablation mode {mode!r}")
    mask[tuple(idx[drop].T)] = False
    return VoxelGrid.from_mask(mask, bundle.mask.spacing)


def gap_fits(seg: Segment, gap_len: float, gap_center: float) -> bool:
    L = seg.length
    return (gap_center * L - gap_len / 2.0 >= seg.r_start + 2.0
            and gap_center * L + gap_len / 2.0 <= L - seg.r_end - 2.0)


def to_probability(mask, p_fg: float = 0.9, p_bg: float = 0.05, blur_radius: int = 0) -> VoxelGrid:
    """Two-level probability map from a mask, optionally box-blurred."""
    if not 0.0 <= p_bg < p_fg <= 1.0:
        raise InvalidParams(f"need 0 <= p_bg < p_fg <= 1, got p_bg={p_bg}, p_fg={p_fg}")
    m = mask.mask() if isinstance(mask, VoxelGrid) else np.asarray(mask, bool)
    spacing = mask.spacing if isinstance(mask, VoxelGrid) else (1.0, 1.0, 1.0)
    prob = np.where(m, p_fg, p_bg).astype(np.float64)
    if blur_radius > 0:
        prob = ndimage.uniform_filter(prob, size=2 * int(blur_radius) + 1, mode="nearest")
    return VoxelGrid(np.clip(prob, 0.0, 1.0), spacing, Kind.PROBABILITY)
