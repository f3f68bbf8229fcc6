"""Binary morphology and probability-map post-processing.

Foreground connectivity is 26 and background connectivity is 6 throughout.
Distances are exact Euclidean distances in voxel units; geometry in mm lives
in :mod:`airwaytopo.metrics`.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskWarning, EmptyTargetSet, InvalidParams
from .volume import VoxelGrid

__all__ = [
    "LabelGrid",
    "DtiParams",
    "connected_components",
    "largest_component",
    "fill_holes",
    "distance_to_points",
    "distance_to_background",
    "dual_threshold_iteration",
    "postprocess",
]

STRUCT_26 = np.ones((3, 3, 3), dtype=bool)
STRUCT_6 = ndimage.generate_binary_structure(3, 1)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 26:
        return STRUCT_26
    if connectivity == 6:
        return STRUCT_6
    raise InvalidParams(f"connectivity must be 6 or 26, got {connectivity}")


def _as_mask(grid) -> np.ndarray:
    if isinstance(grid, VoxelGrid):
        return grid.mask()
    return np.asarray(grid).astype(bool)


@dataclass(frozen=True, eq=False)
class LabelGrid:
    labels: np.ndarray  # int32, 0 = background, 1..K by decreasing size
    spacing: tuple[float, float, float]
    component_sizes: dict[int, int]

    @property
    def dims(self):
        return tuple(self.labels.shape)

    @property
    def count(self) -> int:
        return len(self.component_sizes)


@dataclass(frozen=True)
class DtiParams:
    t_high: float = 0.5
    t_low: float = 0.35

    def __post_init__(self):
        if not 0.0 <= self.t_low <= self.t_high <= 1.0:
            raise InvalidParams(
                f"need 0 <= t_low <= t_high <= 1, got t_low={self.t_low}, t_high={self.t_high}"
            )


def label_array(mask: np.ndarray, connectivity: int = 26) -> tuple[np.ndarray, np.ndarray]:
    """Canonical component labels for a boolean array.

    Returns ``(labels, sizes)`` where label ``k`` (1-based) has ``sizes[k-1]``
    voxels.  Components are ordered by decreasing size; equal sizes keep the
    raster order of their first voxel.
    """
    raw, n = ndimage.label(mask, structure=_structure(connectivity))
    if n == 0:
        return raw.astype(np.int32), np.zeros(0, dtype=np.int64)
    # ndimage.label numbers components in raster order of their first voxel,
    # so a stable sort on size alone gives the seed-index tie-break.
    sizes = np.bincount(raw.ravel(), minlength=n + 1)[1:]
    order = np.argsort(-sizes, kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1, dtype=np.int32)
    return remap[raw], sizes[order]


def connected_components(mask: VoxelGrid, connectivity: int = 26) -> LabelGrid:
    labels, sizes = label_array(_as_mask(mask), connectivity)
    labels.flags.writeable = False
    spacing = mask.spacing if isinstance(mask, VoxelGrid) else (1.0, 1.0, 1.0)
    return LabelGrid(labels, spacing, {i + 1: int(s) for i, s in enumerate(sizes)})


def largest_component(mask: VoxelGrid) -> VoxelGrid:
    """Keep the largest 26-connected component.

    An empty input yields an empty output and an :class:`EmptyMaskWarning`.
    """
    labels, sizes = label_array(mask.mask(), 26)
    if sizes.size == 0:
        warnings.warn("mask has no foreground voxels", EmptyMaskWarning, stacklevel=2)
        return VoxelGrid.from_mask(np.zeros(mask.dims, bool), mask.spacing)
    return VoxelGrid.from_mask(labels == 1, mask.spacing)


def fill_holes(mask: VoxelGrid) -> VoxelGrid:
    """Fill background cavities not 6-connected to the volume boundary."""
    # binary_fill_holes floods the complement from the border using its
    # structuring element; the default cross is 6-connectivity.
    filled = ndimage.binary_fill_holes(mask.mask(), structure=STRUCT_6)
    return VoxelGrid.from_mask(filled, mask.spacing)


def distance_to_points(dims, targets) -> np.ndarray:
    """Exact Euclidean distance (voxel units) from every voxel to ``targets``.

    ``targets`` is an ``(N, 3)`` array-like of integer ``(z, y, x)`` coordinates
    or a boolean array of shape ``dims``.
    """
    dims = tuple(int(d) for d in dims)
    if isinstance(targets, np.ndarray) and targets.shape == dims and targets.dtype == bool:
        target_mask = targets
    else:
        pts = np.asarray(list(targets) if not isinstance(targets, np.ndarray) else targets)
        target_mask = np.zeros(dims, dtype=bool)
        if pts.size:
            pts = pts.reshape(-1, 3).astype(np.int64)
            if np.any(pts < 0) or np.any(pts >= np.array(dims)):
                raise InvalidParams("target point outside the volume")
            target_mask[pts[:, 0], pts[:, 1], pts[:, 2]] = True
    if not target_mask.any():
        raise EmptyTargetSet("distance transform needs at least one target point")
    return ndimage.distance_transform_edt(~target_mask)


def distance_to_background(mask: np.ndarray) -> np.ndarray:
    """Distance from each foreground voxel to the nearest background voxel.

    Voxels outside the array count as background, so a mask touching the
    border still gets finite, sensible radii.
    """
    padded = np.pad(mask.astype(bool), 1)
    dist = ndimage.distance_transform_edt(padded)
    return dist[1:-1, 1:-1, 1:-1]


def dual_threshold_iteration(prob: VoxelGrid, params: DtiParams = DtiParams()) -> VoxelGrid:
    """Hysteresis binarisation.

    Voxels at or above ``t_low`` are kept when they are 26-connected, through
    voxels at or above ``t_low``, to a seed at or above ``t_high``.
    """
    values = prob.array
    low = values >= params.t_low
    seeds = values >= params.t_high
    labels, n = ndimage.label(low, structure=STRUCT_26)
    if n == 0:
        return VoxelGrid.from_mask(np.zeros(prob.dims, bool), prob.spacing)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[seeds])] = True
    keep[0] = False
    return VoxelGrid.from_mask(keep[labels], prob.spacing)


def postprocess(prob: VoxelGrid, params: DtiParams = DtiParams()) -> VoxelGrid:
    """DTI, then hole filling, then the largest connected component."""
    binary = dual_threshold_iteration(prob, params)
    filled = fill_holes(binary)
    with warnings.catch_warnings():
        warnings.simplefilter("error", EmptyMaskWarning)
        try:
            return largest_component(filled)
        except EmptyMaskWarning:
            pass
    warnings.warn("post-processing produced an empty mask", EmptyMaskWarning, stacklevel=2)
    return VoxelGrid.from_mask(np.zeros(prob.dims, bool), prob.spacing)


def crop_box(mask: np.ndarray, pad: int = 1):
    """Bounding-box slices of the foreground, grown by ``pad`` and clipped."""
    mask = np.asarray(mask, dtype=bool)
    # axis projections are much cheaper than listing every foreground index
    zy = mask.any(axis=2)
    hits = (zy.any(axis=1), zy.any(axis=0), mask.any(axis=(0, 1)))
    if not hits[0].any():
        return None
    out = []
    for h, n in zip(hits, mask.shape):
        idx = np.flatnonzero(h)
        out.append(slice(max(int(idx[0]) - pad, 0), min(int(idx[-1]) + pad + 1, n)))
    return tuple(out)
