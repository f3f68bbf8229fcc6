"""Region losses for airway segmentation and their analytic gradients.

Four quantities are implemented, each as a value and a per-voxel gradient
with respect to the prediction ``p``:

* ``dice_loss``   1 - 2 sum(p g) / sum(p + g)
* ``gul``         1 - sum(w_l p^gamma g) / sum(w_l (alpha p + beta g))
* ``atrl``        1 - sum_C(w p g) / sum_C(w (p + g)), summed over centerline voxels C
* ``stage3_loss`` gul + atrl

The centerline-restricted loss is implemented exactly as written, without
the factor 2 of the Dice numerator, so a perfect prediction scores 0.5.

All reductions run in float64 with numpy's pairwise summation, which makes
values independent of threading.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DimMismatch, EmptyCenterline, InvalidParams, SingularPoint, UnparsedTree
from .morphology import STRUCT_26, distance_to_points
from .skeleton import BreakageSet, SkeletonPointSet
from .tree_parsing import AirwayTree
from .volume import VoxelGrid

__all__ = [
    "GulParams",
    "LocalWeightParams",
    "CenterlineParams",
    "WeightField",
    "dice_loss",
    "gul",
    "atrl",
    "stage3_loss",
    "local_imbalance_weights",
    "centerline_weights",
    "weight_field",
    "gradient",
]


@dataclass(frozen=True)
class GulParams:
    gamma: float = 0.7
    alpha: float = 0.2
    beta: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise InvalidParams("gamma must lie in (0, 1]")
        if self.alpha <= 0 or self.beta <= 0:
            raise InvalidParams("alpha and beta must be positive")


@dataclass(frozen=True)
class LocalWeightParams:
    kappa: float = 0.5
    w_cap: float = 8.0


@dataclass(frozen=True)
class CenterlineParams:
    k_cap: float = 2.0
    eta_term_clamped_nonneg: bool = True
    eta_dilation: int = 1

    def __post_init__(self):
        if self.k_cap <= 0:
            raise InvalidParams("k_cap must be positive")


@dataclass(frozen=True, eq=False)
class WeightField:
    w_l: np.ndarray
    w_c: np.ndarray
    w: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.w_l.shape != self.w_c.shape:
            raise DimMismatch("w_l and w_c shapes differ")
        object.__setattr__(self, "w", self.w_l + self.w_c)


def _arr(x) -> np.ndarray:
    if isinstance(x, VoxelGrid):
        return x.array.astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def _check(*arrays):
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise DimMismatch(f"shape {a.shape} does not match {shape}")


def _centerline_index(centerline, shape) -> tuple:
    if isinstance(centerline, SkeletonPointSet):
        pts = centerline.points
    else:
        pts = np.asarray(centerline)
        if pts.shape == shape and pts.dtype == bool:
            pts = np.argwhere(pts)
    pts = np.asarray(pts, dtype=np.int64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCenterline("centerline has no points")
    return tuple(pts.T)


# ---------------------------------------------------------------------------
# loss values
# ---------------------------------------------------------------------------


def dice_loss(p, g) -> float:
    p, g = _arr(p), _arr(g)
    _check(p, g)
    denom = p.sum() + g.sum()
    if denom == 0:
        return 0.0
    return float(1.0 - 2.0 * (p * g).sum() / denom)


def gul(p, g, w_l=None, params: GulParams = GulParams()) -> float:
    p, g = _arr(p), _arr(g)
    w = np.ones_like(p) if w_l is None else _arr(w_l)
    _check(p, g, w)
    num = (w * np.power(p, params.gamma) * g).sum()
    den = (w * (params.alpha * p + params.beta * g)).sum()
    if den == 0:
        return 0.0
    return float(1.0 - num / den)


def _weights_on(w, shape):
    if isinstance(w, WeightField):
        w = w.w
    w = np.ones(shape) if w is None else _arr(w)
    if w.shape != shape:
        raise DimMismatch(f"weight shape {w.shape} does not match {shape}")
    return w


def atrl(p, g, centerline, w=None) -> float:
    p, g = _arr(p), _arr(g)
    _check(p, g)
    idx = _centerline_index(centerline, p.shape)
    wc = _weights_on(w, p.shape)[idx]
    pc, gc = p[idx], g[idx]
    den = (wc * (pc + gc)).sum()
    if den == 0:
        return 0.0
    return float(1.0 - (wc * pc * gc).sum() / den)


def stage3_loss(p, g, w_l, centerline, w, params: GulParams = GulParams()) -> float:
    return gul(p, g, w_l, params) + atrl(p, g, centerline, w)


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


def local_imbalance_weights(g, gt_tree: AirwayTree, params: LocalWeightParams = LocalWeightParams()) -> np.ndarray:
    """Per-voxel weights that grow as the voxel's branch gets smaller.

    Each foreground voxel joins the branch owning its nearest centerline
    voxel.  With ``V_b`` the voxel count of that branch and ``V_max`` the
    largest such count, the weight is ``clamp((V_max / V_b) ** kappa, 1,
    w_cap)``.  Background voxels weigh 1.
    """
    g = _arr(g) != 0
    if gt_tree is None or len(gt_tree) == 0:
        raise UnparsedTree("local imbalance weights need a parsed ground-truth tree")
    owner = np.full(g.shape, -1, dtype=np.int64)
    for b in gt_tree.bfs():
        pts = b.centerline
        if np.any(pts < 0) or np.any(pts >= np.array(g.shape)):
            raise DimMismatch(f"branch {b.id} centerline leaves the volume")
        # first writer wins so junction voxels stay with the proximal branch
        sel = owner[tuple(pts.T)] < 0
        owner[tuple(pts[sel].T)] = b.id
    targets = owner >= 0
    w = np.ones(g.shape, dtype=np.float64)
    if not g.any():
        return w
    _, nearest = ndimage.distance_transform_edt(~targets, return_indices=True)
    assigned = owner[tuple(nearest)]
    branch_of_fg = assigned[g]
    ids, counts = np.unique(branch_of_fg, return_counts=True)
    v_max = counts.max()
    per_branch = np.clip((v_max / counts) ** params.kappa, 1.0, params.w_cap)
    lookup = dict(zip(ids.tolist(), per_branch.tolist()))
    w[g] = np.vectorize(lookup.__getitem__, otypes=[np.float64])(branch_of_fg)
    return w


def breakage_indicator(breakages, shape, dilation: int = 1) -> np.ndarray:
    """Boolean field marking breakage points grown by ``dilation`` voxels (26-neighbourhood)."""
    eta = np.zeros(shape, dtype=bool)
    if breakages is None:
        return eta
    pts = breakages.breakage_points if isinstance(breakages, BreakageSet) else np.asarray(breakages)
    pts = np.asarray(pts, dtype=np.int64).reshape(-1, 3)
    if len(pts):
        eta[tuple(pts.T)] = True
        if dilation > 0:
            eta = ndimage.binary_dilation(eta, structure=STRUCT_26, iterations=dilation)
    return eta


def centerline_weights(
    g,
    centerline,
    breakages=None,
    params: CenterlineParams = CenterlineParams(),
    d_max: float | None = None,
) -> np.ndarray:
    """Centerline-distance weights with extra emphasis on breakage voxels.

    ``w_c = (1 - d / d_max)^2 + eta * min(1 - d, K)`` with ``d`` the voxel
    distance to the nearest centerline voxel and ``d_max`` its maximum over
    the foreground.  With ``eta_term_clamped_nonneg`` the breakage term is
    floored at 0; otherwise it is used literally and can go negative.
    """
    g = _arr(g) != 0
    idx = _centerline_index(centerline, g.shape)
    d = distance_to_points(g.shape, np.stack(idx, axis=1))
    if d_max is None:
        d_max = float(d[g].max()) if g.any() else 0.0
    if d_max > 0:
        base = (1.0 - d / d_max) ** 2
    else:
        base = np.where(d == 0, 1.0, 0.0)
    eta = breakage_indicator(breakages, g.shape, params.eta_dilation)
    extra = np.minimum(1.0 - d, params.k_cap)
    if params.eta_term_clamped_nonneg:
        extra = np.maximum(extra, 0.0)
    return base + eta * extra


def weight_field(g, gt_tree, centerline, breakages=None,
                 local: LocalWeightParams = LocalWeightParams(),
                 center: CenterlineParams = CenterlineParams()) -> WeightField:
    return WeightField(
        local_imbalance_weights(g, gt_tree, local),
        centerline_weights(g, centerline, breakages, center),
    )


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _dice_grad(p, g):
    inter = (p * g).sum()
    s = p.sum() + g.sum()
    if s == 0:
        return np.zeros_like(p)
    return (2.0 * inter - 2.0 * g * s) / s**2


def _gul_grad(p, g, w, params: GulParams):
    if params.gamma < 1.0:
        singular = (p <= 0) & (w * g != 0)
        if singular.any():
            raise SingularPoint(
                f"GUL gradient is unbounded at p=0 for gamma={params.gamma} "
                f"({int(singular.sum())} voxels)"
            )
    pg = np.power(p, params.gamma)
    num = (w * pg * g).sum()
    den = (w * (params.alpha * p + params.beta * g)).sum()
    if den == 0:
        return np.zeros_like(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        dpg = np.where(g * w != 0, params.gamma * np.power(p, params.gamma - 1.0), 0.0)
    return -(w * dpg * g * den - num * w * params.alpha) / den**2


def _atrl_grad(p, g, idx, w):
    out = np.zeros_like(p)
    wc, pc, gc = w[idx], p[idx], g[idx]
    num = (wc * pc * gc).sum()
    den = (wc * (pc + gc)).sum()
    if den == 0:
        return out
    # several centerline entries may hit one voxel only if duplicated; SkeletonPointSet forbids it
    out[idx] = -(wc * gc * den - num * wc) / den**2
    return out


def gradient(loss_id: str, p, g, *, w_l=None, centerline=None, w=None,
             params: GulParams = GulParams()) -> np.ndarray:
    """Per-voxel derivative of a loss with respect to ``p``.

    ``loss_id`` is one of ``"dice"``, ``"gul"``, ``"atrl"``, ``"stage3"``.
    The centerline loss has zero gradient away from the centerline.
    """
    p, g = _arr(p), _arr(g)
    _check(p, g)
    if loss_id == "dice":
        return _dice_grad(p, g)
    if loss_id == "gul":
        return _gul_grad(p, g, _weights_on(w_l, p.shape), params)
    if loss_id == "atrl":
        return _atrl_grad(p, g, _centerline_index(centerline, p.shape), _weights_on(w, p.shape))
    if loss_id == "stage3":
        return gradient("gul", p, g, w_l=w_l, params=params) + gradient(
            "atrl", p, g, centerline=centerline, w=w
        )
    raise InvalidParams(f"unknown loss {loss_id!r}")
