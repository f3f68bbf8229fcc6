"""Directional 3D thinning (Lee, Kashyap & Chu) with an exact simple-point test.

Each pass visits the six border directions in a fixed order.  For one
direction ``d``, a foreground voxel becomes a candidate when its neighbour at
``+d`` is background, it has at least two foreground neighbours and it is
simple.  Candidates are then re-checked against the current image and
deleted if they are still non-end simple points.  The re-check runs over
the eight parity subfields of the grid in turn.  Two voxels of one subfield
are never 26-adjacent, so deleting a subfield at once is order independent.
A plain raster-order re-check instead walks along two-voxel-thick ribbons,
every voxel of which is a candidate, and eats them from one end.

A voxel ``p`` is simple (26/6 topology) iff its punctured 26-neighbourhood
holds exactly one 26-connected foreground component and its 18-neighbourhood
holds exactly one 6-connected background component that touches a face
neighbour of ``p``.  Deleting simple points never merges, splits, creates or
removes components, tunnels or cavities, so an object can not vanish.

scikit-image ships the same scheme but its re-check accepts a point with
no foreground neighbours as simple, which deletes two-voxel-thick objects
outright.
"""
from __future__ import annotations

import itertools

import numpy as np
from numba import njit

_OFFS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
_CENTER = 13


def _tables():
    n = len(_OFFS)
    adj26 = np.full((n, 26), -1, dtype=np.int64)
    adj6 = np.full((n, 6), -1, dtype=np.int64)
    for i in range(n):
        k26 = k6 = 0
        for j in range(n):
            if i == j or i == _CENTER or j == _CENTER:
                continue
            diff = np.abs(_OFFS[i] - _OFFS[j])
            if diff.max() == 1:
                adj26[i, k26] = j
                k26 += 1
                if diff.sum() == 1:
                    adj6[i, k6] = j
                    k6 += 1
    l1 = np.abs(_OFFS).sum(axis=1)
    in18 = (l1 >= 1) & (l1 <= 2)
    face = np.flatnonzero(l1 == 1)
    return adj26, adj6, in18, face


_ADJ26, _ADJ6, _IN18, _FACE = _tables()
# border directions in visiting order: -z, +z, -y, +y, -x, +x
_DIRS = np.array([[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]], dtype=np.int64)


@njit(cache=True)
def _load(img, z, y, x, cube):
    k = 0
    for dz in range(-1, 2):
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                cube[k] = img[z + dz, y + dy, x + dx]
                k += 1


@njit(cache=True)
def _count_neighbors(img, z, y, x):
    n = 0
    for dz in range(-1, 2):
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                n += img[z + dz, y + dy, x + dx]
    return n - img[z, y, x]


@njit(cache=True)
def _is_simple(cube, adj26, adj6, in18, face, seen, stack):
    # foreground: exactly one 26-component in the punctured neighbourhood
    for i in range(27):
        seen[i] = 0
    comps = 0
    for s in range(27):
        if s == 13 or cube[s] == 0 or seen[s]:
            continue
        comps += 1
        if comps > 1:
            return False
        top = 0
        stack[top] = s
        seen[s] = 1
        while top >= 0:
            i = stack[top]
            top -= 1
            for k in range(26):
                j = adj26[i, k]
                if j < 0:
                    break
                if cube[j] and not seen[j]:
                    seen[j] = 1
                    top += 1
                    stack[top] = j
    if comps != 1:
        return False
    # background: exactly one 6-component in N18 touching a face neighbour
    for i in range(27):
        seen[i] = 0
    comps = 0
    for f in range(6):
        s = face[f]
        if cube[s] or seen[s]:
            continue
        comps += 1
        if comps > 1:
            return False
        top = 0
        stack[top] = s
        seen[s] = 1
        while top >= 0:
            i = stack[top]
            top -= 1
            for k in range(6):
                j = adj6[i, k]
                if j < 0:
                    break
                if in18[j] and cube[j] == 0 and not seen[j]:
                    seen[j] = 1
                    top += 1
                    stack[top] = j
    return comps == 1


@njit(cache=True)
def _thin_padded(img, dirs, adj26, adj6, in18, face):
    zs, ys, xs = np.nonzero(img)
    n = zs.size
    cube = np.zeros(27, dtype=np.uint8)
    seen = np.zeros(27, dtype=np.uint8)
    stack = np.zeros(32, dtype=np.int64)
    cand = np.zeros(n, dtype=np.int64)
    while True:
        changed = 0
        for d in range(6):
            dz, dy, dx = dirs[d, 0], dirs[d, 1], dirs[d, 2]
            nc = 0
            for i in range(n):
                z, y, x = zs[i], ys[i], xs[i]
                if img[z, y, x] == 0 or img[z + dz, y + dy, x + dx] != 0:
                    continue
                if _count_neighbors(img, z, y, x) < 2:
                    continue
                _load(img, z, y, x, cube)
                if _is_simple(cube, adj26, adj6, in18, face, seen, stack):
                    cand[nc] = i
                    nc += 1
            # re-check by parity subfield; members of one subfield are never
            # 26-adjacent, so deleting them together equals any sequential order
            for sub in range(8):
                pz, py, px = (sub >> 2) & 1, (sub >> 1) & 1, sub & 1
                for c in range(nc):
                    i = cand[c]
                    z, y, x = zs[i], ys[i], xs[i]
                    if (z & 1) != pz or (y & 1) != py or (x & 1) != px:
                        continue
                    if _count_neighbors(img, z, y, x) < 2:
                        continue
                    _load(img, z, y, x, cube)
                    if _is_simple(cube, adj26, adj6, in18, face, seen, stack):
                        img[z, y, x] = 0
                        changed += 1
        if changed == 0:
            break
        # drop deleted voxels from the scan list, keeping raster order
        m = 0
        for i in range(n):
            if img[zs[i], ys[i], xs[i]]:
                zs[m], ys[m], xs[m] = zs[i], ys[i], xs[i]
                m += 1
        n = m
    return img


def thin(mask: np.ndarray) -> np.ndarray:
    """Curve skeleton of a boolean 3D array (same shape, boolean)."""
    img = np.pad(np.asarray(mask, dtype=bool), 1).astype(np.uint8)
    out = _thin_padded(img, _DIRS, _ADJ26, _ADJ6, _IN18, _FACE)
    return out[1:-1, 1:-1, 1:-1].astype(bool)
