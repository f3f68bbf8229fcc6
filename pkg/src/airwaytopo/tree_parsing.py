"""Airway tree parsing: skeleton graph, smoothing, pruning, grading, labels.

The parsed tree keeps two parallel point lists per branch: ``centerline``
holds the integer skeleton voxels (used for any membership test) and
``coords`` holds float coordinates in voxel units, which smoothing moves
and from which lengths are measured.
"""
from __future__ import annotations

import copy
import enum
import itertools
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSkeleton, DisconnectedSkeleton, InvalidParams, UngradedTree
from .morphology import distance_to_background
from .skeleton import SkeletonPointSet, neighbor_counts, skeletonize
from .volume import VoxelGrid

__all__ = [
    "Label",
    "Branch",
    "AirwayTree",
    "ParseParams",
    "parse_skeleton",
    "smooth_centerlines",
    "prune",
    "grade_topology",
    "match_anatomy",
    "parse_pipeline",
]

_OFFSETS = [d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]


class Label(str, enum.Enum):
    TRACHEA = "Trachea"
    MAIN_BRONCHUS = "MainBronchus"
    LOBAR = "Lobar"
    SEGMENTAL = "Segmental"
    DISTAL = "Distal"
    UNLABELED = "Unlabeled"


LARGE_LABELS = frozenset({Label.TRACHEA, Label.MAIN_BRONCHUS, Label.LOBAR})
SMALL_LABELS = frozenset({Label.SEGMENTAL})

_LABEL_BY_GENERATION = (Label.TRACHEA, Label.MAIN_BRONCHUS, Label.LOBAR, Label.SEGMENTAL)


def label_for_generation(gen: int) -> Label:
    return _LABEL_BY_GENERATION[gen] if gen < len(_LABEL_BY_GENERATION) else Label.DISTAL


@dataclass
class Branch:
    id: int
    parent: int | None
    children: list[int]
    centerline: np.ndarray  # (n, 3) int voxel coords, proximal -> distal
    coords: np.ndarray  # (n, 3) float voxel coords
    radii: np.ndarray  # (n,) distance-field samples
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    generation: int | None = None
    label: Label = Label.UNLABELED

    @property
    def length_mm(self) -> float:
        return polyline_length(self.coords, self.spacing)

    @property
    def length_vox(self) -> float:
        return polyline_length(self.coords)

    @property
    def mean_radius_vox(self) -> float:
        return float(np.mean(self.radii)) if len(self.radii) else 0.0

    def direction(self) -> np.ndarray | None:
        """Unit vector from first to last point, in mm."""
        if len(self.coords) < 2:
            return None
        v = (self.coords[-1] - self.coords[0]) * np.asarray(self.spacing)
        n = np.linalg.norm(v)
        return v / n if n > 0 else None

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "parent": self.parent,
            "children": list(self.children),
            "generation": self.generation,
            "label": self.label.value,
            "length_mm": round(self.length_mm, 6),
            "mean_radius_vox": round(self.mean_radius_vox, 6),
            "centerline": self.centerline.tolist(),
            "coords": np.round(self.coords, 6).tolist(),
            "radii": np.round(self.radii, 6).tolist(),
        }


def polyline_length(coords, spacing=(1.0, 1.0, 1.0)) -> float:
    coords = np.asarray(coords, dtype=np.float64)
    if len(coords) < 2:
        return 0.0
    steps = np.diff(coords, axis=0) * np.asarray(spacing, dtype=np.float64)
    return float(np.sqrt((steps**2).sum(axis=1)).sum())


@dataclass
class AirwayTree:
    branches: dict[int, Branch]
    root: int
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    dims: tuple[int, int, int] | None = None

    def __len__(self):
        return len(self.branches)

    def __iter__(self):
        return iter(self.branches.values())

    def __getitem__(self, bid) -> Branch:
        return self.branches[bid]

    def bfs(self):
        """Branches in breadth-first order from the root."""
        queue = deque([self.root])
        while queue:
            b = self.branches[queue.popleft()]
            yield b
            queue.extend(b.children)

    def leaves(self):
        return [b for b in self if not b.children]

    def depth(self) -> int:
        return max(b.generation for b in self) if self.graded else max(self._depths().values())

    def _depths(self):
        depth = {self.root: 0}
        for b in self.bfs():
            for c in b.children:
                depth[c] = depth[b.id] + 1
        return depth

    @property
    def graded(self) -> bool:
        return all(b.generation is not None for b in self)

    def total_length_mm(self) -> float:
        return sum(b.length_mm for b in self)

    def copy(self) -> "AirwayTree":
        return copy.deepcopy(self)

    def to_json(self) -> dict:
        return {
            "root": self.root,
            "spacing": list(self.spacing),
            "dims": list(self.dims) if self.dims else None,
            "branches": [b.to_json() for b in self.bfs()],
        }

    @classmethod
    def from_json(cls, obj) -> "AirwayTree":
        spacing = tuple(float(s) for s in obj.get("spacing", (1.0, 1.0, 1.0)))
        branches = {}
        for rec in obj["branches"]:
            pts = np.asarray(rec["centerline"], dtype=np.int64).reshape(-1, 3)
            branches[int(rec["id"])] = Branch(
                id=int(rec["id"]),
                parent=rec.get("parent"),
                children=[int(c) for c in rec.get("children", [])],
                centerline=pts,
                coords=np.asarray(rec.get("coords", pts), dtype=np.float64).reshape(-1, 3),
                radii=np.asarray(
                    rec.get("radii", [rec.get("mean_radius_vox", 0.0)] * len(pts)), dtype=np.float64
                ),
                spacing=spacing,
                generation=rec.get("generation"),
                label=Label(rec.get("label", "Unlabeled")),
            )
        dims = obj.get("dims")
        return cls(branches, int(obj["root"]), spacing, tuple(dims) if dims else None)


@dataclass(frozen=True)
class ParseParams:
    smooth_window: int = 5
    prune_min_len_vox: float = 3.0
    prune_max_generation_protect: int = 0
    angle_threshold_deg: float = 15.0
    radius_ratio: float = 0.8

    def __post_init__(self):
        if self.smooth_window < 1 or self.smooth_window % 2 == 0:
            raise InvalidParams(f"smooth_window must be odd and >= 1, got {self.smooth_window}")
        if self.prune_min_len_vox < 0:
            raise InvalidParams("prune_min_len_vox must be >= 0")


# ---------------------------------------------------------------------------
# skeleton -> graph
# ---------------------------------------------------------------------------


@dataclass
class _Edge:
    a: int  # node ids
    b: int
    points: list  # voxel tuples from the a-side to the b-side, junction voxels excluded
    attach_a: tuple | None = None  # junction voxel the edge touches at node a
    attach_b: tuple | None = None
    key: int = field(default=0)

    def oriented(self, nid):
        """(points, attach voxel at ``nid``, attach voxel at the far node)."""
        if self.a == nid:
            return self.points, self.attach_a, self.attach_b
        return self.points[::-1], self.attach_b, self.attach_a


def _components(members, neighbours):
    """Connected components of ``members`` under ``neighbours`` (dict of lists)."""
    seen = {}
    comps = []
    members = list(members)
    member_set = set(members)
    for start in members:
        if start in seen:
            continue
        comp = [start]
        seen[start] = len(comps)
        stack = [start]
        while stack:
            p = stack.pop()
            for q in neighbours[p]:
                if q in member_set and q not in seen:
                    seen[q] = len(comps)
                    comp.append(q)
                    stack.append(q)
        comps.append(comp)
    return comps, seen


def _build_graph(sk: SkeletonPointSet):
    pts = list(sk)
    pset = set(pts)
    nbrs = {p: [] for p in pts}
    for p in pts:
        z, y, x = p
        for dz, dy, dx in _OFFSETS:
            q = (z + dz, y + dy, x + dx)
            if q in pset:
                nbrs[p].append(q)
    counts = dict(zip(pts, (int(c) for c in neighbor_counts(sk))))

    comps, _ = _components(pts, nbrs)
    if len(comps) > 1:
        raise DisconnectedSkeleton(f"skeleton has {len(comps)} components")

    ends = [p for p in pts if counts[p] <= 1]
    if not ends:
        raise DegenerateSkeleton("skeleton has no endpoints")
    junction_vox = {p for p in pts if counts[p] >= 3}
    chain_vox = {p for p in pts if counts[p] == 2}

    # node ids: endpoints first (raster order), then junction clusters
    node_of = {}
    nodes = []  # list of voxel lists
    for p in ends:
        node_of[p] = len(nodes)
        nodes.append([p])
    clusters, _ = _components(sorted(junction_vox), nbrs)
    for cl in clusters:
        for p in cl:
            node_of[p] = len(nodes)
        nodes.append(sorted(cl))

    def is_end(v):
        return counts[v] <= 1

    def attach(points, v, front):
        # endpoint voxels belong to the branch; junction voxels are recorded apart
        if is_end(v):
            return ([v] + points if front else points + [v]), None
        return points, v

    edges: list[_Edge] = []
    chains, _ = _components(sorted(chain_vox), nbrs)
    for chain in chains:
        cset = set(chain)
        tips = [p for p in chain if sum(q in cset for q in nbrs[p]) < 2]
        if not tips:
            continue  # closed loop of chain voxels; impossible in a connected tree with ends
        start = min(tips)
        order = [start]
        seen = {start}
        cur = start
        while True:
            nxt = [q for q in nbrs[cur] if q in cset and q not in seen]
            if not nxt:
                break
            cur = min(nxt)
            order.append(cur)
            seen.add(cur)
        head = sorted(q for q in nbrs[order[0]] if q in node_of)
        tail = sorted(q for q in nbrs[order[-1]] if q in node_of)
        if len(order) == 1:
            if len(head) < 2:
                continue
            h, t = head[0], head[1]
        else:
            if not head or not tail:
                continue
            h, t = head[0], tail[0]
        points, att_a = attach(list(order), h, True)
        points, att_b = attach(points, t, False)
        edges.append(_Edge(node_of[h], node_of[t], points, att_a, att_b))

    # node voxels touching each other directly (no chain voxel in between)
    for p in sorted(node_of):
        if not is_end(p):
            continue
        for q in nbrs[p]:
            if q not in node_of:
                continue
            if is_end(q):
                if p < q:
                    edges.append(_Edge(node_of[p], node_of[q], [p, q]))
            else:
                edges.append(_Edge(node_of[p], node_of[q], [p], None, q))

    for i, e in enumerate(edges):
        e.key = i
    return nodes, edges, counts, nbrs


def _cluster_path(src, dst, nbrs, members) -> list:
    """Shortest 26-connected path between two voxels of one junction cluster."""
    if src == dst:
        return [src]
    prev = {src: None}
    queue = deque([src])
    while queue:
        p = queue.popleft()
        if p == dst:
            break
        for q in nbrs[p]:
            if q in members and q not in prev:
                prev[q] = p
                queue.append(q)
    path = [dst]
    while prev[path[-1]] is not None:
        path.append(prev[path[-1]])
    return path[::-1]


def _make_branch(bid, parent, points, radius, spacing) -> Branch:
    arr = np.asarray(points, dtype=np.int64).reshape(-1, 3)
    radii = (
        radius[tuple(arr.T)].astype(np.float64)
        if radius is not None
        else np.zeros(len(arr), dtype=np.float64)
    )
    return Branch(bid, parent, [], arr, arr.astype(np.float64), radii, tuple(spacing))


def parse_skeleton(
    sk: SkeletonPointSet, radius: np.ndarray | None = None, spacing=(1.0, 1.0, 1.0)
) -> AirwayTree:
    """Turn a connected skeleton into an (ungraded, unlabelled) branch tree.

    ``radius`` is an optional distance field sampled along centerlines; the
    root is the free end of the widest terminal branch, ties going to the
    endpoint with the largest ``z``.
    """
    if len(sk) == 0:
        raise DegenerateSkeleton("empty skeleton")
    spacing = tuple(float(s) for s in spacing)
    if len(sk) == 1:
        p = next(iter(sk))
        b = _make_branch(0, None, [p], radius, spacing)
        return AirwayTree({0: b}, 0, spacing, sk.dims)

    nodes, edges, counts, nbrs = _build_graph(sk)
    incident = {i: [] for i in range(len(nodes))}
    for e in edges:
        incident[e.a].append(e)
        if e.b != e.a:
            incident[e.b].append(e)

    def mean_r(points):
        if radius is None or not points:
            return 0.0
        arr = np.asarray(points)
        return float(radius[tuple(arr.T)].mean())

    # candidate roots: endpoint nodes, scored by the mean radius of their edge
    candidates = []
    for nid, vox in enumerate(nodes):
        p = vox[0]
        if counts[p] <= 1 and incident[nid]:
            e = incident[nid][0]
            candidates.append((mean_r(e.points), p[0], -int(np.ravel_multi_index(p, sk.dims)), nid))
    if not candidates:
        raise DegenerateSkeleton("no endpoint to root the tree at")
    root_node = max(candidates)[3]

    branches: dict[int, Branch] = {}
    # node -> (branch id that reached it, junction voxel it arrived at)
    entered = {root_node: (None, None)}
    used = set()
    queue = deque([root_node])
    while queue:
        nid = queue.popleft()
        members = set(nodes[nid])
        out = [e for e in incident[nid] if e.key not in used]
        out.sort(key=lambda e: _first_step(e, nid))
        parent, entry = entered[nid]
        for e in out:
            used.add(e.key)
            far = e.b if e.a == nid else e.a
            if far in entered:
                continue  # closes a cycle; drop it
            pts, near_att, far_att = e.oriented(nid)
            if near_att is not None:
                src = entry if entry is not None else near_att
                pts = _cluster_path(src, near_att, nbrs, members) + list(pts)
            bid = len(branches)
            branches[bid] = _make_branch(bid, parent, pts, radius, spacing)
            if parent is not None:
                branches[parent].children.append(bid)
            entered[far] = (bid, far_att)
            queue.append(far)
    if not branches:
        raise DegenerateSkeleton("skeleton graph has no edges")
    return AirwayTree(branches, 0, spacing, sk.dims)


def _first_step(e: _Edge, nid: int):
    pts, near_att, _ = e.oriented(nid)
    if near_att is not None:
        return pts[0] if pts else near_att
    return pts[1] if len(pts) > 1 else pts[0]


# ---------------------------------------------------------------------------
# tree operations
# ---------------------------------------------------------------------------


def smooth_centerlines(tree: AirwayTree, window: int = 5) -> AirwayTree:
    """Symmetric moving average of branch coordinates, ends held fixed.

    The averaging window shrinks near the ends so it always stays centred;
    the first and last points therefore never move.  Integer ``centerline``
    voxels are left untouched.
    """
    if window < 1 or window % 2 == 0:
        raise InvalidParams(f"window must be odd and >= 1, got {window}")
    out = tree.copy()
    half = window // 2
    if half == 0:
        return out
    for b in out:
        src = b.centerline.astype(np.float64)
        n = len(src)
        if n < 3:
            continue
        csum = np.vstack([np.zeros((1, 3)), np.cumsum(src, axis=0)])
        idx = np.arange(n)
        h = np.minimum(half, np.minimum(idx, n - 1 - idx))
        b.coords = (csum[idx + h + 1] - csum[idx - h]) / (2 * h + 1)[:, None]
    return out


def _renumber(tree: AirwayTree) -> AirwayTree:
    order = [b.id for b in tree.bfs()]
    new_id = {old: new for new, old in enumerate(order)}
    branches = {}
    for old in order:
        b = tree.branches[old]
        b.id = new_id[old]
        b.parent = None if b.parent is None else new_id[b.parent]
        b.children = [new_id[c] for c in b.children]
        branches[b.id] = b
    return AirwayTree(branches, 0, tree.spacing, tree.dims)


def _merge_into_parent(tree: AirwayTree, parent: Branch, child: Branch):
    skip = 1 if np.array_equal(parent.centerline[-1], child.centerline[0]) else 0
    parent.centerline = np.vstack([parent.centerline, child.centerline[skip:]])
    parent.coords = np.vstack([parent.coords, child.coords[skip:]])
    parent.radii = np.concatenate([parent.radii, child.radii[skip:]])
    parent.children = list(child.children)
    for g in child.children:
        tree.branches[g].parent = parent.id
    del tree.branches[child.id]


def prune(tree: AirwayTree, params: ParseParams = ParseParams()) -> AirwayTree:
    """Drop short peripheral branches and merge single-child chains.

    Leaves shorter than ``prune_min_len_vox`` (polyline length in voxels) are
    removed, then every branch with exactly one child absorbs that child.
    Both steps repeat until nothing changes.  The root is never removed.
    """
    out = tree.copy()
    while True:
        changed = False
        depth = out._depths()
        doomed = [
            b
            for b in out
            if not b.children
            and b.id != out.root
            and depth[b.id] > params.prune_max_generation_protect
            and b.length_vox < params.prune_min_len_vox
        ]
        for b in doomed:
            out.branches[b.parent].children.remove(b.id)
            del out.branches[b.id]
            changed = True
        for b in list(out.bfs()):
            if b.id not in out.branches:
                continue  # already absorbed by its parent
            while len(b.children) == 1:
                _merge_into_parent(out, b, out.branches[b.children[0]])
                changed = True
        if not changed:
            break
    return _renumber(out)


def grade_topology(tree: AirwayTree) -> AirwayTree:
    """Generation numbers by depth: root 0, each child one more than its parent."""
    out = tree.copy()
    out.branches[out.root].generation = 0
    for b in out.bfs():
        for c in b.children:
            out.branches[c].generation = b.generation + 1
    return out


def _angle_deg(u, v) -> float:
    return math.degrees(math.acos(float(np.clip(np.dot(u, v), -1.0, 1.0))))


def match_anatomy(tree: AirwayTree, params: ParseParams = ParseParams()) -> AirwayTree:
    """Anatomical labels from generation, with a collinearity correction.

    A generation-2 branch that continues its parent almost straight
    (direction within ``angle_threshold_deg``) and stays nearly as wide
    (mean radius at least ``radius_ratio`` of the parent's) is treated as a
    continuation of the parent: it inherits the parent's label and its
    descendants are labelled one generation shallower.
    """
    if not tree.graded:
        raise UngradedTree("match_anatomy needs generation numbers; run grade_topology first")
    out = tree.copy()
    shift = {out.root: 0}
    for b in out.bfs():
        if b.parent is not None:
            shift.setdefault(b.id, shift[b.parent])
        eff = b.generation - shift[b.id]
        if b.generation == 2 and b.parent is not None:
            parent = out.branches[b.parent]
            u, v = b.direction(), parent.direction()
            if (
                u is not None
                and v is not None
                and _angle_deg(u, v) < params.angle_threshold_deg
                and b.mean_radius_vox >= params.radius_ratio * parent.mean_radius_vox
            ):
                b.label = parent.label
                for c in b.children:
                    shift[c] = shift[b.id] + 1
                continue
        b.label = label_for_generation(eff)
    return out


def parse_pipeline(
    mask: VoxelGrid, params: ParseParams = ParseParams(), skeleton: SkeletonPointSet | None = None
) -> AirwayTree:
    """Skeletonize, parse, smooth, prune, grade and label a binary airway mask.

    A precomputed ``skeleton`` of the same mask may be passed to skip thinning.
    """
    sk = skeletonize(mask) if skeleton is None else skeleton
    m = mask.mask() if isinstance(mask, VoxelGrid) else np.asarray(mask, bool)
    spacing = mask.spacing if isinstance(mask, VoxelGrid) else (1.0, 1.0, 1.0)
    tree = parse_skeleton(sk, distance_to_background(m), spacing)
    tree = smooth_centerlines(tree, params.smooth_window)
    tree = prune(tree, params)
    tree = grade_topology(tree)
    return match_anatomy(tree, params)
