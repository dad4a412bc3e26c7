"""
Curve skeletons, vessel trees, bifurcation counting and branch levels.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
from scipy import ndimage

from ._thinning import thin
from .volume import ARTERY, VEIN, LabelMask, check_same_geometry
from .phantom import level_of_generation

log = logging.getLogger(__name__)

SPUR_LENGTH = 3
N_LEVELS = 4

_OFFSETS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)
                     if (i, j, k) != (0, 0, 0)])
_CLASS_NAMES = {"artery": ARTERY, "vein": VEIN, "a": ARTERY, "v": VEIN}


def class_code(cls) -> int:
    if isinstance(cls, str):
        try:
            return _CLASS_NAMES[cls.lower()]
        except KeyError:
            raise ValueError(f"unknown vessel class {cls!r}") from None
    return int(cls)


@dataclass(frozen=True)
class Skeleton:
    voxels: np.ndarray  # bool, same lattice as the source mask
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)

    @property
    def dims(self):
        return tuple(self.voxels.shape)

    def coords(self) -> np.ndarray:
        return np.argwhere(self.voxels)


def extract_skeleton(mask: LabelMask, cls=ARTERY) -> Skeleton:
    """Topology-preserving thinning of one class of ``mask``.

    Uses directional (6-subiteration) parallel thinning; an empty class
    yields an empty skeleton.
    """
    binary = mask.select(class_code(cls))
    if not binary.any():
        return Skeleton(np.zeros(mask.dims, dtype=bool), mask.spacing, mask.origin)
    return Skeleton(thin(binary), mask.spacing, mask.origin)


def skeleton_length(skel: Skeleton) -> int:
    """Skeleton length in voxels."""
    return int(np.count_nonzero(skel.voxels))


def polyline_length(points, spacing=(1.0, 1.0, 1.0), window: int = 5) -> float:
    """Length (mm) of a voxel polyline after smoothing out the staircase.

    Coordinates are averaged over a centred window that shrinks towards the
    ends, so the end points stay fixed.
    """
    pts = np.asarray(points, dtype=float)
    # relative coordinates keep the result exactly translation invariant
    pts = (pts - pts[:1]) * np.asarray(spacing, dtype=float)
    n = len(pts)
    if n < 2:
        return 0.0
    idx = np.arange(n)
    half = np.minimum(np.minimum(idx, n - 1 - idx), window // 2)
    csum = np.vstack([np.zeros((1, 3)), np.cumsum(pts, axis=0)])
    smooth = (csum[idx + half + 1] - csum[idx - half]) / (2 * half + 1)[:, None]
    return float(np.linalg.norm(np.diff(smooth, axis=0), axis=1).sum())


def tree_length(tree: "VesselTree", window: int = 5) -> float:
    """Total smoothed branch length of a tree in mm."""
    return float(sum(polyline_length(tree.branch_voxels(b), tree.spacing, window)
                     for b in tree.branches.values()))


def mean_step_length(tree: "VesselTree", skel: Skeleton) -> float:
    """Average centerline length per skeleton voxel (mm)."""
    count = skeleton_length(skel)
    return tree_length(tree) / count if count else 0.0


# ---------------------------------------------------------------------------
# tree construction
# ---------------------------------------------------------------------------

@dataclass
class Node:
    id: int
    position: tuple
    kind: str  # root | junction | endpoint
    voxels: list


@dataclass
class Branch:
    id: int
    start: int  # node id, parent side once oriented
    end: int
    voxels: list  # ordered interior voxels from start to end
    generation: int = -1
    parent: int = -1

    @property
    def midpoint(self) -> tuple:
        return self.voxels[len(self.voxels) // 2] if self.voxels else None


@dataclass
class VesselTree:
    nodes: dict
    branches: dict
    roots: list
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)
    dims: tuple = ()
    flags: dict = field(default_factory=dict)

    def degree(self, node_id: int) -> int:
        return sum((b.start == node_id) + (b.end == node_id) for b in self.branches.values())

    def junctions(self) -> list:
        return [n for n in self.nodes.values() if self.degree(n.id) >= 3]

    def endpoints(self) -> list:
        return [n for n in self.nodes.values() if self.degree(n.id) == 1]

    def branch_voxels(self, branch: Branch) -> list:
        """Polyline of a branch including its end-node positions."""
        return [self.nodes[branch.start].position] + list(branch.voxels) + [self.nodes[branch.end].position]

    def to_json(self) -> dict:
        return {
            "spacing": list(self.spacing),
            "origin": list(self.origin),
            "dims": list(self.dims),
            "roots": list(self.roots),
            "flags": self.flags,
            "nodes": [{"id": n.id, "position": list(n.position), "kind": n.kind,
                       "voxels": [list(v) for v in n.voxels]}
                      for n in sorted(self.nodes.values(), key=lambda n: n.id)],
            "branches": [{"id": b.id, "start": b.start, "end": b.end, "generation": b.generation,
                          "parent": b.parent, "voxels": [list(v) for v in b.voxels]}
                         for b in sorted(self.branches.values(), key=lambda b: b.id)],
        }

    @classmethod
    def from_json(cls, data: dict) -> "VesselTree":
        nodes = {n["id"]: Node(n["id"], tuple(n["position"]), n["kind"],
                               [tuple(v) for v in n["voxels"]]) for n in data["nodes"]}
        branches = {b["id"]: Branch(b["id"], b["start"], b["end"], [tuple(v) for v in b["voxels"]],
                                    b["generation"], b["parent"]) for b in data["branches"]}
        return cls(nodes, branches, list(data["roots"]), tuple(data["spacing"]),
                   tuple(data["origin"]), tuple(data["dims"]), dict(data.get("flags", {})))


def _order_cluster(voxels, entry):
    """Greedy nearest-neighbour ordering of cluster voxels starting near ``entry``."""
    remaining = sorted(voxels)
    out = []
    cur = np.asarray(entry)
    while remaining:
        d = [np.sum((np.asarray(v) - cur) ** 2) for v in remaining]
        k = int(np.argmin(d))
        cur = np.asarray(remaining.pop(k))
        out.append(tuple(int(c) for c in cur))
    return out


class _Graph:
    """Node/branch multigraph over skeleton voxels, edited in place."""

    def __init__(self, coords: np.ndarray, shape):
        self.shape = shape
        self.voxels = {tuple(int(c) for c in v) for v in coords}
        self.nodes: dict[int, list] = {}
        self.edges: dict[int, list] = {}  # id -> [a, b, path]
        self._next_node = 0
        self._next_edge = 0
        self._build()

    def _neighbours(self, v):
        out = []
        for off in _OFFSETS:
            w = (v[0] + off[0], v[1] + off[1], v[2] + off[2])
            if w in self.voxels:
                out.append(w)
        return out

    def add_node(self, voxels) -> int:
        nid = self._next_node
        self._next_node += 1
        self.nodes[nid] = sorted(voxels)
        return nid

    def add_edge(self, a, b, path) -> int:
        eid = self._next_edge
        self._next_edge += 1
        self.edges[eid] = [a, b, list(path)]
        return eid

    def incident(self, nid):
        """(edge id, far node id) pairs; self-loops appear twice."""
        out = []
        for eid in sorted(self.edges):
            a, b, _ = self.edges[eid]
            if a == nid:
                out.append((eid, b))
            if b == nid:
                out.append((eid, a))
        return out

    def degree(self, nid) -> int:
        return len(self.incident(nid))

    def _build(self):
        nbrs = {v: self._neighbours(v) for v in sorted(self.voxels)}
        junction = {v for v, n in nbrs.items() if len(n) >= 3}
        node_of = {}
        # clusters of touching junction voxels become one node
        seen = set()
        for v in sorted(junction):
            if v in seen:
                continue
            cluster, queue = [], deque([v])
            seen.add(v)
            while queue:
                u = queue.popleft()
                cluster.append(u)
                for w in nbrs[u]:
                    if w in junction and w not in seen:
                        seen.add(w)
                        queue.append(w)
            nid = self.add_node(cluster)
            for u in cluster:
                node_of[u] = nid
        for v, n in nbrs.items():
            if len(n) <= 1 and v not in node_of:
                node_of[v] = self.add_node([v])

        visited = set()
        linked = set()
        for nid in sorted(self.nodes):
            for start in self.nodes[nid]:
                for first in nbrs[start]:
                    if node_of.get(first) == nid:
                        continue
                    if first in node_of:
                        pair = tuple(sorted((nid, node_of[first])))
                        if pair not in linked:
                            linked.add(pair)
                            self.add_edge(nid, node_of[first], [])
                        continue
                    if first in visited:
                        continue
                    path, prev, cur = [], start, first
                    end = None
                    while True:
                        path.append(cur)
                        visited.add(cur)
                        nxt = [w for w in nbrs[cur] if w != prev and w not in visited]
                        hit = [w for w in nxt if w in node_of]
                        if hit:
                            end = node_of[min(hit)]
                            break
                        if not nxt:
                            # dead end against a node voxel: find the node we touched
                            back = [w for w in nbrs[cur] if w in node_of and w != prev]
                            end = node_of[back[0]] if back else nid
                            break
                        prev, cur = cur, min(nxt)
                    if end == nid and len(path) <= 2:
                        # short self-loop hugging a junction blob: absorb into the node
                        self.nodes[nid] = sorted(set(self.nodes[nid]) | set(path))
                        for u in path:
                            node_of[u] = nid
                        continue
                    self.add_edge(nid, end, path)
        # rings without any node voxel
        for v in sorted(self.voxels):
            if v in visited or v in node_of:
                continue
            ring, prev, cur = [], None, v
            while cur is not None and cur not in visited:
                visited.add(cur)
                ring.append(cur)
                nxt = [w for w in nbrs[cur] if w != prev and w not in visited]
                prev, cur = cur, (min(nxt) if nxt else None)
            nid = self.add_node([ring[0]])
            for u in ring:
                node_of[u] = nid
            self.add_edge(nid, nid, ring[1:])

    def remove_edge(self, eid):
        del self.edges[eid]

    def dissolve_pass_through(self, protect=()) -> bool:
        changed = False
        for nid in sorted(self.nodes):
            if nid in protect or nid not in self.nodes:
                continue
            inc = self.incident(nid)
            if len(inc) != 2 or inc[0][0] == inc[1][0]:
                continue
            (e1, far1), (e2, far2) = inc
            path1 = self._path_towards(e1, nid)
            path2 = self._path_from(e2, nid)
            entry = path1[-1] if path1 else self.nodes[far1][0]
            merged = path1 + _order_cluster(self.nodes[nid], entry) + path2
            del self.edges[e1], self.edges[e2]
            del self.nodes[nid]
            self.add_edge(far1, far2, merged)
            changed = True
        return changed

    def _path_towards(self, eid, nid):
        a, b, path = self.edges[eid]
        return list(path) if b == nid else list(reversed(path))

    def _path_from(self, eid, nid):
        a, b, path = self.edges[eid]
        return list(path) if a == nid else list(reversed(path))

    def prune_spurs(self, min_length: int) -> bool:
        changed = False
        for eid in sorted(self.edges):
            if eid not in self.edges:
                continue
            a, b, path = self.edges[eid]
            if a == b:
                continue
            da, db = self.degree(a), self.degree(b)
            for tip, other in ((a, b), (b, a)):
                if self.degree(tip) == 1 and self.degree(other) >= 3:
                    if len(path) + len(self.nodes[tip]) < min_length:
                        del self.edges[eid]
                        del self.nodes[tip]
                        changed = True
                    break
        return changed

    def break_cycles(self) -> int:
        broken = 0
        while True:
            g = nx.MultiGraph()
            g.add_nodes_from(self.nodes)
            for eid, (a, b, path) in self.edges.items():
                g.add_edge(a, b, key=eid)
            try:
                cycle = nx.find_cycle(g)
            except nx.NetworkXNoCycle:
                return broken
            keys = [k for _, _, k in cycle]
            longest = max(keys, key=lambda k: (len(self.edges[k][2]), k))
            del self.edges[longest]
            broken += 1


def _node_position(voxels):
    # sorted so ties break the same way wherever the cluster sits
    voxels = sorted(tuple(int(c) for c in v) for v in voxels)
    pts = np.asarray(voxels, dtype=float)
    d2 = np.sum((pts - pts.mean(axis=0)) ** 2, axis=1)
    k = int(np.flatnonzero(np.isclose(d2, d2.min(), rtol=0, atol=1e-9))[0])
    return voxels[k]


def build_tree(skel: Skeleton, root_hint=None, spur_length: int = SPUR_LENGTH) -> VesselTree:
    """Turn a skeleton into an oriented vessel tree.

    Junctions are clusters of voxels with three or more skeleton neighbours
    that still join three or more branches after terminal branches shorter
    than ``spur_length`` voxels are pruned. Cycles are broken by dropping
    their longest branch. Branch generations count junctions from the root
    (root branch = 0). A disconnected skeleton yields a forest with one
    root per component, flagged in ``flags["forest"]``.
    """
    coords = skel.coords()
    g = _Graph(coords, skel.dims)
    flags = {}
    loops = 0
    for _ in range(1000):
        changed = g.dissolve_pass_through()
        changed |= g.prune_spurs(spur_length)
        changed |= g.dissolve_pass_through()
        cut = g.break_cycles()
        loops += cut
        if not changed and not cut:
            break
    if loops:
        flags["cycles_broken"] = loops

    nodes = {nid: Node(nid, _node_position(v), "endpoint", list(v)) for nid, v in g.nodes.items()}
    branches = {eid: Branch(eid, a, b, list(path)) for eid, (a, b, path) in g.edges.items()}
    tree = VesselTree(nodes, branches, [], tuple(skel.spacing), tuple(skel.origin), skel.dims, flags)
    if not nodes:
        return tree

    adjacency = {nid: [] for nid in nodes}
    for b in branches.values():
        adjacency[b.start].append(b.id)
        if b.end != b.start:
            adjacency[b.end].append(b.id)

    # connected components over nodes
    comp_of, components = {}, []
    for nid in sorted(nodes):
        if nid in comp_of:
            continue
        comp, queue = [], deque([nid])
        comp_of[nid] = len(components)
        while queue:
            u = queue.popleft()
            comp.append(u)
            for eid in adjacency[u]:
                b = branches[eid]
                w = b.end if b.start == u else b.start
                if w not in comp_of:
                    comp_of[w] = len(components)
                    queue.append(w)
        components.append(sorted(comp))

    hinted = _root_from_hint(tree, adjacency, root_hint) if root_hint is not None else None
    roots = []
    for comp in components:
        if hinted is not None and comp_of[hinted] == comp_of[comp[0]]:
            roots.append(hinted)
            continue
        ends = [n for n in comp if len(adjacency[n]) == 1]
        pick = min(ends or comp, key=lambda n: nodes[n].position)
        roots.append(pick)
    if len(components) > 1:
        tree.flags["forest"] = len(components)
        log.info("skeleton has %d components; built a forest", len(components))
    tree.roots = roots

    for root in roots:
        nodes[root].kind = "root"
        queue = deque([(root, 0, -1)])
        seen = {root}
        while queue:
            u, gen, parent = queue.popleft()
            for eid in sorted(adjacency[u]):
                b = branches[eid]
                if b.generation >= 0:
                    continue
                if b.end == u and b.start != u:
                    b.start, b.end = b.end, b.start
                    b.voxels = list(reversed(b.voxels))
                b.generation, b.parent = gen, parent
                w = b.end
                if w not in seen:
                    seen.add(w)
                    queue.append((w, gen + 1, eid))
    for nid, node in nodes.items():
        if node.kind != "root" and len(adjacency[nid]) >= 3:
            node.kind = "junction"
    return tree


def _root_from_hint(tree: VesselTree, adjacency, hint) -> int:
    hint = np.asarray(hint, dtype=float)
    best, best_d = None, np.inf
    for nid, node in tree.nodes.items():
        for v in node.voxels:
            d = float(np.sum((np.asarray(v) - hint) ** 2))
            if d < best_d:
                best, best_d = ("node", nid), d
    for eid, b in tree.branches.items():
        for v in b.voxels:
            d = float(np.sum((np.asarray(v) - hint) ** 2))
            if d < best_d:
                best, best_d = ("branch", eid), d
    if np.sqrt(best_d) > 5.0:
        tree.flags["root_hint_distance"] = float(np.sqrt(best_d))
        log.warning("root hint is %.1f voxels from the skeleton", np.sqrt(best_d))
    kind, key = best
    if kind == "node":
        return key
    b = tree.branches[key]
    ends = [n for n in (b.start, b.end) if len(adjacency[n]) == 1]
    if ends:
        return min(ends)
    da = np.sum((np.asarray(tree.nodes[b.start].position) - hint) ** 2)
    db = np.sum((np.asarray(tree.nodes[b.end].position) - hint) ** 2)
    return b.start if da <= db else b.end


def count_bifurcations(tree: VesselTree) -> int:
    """Junction count where a k-way junction counts k - 2."""
    return int(sum(max(tree.degree(nid) - 2, 0) for nid in tree.nodes))


# ---------------------------------------------------------------------------
# branch levels
# ---------------------------------------------------------------------------

@dataclass
class BranchLevels:
    """Cumulative level masks L0 <= L1 <= L2 <= L3 of one vessel class."""

    masks: list
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    flags: dict = field(default_factory=dict)
    branch_levels: dict = field(default_factory=dict)

    def __post_init__(self):
        self.masks = [np.asarray(m, dtype=bool) for m in self.masks]
        if len(self.masks) != N_LEVELS:
            raise ValueError(f"expected {N_LEVELS} level masks, got {len(self.masks)}")
        for i in range(1, N_LEVELS):
            if np.any(self.masks[i - 1] & ~self.masks[i]):
                raise ValueError(f"level {i - 1} is not contained in level {i}")

    @property
    def dims(self):
        return tuple(self.masks[0].shape)

    def delta(self, i: int) -> np.ndarray:
        """Voxels first reached at level ``i`` (level 0 itself for i == 0)."""
        if i == 0:
            return self.masks[0]
        return self.masks[i] & ~self.masks[i - 1]

    def codes(self) -> np.ndarray:
        """uint8 volume: 0 outside, i + 1 for voxels first reached at level i."""
        out = np.zeros(self.dims, dtype=np.uint8)
        for i in reversed(range(N_LEVELS)):
            out[self.masks[i]] = i + 1
        return out

    @classmethod
    def from_codes(cls, codes: np.ndarray, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
                   within: np.ndarray | None = None) -> "BranchLevels":
        codes = np.asarray(codes)
        if within is not None:
            codes = np.where(within, codes, 0)
        masks = [(codes >= 1) & (codes <= i + 1) for i in range(N_LEVELS)]
        return cls(masks, tuple(spacing), tuple(origin))

    @classmethod
    def empty(cls, dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> "BranchLevels":
        return cls([np.zeros(dims, dtype=bool)] * N_LEVELS, tuple(spacing), tuple(origin))


def _cumulative(level_volume: np.ndarray, mask: np.ndarray) -> list:
    return [mask & (level_volume <= i) for i in range(N_LEVELS)]


def levels_from_owner(mask, owner, segment_levels, heart, spacing=(1.0, 1.0, 1.0),
                      origin=(0.0, 0.0, 0.0)) -> BranchLevels:
    """Level masks from a per-voxel owning-segment map (phantom ground truth)."""
    mask = np.asarray(mask, dtype=bool)
    lut = np.asarray(list(segment_levels) + [3], dtype=np.int16)  # owner -1 -> last entry
    level = lut[np.where(owner >= 0, owner, len(segment_levels))]
    level = np.where(heart, 0, np.maximum(level, 1))
    return BranchLevels(_cumulative(level, mask), tuple(spacing), tuple(origin))


def _binary(mask, cls):
    if isinstance(mask, LabelMask):
        return mask.select(class_code(cls)) if cls is not None else mask.foreground
    return np.asarray(mask, dtype=bool)


def branch_level_map(tree: VesselTree, lung: np.ndarray, heart: np.ndarray) -> dict:
    """Level of every branch from its intrapulmonary generation.

    The first branch on a root-to-leaf path whose midpoint lies in the lung
    is intrapulmonary generation 1; extrapulmonary branches outside the
    heart are clamped to 1. Branches whose midpoint lies in the heart before
    the lung is entered are level 0.
    """
    children = {}
    for b in tree.branches.values():
        children.setdefault(b.parent, []).append(b.id)
    levels = {}
    queue = deque((eid, None) for eid in sorted(children.get(-1, [])))
    while queue:
        eid, entry = queue.popleft()
        b = tree.branches[eid]
        mid = b.midpoint or tree.nodes[b.end].position
        if entry is None and lung[mid]:
            entry = b.generation
        if entry is None:
            levels[eid] = 0 if heart[mid] else 1
        else:
            levels[eid] = level_of_generation(max(b.generation - entry + 1, 1))
        for child in sorted(children.get(eid, [])):
            queue.append((child, entry))
    return levels


def decompose_levels(tree: VesselTree, mask, lung_mask, heart_mask, cls=None) -> BranchLevels:
    """Split a class mask into the four cumulative branch levels.

    Level 0 is the part of the mask inside the heart. Every other voxel
    takes the level of its nearest skeleton branch: intrapulmonary
    generations 1-2 are level 1, 3-5 level 2 and deeper ones level 3.
    With an empty heart mask level 0 falls back to the extrapulmonary part
    of the mask (flagged).
    """
    binary = _binary(mask, cls)
    lung = _binary(lung_mask, None)
    heart = _binary(heart_mask, None)
    for other in (lung, heart):
        if other.shape != binary.shape:
            raise ValueError(f"mask shapes differ: {binary.shape} vs {other.shape}")
    spacing = tree.spacing
    flags = {}
    if not heart.any():
        heart = ~lung
        flags["heart_fallback"] = "empty heart mask; level 0 = extrapulmonary mask"
        log.warning(flags["heart_fallback"])

    branch_levels = branch_level_map(tree, lung, heart)
    label = np.zeros(binary.shape, dtype=np.int8)
    for eid, b in tree.branches.items():
        for v in b.voxels:
            label[v] = branch_levels[eid] + 1
    for nid, node in tree.nodes.items():
        incident = [branch_levels[b.id] for b in tree.branches.values() if nid in (b.start, b.end)]
        value = min(incident) + 1 if incident else 1
        for v in node.voxels:
            if label[v] == 0:
                label[v] = value

    level = np.full(binary.shape, 3, dtype=np.int16)
    if np.any(label > 0):
        _, idx = ndimage.distance_transform_edt(label == 0, sampling=spacing, return_indices=True)
        level = label[tuple(idx)].astype(np.int16) - 1
    elif binary.any():
        flags["no_skeleton"] = "no skeleton voxels; non-heart voxels placed in level 3"
    level = np.where(heart, 0, np.maximum(level, 1))
    out = BranchLevels(_cumulative(level, binary), tuple(spacing), tuple(tree.origin), flags,
                       branch_levels)
    return out


def levels_for_mask(mask: LabelMask, cls, lung_mask, heart_mask, root_hint=None) -> BranchLevels:
    """Skeletonize, build the tree and decompose one class in a single call."""
    skel = extract_skeleton(mask, cls)
    tree = build_tree(skel, root_hint)
    return decompose_levels(tree, mask, lung_mask, heart_mask, cls=cls)
