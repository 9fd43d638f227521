"""Camera connectivity graph and BFS-based region segmentation.

Cameras are vertices, match counts are edge weights.  ``bfs_segment`` grows
``k`` balanced, connected regions from high-degree seeds and then hands the
leftover cameras to the least-populated of their strongly connected regions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .scene_io import derive_covisibility_edges, write_image


class ConnectivityGraph:
    """Undirected weighted graph over view ids (no self-edges)."""

    def __init__(self, vertices, edges=()):
        self.vertices = sorted(set(vertices))
        self._adj = {v: {} for v in self.vertices}
        for a, b, w in edges:
            self.add_edge(a, b, w)

    def add_edge(self, a, b, w):
        if a == b:
            raise ValidationError(f"self-edge on vertex {a}")
        if a not in self._adj or b not in self._adj:
            raise ValidationError(f"edge ({a}, {b}) references an unknown vertex")
        if w < 0:
            raise ValidationError(f"edge ({a}, {b}) has negative weight")
        if w == 0:
            return
        # repeated or reversed records collapse to one edge; keep the larger count
        w = max(float(w), self._adj[a].get(b, 0.0))
        self._adj[a][b] = w
        self._adj[b][a] = w

    def __len__(self):
        return len(self.vertices)

    def __contains__(self, v):
        return v in self._adj

    @property
    def edges(self):
        """``{(a, b): w}`` with ``a < b``."""
        return {(a, b): w for a in self.vertices for b, w in self._adj[a].items() if a < b}

    def neighbors(self, v):
        return self._adj[v]

    def weight(self, a, b):
        return self._adj[a].get(b, 0.0)

    def weighted_degree(self, v):
        return sum(self._adj[v].values())

    def subgraph(self, nodes):
        keep = set(nodes)
        sub = ConnectivityGraph(keep)
        for (a, b), w in self.edges.items():
            if a in keep and b in keep:
                sub.add_edge(a, b, w)
        return sub

    def is_connected(self, nodes=None):
        nodes = set(self.vertices if nodes is None else nodes)
        if not nodes:
            return True
        start = min(nodes)
        seen, stack = {start}, [start]
        while stack:
            u = stack.pop()
            for v in self._adj[u]:
                if v in nodes and v not in seen:
                    seen.add(v)
                    stack.append(v)
        return seen == nodes


def build_graph(model):
    edges = model.match_edges if model.match_edges else derive_covisibility_edges(model)
    return ConnectivityGraph(model.view_ids, edges)


@dataclass
class LeftoverScore:
    node: int
    scores: list
    median: float
    eligible: list


@dataclass
class RegionPartition:
    k: int
    camera_regions: dict
    point_regions: dict = field(default_factory=dict)
    bfs_core: list = field(default_factory=list)
    leftovers: list = field(default_factory=list)

    def cameras(self, region):
        return sorted(v for v, r in self.camera_regions.items() if r == region)

    def points(self, region):
        return sorted(i for i, rs in self.point_regions.items() if region in rs)

    def sizes(self):
        counts = [0] * self.k
        for r in self.camera_regions.values():
            counts[r] += 1
        return counts


def _wave_fill(graph, region, candidates, room):
    # rank by total weight into the region, then ascending id
    ranked = sorted(candidates, key=lambda v: (-sum(graph.weight(v, u) for u in region), v))
    return ranked[:room]


def bfs_segment(graph, k):
    """Partition the graph's vertices into ``k`` regions."""
    n = len(graph)
    if k <= 0:
        raise ValidationError("k must be positive")
    if k > n:
        raise ValidationError(f"k = {k} exceeds the number of cameras ({n})")
    quota = n // k
    unassigned = set(graph.vertices)
    regions = []
    for _ in range(k):
        seed = min(unassigned, key=lambda u: (-graph.weighted_degree(u), u))
        members = [seed]
        member_set = {seed}
        unassigned.discard(seed)
        while len(members) < quota:
            frontier = sorted({v for u in members for v in graph.neighbors(u) if v in unassigned})
            if not frontier:
                break
            room = quota - len(members)
            if len(frontier) > room:
                frontier = _wave_fill(graph, member_set, frontier, room)
            members.extend(frontier)
            member_set.update(frontier)
            unassigned.difference_update(frontier)
        regions.append(member_set)

    core = [set(r) for r in regions]
    leftovers = []
    for u in sorted(unassigned):
        scores = [sum(graph.weight(u, v) for v in region) for region in regions]
        m = float(np.median(scores))
        eligible = [i for i, s in enumerate(scores) if s > m]
        if eligible:
            target = min(eligible, key=lambda i: (len(regions[i]), i))
        else:
            best = max(scores)
            target = min((i for i, s in enumerate(scores) if s == best), key=lambda i: (len(regions[i]), i))
        regions[target].add(u)
        leftovers.append(LeftoverScore(u, scores, m, eligible))

    camera_regions = {v: i for i, region in enumerate(regions) for v in region}
    return RegionPartition(k, dict(sorted(camera_regions.items())), {}, core, leftovers)


def assign_points(partition, model):
    """Fill ``point_regions``: every region holding one of the point's observers.

    Unobserved points go to the region of the spatially nearest camera.
    """
    centers = {v.id: v.center for v in model.views if v.id in partition.camera_regions}
    ids = sorted(centers)
    cam_xyz = np.stack([centers[i] for i in ids]) if ids else np.zeros((0, 3))
    point_regions = {}
    for idx, p in enumerate(model.points):
        regs = {partition.camera_regions[o] for o in p.observers if o in partition.camera_regions}
        if not regs:
            d = np.linalg.norm(cam_xyz - p.position, axis=1)
            regs = {partition.camera_regions[ids[int(np.argmin(d))]]}
        point_regions[idx] = frozenset(regs)
    return RegionPartition(partition.k, dict(partition.camera_regions), point_regions, partition.bfs_core, partition.leftovers)


def top_neighbors(graph, view, n=4):
    if view not in graph:
        raise ValidationError(f"unknown view id {view}")
    nbrs = sorted(graph.neighbors(view).items(), key=lambda kv: (-kv[1], kv[0]))
    return [v for v, _ in nbrs[:n]]


# ---------------------------------------------------------------------------
# text serialization


def write_partition(partition, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"k {partition.k}\n")
        for i, core in enumerate(partition.bfs_core):
            fh.write(f"core {i} {','.join(str(v) for v in sorted(core))}\n")
        for v, r in partition.camera_regions.items():
            fh.write(f"camera {v} {r}\n")
        for idx, regs in sorted(partition.point_regions.items()):
            fh.write(f"point {idx} {','.join(str(r) for r in sorted(regs))}\n")


def read_partition(path):
    k = None
    cams, points, core = {}, {}, {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            toks = raw.split()
            if not toks or toks[0].startswith("#"):
                continue
            try:
                if toks[0] == "k" and len(toks) == 2:
                    k = int(toks[1])
                elif toks[0] == "core" and len(toks) in (2, 3):
                    core[int(toks[1])] = {int(v) for v in toks[2].split(",")} if len(toks) == 3 else set()
                elif toks[0] == "camera" and len(toks) == 3:
                    cams[int(toks[1])] = int(toks[2])
                elif toks[0] == "point" and len(toks) == 3:
                    points[int(toks[1])] = frozenset(int(r) for r in toks[2].split(","))
                else:
                    raise ValueError(f"unexpected record {toks[0]!r}")
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
    if k is None:
        k = max(cams.values(), default=-1) + 1
    return RegionPartition(k, cams, points, [core.get(i, set()) for i in range(k)])


def write_edges(graph, path):
    with open(path, "w", encoding="utf-8") as fh:
        for (a, b), w in sorted(graph.edges.items()):
            fh.write(f"{a} {b} {w:g}\n")


PALETTE = np.array(
    [
        [0.894, 0.102, 0.110],
        [0.216, 0.494, 0.722],
        [0.302, 0.686, 0.290],
        [0.596, 0.306, 0.639],
        [1.000, 0.498, 0.000],
        [1.000, 1.000, 0.200],
        [0.651, 0.337, 0.157],
        [0.969, 0.506, 0.749],
        [0.600, 0.600, 0.600],
    ]
)


def region_color(i):
    return PALETTE[i % len(PALETTE)]


def render_region_map(partition, model, path, size=256):
    """Top-down scatter of cameras (squares) and points (dots) coloured by region."""
    cam_xyz = np.stack([v.center for v in model.views])
    pts = model.positions()
    allpos = np.concatenate([cam_xyz, pts]) if len(pts) else cam_xyz
    mean = allpos.mean(axis=0)
    # view along the axis of least spread
    _, _, vt = np.linalg.svd(allpos - mean, full_matrices=False)
    axes = vt[:2] if len(vt) >= 2 else np.eye(3)[:2]
    uv_all = (allpos - mean) @ axes.T
    lo, hi = uv_all.min(axis=0), uv_all.max(axis=0)
    span = max(float((hi - lo).max()), 1e-9)
    margin = 8

    def to_px(xyz):
        uv = ((xyz - mean) @ axes.T - lo) / span
        return np.clip((margin + uv * (size - 2 * margin)).astype(int), 0, size - 1)

    img = np.full((size, size, 3), 1.0)
    if len(pts):
        for idx, (x, y) in enumerate(to_px(pts)):
            regs = sorted(partition.point_regions.get(idx, ()))
            img[size - 1 - y, x] = region_color(regs[0]) * 0.8 if regs else 0.5
    for v, (x, y) in zip(model.views, to_px(cam_xyz)):
        r = partition.camera_regions[v.id]
        yy = size - 1 - y
        img[max(0, yy - 2) : yy + 3, max(0, x - 2) : x + 3] = region_color(r)
    write_image(img, Path(path))
    return img
