"""Topological map: nodes at fixed arc-length spacing along a reference route."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IndexOutOfRange, PathTooShort, TooFewPoses, VersionMismatch

TOPOMAP_FORMAT = "topodepth-topomap"
TOPOMAP_VERSION = 1
DEFAULT_SPACING = 1.5


@dataclass(frozen=True)
class Node:
    node_id: int
    position: tuple[float, float]
    arc_length: float


@dataclass(frozen=True)
class TopoMap:
    nodes: tuple[Node, ...]
    spacing: float
    loop: bool = True
    length: float = 0.0

    def __post_init__(self):
        if len(self.nodes) < 2:
            raise ValueError("a topological map needs at least two nodes")
        if [n.node_id for n in self.nodes] != list(range(len(self.nodes))):
            raise ValueError("node ids must be 0..N-1 in order")

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def positions(self) -> np.ndarray:
        return np.array([n.position for n in self.nodes], dtype=float)

    def adjacent(self, a: int, b: int) -> bool:
        """True when ``a`` and ``b`` are the same node or neighbours along the route."""
        d = abs(a - b)
        if self.loop:
            d = min(d, self.num_nodes - d)
        return d <= 1


def _xy(poses) -> np.ndarray:
    return np.array([p.position[:2] if hasattr(p, "position") else p[:2] for p in poses], dtype=float)


def arc_length(poses) -> list[float]:
    """Cumulative planar distance along the pose sequence, starting at 0."""
    if len(poses) < 2:
        raise TooFewPoses(f"need at least 2 poses, got {len(poses)}")
    xy = _xy(poses)
    steps = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    return [0.0] + np.cumsum(steps).tolist()


def build_topomap(poses, spacing: float = DEFAULT_SPACING) -> TopoMap:
    """Drop a node every ``spacing`` meters along the pose path.

    If the path's two ends lie within ``spacing / 2`` of each other it is
    treated as a loop: the closing segment counts toward its length and a
    final node landing within ``spacing / 2`` of the loop end is merged into
    node 0.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    xy = _xy(poses)
    arcs = np.array(arc_length(poses))
    loop = bool(np.linalg.norm(xy[-1] - xy[0]) <= spacing / 2 and arcs[-1] > 0)
    if loop:
        xy = np.vstack([xy, xy[:1]])
        arcs = np.append(arcs, arcs[-1] + np.linalg.norm(xy[-2] - xy[0]))
    total = float(arcs[-1])
    if total < spacing - 1e-9:
        raise PathTooShort(f"path length {total:.3f} m is shorter than node spacing {spacing} m")

    count = int(np.floor(total / spacing + 1e-9)) + 1
    node_arcs = [k * spacing for k in range(count)]
    if loop and total - node_arcs[-1] < spacing / 2:
        node_arcs.pop()
    if len(node_arcs) < 2:
        raise PathTooShort(f"loop of length {total:.3f} m yields fewer than two nodes")

    nodes = []
    for k, s in enumerate(node_arcs):
        x = float(np.interp(s, arcs, xy[:, 0]))
        y = float(np.interp(s, arcs, xy[:, 1]))
        nodes.append(Node(k, (x, y), s))
    return TopoMap(tuple(nodes), float(spacing), loop, total)


def assign_node(topo: TopoMap, position) -> int:
    """Nearest node by Euclidean distance; ties go to the lower id."""
    p = np.asarray(position, dtype=float)[:2]
    d2 = np.sum((topo.positions - p) ** 2, axis=1)
    return int(np.argmin(d2))  # argmin returns the first minimum


def one_hot(node_id: int, num_nodes: int) -> np.ndarray:
    if not 0 <= node_id < num_nodes:
        raise IndexOutOfRange(f"node {node_id} out of range for {num_nodes} nodes")
    v = np.zeros(num_nodes)
    v[node_id] = 1.0
    return v


def write_topomap(path, topo: TopoMap) -> None:
    header = {
        "format": TOPOMAP_FORMAT,
        "version": TOPOMAP_VERSION,
        "spacing": topo.spacing,
        "loop": topo.loop,
        "length": topo.length,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for n in topo.nodes:
        lines.append(json.dumps({"id": n.node_id, "x": n.position[0], "y": n.position[1], "arc_length": n.arc_length}))
    Path(path).write_text("\n".join(lines) + "\n")


def read_topomap(path) -> TopoMap:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    header = json.loads(lines[0])
    if header.get("format") != TOPOMAP_FORMAT:
        raise ValueError(f"{path}: not a topological map file")
    if header.get("version") != TOPOMAP_VERSION:
        raise VersionMismatch(f"{path}: topomap version {header.get('version')} unsupported")
    rows = [json.loads(ln) for ln in lines[1:]]
    nodes = tuple(Node(r["id"], (r["x"], r["y"]), r["arc_length"]) for r in rows)
    return TopoMap(nodes, header["spacing"], header["loop"], header.get("length", 0.0))
