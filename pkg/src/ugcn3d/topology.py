"""Skeleton trees and the partitioned spatial adjacency.

The spatial edge set is the bone list ``(k, parent[k])``. For graph
convolution the self-loop-augmented adjacency ``A + I`` is split into three
subsets relative to each receiving joint (the matrix column):

* identity: the joint itself,
* centripetal: the neighbour closer to the root (its parent),
* centrifugal: neighbours farther from the root (its children),

and each subset is column-normalized. Features are mixed as ``x @ A_j`` so
column ``w`` of ``A_j`` holds the weights joint ``w`` receives.

Temporal edges (same joint, consecutive frames) are never materialized; they
are realized by convolution along the frame axis.
"""

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import CycleDetected, IndexOutOfRange, MultipleRoots, NoRoot, ValidationError

PART_NAMES = ("identity", "centripetal", "centrifugal")


@dataclass(frozen=True)
class SkeletonTopology:
    parents: tuple
    root: int
    names: tuple = None
    name: str = "custom"
    depths: tuple = field(default=(), compare=False)

    @property
    def joint_count(self):
        return len(self.parents)

    def bones(self):
        """``(child, parent)`` pairs in increasing child index."""
        return [(k, p) for k, p in enumerate(self.parents) if p >= 0]

    def topological_order(self):
        """Joints sorted so every parent precedes its children."""
        return sorted(range(self.joint_count), key=lambda k: (self.depths[k], k))

    def temporal_edge_count(self, frames):
        return self.joint_count * max(frames - 1, 0)

    def to_dict(self):
        d = {"name": self.name, "parents": list(self.parents), "root": self.root}
        if self.names is not None:
            d["names"] = list(self.names)
        return d


def build_topology(parents, names=None, name="custom"):
    parents = [int(p) for p in parents]
    n = len(parents)
    if n == 0:
        raise NoRoot("parent list is empty")
    bad = [k for k, p in enumerate(parents) if p < -1 or p >= n]
    if bad:
        raise IndexOutOfRange(f"parent index out of range at joints {bad}")
    selfloops = [k for k, p in enumerate(parents) if p == k]
    if selfloops:
        raise CycleDetected(f"joints {selfloops} are their own parent")
    roots = [k for k, p in enumerate(parents) if p == -1]
    if not roots:
        raise NoRoot("no joint has parent -1")
    if len(roots) > 1:
        raise MultipleRoots(f"joints {roots} all have parent -1")
    if names is not None:
        names = tuple(str(s) for s in names)
        if len(names) != n:
            raise ValidationError(f"{len(names)} names given for {n} joints")

    depths = [-1] * n
    depths[roots[0]] = 0
    for start in range(n):
        path, k = [], start
        while depths[k] < 0:
            path.append(k)
            k = parents[k]
            if k in path:
                cycle = path[path.index(k):]
                raise CycleDetected(f"parent links form a cycle through joints {cycle}")
        d = depths[k]
        for j in reversed(path):
            d += 1
            depths[j] = d
    return SkeletonTopology(tuple(parents), roots[0], names, name, tuple(depths))


def load_topology(path):
    """Read a topology descriptor (JSON with name, parents, root, names)."""
    with open(path) as fh:
        desc = json.load(fh)
    return topology_from_dict(desc)


def topology_from_dict(desc):
    topo = build_topology(desc["parents"], desc.get("names"), desc.get("name", "custom"))
    if "root" in desc and int(desc["root"]) != topo.root:
        raise ValidationError(f"declared root {desc['root']} but parent list roots at {topo.root}")
    return topo


def default_topology():
    """The shipped 17-joint Human3.6M-convention skeleton."""
    text = resources.files("ugcn3d").joinpath("topologies/h36m17.json").read_text()
    return topology_from_dict(json.loads(text))


def default_rest_positions():
    text = resources.files("ugcn3d").joinpath("topologies/h36m17_rest.json").read_text()
    return np.array(json.loads(text)["positions"], dtype=np.float64)


@dataclass(frozen=True)
class PartitionedAdjacency:
    n: int
    parts: np.ndarray          # (3, N, N) normalized
    unnormalized: np.ndarray   # (3, N, N) 0/1 subsets
    raw: np.ndarray            # (N, N) A + I


def skeleton_adjacency(topology):
    """Symmetric 0/1 bone adjacency without self-loops."""
    n = topology.joint_count
    A = np.zeros((n, n))
    for child, parent in topology.bones():
        A[child, parent] = A[parent, child] = 1.0
    return A


def spatial_adjacency(topology):
    n = topology.joint_count
    depth = topology.depths
    subsets = np.zeros((3, n, n))
    subsets[0] = np.eye(n)
    A = skeleton_adjacency(topology)
    for i, j in zip(*np.nonzero(A)):
        # column j receives from neighbour i
        subsets[1 if depth[i] < depth[j] else 2, i, j] = 1.0
    sums = subsets.sum(axis=1, keepdims=True)
    parts = np.divide(subsets, sums, out=np.zeros_like(subsets), where=sums > 0)
    return PartitionedAdjacency(n, parts, subsets, A + np.eye(n))


def graph_dump(adjacency):
    lines = []
    for name, part in zip(PART_NAMES, adjacency.parts):
        lines.append(f"# {name} {adjacency.n}x{adjacency.n}")
        for row in part:
            lines.append(" ".join(f"{v:.9g}" for v in row))
    return "\n".join(lines) + "\n"


def parse_graph_dump(text):
    """Inverse of :func:`graph_dump`: ``(3, N, N)`` array of printed values."""
    parts, rows = [], None
    for line in text.splitlines():
        if line.startswith("#"):
            rows = []
            parts.append(rows)
        elif line.strip():
            rows.append([float(v) for v in line.split()])
    return np.array(parts)
