"""Localization graph: nodes with poses and visible 3D features, linked by
metric edges that carry side-channel fingerprints."""

from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import DataError, DisconnectedNodesError, SchemaVersionError
from .geometry import Pose6D
from .sidechannel import SideChannelFingerprint, idf_weights

GRAPH_SCHEMA = "emloc.graph"
GRAPH_SCHEMA_VERSION = 1


@dataclass(frozen=True, eq=False)
class Feature3D:
    id: int
    position: np.ndarray
    descriptor: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        d = np.asarray(self.descriptor, dtype=float).reshape(-1)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError(f"feature {self.id}: descriptor must have unit L2 norm")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "descriptor", d)


@dataclass(eq=False)
class GraphNode:
    id: int
    world_pose: Pose6D
    visible_features: frozenset = frozenset()
    trace_id: Optional[str] = None
    frame_index: Optional[int] = None


@dataclass(eq=False)
class GraphEdge:
    from_node: int
    to_node: int
    relative_pose: Pose6D
    fingerprint: Optional[SideChannelFingerprint] = None
    kind: str = "odometry"


@dataclass(eq=False)
class LocalizationGraph:
    nodes: dict = field(default_factory=dict)  # id -> GraphNode
    edges: list = field(default_factory=list)
    features: dict = field(default_factory=dict)  # id -> Feature3D
    descriptor_dim: int = 0
    vocabulary: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        self._adj = None
        self._rel_cache: dict = {}
        self._feature_arrays: dict = {}

    # ------------------------------------------------------------ structure

    @property
    def node_ids(self) -> list:
        return sorted(self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def adjacency(self) -> dict:
        """node id -> sorted list of (neighbor, edge index, forward?)"""
        if self._adj is None:
            adj = {n: [] for n in self.nodes}
            for k, e in enumerate(self.edges):
                adj[e.from_node].append((e.to_node, k, True))
                adj[e.to_node].append((e.from_node, k, False))
            for n in adj:
                adj[n].sort()
            self._adj = adj
        return self._adj

    def neighbors(self, node: int) -> list:
        return sorted({nb for nb, _, _ in self.adjacency()[node]})

    def within_hops(self, node: int, hops: int) -> list:
        seen = {node}
        frontier = [node]
        for _ in range(hops):
            nxt = []
            for n in frontier:
                for nb in self.neighbors(n):
                    if nb not in seen:
                        seen.add(nb)
                        nxt.append(nb)
            frontier = nxt
        return sorted(seen)

    def shortest_path(self, a: int, b: int) -> list:
        """Minimum edge-count path as a list of (edge index, forward?) steps.

        BFS expands neighbors in increasing node id, which fixes the tie-break
        between equally short paths.
        """
        if a not in self.nodes or b not in self.nodes:
            raise KeyError(f"unknown node {a if a not in self.nodes else b}")
        if a == b:
            return []
        adj = self.adjacency()
        parent = {a: None}
        q = deque([a])
        while q:
            n = q.popleft()
            if n == b:
                break
            for nb, k, fwd in adj[n]:
                if nb not in parent:
                    parent[nb] = (n, k, fwd)
                    q.append(nb)
        if b not in parent:
            raise DisconnectedNodesError(f"nodes {a} and {b} are not connected")
        steps = []
        n = b
        while parent[n] is not None:
            prev, k, fwd = parent[n]
            steps.append((k, fwd))
            n = prev
        return steps[::-1]

    def relative_pose_between(self, a: int, b: int) -> Pose6D:
        """Pose of node ``b`` expressed in the frame of node ``a``, chained along edges."""
        key = (a, b)
        hit = self._rel_cache.get(key)
        if hit is not None:
            return hit
        pose = Pose6D.identity()
        for k, fwd in self.shortest_path(a, b):
            rel = self.edges[k].relative_pose
            pose = pose @ (rel if fwd else rel.inverse())
        self._rel_cache[key] = pose
        return pose

    def is_connected(self) -> bool:
        if not self.nodes:
            return True
        start = min(self.nodes)
        seen = {start}
        q = deque([start])
        adj = self.adjacency()
        while q:
            n = q.popleft()
            for nb, _, _ in adj[n]:
                if nb not in seen:
                    seen.add(nb)
                    q.append(nb)
        return len(seen) == len(self.nodes)

    def validate(self) -> None:
        """Raise DataError if any structural invariant is violated."""
        for nid, node in self.nodes.items():
            if node.id != nid:
                raise DataError(f"node key {nid} != node id {node.id}")
            missing = set(node.visible_features) - set(self.features)
            if missing:
                raise DataError(f"node {nid} references unknown features {sorted(missing)[:5]}")
        for e in self.edges:
            if e.from_node not in self.nodes or e.to_node not in self.nodes:
                raise DataError(f"edge {e.from_node}->{e.to_node} has a missing endpoint")
        for f in self.features.values():
            if f.descriptor.size != self.descriptor_dim:
                raise DataError(f"feature {f.id} descriptor has wrong dimension")
        if self.vocabulary.size and self.vocabulary.shape[1] != self.descriptor_dim:
            raise DataError("vocabulary dimension does not match descriptor dimension")

    # ------------------------------------------------------------ derived data

    def node_positions(self, ids: Optional[Iterable[int]] = None) -> np.ndarray:
        ids = self.node_ids if ids is None else list(ids)
        return np.array([self.nodes[i].world_pose.translation for i in ids]).reshape(-1, 3)

    def node_features(self, node: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(ids, world positions, descriptors) of a node's visible features, id-sorted."""
        hit = self._feature_arrays.get(node)
        if hit is None:
            ids = np.array(sorted(self.nodes[node].visible_features), dtype=np.int64)
            if ids.size:
                pos = np.stack([self.features[i].position for i in ids])
                desc = np.stack([self.features[i].descriptor for i in ids])
            else:
                pos = np.zeros((0, 3))
                desc = np.zeros((0, self.descriptor_dim))
            hit = (ids, pos, desc)
            self._feature_arrays[node] = hit
        return hit

    def incident_fingerprints(self, node: int) -> list:
        """Fingerprints on every edge touching ``node`` (both directions), edge order."""
        return [
            self.edges[k].fingerprint
            for _, k, _ in sorted(self.adjacency()[node], key=lambda t: t[1])
            if self.edges[k].fingerprint is not None
        ]

    def idf(self) -> np.ndarray:
        hists = [
            e.fingerprint.appearance
            for e in self.edges
            if e.fingerprint is not None and e.fingerprint.appearance is not None
        ]
        return idf_weights(hists, len(self.vocabulary))

    # ------------------------------------------------------------ serialization

    def to_dict(self) -> dict:
        return {
            "schema": GRAPH_SCHEMA,
            "schema_version": GRAPH_SCHEMA_VERSION,
            "header": {
                "descriptor_dim": int(self.descriptor_dim),
                "vocabulary_size": int(len(self.vocabulary)),
            },
            "vocabulary": np.asarray(self.vocabulary, dtype=float).tolist(),
            "features": [
                {"id": int(f.id), "position": f.position.tolist(), "descriptor": f.descriptor.tolist()}
                for f in sorted(self.features.values(), key=lambda f: f.id)
            ],
            "nodes": [
                {
                    "id": int(n.id),
                    "world_pose": n.world_pose.to_dict(),
                    "visible_features": sorted(int(i) for i in n.visible_features),
                    "trace_id": n.trace_id,
                    "frame_index": n.frame_index,
                }
                for n in sorted(self.nodes.values(), key=lambda n: n.id)
            ],
            "edges": [
                {
                    "from": int(e.from_node),
                    "to": int(e.to_node),
                    "relative_pose": e.relative_pose.to_dict(),
                    "fingerprint": None if e.fingerprint is None else e.fingerprint.to_dict(),
                    "kind": e.kind,
                }
                for e in self.edges
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LocalizationGraph":
        if d.get("schema") != GRAPH_SCHEMA:
            raise DataError("not a localization graph file")
        if d.get("schema_version") != GRAPH_SCHEMA_VERSION:
            raise SchemaVersionError(
                f"graph schema version {d.get('schema_version')} != supported {GRAPH_SCHEMA_VERSION}"
            )
        hdr = d["header"]
        dim = int(hdr["descriptor_dim"])
        vocab = np.array(d["vocabulary"], dtype=float).reshape(int(hdr["vocabulary_size"]), -1) \
            if hdr["vocabulary_size"] else np.zeros((0, dim))
        features = {
            int(f["id"]): Feature3D(int(f["id"]), np.array(f["position"]), np.array(f["descriptor"]))
            for f in d["features"]
        }
        nodes = {
            int(n["id"]): GraphNode(
                int(n["id"]),
                Pose6D.from_dict(n["world_pose"]),
                frozenset(int(i) for i in n["visible_features"]),
                n.get("trace_id"),
                n.get("frame_index"),
            )
            for n in d["nodes"]
        }
        edges = [
            GraphEdge(
                int(e["from"]),
                int(e["to"]),
                Pose6D.from_dict(e["relative_pose"]),
                None if e["fingerprint"] is None else SideChannelFingerprint.from_dict(e["fingerprint"]),
                e.get("kind", "odometry"),
            )
            for e in d["edges"]
        ]
        g = cls(nodes, edges, features, dim, vocab)
        g.validate()
        return g


def relative_pose_between(g: LocalizationGraph, a: int, b: int) -> Pose6D:
    return g.relative_pose_between(a, b)


def save_graph(g: LocalizationGraph, path) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w") as fh:
        json.dump(g.to_dict(), fh)
    os.replace(tmp, path)


def load_graph(path) -> LocalizationGraph:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid graph file ({exc})") from exc
    return LocalizationGraph.from_dict(d)
