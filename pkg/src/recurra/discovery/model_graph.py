"""Graph of clustered point sets and initial object model assembly.

Every cluster contributes two nodes, its source and destination keypoint
sets, joined by a matched edge carrying the cluster transform. Nodes that
share keypoints belong to the same physical instance and are joined by a
common edge with identity transform and a small weight. Each connected
component is one object type; chaining transforms along shortest paths to
a reference node brings all of its keypoints into one model frame.
"""

from collections.abc import Sequence
from dataclasses import dataclass
from enum import StrEnum
from typing import assert_never

import numpy as np
from loguru import logger
from numpy.typing import NDArray
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra

from recurra.discovery.clustering import Cluster
from recurra.discovery.object_model import (
    Landmark,
    ObjectModel,
    Support,
    nearest_running_mean,
)
from recurra.frames.keypoints import Keypoint3D
from recurra.geometry.transforms import RigidTransform, alignment_residuals

MIN_EDGE_WEIGHT = 1e-9  # mm, csgraph drops zero-weight edges


class DisconnectedGraphError(ValueError):
    """Raised when assembly reaches only part of a component from its reference."""

    def __init__(self, reference: int, unreachable: Sequence[int]):
        super().__init__(
            f"Nodes {list(unreachable)} are unreachable from reference node {reference}"
        )
        self.reference = reference
        self.unreachable = list(unreachable)


class EdgeKind(StrEnum):
    MATCHED = "matched"
    COMMON = "common"


@dataclass(frozen=True)
class SetNode:
    id: int
    keypoints: frozenset[int]
    score: int

    def __post_init__(self) -> None:
        if not self.keypoints:
            raise ValueError(f"Node {self.id} has no keypoints")


@dataclass(frozen=True, eq=False)
class GraphEdge:
    """`transform` maps points of node `a` onto node `b`."""

    a: int
    b: int
    weight: float
    transform: RigidTransform
    kind: EdgeKind


@dataclass(frozen=True, eq=False)
class SetGraph:
    nodes: tuple[SetNode, ...]
    edges: tuple[GraphEdge, ...]

    def adjacency(self) -> csr_matrix:
        """Symmetric weight matrix keeping the lightest edge per node pair."""
        n = len(self.nodes)
        weights: dict[tuple[int, int], float] = {}
        for edge in self.edges:
            key = (min(edge.a, edge.b), max(edge.a, edge.b))
            weights[key] = min(weights.get(key, np.inf), edge.weight)
        if not weights:
            return csr_matrix((n, n))
        rows, cols = zip(*weights, strict=True)
        values = list(weights.values())
        return csr_matrix(
            (values + values, (list(rows) + list(cols), list(cols) + list(rows))), shape=(n, n)
        )

    def lightest_edge(self, u: int, v: int) -> GraphEdge:
        candidates = [e for e in self.edges if {e.a, e.b} == {u, v}]
        return min(candidates, key=lambda e: (e.weight, e.kind != EdgeKind.COMMON))

    def components(self) -> list[list[int]]:
        """Node ids of each connected component, ordered by lowest node id."""
        if not self.nodes:
            return []
        _, labels = connected_components(self.adjacency(), directed=False)
        groups: dict[int, list[int]] = {}
        for node, label in enumerate(labels):
            groups.setdefault(int(label), []).append(node)
        return sorted(groups.values(), key=lambda nodes: nodes[0])


def build_graph(clusters: Sequence[Cluster], kps: Sequence[Keypoint3D], delta: float) -> SetGraph:
    node_keypoints: list[frozenset[int]] = []
    edges: list[GraphEdge] = []
    for c, cluster in enumerate(clusters):
        node_keypoints.extend([cluster.src_points, cluster.dst_points])
        src = np.stack([kps[s].position for s, _ in cluster.correspondences])
        dst = np.stack([kps[d].position for _, d in cluster.correspondences])
        residual = float(alignment_residuals(cluster.transform, src, dst).mean())
        edges.append(
            GraphEdge(
                a=2 * c,
                b=2 * c + 1,
                weight=max(residual, MIN_EDGE_WEIGHT),
                transform=cluster.transform,
                kind=EdgeKind.MATCHED,
            )
        )

    shared_counts = [0] * len(node_keypoints)
    for u in range(len(node_keypoints)):
        others: set[int] = set()
        for v in range(len(node_keypoints)):
            if v == u:
                continue
            shared = node_keypoints[u] & node_keypoints[v]
            others |= shared
            # The two sides of one cluster are distinct instances.
            if v > u and shared and v // 2 != u // 2:
                edges.append(
                    GraphEdge(
                        a=u,
                        b=v,
                        weight=delta,
                        transform=RigidTransform.identity(),
                        kind=EdgeKind.COMMON,
                    )
                )
        shared_counts[u] = len(others)

    nodes = tuple(
        SetNode(
            id=u,
            keypoints=keypoints,
            score=_matched_correspondences(keypoints, clusters) + shared_counts[u],
        )
        for u, keypoints in enumerate(node_keypoints)
    )
    graph = SetGraph(nodes=nodes, edges=tuple(edges))
    logger.info(
        f"Graph: {len(nodes)} nodes, {len(clusters)} matched edges, "
        f"{len(edges) - len(clusters)} common edges"
    )
    return graph


def _matched_correspondences(keypoints: frozenset[int], clusters: Sequence[Cluster]) -> int:
    return sum(
        1
        for cluster in clusters
        for s, d in cluster.correspondences
        if s in keypoints or d in keypoints
    )


def select_reference(graph: SetGraph, component: Sequence[int]) -> int:
    """Highest scoring node of the component; ties go to the lowest id."""
    if not component:
        raise ValueError("Cannot select a reference in an empty component")
    return min(component, key=lambda u: (-graph.nodes[u].score, u))


def _chain_transforms(
    graph: SetGraph,
    component: Sequence[int],
    reference: int,
) -> tuple[dict[int, RigidTransform], dict[int, float]]:
    """Transform of each node's scene points into the reference frame, and path costs."""
    distances, predecessors = dijkstra(
        graph.adjacency(), directed=False, indices=reference, return_predecessors=True
    )
    unreachable = [u for u in component if not np.isfinite(distances[u])]
    if unreachable:
        raise DisconnectedGraphError(reference, unreachable)

    chains: dict[int, RigidTransform] = {reference: RigidTransform.identity()}

    def chain(v: int) -> RigidTransform:
        if v in chains:
            return chains[v]
        u = int(predecessors[v])
        edge = graph.lightest_edge(u, v)
        match edge.kind:
            case EdgeKind.COMMON:
                step = RigidTransform.identity()
            case EdgeKind.MATCHED:
                # p_b = T(p_a): a point of v is pulled back onto u's side
                step = edge.transform.inverse() if edge.a == u else edge.transform
            case never:
                assert_never(never)
        chains[v] = chain(u).compose(step)
        return chains[v]

    for v in sorted(component, key=lambda node: (distances[node], node)):
        chain(v)
    return chains, {u: float(distances[u]) for u in component}


def _instance_groups(graph: SetGraph, component: Sequence[int]) -> list[list[int]]:
    """Nodes joined by common edges observe the same physical instance."""
    members = set(component)
    parent = {u: u for u in component}

    def find(u: int) -> int:
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    for edge in graph.edges:
        if edge.kind == EdgeKind.COMMON and edge.a in members and edge.b in members:
            ra, rb = find(edge.a), find(edge.b)
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for u in sorted(component):
        groups.setdefault(find(u), []).append(u)
    return list(groups.values())


def assemble_model(
    graph: SetGraph,
    component: Sequence[int],
    reference: int,
    kps: Sequence[Keypoint3D],
    merge_radius: float,
) -> ObjectModel:
    """Map every node of the component into the reference frame and merge landmarks.

    Raises:
        DisconnectedGraphError: if a component node cannot be reached.
    """
    if reference not in component:
        raise ValueError(f"Reference node {reference} is not in the component")
    chains, distances = _chain_transforms(graph, component, reference)
    groups = _instance_groups(graph, component)
    groups.sort(key=lambda group: (reference not in group, group[0]))
    group_of = {u: g for g, group in enumerate(groups) for u in group}

    instances: list[RigidTransform] = []
    for group in groups:
        closest = min(group, key=lambda u: (distances[u], u))
        instances.append(
            RigidTransform.identity() if closest == reference else chains[closest].inverse()
        )

    sums: list[NDArray[np.float64]] = []
    counts: list[int] = []
    descriptors: list[NDArray[np.float64]] = []
    support: list[dict[int, int]] = [{} for _ in groups]
    for u in sorted(component, key=lambda node: (distances[node], node)):
        contributed: set[int] = set()
        mapped = chains[u](np.stack([kps[k].position for k in sorted(graph.nodes[u].keypoints)]))
        for k, point in zip(sorted(graph.nodes[u].keypoints), mapped, strict=True):
            landmark_id = nearest_running_mean(point, sums, counts, merge_radius, contributed)
            if landmark_id is None:
                landmark_id = len(sums)
                sums.append(point.copy())
                counts.append(1)
                descriptors.append(kps[k].descriptor)
            else:
                sums[landmark_id] = sums[landmark_id] + point
                counts[landmark_id] += 1
            contributed.add(landmark_id)
            support[group_of[u]].setdefault(k, landmark_id)

    landmarks = tuple(
        Landmark(position=total / count, descriptor=descriptor, observations=count)
        for total, count, descriptor in zip(sums, counts, descriptors, strict=True)
    )
    model = ObjectModel(
        landmarks=landmarks,
        instances=tuple(instances),
        support=tuple(_as_support(s) for s in support),
    )
    logger.info(
        f"Assembled model from {len(component)} nodes: {len(landmarks)} landmarks, "
        f"{len(instances)} instances"
    )
    return model


def _as_support(keypoint_to_landmark: dict[int, int]) -> Support:
    return tuple(
        sorted((landmark_id, k) for k, landmark_id in keypoint_to_landmark.items())
    )
