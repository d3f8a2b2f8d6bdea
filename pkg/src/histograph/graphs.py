"""Entity-graph construction and serialization.

Two topology builders cover the two entity regimes: thresholded k-nearest
neighbors for point-like entities (nuclei) and region adjacency for dense
label maps (tissue components). Graphs carry node features, centroids, and a
canonical sorted undirected edge list, and serialize to a portable JSON
schema consumed by the model and explainer modules.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from histograph.features import FeatureMatrix
from histograph.raster import EntityTable, LabelMap

log = logging.getLogger(__name__)


@dataclass
class EntityGraph:
    num_nodes: int
    edges: np.ndarray          # (E, 2) int64, u < v, lexicographically sorted
    node_features: np.ndarray  # (N, D) float64
    centroids: np.ndarray      # (N, 2) float64
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        self.centroids = np.asarray(self.centroids, dtype=np.float64).reshape(-1, 2)
        if self.node_features.ndim != 2:
            raise ValueError("node_features must be 2-D")
        if self.node_features.shape[0] != self.num_nodes:
            raise ValueError(
                f"feature rows ({self.node_features.shape[0]}) != num_nodes ({self.num_nodes})")
        if self.centroids.shape[0] != self.num_nodes:
            raise ValueError("centroid rows != num_nodes")
        if self.feature_names and len(self.feature_names) != self.node_features.shape[1]:
            raise ValueError("feature_names length != feature columns")
        if len(self.edges):
            u, v = self.edges[:, 0], self.edges[:, 1]
            if np.any(u < 0) or np.any(v >= self.num_nodes) or np.any(u >= v):
                raise ValueError("edges must satisfy 0 <= u < v < num_nodes")
            order = np.lexsort((v, u))
            self.edges = self.edges[order]
            if len(np.unique(self.edges, axis=0)) != len(self.edges):
                raise ValueError("duplicate edges")

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def __eq__(self, other) -> bool:
        return (isinstance(other, EntityGraph)
                and self.num_nodes == other.num_nodes
                and np.array_equal(self.edges, other.edges)
                and np.array_equal(self.node_features, other.node_features)
                and np.array_equal(self.centroids, other.centroids)
                and self.feature_names == other.feature_names)


@dataclass
class KnnParams:
    k: int = 5
    distance_threshold: float | None = 50.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.distance_threshold is not None and self.distance_threshold <= 0:
            raise ValueError("distance threshold must be > 0")


def _knn_candidates_brute(cents: np.ndarray, k: int) -> list[list[int]]:
    n = len(cents)
    diff = cents[:, None, :] - cents[None, :, :]
    dists = np.sqrt(np.sum(diff * diff, axis=2))
    np.fill_diagonal(dists, np.inf)
    take = min(k, n - 1)
    out = []
    for i in range(n):
        order = np.lexsort((np.arange(n), dists[i]))  # ties resolve to lower id
        out.append([int(j) for j in order[:take]])
    return out


def _knn_candidates_grid(cents: np.ndarray, k: int, threshold: float | None) -> list[list[int]]:
    """Exact k-nearest candidates via a uniform bucket grid with ring expansion."""
    n = len(cents)
    lo = cents.min(axis=0)
    extent = max(float((cents.max(axis=0) - lo).max()), 1e-9)
    cell = threshold if threshold is not None else max(extent / math.sqrt(n), 1e-9)
    coords = np.floor((cents - lo) / cell).astype(np.int64)
    buckets: dict[tuple[int, int], list[int]] = {}
    for i, (br, bc) in enumerate(coords):
        buckets.setdefault((int(br), int(bc)), []).append(i)

    take = min(k, n - 1)
    out: list[list[int]] = []
    max_ring = int(math.ceil(extent / cell)) + 1
    for i in range(n):
        br, bc = int(coords[i, 0]), int(coords[i, 1])
        cand: list[tuple[float, int]] = []
        ring = 0
        while ring <= max_ring:
            cells = []
            if ring == 0:
                cells.append((br, bc))
            else:
                for d in range(-ring, ring + 1):
                    cells.extend([(br - ring, bc + d), (br + ring, bc + d)])
                for d in range(-ring + 1, ring):
                    cells.extend([(br + d, bc - ring), (br + d, bc + ring)])
            for key in cells:
                for j in buckets.get(key, ()):
                    if j != i:
                        cand.append((float(np.hypot(*(cents[i] - cents[j]))), j))
            # points in unscanned cells are at least ring*cell away
            if len(cand) >= take:
                cand.sort()
                if cand[take - 1][0] <= ring * cell:
                    break
            if threshold is not None and ring * cell > threshold:
                break
            ring += 1
        cand.sort()
        out.append([j for _, j in cand[:take]])
    return out


def build_knn_graph(table: EntityTable, feats: FeatureMatrix,
                    params: KnnParams | None = None) -> EntityGraph:
    """Connect each entity to its k nearest centroids, pruning beyond the threshold.

    Edge semantics are a union: an edge exists when either endpoint selects
    the other. Nearest-neighbor ties resolve to the lower entity id.
    """
    if params is None:
        params = KnnParams()
    n = len(table)
    if feats.num_rows != n:
        raise ValueError("feature rows do not match entity count")
    cents = table.centroids
    edges: set[tuple[int, int]] = set()
    if n > 1:
        if n < 256:
            candidates = _knn_candidates_brute(cents, params.k)
        else:
            candidates = _knn_candidates_grid(cents, params.k, params.distance_threshold)
        for i, nbrs in enumerate(candidates):
            for j in nbrs:
                d = float(np.hypot(*(cents[i] - cents[j])))
                if params.distance_threshold is not None and d > params.distance_threshold:
                    continue
                edges.add((min(i, j), max(i, j)))
    edge_arr = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    return EntityGraph(n, edge_arr, feats.values, cents, list(feats.names))


def build_rag(labels: LabelMap, feats: FeatureMatrix,
              table: EntityTable | None = None) -> EntityGraph:
    """Region adjacency graph: edge (a, b) iff the regions share an 8-boundary.

    Node order follows sorted region labels; label 0 is void.
    """
    n = labels.num_labels
    if feats.num_rows != n:
        raise ValueError(f"feature rows ({feats.num_rows}) != region count ({n})")
    if table is None:
        from histograph.raster import entity_table_from_labels
        table = entity_table_from_labels(labels)
    lab = labels.labels
    pairs: set[tuple[int, int]] = set()
    shifts = ((lab[:, :-1], lab[:, 1:]), (lab[:-1, :], lab[1:, :]),
              (lab[:-1, :-1], lab[1:, 1:]), (lab[:-1, 1:], lab[1:, :-1]))
    for a, b in shifts:
        mask = (a != b) & (a > 0) & (b > 0)
        lo = np.minimum(a[mask], b[mask])
        hi = np.maximum(a[mask], b[mask])
        pairs.update(zip((lo - 1).tolist(), (hi - 1).tolist()))  # labels 1..L -> nodes 0..L-1
    edge_arr = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
    return EntityGraph(n, edge_arr, feats.values, table.centroids, list(feats.names))


def assign_entities_to_regions(cell_table: EntityTable, regions: LabelMap) -> np.ndarray:
    """Map each cell to the region node index its centroid falls in (-1 = none).

    Cells landing on background (label 0) are sentinel -1 and later dropped
    with a warning by the hierarchical model path.
    """
    rows = np.clip(np.rint(cell_table.centroids[:, 0]).astype(int), 0, regions.height - 1)
    cols = np.clip(np.rint(cell_table.centroids[:, 1]).astype(int), 0, regions.width - 1)
    assignment = regions.labels[rows, cols].astype(np.int64) - 1
    if np.any(assignment < 0):
        log.warning("%d cell(s) fall outside every region and will be dropped",
                    int(np.sum(assignment < 0)))
    return assignment


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

GRAPH_KEYS = ("num_nodes", "edges", "node_features", "centroids", "feature_names")


def graph_to_dict(g: EntityGraph) -> dict:
    return {
        "num_nodes": g.num_nodes,
        "edges": g.edges.tolist(),
        "node_features": g.node_features.tolist(),
        "centroids": g.centroids.tolist(),
        "feature_names": list(g.feature_names),
    }


def graph_from_dict(doc: dict) -> EntityGraph:
    for key in GRAPH_KEYS:
        if key not in doc:
            raise ValueError(f"graph JSON missing key {key!r}")
    num_nodes = int(doc["num_nodes"])
    feats = np.asarray(doc["node_features"], dtype=np.float64)
    if feats.size == 0:
        feats = feats.reshape(num_nodes, len(doc["feature_names"]))
    return EntityGraph(
        num_nodes,
        np.asarray(doc["edges"], dtype=np.int64).reshape(-1, 2),
        feats,
        np.asarray(doc["centroids"], dtype=np.float64).reshape(-1, 2),
        [str(s) for s in doc["feature_names"]],
    )


def serialize_graph(g: EntityGraph, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph_to_dict(g), fh, separators=(",", ":"))


def deserialize_graph(path: str) -> EntityGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return graph_from_dict(json.load(fh))
