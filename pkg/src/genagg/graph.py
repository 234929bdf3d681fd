"""CSR graph container, file ingestion, synthetic generators and partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ParseError, ValidationError

MULTILABEL = "multilabel"
MULTICLASS = "multiclass"


@dataclass(frozen=True, eq=False)
class Graph:
    """Adjacency in CSR form plus optional node/edge feature matrices.

    Row ``v`` of the CSR lists the neighbors ``u`` whose messages ``v``
    aggregates, sorted ascending.  ``edge_feature_index[k]`` is the row of
    ``edge_features`` that belongs to CSR edge ``k``; both directions of an
    undirected edge share one row.
    """

    num_nodes: int
    csr_offsets: np.ndarray
    csr_targets: np.ndarray
    edge_feature_index: np.ndarray
    node_features: np.ndarray | None = None
    edge_features: np.ndarray | None = None
    directed: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def num_edges(self) -> int:
        return int(self.csr_targets.shape[0])

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.csr_offsets)

    @property
    def sources(self) -> np.ndarray:
        """Segment (aggregating node) id of every CSR edge."""
        return np.repeat(np.arange(self.num_nodes), self.degrees)

    def neighbors(self, v: int) -> np.ndarray:
        return self.csr_targets[self.csr_offsets[v]:self.csr_offsets[v + 1]]

    def validate(self) -> None:
        off, tgt = self.csr_offsets, self.csr_targets
        if off.shape != (self.num_nodes + 1,):
            raise ValidationError(f"csr_offsets has length {off.shape[0]}, expected {self.num_nodes + 1}")
        if off[0] != 0 or off[-1] != tgt.shape[0] or np.any(np.diff(off) < 0):
            raise ValidationError("csr_offsets must start at 0, be non-decreasing and end at num_edges")
        if tgt.size and (tgt.min() < 0 or tgt.max() >= self.num_nodes):
            raise ValidationError(f"csr target out of range [0, {self.num_nodes})")
        if self.edge_feature_index.shape != tgt.shape:
            raise ValidationError("edge_feature_index must have one entry per edge")
        if tgt.size > 1:
            same_seg = self.sources[1:] == self.sources[:-1]
            if np.any(same_seg & (tgt[1:] < tgt[:-1])):
                raise ValidationError("neighbor lists must be sorted ascending")
        if self.node_features is not None and self.node_features.shape[0] != self.num_nodes:
            raise ValidationError(
                f"node feature rows ({self.node_features.shape[0]}) != num_nodes ({self.num_nodes})"
            )
        if self.edge_features is not None:
            rows = self.edge_features.shape[0]
            if self.edge_feature_index.size and self.edge_feature_index.max() >= rows:
                raise ValidationError(f"edge_feature_index points past {rows} edge feature rows")
        if not self.directed and not self.is_symmetric():
            raise ValidationError("undirected graph is not symmetric")

    def is_symmetric(self) -> bool:
        src, dst = self.sources, self.csr_targets
        fwd = np.lexsort((dst, src))
        bwd = np.lexsort((src, dst))
        return bool(np.array_equal(src[fwd], dst[bwd]) and np.array_equal(dst[fwd], src[bwd]))

    def edge_list(self) -> tuple[np.ndarray, np.ndarray]:
        """``(aggregating node, neighbor)`` pairs in CSR order."""
        return self.sources, self.csr_targets.copy()

    @classmethod
    def from_edges(
        cls,
        num_nodes: int,
        src: Sequence[int],
        dst: Sequence[int],
        directed: bool = False,
        node_features: np.ndarray | None = None,
        edge_features: np.ndarray | None = None,
    ) -> "Graph":
        """Build a CSR graph from listed edges.

        Undirected inputs are stored in both directions sharing the listed
        edge's feature row; a self-loop is stored once.  Row ``i`` of
        ``edge_features`` belongs to listed edge ``i``.
        """
        src = np.asarray(src, dtype=np.int64).reshape(-1)
        dst = np.asarray(dst, dtype=np.int64).reshape(-1)
        if src.shape != dst.shape:
            raise ValidationError("src and dst must have equal length")
        if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= num_nodes):
            bad = int(np.flatnonzero((src < 0) | (src >= num_nodes) | (dst < 0) | (dst >= num_nodes))[0])
            raise ValidationError(
                f"edge {bad} ({src[bad]}, {dst[bad]}) has a node id outside [0, {num_nodes})"
            )
        if edge_features is not None and edge_features.shape[0] != src.size:
            raise ValidationError(
                f"edge feature rows ({edge_features.shape[0]}) != listed edges ({src.size})"
            )
        feat_idx = np.arange(src.size)
        if not directed:
            rev = src != dst
            src, dst, feat_idx = (
                np.concatenate([src, dst[rev]]),
                np.concatenate([dst, src[rev]]),
                np.concatenate([feat_idx, feat_idx[rev]]),
            )
        order = np.lexsort((feat_idx, dst, src))
        src, dst, feat_idx = src[order], dst[order], feat_idx[order]
        offsets = np.zeros(num_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=num_nodes), out=offsets[1:])
        return cls(
            num_nodes=int(num_nodes),
            csr_offsets=offsets,
            csr_targets=dst,
            edge_feature_index=feat_idx,
            node_features=None if node_features is None else np.asarray(node_features, dtype=np.float64),
            edge_features=None if edge_features is None else np.asarray(edge_features, dtype=np.float64),
            directed=directed,
        )

    def with_node_features(self, features: np.ndarray | None) -> "Graph":
        return replace(self, node_features=features)

    def induced_subgraph(self, nodes: np.ndarray) -> "Graph":
        """Subgraph on ascending ``nodes`` keeping only edges with both ends inside.

        Local id ``i`` corresponds to ``nodes[i]``.  Edge feature rows are
        compacted to the ones still referenced.
        """
        nodes = np.asarray(nodes, dtype=np.int64)
        local = np.full(self.num_nodes, -1, dtype=np.int64)
        local[nodes] = np.arange(nodes.size)
        src, dst = self.sources, self.csr_targets
        keep = (local[src] >= 0) & (local[dst] >= 0)
        # nodes ascending => local ids are monotone, CSR order is preserved
        lsrc, ldst = local[src[keep]], local[dst[keep]]
        fidx = self.edge_feature_index[keep]
        efeat = None
        if self.edge_features is not None:
            rows, fidx = np.unique(fidx, return_inverse=True)
            efeat = self.edge_features[rows]
        offsets = np.zeros(nodes.size + 1, dtype=np.int64)
        np.cumsum(np.bincount(lsrc, minlength=nodes.size), out=offsets[1:])
        return Graph(
            num_nodes=int(nodes.size),
            csr_offsets=offsets,
            csr_targets=ldst,
            edge_feature_index=fidx.astype(np.int64),
            node_features=None if self.node_features is None else self.node_features[nodes],
            edge_features=efeat,
            directed=self.directed,
        )

    def relabel(self, perm: np.ndarray) -> "Graph":
        """Isomorphic copy where old node ``v`` becomes ``perm[v]``."""
        perm = np.asarray(perm, dtype=np.int64)
        src, dst = self.sources, self.csr_targets
        inv = np.argsort(perm)
        nf = None if self.node_features is None else self.node_features[inv]
        efeat = self.edge_features
        # feed each stored edge once; from_edges would re-add reverses for undirected graphs
        g = Graph.from_edges(
            self.num_nodes, perm[src], perm[dst], directed=True,
            node_features=nf,
            edge_features=None if efeat is None else efeat[self.edge_feature_index],
        )
        return replace(g, directed=self.directed)


@dataclass(frozen=True)
class NodeLabels:
    """Per-node targets: an N x T 0/1 matrix or an N-vector of class ids."""

    values: np.ndarray
    kind: str = MULTILABEL
    num_classes: int = 0

    def __post_init__(self):
        if self.kind == MULTILABEL:
            if self.values.ndim != 2 or not np.all((self.values == 0) | (self.values == 1)):
                raise ValidationError("multi-label targets must be an N x T matrix of 0/1")
        elif self.kind == MULTICLASS:
            if self.values.ndim != 1:
                raise ValidationError("multi-class targets must be a vector of class ids")
            if self.values.size and (self.values.min() < 0 or self.values.max() >= self.num_classes):
                raise ValidationError(f"class ids must lie in [0, {self.num_classes})")
        else:
            raise ValidationError(f"unknown label kind {self.kind!r}")

    @property
    def num_targets(self) -> int:
        return self.values.shape[1] if self.kind == MULTILABEL else self.num_classes

    def subset(self, nodes: np.ndarray) -> "NodeLabels":
        return NodeLabels(self.values[nodes], self.kind, self.num_classes)


# ---------------------------------------------------------------------------
# file ingestion


def _read_edges(path: Path) -> tuple[np.ndarray, np.ndarray]:
    src, dst = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(path, lineno, f"expected 'src<TAB>dst', got {line!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(path, lineno, f"non-integer node id in {line!r}") from None
            if u < 0 or v < 0:
                raise ParseError(path, lineno, "node ids must be non-negative")
            src.append(u)
            dst.append(v)
    return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64)


def _read_csv_matrix(path: Path, integer: bool = False) -> np.ndarray:
    rows = []
    width = None
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            if rec[0].lstrip().startswith("#"):
                continue
            try:
                vals = [int(x) if integer else float(x) for x in rec]
            except ValueError:
                raise ParseError(path, lineno, f"malformed number in {','.join(rec)!r}") from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise ParseError(path, lineno, f"expected {width} columns, got {len(vals)}")
            rows.append(vals)
    if not rows:
        return np.zeros((0, 0))
    return np.array(rows, dtype=np.int64 if integer else np.float64)


def load_graph(
    edge_file,
    node_feature_file=None,
    edge_feature_file=None,
    label_file=None,
    directed: bool = False,
    label_kind: str = MULTILABEL,
    num_nodes: int | None = None,
) -> tuple[Graph, NodeLabels | None]:
    """Read a graph from the on-disk text formats.

    ``num_nodes`` defaults to the node feature row count, else the label row
    count, else the largest listed id plus one.
    """
    edge_file = Path(edge_file)
    src, dst = _read_edges(edge_file)
    nfeat = _read_csv_matrix(Path(node_feature_file)) if node_feature_file else None
    efeat = _read_csv_matrix(Path(edge_feature_file)) if edge_feature_file else None
    labels_raw = None
    if label_file:
        labels_raw = _read_csv_matrix(Path(label_file), integer=True)

    if num_nodes is None:
        if nfeat is not None:
            num_nodes = nfeat.shape[0]
        elif labels_raw is not None:
            num_nodes = labels_raw.shape[0]
        else:
            num_nodes = int(max(src.max(initial=-1), dst.max(initial=-1)) + 1)
    if nfeat is not None and nfeat.shape[0] != num_nodes:
        raise ValidationError(f"node feature rows ({nfeat.shape[0]}) != num_nodes ({num_nodes})")
    if efeat is not None and efeat.shape[0] != src.size:
        raise ValidationError(f"edge feature rows ({efeat.shape[0]}) != listed edges ({src.size})")
    g = Graph.from_edges(num_nodes, src, dst, directed=directed, node_features=nfeat, edge_features=efeat)

    labels = None
    if labels_raw is not None:
        if labels_raw.shape[0] != num_nodes:
            raise ValidationError(f"label rows ({labels_raw.shape[0]}) != num_nodes ({num_nodes})")
        if label_kind == MULTICLASS:
            if labels_raw.shape[1] != 1:
                raise ValidationError("multi-class label file needs one integer per row")
            ids = labels_raw[:, 0]
            if ids.min() < 0:
                raise ValidationError("class ids must be non-negative")
            labels = NodeLabels(ids, MULTICLASS, int(ids.max()) + 1)
        else:
            labels = NodeLabels(labels_raw.astype(np.float64), MULTILABEL)
    return g, labels


def init_node_features_from_edges(g: Graph) -> Graph:
    """Node features as the sum of feature rows over each node's CSR edges."""
    if g.node_features is not None:
        raise ValidationError("graph already has node features")
    if g.edge_features is None:
        raise ValidationError("graph has no edge features to aggregate")
    per_edge = g.edge_features[g.edge_feature_index]
    out = np.zeros((g.num_nodes, g.edge_features.shape[1]))
    deg = g.degrees
    nz = deg > 0
    if per_edge.shape[0]:
        out[nz] = np.add.reduceat(per_edge, g.csr_offsets[:-1][nz], axis=0)
    return g.with_node_features(out)


# ---------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class Partition:
    """Disjoint node subsets with their induced subgraphs.

    ``parts[i][j]`` is the original id of local node ``j`` in ``subgraphs[i]``.
    """

    parts: list[np.ndarray]
    subgraphs: list[Graph] = field(repr=False)

    def __len__(self):
        return len(self.parts)


def random_partition(g: Graph, k: int, seed) -> Partition:
    """Shuffle nodes with a seeded RNG and split into ``k`` near-equal parts."""
    if not 1 <= k <= g.num_nodes:
        raise ValueError(f"partition count must be in [1, {g.num_nodes}], got {k}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(g.num_nodes)
    parts = [np.sort(p) for p in np.array_split(perm, k)]
    return Partition(parts, [g.induced_subgraph(p) for p in parts])


# ---------------------------------------------------------------------------
# synthetic data


def _upper_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(n, k=1)


def _check_prob(name, p):
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"{name} must lie in [0, 1], got {p}")


def _check_count(name, n):
    if int(n) != n or n < 1:
        raise ConfigError(f"{name} must be an integer >= 1, got {n}")


def random_graph(num_nodes: int, edge_prob: float, seed, directed: bool = False) -> Graph:
    """Erdos-Renyi graph; directed graphs draw every ordered pair independently."""
    _check_count("num_nodes", num_nodes)
    _check_prob("edge_prob", edge_prob)
    rng = np.random.default_rng(seed)
    if directed:
        mask = rng.random((num_nodes, num_nodes)) < edge_prob
        np.fill_diagonal(mask, False)
        src, dst = np.nonzero(mask)
    else:
        iu, ju = _upper_pairs(num_nodes)
        keep = rng.random(iu.size) < edge_prob
        src, dst = iu[keep], ju[keep]
    return Graph.from_edges(num_nodes, src, dst, directed=directed)


def generate_synthetic(kind: str, params: dict, seed) -> tuple[Graph, NodeLabels]:
    """Desk-scale stand-ins for benchmark graphs.

    ``community``: stochastic block model; the label is the block id and the
    node features are a one-hot block indicator plus Gaussian noise.
    Parameters: ``blocks`` (2), ``block_size`` (20), ``p_in`` (0.3),
    ``p_out`` (0.02), ``noise`` (0.5).

    ``degree-task``: Erdos-Renyi graph with i.i.d. Uniform(0, 1) node
    features; target column ``t`` is 1 iff the degree is at least
    ``thresholds[t]``.  A node's own features carry no information about its
    degree, but the maximum over its neighbors' features grows with degree
    while the mean does not, so the task rewards max-like aggregation.
    Parameters: ``num_nodes`` (200), ``edge_prob`` (0.03),
    ``thresholds`` ([4, 6, 8]), ``num_features`` (8).
    """
    rng = np.random.default_rng(seed)
    if kind == "community":
        blocks = params.get("blocks", 2)
        size = params.get("block_size", 20)
        p_in, p_out = params.get("p_in", 0.3), params.get("p_out", 0.02)
        noise = params.get("noise", 0.5)
        _check_count("blocks", blocks)
        _check_count("block_size", size)
        _check_prob("p_in", p_in)
        _check_prob("p_out", p_out)
        if noise < 0:
            raise ConfigError(f"noise must be >= 0, got {noise}")
        n = blocks * size
        block = np.repeat(np.arange(blocks), size)
        iu, ju = _upper_pairs(n)
        prob = np.where(block[iu] == block[ju], p_in, p_out)
        keep = rng.random(iu.size) < prob
        feats = np.eye(blocks)[block] + noise * rng.standard_normal((n, blocks))
        g = Graph.from_edges(n, iu[keep], ju[keep], node_features=feats)
        return g, NodeLabels(block.astype(np.int64), MULTICLASS, blocks)
    if kind == "degree-task":
        n = params.get("num_nodes", 200)
        p = params.get("edge_prob", 0.03)
        thresholds = list(params.get("thresholds", [4, 6, 8]))
        nfeat = params.get("num_features", 8)
        _check_count("num_nodes", n)
        _check_count("num_features", nfeat)
        _check_prob("edge_prob", p)
        if not thresholds or any(t < 0 for t in thresholds):
            raise ConfigError("thresholds must be a non-empty list of non-negative numbers")
        iu, ju = _upper_pairs(n)
        keep = rng.random(iu.size) < p
        feats = rng.random((n, nfeat))
        g = Graph.from_edges(n, iu[keep], ju[keep], node_features=feats)
        deg = g.degrees
        labels = (deg[:, None] >= np.asarray(thresholds)[None, :]).astype(np.float64)
        return g, NodeLabels(labels, MULTILABEL)
    raise ConfigError(f"unknown synthetic generator {kind!r} (expected 'community' or 'degree-task')")
