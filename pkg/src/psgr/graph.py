"""Sparse graph construction from node features and a coarse prediction.

Pipeline: pairwise inner-product similarity (clamped at zero, zero
diagonal), degree normalization into a connectivity distribution, an
information score per neighbor (connectivity times the neighbor's L1
feature mass), uncertainty selection from the coarse class margins, and
top-K pruning that keeps edges only for uncertain nodes.

Everything here is plain numpy on values; the differentiable twin of the
normalization lives in :mod:`psgr.reasoner`. A row-streaming path covers
node counts where the dense N x N matrices would not be worth holding.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _backend
from .errors import ShapeError, ValidationError

NORM_MODES = ("symmetric", "random_walk")
DEFAULT_NORM_MODE = "random_walk"

# above this many nodes the dense path gives way to row streaming
STREAMING_THRESHOLD = 2048


class DegenerateGraphError(ValidationError):
    """Fewer than two nodes cannot form a graph."""


@dataclass
class ConnectivityGraph:
    """Dense similarity S, degree vector, and normalized connectivity."""

    similarity: np.ndarray
    degrees: Optional[np.ndarray] = None
    normalized: Optional[np.ndarray] = None
    norm_mode: Optional[str] = None

    @property
    def n_nodes(self):
        return int(self.similarity.shape[0])


@dataclass
class UncertaintySelection:
    """Low-margin nodes chosen from the coarse class probabilities."""

    ratio: float
    margins: np.ndarray
    selected: np.ndarray   # ascending node indices

    @property
    def n_selected(self):
        return int(self.selected.shape[0])

    def __contains__(self, i):
        return bool(np.isin(i, self.selected))


@dataclass
class SparseAdjacency:
    """Weighted edge list; only uncertain rows own edges."""

    n_nodes: int
    k: int
    src: np.ndarray       # int64, sorted by (src, dst)
    dst: np.ndarray
    weight: np.ndarray
    uncertain: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def n_edges(self):
        return int(self.src.shape[0])

    def row_edges(self, i):
        """(targets, weights) of node i's outgoing edges."""
        mask = self.src == i
        return self.dst[mask], self.weight[mask]

    def iter_edges(self):
        for s, d, w in zip(self.src, self.dst, self.weight):
            yield int(s), int(d), float(w)


def _as_features(h):
    h = np.asarray(h)
    if h.ndim != 2:
        raise ShapeError(f"node features must be N x c, got shape {h.shape}")
    if h.dtype not in (np.float32, np.float64):
        h = h.astype(np.float64)
    return np.ascontiguousarray(h)


def feature_map_to_nodes(x):
    """h x w x c feature map -> (N x c node matrix, (h, w))."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"feature map must be h x w x c, got shape {x.shape}")
    h, w, c = x.shape
    return x.reshape(h * w, c), (h, w)


def nodes_to_feature_map(nodes, hw):
    h, w = hw
    nodes = np.asarray(nodes)
    if nodes.shape[0] != h * w:
        raise ShapeError(f"{nodes.shape[0]} nodes do not tile a {h}x{w} map")
    return nodes.reshape(h, w, nodes.shape[1])


def build_similarity(h):
    """Clamped inner-product similarity with an exactly-zero diagonal."""
    h = _as_features(h)
    n = h.shape[0]
    if n < 2:
        raise DegenerateGraphError(f"need at least 2 nodes, got {n}")
    s = _backend.matmul_nt(h, h)
    # mirror the upper triangle so S == S.T holds bitwise on every backend
    upper = np.triu(s, 1)
    s = upper + upper.T
    np.maximum(s, 0, out=s)
    return ConnectivityGraph(similarity=s)


def normalize(graph, mode=DEFAULT_NORM_MODE):
    """Fill degrees and the normalized connectivity matrix.

    random_walk: rows divided by their degree (rows with degree > 0 sum
    to one); symmetric: D^-1/2 S D^-1/2. Zero-degree nodes keep all-zero
    rows and columns instead of dividing by zero.
    """
    if mode not in NORM_MODES:
        raise ValidationError(f"norm mode must be one of {NORM_MODES}, got {mode!r}")
    s = graph.similarity
    d = s.sum(axis=1)
    nonzero = d > 0
    if mode == "random_walk":
        inv = np.zeros_like(d)
        np.divide(1.0, d, out=inv, where=nonzero)
        normalized = s * inv[:, None]
    else:
        r = np.zeros_like(d)
        np.divide(1.0, np.sqrt(d, out=np.zeros_like(d), where=nonzero),
                  out=r, where=nonzero)
        normalized = s * r[:, None] * r[None, :]
    graph.degrees = d
    graph.normalized = normalized
    graph.norm_mode = mode
    return graph


def feature_l1(h):
    """Per-node L1 feature mass used by the information scores."""
    return np.abs(_as_features(h)).sum(axis=1)


def information_scores(graph, h, i):
    """Information node i would gain from each neighbor.

    score[j] = normalized[i, j] * ||h_j||_1; the self-score is zero.
    """
    if graph.normalized is None:
        raise ValidationError("information_scores: call normalize() first")
    n = graph.n_nodes
    if not 0 <= i < n:
        raise ValidationError(f"information_scores: node {i} out of range [0, {n})")
    h = _as_features(h)
    if h.shape[0] != n:
        raise ShapeError(f"feature rows {h.shape[0]} != graph nodes {n}")
    scores = graph.normalized[i] * feature_l1(h)
    scores[i] = 0.0
    return scores


def round_half_up(x):
    return int(np.floor(x + 0.5))


def class_margins(coarse_probs):
    """Top-1 minus top-2 class probability per node."""
    p = np.asarray(coarse_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] < 2:
        raise ShapeError(f"coarse probs must be N x n_classes (>= 2), got {p.shape}")
    row_sums = p.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-6:
        raise ValidationError("coarse probabilities must sum to 1 per node "
                              f"(max deviation {np.abs(row_sums - 1.0).max():.3g})")
    top2 = np.sort(p, axis=1)[:, -2:]
    return top2[:, 1] - top2[:, 0]


def select_uncertain(coarse_probs, ratio):
    """Pick round(ratio*N) lowest-margin nodes; ties go to lower indices."""
    if not 0.0 <= ratio <= 1.0:
        raise ValidationError(f"uncertain ratio must be in [0, 1], got {ratio}")
    margins = class_margins(coarse_probs)
    n = margins.shape[0]
    n_sel = round_half_up(ratio * n)
    order = np.lexsort((np.arange(n), margins))
    selected = np.sort(order[:n_sel]).astype(np.int64)
    return UncertaintySelection(ratio=float(ratio), margins=margins, selected=selected)


def default_k(n_nodes):
    """floor(N/2), clamped into [1, N-1]."""
    n = int(n_nodes)
    if n < 2:
        raise DegenerateGraphError(f"need at least 2 nodes, got {n}")
    return min(max(n // 2, 1), n - 1)


def _top_k_row(scores, i, k):
    """Indices of the k best scores excluding i; ties to the lower index."""
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    order = order[order != i]
    return np.sort(order[:k])


def prune(graph, h, selection, k):
    """Keep the top-k information-score edges for each uncertain node."""
    if graph.normalized is None:
        raise ValidationError("prune: call normalize() first")
    n = graph.n_nodes
    k = int(k)
    if not 1 <= k <= n - 1:
        raise ValidationError(f"prune: k must be in [1, {n - 1}], got {k}")
    h = _as_features(h)
    l1 = feature_l1(h)
    src_list, dst_list, w_list = [], [], []
    for i in selection.selected:
        i = int(i)
        scores = graph.normalized[i] * l1
        scores[i] = 0.0
        targets = _top_k_row(scores, i, k)
        src_list.append(np.full(targets.shape[0], i, dtype=np.int64))
        dst_list.append(targets)
        w_list.append(graph.normalized[i, targets])
    if src_list:
        src = np.concatenate(src_list)
        dst = np.concatenate(dst_list)
        weight = np.concatenate(w_list)
    else:
        src = np.zeros(0, np.int64)
        dst = np.zeros(0, np.int64)
        weight = np.zeros(0, graph.normalized.dtype)
    return SparseAdjacency(n_nodes=n, k=k, src=src, dst=dst, weight=weight,
                           uncertain=np.array(selection.selected, dtype=np.int64))


# ---------------------------------------------------------------------------
# row-streaming construction for large graphs


def _streaming_degrees(h, block=256):
    """Degree vector of the clamped similarity without the N x N matrix."""
    n = h.shape[0]
    d = np.zeros(n, dtype=h.dtype)
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        s_block = _backend.matmul_nt(h[lo:hi], h)
        np.maximum(s_block, 0, out=s_block)
        s_block[np.arange(hi - lo), np.arange(lo, hi)] = 0.0
        d[lo:hi] = s_block.sum(axis=1)
    return d


def _streaming_row(h, i, degrees, mode):
    """Row i of the normalized connectivity, computed on the fly."""
    s_i = _backend.matmul_nt(h[i:i + 1], h)[0]
    np.maximum(s_i, 0, out=s_i)
    s_i[i] = 0.0
    if mode == "random_walk":
        return s_i / degrees[i] if degrees[i] > 0 else np.zeros_like(s_i)
    r = np.zeros_like(degrees)
    np.divide(1.0, np.sqrt(degrees, out=np.zeros_like(degrees), where=degrees > 0),
              out=r, where=degrees > 0)
    return s_i * (r[i] * r)


def build_sparse_graph(h, coarse_probs, ratio, k=None, mode=DEFAULT_NORM_MODE,
                       streaming_threshold=STREAMING_THRESHOLD):
    """Full construction: similarity -> normalize -> select -> prune.

    Returns (selection, adjacency, graph); ``graph`` is None on the
    streaming path, which never materializes the dense matrices.
    """
    h = _as_features(h)
    n = h.shape[0]
    if n < 2:
        raise DegenerateGraphError(f"need at least 2 nodes, got {n}")
    if mode not in NORM_MODES:
        raise ValidationError(f"norm mode must be one of {NORM_MODES}, got {mode!r}")
    k = default_k(n) if k is None else int(k)
    if not 1 <= k <= n - 1:
        raise ValidationError(f"k must be in [1, {n - 1}], got {k}")
    selection = select_uncertain(coarse_probs, ratio)

    if n <= streaming_threshold:
        graph = normalize(build_similarity(h), mode)
        return selection, prune(graph, h, selection, k), graph

    degrees = _streaming_degrees(h)
    l1 = feature_l1(h)
    src_list, dst_list, w_list = [], [], []
    for i in selection.selected:
        i = int(i)
        row = _streaming_row(h, i, degrees, mode)
        scores = row * l1
        scores[i] = 0.0
        targets = _top_k_row(scores, i, k)
        src_list.append(np.full(targets.shape[0], i, dtype=np.int64))
        dst_list.append(targets)
        w_list.append(row[targets])
    if src_list:
        src = np.concatenate(src_list)
        dst = np.concatenate(dst_list)
        weight = np.concatenate(w_list)
    else:
        src = np.zeros(0, np.int64)
        dst = np.zeros(0, np.int64)
        weight = np.zeros(0, h.dtype)
    adj = SparseAdjacency(n_nodes=n, k=k, src=src, dst=dst, weight=weight,
                          uncertain=np.array(selection.selected, dtype=np.int64))
    return selection, adj, None


# ---------------------------------------------------------------------------
# edge-list text format (build-graph CLI output)


def write_edge_list(path, adjacency, selection):
    """Header 'N K |Omega_u|', then one 'i j weight' line per edge."""
    lines = [f"{adjacency.n_nodes} {adjacency.k} {selection.n_selected}"]
    for s, d, w in adjacency.iter_edges():
        lines.append(f"{s} {d} {w:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
