"""Long-range reasoning on the sparse pixel graph.

One layer updates every node from itself plus a weighted sum over its
neighborhood: the union of 4-connected grid neighbors (local) and the
pruned top-K targets of uncertain nodes (global). The full module wraps
that with 1x1 input/output projections and a residual sum, recomputing
the edge weights differentiably from the projected features while the
discrete structure (which nodes, which edges) is treated as a constant.

An empty uncertain set short-circuits the whole module to the identity.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import graph as graphmod
from . import ops
from .autodiff import Var, as_var
from .errors import ShapeError, ValidationError
from .graph import SparseAdjacency, UncertaintySelection
from .ops import EdgeIndex


@dataclass
class GnnLayerParams:
    """Trainable pieces of one reasoning layer."""

    theta1: object                   # (c', c') array or Var
    theta2: object                   # (c', c') array or Var
    nonlinearity: str = "sigmoid"
    use_edge_weights: bool = True
    include_local: bool = True

    def __post_init__(self):
        t1, t2 = np.asarray(as_var(self.theta1).data), np.asarray(as_var(self.theta2).data)
        if t1.ndim != 2 or t1.shape[0] != t1.shape[1] or t1.shape != t2.shape:
            raise ShapeError(f"theta matrices must be square and equal-shaped, "
                             f"got {t1.shape} and {t2.shape}")
        if self.nonlinearity not in ops.NONLINEARITIES:
            raise ValidationError(f"unknown nonlinearity {self.nonlinearity!r}")


@dataclass
class PsgrConfig:
    """Hyperparameters of the reasoning module."""

    ru: float = 0.1
    k: Optional[int] = None          # None -> floor(N/2) clamped
    norm_mode: str = graphmod.DEFAULT_NORM_MODE
    n_layers: int = 1
    channels_inner: Optional[int] = None   # None -> input channel count
    nonlinearity: str = "sigmoid"
    use_edge_weights: bool = True
    include_local: bool = True

    def __post_init__(self):
        if not 0.0 <= self.ru <= 1.0:
            raise ValidationError(f"ru must be in [0, 1], got {self.ru}")
        if self.n_layers < 1:
            raise ValidationError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.norm_mode not in graphmod.NORM_MODES:
            raise ValidationError(f"norm_mode must be one of {graphmod.NORM_MODES}")
        if self.nonlinearity not in ops.NONLINEARITIES:
            raise ValidationError(f"unknown nonlinearity {self.nonlinearity!r}")


_LOCAL_CACHE = {}


def local_grid_index(h, w):
    """4-connected grid neighborhoods as a CSR edge structure (cached)."""
    key = (int(h), int(w))
    if key not in _LOCAL_CACHE:
        src, dst = [], []
        for r in range(h):
            for c in range(w):
                i = r * w + c
                if r > 0:
                    src.append(i); dst.append(i - w)
                if c > 0:
                    src.append(i); dst.append(i - 1)
                if c < w - 1:
                    src.append(i); dst.append(i + 1)
                if r < h - 1:
                    src.append(i); dst.append(i + w)
        _LOCAL_CACHE[key] = EdgeIndex.from_edges(h * w, np.array(src, np.int64),
                                                 np.array(dst, np.int64))
    return _LOCAL_CACHE[key]


@dataclass
class NeighborhoodSets:
    """Local grid neighbors and global sparse-adjacency targets per node."""

    hw: tuple
    local: EdgeIndex
    global_: EdgeIndex

    @staticmethod
    def build(hw, adjacency):
        h, w = hw
        n = h * w
        if adjacency.n_nodes != n:
            raise ShapeError(f"adjacency has {adjacency.n_nodes} nodes, grid has {n}")
        return NeighborhoodSets(hw=(h, w), local=local_grid_index(h, w),
                                global_=EdgeIndex.from_edges(n, adjacency.src,
                                                             adjacency.dst))

    def local_of(self, i):
        lo, hi = self.local.indptr[i], self.local.indptr[i + 1]
        return self.local.cols[lo:hi]

    def global_of(self, i):
        lo, hi = self.global_.indptr[i], self.global_.indptr[i + 1]
        return self.global_.cols[lo:hi]


def gnn_layer(z, nbhd, adjacency, params, weight_var=None):
    """One reasoning step: F(z @ theta1 + neighborhood_sum(z) @ theta2).

    The neighborhood sum runs over the union of local and global edges;
    a node that is both contributes with weight 1 + its edge weight (the
    dense equivalent is A_local + W_global). ``weight_var`` substitutes a
    differentiable weight vector aligned with the adjacency edge arrays.
    """
    z = as_var(z)
    n, c = z.data.shape
    if adjacency.n_nodes != n:
        raise ShapeError(f"gnn_layer: {adjacency.n_nodes} adjacency nodes vs {n} rows")
    t1, t2 = as_var(params.theta1), as_var(params.theta2)
    if t1.data.shape[0] != c:
        raise ShapeError(f"gnn_layer: theta is {t1.data.shape}, features have {c} channels")

    agg = None
    if params.include_local:
        local = nbhd.local
        ones = np.ones(local.n_edges, dtype=z.data.dtype)
        agg = ops.edge_gather(z, local, ones)
    if adjacency.n_edges > 0:
        if weight_var is not None:
            w = weight_var
        elif params.use_edge_weights:
            w = adjacency.weight.astype(z.data.dtype)
        else:
            w = np.ones(adjacency.n_edges, dtype=z.data.dtype)
        g = ops.edge_gather(z, nbhd.global_, w)
        agg = g if agg is None else ops.add(agg, g)

    pre = ops.matmul(z, t1)
    if agg is not None:
        pre = ops.add(pre, ops.matmul(agg, t2))
    return ops.NONLINEARITIES[params.nonlinearity](pre)


@dataclass
class FrozenStructure:
    """Selection and edge positions held constant across a forward pass."""

    hw: tuple
    selection: UncertaintySelection
    k: int
    src: np.ndarray
    dst: np.ndarray


@dataclass
class PsgrTrace:
    """What the module decided on one forward pass (for dumps and tests)."""

    selection: Optional[UncertaintySelection] = None
    adjacency: Optional[SparseAdjacency] = None
    structure: Optional[FrozenStructure] = None
    skipped: bool = False


def init_params(channels, cfg, rng, dtype=np.float32):
    """Fresh module parameters; the output projection starts at zero so
    the module begins as the identity (residual form)."""
    dtype = np.dtype(dtype).type
    c = int(channels)
    ci = cfg.channels_inner or c
    std_in = 1.0 / np.sqrt(c)
    std_t = 1.0 / np.sqrt(ci)
    params = {
        "in_proj_w": rng.normal((c, ci)).astype(dtype) * dtype(std_in),
        "in_proj_b": np.zeros(ci, dtype=dtype),
        "out_proj_w": np.zeros((ci, c), dtype=dtype),
        "out_proj_b": np.zeros(c, dtype=dtype),
    }
    for layer in range(cfg.n_layers):
        params[f"theta1_{layer}"] = (np.eye(ci, dtype=dtype)
                                     + rng.normal((ci, ci)).astype(dtype) * dtype(0.1 * std_t))
        params[f"theta2_{layer}"] = rng.normal((ci, ci)).astype(dtype) * dtype(0.1 * std_t)
    return params


class PsgrModule:
    """Graph reasoning block: project, build graph, reason, fuse."""

    def __init__(self, channels, cfg, params):
        self.channels = int(channels)
        self.channels_inner = cfg.channels_inner or self.channels
        self.cfg = cfg
        self.params = {k: (v if isinstance(v, Var) else Var(v, requires_grad=True, name=k))
                       for k, v in params.items()}

    def compute_structure(self, f, coarse_probs):
        """Decide the uncertain set and edge positions for an input pair."""
        f_data = f.data if isinstance(f, Var) else np.asarray(f)
        trace = self.forward(as_var(f_data), np.asarray(coarse_probs))[1]
        return trace.structure

    def _validate(self, shape, coarse_shape):
        if len(shape) != 3:
            raise ShapeError(f"psgr_forward: expected h x w x c, got {shape}")
        h, w, c = shape
        if c != self.channels:
            raise ShapeError(f"psgr_forward: module built for {self.channels} channels, "
                             f"input has {c}")
        if tuple(coarse_shape[:2]) != (h, w):
            raise ShapeError(f"psgr_forward: coarse map {tuple(coarse_shape[:2])} does "
                             f"not match features {(h, w)}")

    def forward(self, f, coarse_probs, frozen=None):
        """Refine an h x w x c feature map; returns (refined Var, trace)."""
        f = as_var(f)
        coarse_probs = np.asarray(coarse_probs)
        self._validate(f.data.shape, coarse_probs.shape)
        h, w, c = f.data.shape
        n = h * w
        coarse_rows = coarse_probs.reshape(n, coarse_probs.shape[-1])

        if frozen is not None:
            selection = frozen.selection
        else:
            selection = graphmod.select_uncertain(coarse_rows, self.cfg.ru)
        if selection.n_selected == 0:
            # no uncertain nodes: the module is the identity
            return f, PsgrTrace(selection=selection, skipped=True)

        p = self.params
        nodes = ops.reshape(f, (n, c))
        z0 = ops.add_bias(ops.matmul(nodes, p["in_proj_w"]), p["in_proj_b"])
        z, trace = self._reason_nodes(z0, selection, (h, w), frozen)
        out = ops.add_bias(ops.matmul(z, p["out_proj_w"]), p["out_proj_b"])
        refined = ops.add(f, ops.reshape(out, (h, w, c)))
        return refined, trace

    def forward_batch(self, feat, coarse_probs):
        """Batched refinement: one projection pass, per-sample reasoning.

        The uncertain-set size round(ru*N) is a function of N alone, so a
        batch either reasons on every sample or skips as a whole.
        """
        feat = as_var(feat)
        coarse_probs = np.asarray(coarse_probs)
        if feat.data.ndim != 4:
            raise ShapeError(f"forward_batch: expected (B, h, w, c), got "
                             f"{feat.data.shape}")
        bsz, h, w, c = feat.data.shape
        self._validate((h, w, c), coarse_probs.shape[1:])
        n = h * w
        coarse_rows = coarse_probs.reshape(bsz, n, coarse_probs.shape[-1])
        selections = [graphmod.select_uncertain(coarse_rows[b], self.cfg.ru)
                      for b in range(bsz)]
        if selections[0].n_selected == 0:
            return feat, [PsgrTrace(selection=s, skipped=True) for s in selections]

        p = self.params
        nodes = ops.reshape(feat, (bsz * n, c))
        z_all = ops.reshape(ops.add_bias(ops.matmul(nodes, p["in_proj_w"]),
                                         p["in_proj_b"]),
                            (bsz, n, self.channels_inner))
        zs, traces = [], []
        for b in range(bsz):
            z, trace = self._reason_nodes(ops.index_row(z_all, b), selections[b],
                                          (h, w), None)
            zs.append(z)
            traces.append(trace)
        stacked = ops.reshape(ops.stack_rows(zs), (bsz * n, self.channels_inner))
        out = ops.add_bias(ops.matmul(stacked, p["out_proj_w"]), p["out_proj_b"])
        refined = ops.add(feat, ops.reshape(out, feat.data.shape))
        return refined, traces

    def _reason_nodes(self, z0, selection, hw, frozen=None):
        """Graph construction plus stacked reasoning layers on (N, c') nodes."""
        h, w = hw
        n = z0.data.shape[0]
        p = self.params

        s_raw = ops.matmul(z0, ops.transpose(z0))
        s = ops.zero_diag(ops.relu(s_raw))
        d = ops.row_sum(s)
        if self.cfg.norm_mode == "random_walk":
            s_hat = ops.scale_rows(s, ops.safe_reciprocal(d))
        else:
            r = ops.safe_rsqrt(d)
            s_hat = ops.scale_cols(ops.scale_rows(s, r), r)

        if frozen is not None:
            k, src, dst = frozen.k, frozen.src, frozen.dst
        else:
            k = self.cfg.k if self.cfg.k is not None else graphmod.default_k(n)
            if not 1 <= k <= n - 1:
                raise ValidationError(f"psgr_forward: k must be in [1, {n - 1}], got {k}")
            l1 = np.abs(z0.data).sum(axis=1)
            src_list, dst_list = [], []
            for i in selection.selected:
                i = int(i)
                scores = s_hat.data[i] * l1
                scores[i] = 0.0
                targets = graphmod._top_k_row(scores, i, k)
                src_list.append(np.full(targets.shape[0], i, np.int64))
                dst_list.append(targets)
            src = np.concatenate(src_list)
            dst = np.concatenate(dst_list)

        weights = ops.take_pairs(s_hat, src, dst)
        adjacency = SparseAdjacency(n_nodes=n, k=int(k), src=src, dst=dst,
                                    weight=np.array(weights.data),
                                    uncertain=np.array(selection.selected, np.int64))
        nbhd = NeighborhoodSets.build((h, w), adjacency)
        layer_weights = weights if self.cfg.use_edge_weights else None

        z = z0
        for layer in range(self.cfg.n_layers):
            layer_params = GnnLayerParams(
                theta1=p[f"theta1_{layer}"], theta2=p[f"theta2_{layer}"],
                nonlinearity=self.cfg.nonlinearity,
                use_edge_weights=self.cfg.use_edge_weights,
                include_local=self.cfg.include_local)
            z = gnn_layer(z, nbhd, adjacency, layer_params, weight_var=layer_weights)

        structure = FrozenStructure(hw=(h, w), selection=selection, k=int(k),
                                    src=src, dst=dst)
        return z, PsgrTrace(selection=selection, adjacency=adjacency,
                            structure=structure)


def attention_row_dump(adjacency, i, hw):
    """Row i's edge weights painted onto the h x w grid."""
    h, w = hw
    if adjacency.n_nodes != h * w:
        raise ShapeError(f"adjacency has {adjacency.n_nodes} nodes, grid has {h * w}")
    i = int(i)
    targets, weights = adjacency.row_edges(i)
    if targets.shape[0] == 0:
        raise ValidationError(f"node {i} is not uncertain (no edges to dump)")
    flat = np.zeros(h * w, dtype=np.float64)
    flat[targets] = weights
    return flat.reshape(h, w)
