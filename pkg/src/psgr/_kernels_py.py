"""Pure-numpy fallback for the compiled kernels.

Same call signatures as ``psgr._kernels``; ``num_threads`` is accepted and
ignored (numpy's own threading is not touched by it, so outputs do not
depend on the flag). Matrix products go through BLAS, which trades the
compiled backend's literal left-to-right accumulation for speed while
remaining run-to-run deterministic.
"""

import numpy as np


def matmul_nn(a, b, num_threads=1):
    return a @ b


def matmul_nt(a, b, num_threads=1):
    return a @ b.T


def matmul_tn(a, b, num_threads=1):
    return a.T @ b


def edge_gather_sum(indptr, cols, w, z, num_threads=1):
    """out[i] = sum over row i's edges of w[e] * z[cols[e]]."""
    n_rows = indptr.shape[0] - 1
    out = np.zeros((n_rows, z.shape[1]), dtype=z.dtype)
    src = np.repeat(np.arange(n_rows, dtype=np.int64), np.diff(indptr))
    # np.add.at applies updates in index order -> deterministic
    np.add.at(out, src, w[:, None] * z[cols])
    return out


def edge_scatter_sum(src, dst, w, g, n_rows):
    """out[dst[e]] += w[e] * g[src[e]]."""
    out = np.zeros((n_rows, g.shape[1]), dtype=g.dtype)
    np.add.at(out, dst, w[:, None] * g[src])
    return out


def edge_weight_grad(src, dst, g, z, num_threads=1):
    """dw[e] = <g[src[e]], z[dst[e]]>."""
    return np.einsum("ec,ec->e", g[src], z[dst])
