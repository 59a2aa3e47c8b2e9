"""Backend selection: compiled Cython kernels with a numpy fallback.

Three modes, fixed at import time (``PSGR_BACKEND`` env var) and
switchable at runtime with :func:`use`:

* ``compiled`` - every kernel from the extension; matrix products use a
  literal ascending-k accumulation, so results are bitwise identical for
  any worker count.
* ``python``   - every kernel from numpy (BLAS matrix products).
* ``auto``     - measured-best mix (see benchmarks/bench_backends.py):
  BLAS for matrix products, compiled kernels for edge aggregation.
  Falls back to ``python`` when the extension is not built.

Worker count for compiled kernels comes from ``PSGR_THREADS`` or
:func:`set_num_threads`; it only affects how rows are split across
threads, never the result.
"""

import os

import numpy as np

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

_name = None
_gemm = _kernels_py     # matrix-product kernels
_edge = _kernels_py     # edge aggregation kernels
_num_threads = 1


class BackendError(RuntimeError):
    pass


def use(name):
    """Switch backend at runtime ('auto', 'python' or 'compiled')."""
    global _name, _gemm, _edge
    if name in ("compiled",) and _compiled is None:
        raise BackendError("compiled kernels are not built")
    if name == "python":
        _gemm = _edge = _kernels_py
    elif name == "compiled":
        _gemm = _edge = _compiled
    elif name == "auto":
        _gemm = _kernels_py
        _edge = _compiled if _compiled is not None else _kernels_py
    else:
        raise BackendError(f"unknown backend {name!r}")
    _name = name
    return _name


def active_backend():
    return _name


def compiled_available():
    return _compiled is not None


def set_num_threads(n):
    global _num_threads
    n = int(n)
    if n < 1:
        raise BackendError(f"thread count must be >= 1, got {n}")
    _num_threads = n


def get_num_threads():
    return _num_threads


def _as2d(a, name):
    a = np.ascontiguousarray(a)
    if a.ndim != 2:
        raise BackendError(f"{name}: expected 2-d array, got shape {a.shape}")
    if a.dtype not in (np.float32, np.float64):
        raise BackendError(f"{name}: expected f32/f64, got {a.dtype}")
    return a


# Below these work sizes a parallel region costs more than it saves
# (and on few-core machines it contends with BLAS threads); results are
# identical either way because every kernel is thread-count-invariant.
_GEMM_PAR_MIN = 2_000_000     # m*k*n multiply-adds
_EDGE_PAR_MIN = 200_000       # edges * channels


def _gemm_threads(m, k, n):
    return _num_threads if m * k * n >= _GEMM_PAR_MIN else 1


def _edge_threads(n_edges, n_channels):
    return _num_threads if n_edges * n_channels >= _EDGE_PAR_MIN else 1


def matmul(a, b):
    """a @ b for 2-d arrays of one shared dtype."""
    a = _as2d(a, "matmul")
    b = _as2d(b, "matmul")
    if a.dtype != b.dtype:
        raise BackendError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.shape[1] != b.shape[0]:
        raise BackendError(f"matmul: inner dims disagree {a.shape} x {b.shape}")
    return _gemm.matmul_nn(a, b, _gemm_threads(a.shape[0], a.shape[1], b.shape[1]))


def matmul_nt(a, b):
    """a @ b.T without materializing the transpose."""
    a = _as2d(a, "matmul_nt")
    b = _as2d(b, "matmul_nt")
    if a.shape[1] != b.shape[1]:
        raise BackendError(f"matmul_nt: inner dims disagree {a.shape} x {b.shape}")
    return _gemm.matmul_nt(a, b, _gemm_threads(a.shape[0], a.shape[1], b.shape[0]))


def matmul_tn(a, b):
    """a.T @ b without materializing the transpose."""
    a = _as2d(a, "matmul_tn")
    b = _as2d(b, "matmul_tn")
    if a.shape[0] != b.shape[0]:
        raise BackendError(f"matmul_tn: inner dims disagree {a.shape} x {b.shape}")
    return _gemm.matmul_tn(a, b, _gemm_threads(a.shape[1], a.shape[0], b.shape[1]))


def edge_gather_sum(indptr, cols, w, z):
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    cols = np.ascontiguousarray(cols, dtype=np.int64)
    w = np.ascontiguousarray(w)
    z = np.ascontiguousarray(z)
    return _edge.edge_gather_sum(indptr, cols, w, z,
                                 _edge_threads(cols.shape[0], z.shape[1]))


def edge_scatter_sum(src, dst, w, g, n_rows):
    src = np.ascontiguousarray(src, dtype=np.int64)
    dst = np.ascontiguousarray(dst, dtype=np.int64)
    w = np.ascontiguousarray(w)
    g = np.ascontiguousarray(g)
    return _edge.edge_scatter_sum(src, dst, w, g, int(n_rows))


def edge_weight_grad(src, dst, g, z):
    src = np.ascontiguousarray(src, dtype=np.int64)
    dst = np.ascontiguousarray(dst, dtype=np.int64)
    g = np.ascontiguousarray(g)
    z = np.ascontiguousarray(z)
    return _edge.edge_weight_grad(src, dst, g, z,
                                 _edge_threads(src.shape[0], g.shape[1]))


_env_choice = os.environ.get("PSGR_BACKEND", "auto")
if _env_choice not in ("auto", "python", "compiled"):
    raise BackendError(f"PSGR_BACKEND must be auto|python|compiled, got {_env_choice!r}")
use(_env_choice)
set_num_threads(int(os.environ.get("PSGR_THREADS") or os.cpu_count() or 1))
