"""Pixel-wise sparse graph reasoning for segmentation.

Pixels become graph nodes, a coarse prediction flags the uncertain ones,
each uncertain node keeps only its top-K highest-information connections,
and a small GNN propagates long-range context back into the feature map.
Ships with a toy encoder-decoder, a reverse-mode grad engine, synthetic
data, metrics, and a CLI.
"""

from . import _backend
from ._backend import active_backend, compiled_available, set_num_threads
from .tensor import Rng, Tensor, derive_seed, read_pstn, write_pstn

__version__ = "0.1.0"

__all__ = [
    "Rng",
    "Tensor",
    "active_backend",
    "compiled_available",
    "derive_seed",
    "read_pstn",
    "set_num_threads",
    "write_pstn",
    "__version__",
]
