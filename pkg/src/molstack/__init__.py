"""molstack: desk-scale molecular property prediction toolkit.

SMILES parsing with ring perception, token-graph transformers with masked
attention, a deep graph network with pointwise dense pooling, structural
channel sampling with denoising and knowledge-guided regularization, and
an out-of-fold stacking pipeline with robust meta-regression and weighted
blending.
"""

__version__ = "0.1.0"

from .smiles import (  # noqa: F401
    Atom,
    Bond,
    MolGraph,
    Ring,
    molecule_stats,
    parse_smiles,
    perceive_rings,
)
from .tensor import Tensor  # noqa: F401
from .tokengraph import TokenGraph, build_attention_mask, build_token_graph  # noqa: F401
