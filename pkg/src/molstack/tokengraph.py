"""Token graphs over molecules.

One node for the whole molecule, one per atom, one per bond, one per
perceived ring. Edges follow four rules: bond endpoints are linked, bond
nodes link to both endpoints, ring nodes link to their member atoms, and
the molecule node links to everything. Attention over the token graph is
masked by subtracting 10 from the pre-softmax score of every non-edge
pair (self-attention stays unmasked).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import InconsistentRings
from .smiles import BOND_ORDER_INDEX, ELEMENT_INDEX, ELEMENTS, MolGraph, Ring

MASK_OFF = -10.0

MAX_HEAVY_COUNT = 20  # molecule-node count embedding is capped here
MAX_RING_SIZE = 15  # ring-size embedding cap
MAX_DEGREE = 11  # degree embedding cap
CHARGE_SPAN = 2  # formal charge clamped to [-2, +2]

# Embedding tables, in the fixed order they are sampled.
TABLE_SIZES = {
    "mol_count": MAX_HEAVY_COUNT + 1,
    "element": len(ELEMENTS),
    "aromatic": 2,
    "charge": 2 * CHARGE_SPAN + 1,
    "degree": MAX_DEGREE + 1,
    "bond_order": 4,
    "ring_size": MAX_RING_SIZE + 1,
}
TABLE_ORDER = tuple(TABLE_SIZES)


@dataclass(frozen=True)
class FeatureInitSpec:
    """How a token's initial embedding is assembled: rows to sum from the
    named tables, plus scalars added to fixed dimensions."""

    embedding_indices: tuple[tuple[str, int], ...]
    additive_scalars: tuple[tuple[int, float], ...] = ()


@dataclass(frozen=True)
class TokenNode:
    kind: str  # molecule | atom | bond | ring
    source_index: int | None
    init_spec: FeatureInitSpec


@dataclass
class TokenGraph:
    nodes: list[TokenNode]
    edges: set[tuple[int, int]]  # unordered pairs stored as (i < j)
    n_tokens: int


def _atom_spec(mol: MolGraph, i: int) -> FeatureInitSpec:
    atom = mol.atoms[i]
    charge = max(-CHARGE_SPAN, min(CHARGE_SPAN, atom.formal_charge))
    return FeatureInitSpec(
        embedding_indices=(
            ("element", ELEMENT_INDEX[atom.element]),
            ("aromatic", 1 if atom.aromatic else 0),
            ("charge", charge + CHARGE_SPAN),
            ("degree", min(len(mol.adjacency[i]), MAX_DEGREE)),
        )
    )


def build_token_graph(mol: MolGraph, rings: list[Ring]) -> TokenGraph:
    """Assemble the token graph for one molecule.

    Node order: molecule node first, then atoms, bonds, rings in source
    order. Pass ``rings`` from ``perceive_rings(mol)``.
    """
    n_atoms, n_bonds, n_rings = mol.n_atoms, mol.n_bonds, len(rings)
    nodes: list[TokenNode] = []

    mol_spec = FeatureInitSpec(
        embedding_indices=(("mol_count", min(n_atoms, MAX_HEAVY_COUNT)),),
        additive_scalars=((0, 1.0 / n_atoms),),
    )
    nodes.append(TokenNode("molecule", None, mol_spec))
    for i in range(n_atoms):
        nodes.append(TokenNode("atom", i, _atom_spec(mol, i)))
    for k, bond in enumerate(mol.bonds):
        spec = FeatureInitSpec(embedding_indices=(("bond_order", BOND_ORDER_INDEX[bond.order]),))
        nodes.append(TokenNode("bond", k, spec))
    for r, ring in enumerate(rings):
        spec = FeatureInitSpec(embedding_indices=(("ring_size", min(len(ring), MAX_RING_SIZE)),))
        nodes.append(TokenNode("ring", r, spec))

    atom_node = lambda i: 1 + i
    bond_node = lambda k: 1 + n_atoms + k
    ring_node = lambda r: 1 + n_atoms + n_bonds + r

    edges: set[tuple[int, int]] = set()

    def add_(i: int, j: int) -> None:
        edges.add((i, j) if i < j else (j, i))

    for k, bond in enumerate(mol.bonds):
        add_(atom_node(bond.a), atom_node(bond.b))
        add_(atom_node(bond.a), bond_node(k))
        add_(atom_node(bond.b), bond_node(k))
    for r, ring in enumerate(rings):
        for member in ring.atom_indices:
            if not (0 <= member < n_atoms):
                raise InconsistentRings(f"ring {r} references atom {member} of {n_atoms}")
            add_(ring_node(r), atom_node(member))
    n_tokens = 1 + n_atoms + n_bonds + n_rings
    for j in range(1, n_tokens):
        add_(0, j)

    return TokenGraph(nodes, edges, n_tokens)


def build_attention_mask(g: TokenGraph) -> np.ndarray:
    """Additive pre-softmax mask: 0 on edges and the diagonal, -10 elsewhere."""
    mask = np.full((g.n_tokens, g.n_tokens), MASK_OFF, dtype=np.float64)
    np.fill_diagonal(mask, 0.0)
    for i, j in g.edges:
        mask[i, j] = 0.0
        mask[j, i] = 0.0
    return mask


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def make_embedding_tables(width: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Sample every embedding table Glorot-uniform, once per model."""
    return {name: glorot_uniform(rng, rows, width) for name, rows in TABLE_SIZES.items()}


def init_token_features(g: TokenGraph, width: int, rng_seed: int) -> np.ndarray:
    """Initial [n_tokens, width] feature matrix for one token graph.

    Tables are sampled from ``rng_seed``; each token sums its table rows,
    then additive scalars land on their designated dimensions (the
    inverse-atom-count scalar on dimension 0).
    """
    if width < 1:
        raise ValueError("width must be >= 1")
    tables = make_embedding_tables(width, np.random.default_rng(rng_seed))
    feats = np.zeros((g.n_tokens, width), dtype=np.float64)
    for t, node in enumerate(g.nodes):
        for table, idx in node.init_spec.embedding_indices:
            feats[t] += tables[table][idx]
        for dim, value in node.init_spec.additive_scalars:
            feats[t, dim] += value
    return feats


def token_graph_to_json(g: TokenGraph) -> str:
    """Stable JSON serialization for debugging and golden tests."""
    doc = {
        "n_tokens": g.n_tokens,
        "nodes": [
            {
                "kind": node.kind,
                "source_index": node.source_index,
                "embedding_indices": [list(pair) for pair in node.init_spec.embedding_indices],
                "additive_scalars": [list(pair) for pair in node.init_spec.additive_scalars],
            }
            for node in g.nodes
        ],
        "edges": [list(edge) for edge in sorted(g.edges)],
    }
    return json.dumps(doc, sort_keys=True)
