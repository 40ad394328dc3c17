"""Deep graph network with attention message passing and pointwise dense pooling.

Message passing per node:  x'_i = W1 x_i + sum_j alpha_ij W2 x_j  with
alpha from softmax over the neighbors of i of (W3 x_i)^T (W4 x_j) scaled
by the per-head dimension. Each layer is wrapped res+ style:
x + conv(gelu(norm(x))), so the stack can grow deep without oversmoothing.
Readout is either global mean pooling or the pointwise dense pooling
G = (1/N) * sum_i alpha_i x_i with alpha_i = softmax(W x_i) over the
graph's nodes (the 1/N factor is kept literally; ``strict_eq5=False``
drops it).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint as ckpt
from .errors import EmptyGraph, InputError
from .optim import train_with_schedule
from .smiles import BOND_ORDER_INDEX, ELEMENT_INDEX, ELEMENTS, MolGraph, Ring, perceive_rings
from .tensor import Tensor, astensor, gelu, l1_loss, layer_norm, softmax_lastdim, take_rows
from .tokengraph import glorot_uniform
from .transformer import merge_heads, split_heads

NEIGHBOR_MASK = -1e30  # inert under exp(); distinct from any semantic mask

# Integer feature codes: 9 per node, 3 per edge, embedded via lookup tables.
NODE_FEATURE_SIZES = (len(ELEMENTS), 12, 5, 2, 4, 9, 8, 8, 8)
EDGE_FEATURE_SIZES = (4, 2, 9)


@dataclass
class PDConfig:
    n_layers: int = 3
    hidden: int = 64
    n_heads: int = 4
    pooling: str = "pointwise_dense"  # or "mean"
    strict_eq5: bool = True
    edge_features: bool = False
    max_lr: float = 2e-4
    min_lr: float = 1e-8
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.hidden % self.n_heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by n_heads {self.n_heads}")
        if self.pooling not in ("mean", "pointwise_dense"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if not self.min_lr < self.max_lr:
            raise ValueError("min_lr must be below max_lr")


def _ring_size_code(size: int | None) -> int:
    if size is None:
        return 0
    return min(size, 10) - 2


def atom_feature_codes(mol: MolGraph, rings: list[Ring] | None = None) -> np.ndarray:
    """9 integer codes per atom: element, degree, charge, aromaticity, ring
    membership count, smallest containing ring, and neighbor counts by
    bond order class."""
    if rings is None:
        rings = perceive_rings(mol)
    n = mol.n_atoms
    ring_count = [0] * n
    min_ring: list[int | None] = [None] * n
    for ring in rings:
        for member in ring.atom_indices:
            ring_count[member] += 1
            if min_ring[member] is None or len(ring) < min_ring[member]:
                min_ring[member] = len(ring)
    single = [0] * n
    multi = [0] * n
    arom = [0] * n
    for bond in mol.bonds:
        for end in (bond.a, bond.b):
            if bond.order == "single":
                single[end] += 1
            elif bond.order == "aromatic":
                arom[end] += 1
            else:
                multi[end] += 1
    codes = np.zeros((n, 9), dtype=np.int64)
    for i, atom in enumerate(mol.atoms):
        codes[i] = (
            ELEMENT_INDEX[atom.element],
            min(len(mol.adjacency[i]), 11),
            max(-2, min(2, atom.formal_charge)) + 2,
            1 if atom.aromatic else 0,
            min(ring_count[i], 3),
            _ring_size_code(min_ring[i]),
            min(single[i], 7),
            min(multi[i], 7),
            min(arom[i], 7),
        )
    return codes


def bond_feature_codes(mol: MolGraph, rings: list[Ring] | None = None) -> np.ndarray:
    """3 integer codes per bond: order, in-ring flag, smallest containing ring."""
    if rings is None:
        rings = perceive_rings(mol)
    ring_of_edge: dict[tuple[int, int], int] = {}
    for ring in rings:
        members = ring.atom_indices
        for a, b in zip(members, members[1:] + members[:1]):
            key = (a, b) if a < b else (b, a)
            ring_of_edge[key] = min(ring_of_edge.get(key, len(ring)), len(ring))
    codes = np.zeros((mol.n_bonds, 3), dtype=np.int64)
    for k, bond in enumerate(mol.bonds):
        size = ring_of_edge.get(bond.key())
        codes[k] = (BOND_ORDER_INDEX[bond.order], 1 if size else 0, _ring_size_code(size))
    return codes


@dataclass
class PDGraph:
    """One molecule as integer node/edge codes with a directed edge list
    (each bond appears in both directions)."""

    node_codes: np.ndarray  # [A, 9]
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_codes: np.ndarray  # [2B, 3]

    @property
    def n_nodes(self) -> int:
        return self.node_codes.shape[0]


def mol_to_pd_graph(mol: MolGraph, rings: list[Ring] | None = None) -> PDGraph:
    if rings is None:
        rings = perceive_rings(mol)
    node_codes = atom_feature_codes(mol, rings)
    per_bond = bond_feature_codes(mol, rings)
    src, dst, codes = [], [], []
    for k, bond in enumerate(mol.bonds):
        src += [bond.a, bond.b]
        dst += [bond.b, bond.a]
        codes += [per_bond[k], per_bond[k]]
    edge_codes = np.asarray(codes, dtype=np.int64).reshape(len(src), 3)
    return PDGraph(node_codes, np.asarray(src, dtype=np.int64),
                   np.asarray(dst, dtype=np.int64), edge_codes)


@dataclass
class GraphBatch:
    """Concatenated graphs: contiguous graph ids, all edges within one graph."""

    node_codes: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_codes: np.ndarray
    graph_id: np.ndarray
    n_graphs: int


def build_graph_batch(graphs: list[PDGraph]) -> GraphBatch:
    node_codes, srcs, dsts, ecodes, gids = [], [], [], [], []
    offset = 0
    for g, graph in enumerate(graphs):
        node_codes.append(graph.node_codes)
        srcs.append(graph.edge_src + offset)
        dsts.append(graph.edge_dst + offset)
        ecodes.append(graph.edge_codes)
        gids.append(np.full(graph.n_nodes, g, dtype=np.int64))
        offset += graph.n_nodes
    return GraphBatch(
        np.concatenate(node_codes) if node_codes else np.zeros((0, 9), dtype=np.int64),
        np.concatenate(srcs) if srcs else np.zeros(0, dtype=np.int64),
        np.concatenate(dsts) if dsts else np.zeros(0, dtype=np.int64),
        np.concatenate(ecodes) if ecodes else np.zeros((0, 3), dtype=np.int64),
        np.concatenate(gids) if gids else np.zeros(0, dtype=np.int64),
        len(graphs),
    )


class PDModel:
    def __init__(self, cfg: PDConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.hidden
        self.node_tables = [Tensor(glorot_uniform(rng, rows, d), requires_grad=True)
                            for rows in NODE_FEATURE_SIZES]
        self.edge_tables = (
            [Tensor(glorot_uniform(rng, rows, d), requires_grad=True) for rows in EDGE_FEATURE_SIZES]
            if cfg.edge_features else []
        )
        self.layers = []
        for _ in range(cfg.n_layers):
            layer = {
                "ln_g": Tensor(np.ones(d), requires_grad=True),
                "ln_b": Tensor(np.zeros(d), requires_grad=True),
            }
            for name in ("w1", "w2", "w3", "w4"):
                layer[name] = Tensor(glorot_uniform(rng, d, d), requires_grad=True)
            self.layers.append(layer)
        self.pool_w = Tensor(glorot_uniform(rng, d, 1), requires_grad=True)
        self.head_w = Tensor(glorot_uniform(rng, d, 1), requires_grad=True)
        self.head_b = Tensor(np.zeros(1), requires_grad=True)

    def param_dict(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, table in enumerate(self.node_tables):
            out[f"node_table:{i}"] = table
        for i, table in enumerate(self.edge_tables):
            out[f"edge_table:{i}"] = table
        for i, layer in enumerate(self.layers):
            for key in sorted(layer):
                out[f"layer{i}:{key}"] = layer[key]
        out["pool_w"] = self.pool_w
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.param_dict().values())


def _neighbor_masks(n_nodes: int, edge_src, edge_dst) -> tuple[np.ndarray, np.ndarray]:
    mask = np.full((n_nodes, n_nodes), NEIGHBOR_MASK)
    mask[np.asarray(edge_dst, dtype=np.int64), np.asarray(edge_src, dtype=np.int64)] = 0.0
    has_neighbor = (mask == 0.0).any(axis=1).astype(np.float64).reshape(n_nodes, 1)
    return mask, has_neighbor


def _conv(x: Tensor, nbr_mask: Tensor, has_nbr: Tensor, params, n_heads: int,
          edge_bias: Tensor | None = None) -> Tensor:
    d_head = x.shape[-1] // n_heads
    q = split_heads(x @ params["w3"], n_heads)
    k = split_heads(x @ params["w4"], n_heads)
    v = split_heads(x @ params["w2"], n_heads)
    perm = list(range(q.ndim))
    perm[-2], perm[-1] = perm[-1], perm[-2]
    scores = (q @ k.transpose(perm)) * (1.0 / math.sqrt(d_head))
    scores = scores + nbr_mask
    if edge_bias is not None:
        scores = scores + edge_bias
    attn = softmax_lastdim(scores)
    messages = merge_heads(attn @ v)
    return x @ params["w1"] + messages * has_nbr


def _edge_key_bias(model: PDModel, x: Tensor, batch: GraphBatch, params, n_heads: int) -> Tensor | None:
    """Additive attention bias from embedded edge codes: the key input for
    edge (j -> i) becomes x_j + e_ij, contributing q_i . (W4 e_ij)."""
    if not model.cfg.edge_features or batch.edge_src.size == 0:
        return None
    n = x.shape[0]
    q = split_heads(x @ params["w3"], n_heads)
    d_head = x.shape[-1] // n_heads
    bias = None
    codes = [tuple(row) for row in batch.edge_codes]
    for code in sorted(set(codes)):
        e_vec = None
        for col, idx in enumerate(code):
            row = take_rows(model.edge_tables[col], [idx], axis=0)
            e_vec = row if e_vec is None else e_vec + row
        key = split_heads(e_vec @ params["w4"], n_heads)  # [heads, 1, d_head]
        perm = list(range(key.ndim))
        perm[-2], perm[-1] = perm[-1], perm[-2]
        per_node = (q @ key.transpose(perm)) * (1.0 / math.sqrt(d_head))  # [heads, n, 1]
        member = np.zeros((n, n))
        for e, c in enumerate(codes):
            if c == code:
                member[batch.edge_dst[e], batch.edge_src[e]] = 1.0
        term = per_node * Tensor(member)
        bias = term if bias is None else bias + term
    return bias


def transformer_conv(x, edge_src, edge_dst, params, n_heads: int) -> Tensor:
    """One attention message-passing step over an explicit edge list.

    Nodes without in-neighbors keep only their W1 transform.
    """
    x = astensor(x)
    mask, has_nbr = _neighbor_masks(x.shape[0], edge_src, edge_dst)
    return _conv(x, Tensor(mask), Tensor(has_nbr), params, n_heads)


def deep_gcn_layer(x, edge_src, edge_dst, params, n_heads: int) -> Tensor:
    """res+ wrapper: x + conv(gelu(layer_norm(x)))."""
    x = astensor(x)
    mask, has_nbr = _neighbor_masks(x.shape[0], edge_src, edge_dst)
    h = gelu(layer_norm(x, params["ln_g"], params["ln_b"]))
    return x + _conv(h, Tensor(mask), Tensor(has_nbr), params, n_heads)


def _graph_counts(graph_id: np.ndarray, n_graphs: int | None) -> np.ndarray:
    graph_id = np.asarray(graph_id, dtype=np.int64)
    if n_graphs is None:
        n_graphs = int(graph_id.max()) + 1 if graph_id.size else 0
    counts = np.bincount(graph_id, minlength=n_graphs)
    if n_graphs == 0 or (counts == 0).any():
        raise EmptyGraph(f"graph with no nodes in batch of {n_graphs}")
    return counts


def mean_pool(x, graph_id, n_graphs: int | None = None) -> Tensor:
    """Per-graph mean of node embeddings."""
    x = astensor(x)
    gid = np.asarray(graph_id, dtype=np.int64)
    counts = _graph_counts(gid, n_graphs)
    pool = np.zeros((counts.size, x.shape[0]))
    pool[gid, np.arange(x.shape[0])] = 1.0 / counts[gid]
    return Tensor(pool) @ x


def pd_pool(x, graph_id, w, n_graphs: int | None = None, strict_eq5: bool = True) -> Tensor:
    """Pointwise dense pooling: per-graph softmax of per-node scores W x_i,
    then the weighted node sum scaled by 1/N (dropped if ``strict_eq5`` is
    false, leaving the plain attention-weighted sum)."""
    x = astensor(x)
    w = astensor(w)
    gid = np.asarray(graph_id, dtype=np.int64)
    counts = _graph_counts(gid, n_graphs)
    scores = (x @ w).transpose((1, 0))  # [1, N]
    member = np.full((counts.size, x.shape[0]), NEIGHBOR_MASK)
    member[gid, np.arange(x.shape[0])] = 0.0
    alpha = softmax_lastdim(scores + Tensor(member))  # [n_graphs, N]
    pooled = alpha @ x
    if strict_eq5:
        pooled = pooled * Tensor((1.0 / counts).reshape(-1, 1))
    return pooled


def _embed_nodes(model: PDModel, batch: GraphBatch) -> Tensor:
    n = batch.node_codes.shape[0]
    feats = None
    for col, rows in enumerate(NODE_FEATURE_SIZES):
        onehot = np.zeros((n, rows))
        onehot[np.arange(n), batch.node_codes[:, col]] = 1.0
        term = Tensor(onehot) @ model.node_tables[col]
        feats = term if feats is None else feats + term
    return feats


def pd_forward(model: PDModel, batch: GraphBatch) -> Tensor:
    """Embed, run the deep layers, pool, and apply the scalar head."""
    x = _embed_nodes(model, batch)
    mask, has_nbr = _neighbor_masks(x.shape[0], batch.edge_src, batch.edge_dst)
    mask_t, has_t = Tensor(mask), Tensor(has_nbr)
    for params in model.layers:
        h = gelu(layer_norm(x, params["ln_g"], params["ln_b"]))
        bias = _edge_key_bias(model, h, batch, params, model.cfg.n_heads)
        x = x + _conv(h, mask_t, has_t, params, model.cfg.n_heads, edge_bias=bias)
    if model.cfg.pooling == "mean":
        pooled = mean_pool(x, batch.graph_id, batch.n_graphs)
    else:
        pooled = pd_pool(x, batch.graph_id, model.pool_w, batch.n_graphs,
                         strict_eq5=model.cfg.strict_eq5)
    return (pooled @ model.head_w + model.head_b).reshape((batch.n_graphs,))


def pd_predict(model: PDModel, graphs: list[PDGraph], chunk: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(graphs), chunk):
        batch = build_graph_batch(graphs[start : start + chunk])
        out.append(pd_forward(model, batch).data)
    return np.concatenate(out) if out else np.zeros(0)


def pd_train(dataset: list[tuple[PDGraph, float]], cfg: PDConfig) -> tuple[PDModel, dict]:
    """L1-trained PD-DGN with Adam under the sine LR schedule."""
    if not dataset:
        raise ValueError("empty dataset")
    model = PDModel(cfg)
    graphs = [g for g, _ in dataset]
    targets = np.asarray([t for _, t in dataset], dtype=np.float64)

    def loss_for_indices(indices):
        batch = build_graph_batch([graphs[i] for i in indices])
        return l1_loss(pd_forward(model, batch), targets[indices])

    def eval_fn():
        return float(np.mean(np.abs(pd_predict(model, graphs) - targets)))

    history = train_with_schedule(
        model.parameters(), loss_for_indices, len(dataset),
        epochs=cfg.epochs, batch_size=cfg.batch_size,
        min_lr=cfg.min_lr, max_lr=cfg.max_lr,
        seed=(cfg.seed, 1), eval_fn=eval_fn,
    )
    return model, history


def save_pd_checkpoint(model: PDModel, path) -> None:
    ckpt.save_checkpoint(path, "pddgn", asdict(model.cfg),
                         {k: v.data for k, v in model.param_dict().items()})


def load_pd_checkpoint(path) -> PDModel:
    kind, config, params = ckpt.load_checkpoint(path)
    if kind != "pddgn":
        raise InputError(f"{path}: checkpoint kind {kind!r}, expected 'pddgn'")
    model = PDModel(PDConfig(**config))
    tensors = model.param_dict()
    for name, arr in params.items():
        tensors[name].data = arr
    return model
