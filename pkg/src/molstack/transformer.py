"""Masked-attention transformer over token graphs.

Pre-norm blocks: multi-head attention whose pre-softmax scores get the
token-graph mask added (0 on edges/diagonal, -10 on non-edges), then two
consecutive feed-forward sublayers (norm, linear, GELU, linear, residual).
The prediction is a dense head on the molecule node's final embedding.
Batches pad to the largest token count; padding rows/columns use -1e9,
kept distinct from the semantic -10.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint as ckpt
from .errors import InputError
from .optim import sine_lr, train_with_schedule
from .tensor import Tensor, gelu, l1_loss, layer_norm, softmax_lastdim, take_rows
from .tokengraph import (
    TABLE_ORDER,
    TABLE_SIZES,
    TokenGraph,
    build_attention_mask,
    glorot_uniform,
)

PAD_MASK = -1e9


@dataclass
class MTConfig:
    n_layers: int = 2
    width: int = 64
    n_heads: int = 4
    ffn_multiplier: int = 4
    max_lr: float = 2e-4
    min_lr: float = 1e-8
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.width % self.n_heads != 0:
            raise ValueError(f"width {self.width} not divisible by n_heads {self.n_heads}")
        if not self.min_lr < self.max_lr:
            raise ValueError("min_lr must be below max_lr")


_LAYER_WEIGHTS = ("wq", "wk", "wv", "wo")
_LAYER_FFNS = ("ffn1", "ffn2")


class MTModel:
    """Embedding tables, transformer layers, and the scalar head."""

    def __init__(self, cfg: MTConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        w = cfg.width
        self.tables = {
            name: Tensor(glorot_uniform(rng, rows, w), requires_grad=True)
            for name, rows in TABLE_SIZES.items()
        }
        self.layers = [self._init_layer(rng) for _ in range(cfg.n_layers)]
        self.head_w = Tensor(glorot_uniform(rng, w, 1), requires_grad=True)
        self.head_b = Tensor(np.zeros(1), requires_grad=True)

    def _init_layer(self, rng) -> dict[str, Tensor]:
        w = self.cfg.width
        hidden = w * self.cfg.ffn_multiplier
        p: dict[str, Tensor] = {}
        p["ln_attn_g"] = Tensor(np.ones(w), requires_grad=True)
        p["ln_attn_b"] = Tensor(np.zeros(w), requires_grad=True)
        for name in _LAYER_WEIGHTS:
            p[name] = Tensor(glorot_uniform(rng, w, w), requires_grad=True)
            p["b" + name[1:]] = Tensor(np.zeros(w), requires_grad=True)
        for ffn in _LAYER_FFNS:
            p[f"ln_{ffn}_g"] = Tensor(np.ones(w), requires_grad=True)
            p[f"ln_{ffn}_b"] = Tensor(np.zeros(w), requires_grad=True)
            p[f"{ffn}_w1"] = Tensor(glorot_uniform(rng, w, hidden), requires_grad=True)
            p[f"{ffn}_b1"] = Tensor(np.zeros(hidden), requires_grad=True)
            p[f"{ffn}_w2"] = Tensor(glorot_uniform(rng, hidden, w), requires_grad=True)
            p[f"{ffn}_b2"] = Tensor(np.zeros(w), requires_grad=True)
        return p

    def param_dict(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in TABLE_ORDER:
            out[f"table:{name}"] = self.tables[name]
        for i, layer in enumerate(self.layers):
            for key in sorted(layer):
                out[f"layer{i}:{key}"] = layer[key]
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.param_dict().values())


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[..., n, width] -> [..., heads, n, width/heads]."""
    *lead, n, w = x.shape
    out = x.reshape(tuple(lead) + (n, n_heads, w // n_heads))
    perm = list(range(out.ndim))
    perm[-3], perm[-2] = perm[-2], perm[-3]
    return out.transpose(perm)


def merge_heads(x: Tensor) -> Tensor:
    """[..., heads, n, d_head] -> [..., n, heads*d_head]."""
    perm = list(range(x.ndim))
    perm[-3], perm[-2] = perm[-2], perm[-3]
    swapped = x.transpose(perm)
    *lead, n, h, dh = swapped.shape
    return swapped.reshape(tuple(lead) + (n, h * dh))


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention with an additive mask.

    q/k/v are [..., n, width]; the mask broadcasts against the per-head
    [..., heads, n, n] score matrix.
    """
    d_head = q.shape[-1] // n_heads
    qh = split_heads(q, n_heads)
    kh = split_heads(k, n_heads)
    vh = split_heads(v, n_heads)
    perm = list(range(qh.ndim))
    perm[-2], perm[-1] = perm[-1], perm[-2]
    scores = (qh @ kh.transpose(perm)) * (1.0 / math.sqrt(d_head))
    attn = softmax_lastdim(scores, additive_mask=mask)
    return merge_heads(attn @ vh)


def mt_block(x, mask, params: dict[str, Tensor], n_heads: int) -> Tensor:
    """One transformer block: pre-norm masked attention, then two
    feed-forward sublayers, all with residual connections."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    mask = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=np.float64))
    h = layer_norm(x, params["ln_attn_g"], params["ln_attn_b"])
    q = h @ params["wq"] + params["bq"]
    k = h @ params["wk"] + params["bk"]
    v = h @ params["wv"] + params["bv"]
    ctx = masked_attention(q, k, v, mask, n_heads)
    x = x + (ctx @ params["wo"] + params["bo"])
    for ffn in _LAYER_FFNS:
        h = layer_norm(x, params[f"ln_{ffn}_g"], params[f"ln_{ffn}_b"])
        inner = gelu(h @ params[f"{ffn}_w1"] + params[f"{ffn}_b1"])
        x = x + (inner @ params[f"{ffn}_w2"] + params[f"{ffn}_b2"])
    return x


@dataclass
class TokenBatch:
    """Padded batch: per-table one-hot selections over flattened slots,
    the dimension-0 additive scalars, and the stacked attention mask."""

    n_graphs: int
    n_max: int
    selections: dict[str, np.ndarray]
    scalar0: np.ndarray
    mask: np.ndarray  # [B, 1, n_max, n_max]
    n_tokens: list[int]


def pad_token_batch(graphs: list[TokenGraph]) -> TokenBatch:
    n_graphs = len(graphs)
    n_max = max(g.n_tokens for g in graphs)
    total = n_graphs * n_max
    selections = {name: np.zeros((total, rows)) for name, rows in TABLE_SIZES.items()}
    scalar0 = np.zeros(total)
    mask = np.full((n_graphs, 1, n_max, n_max), PAD_MASK)
    for b, g in enumerate(graphs):
        base = b * n_max
        for t, node in enumerate(g.nodes):
            for table, idx in node.init_spec.embedding_indices:
                selections[table][base + t, idx] = 1.0
            for dim, value in node.init_spec.additive_scalars:
                if dim == 0:
                    scalar0[base + t] += value
        mask[b, 0, : g.n_tokens, : g.n_tokens] = build_attention_mask(g)
    return TokenBatch(n_graphs, n_max, selections, scalar0, mask, [g.n_tokens for g in graphs])


def _embed_batch(model: MTModel, batch: TokenBatch) -> Tensor:
    feats = None
    for name in TABLE_ORDER:
        term = Tensor(batch.selections[name]) @ model.tables[name]
        feats = term if feats is None else feats + term
    additive = np.zeros((batch.n_graphs * batch.n_max, model.cfg.width))
    additive[:, 0] = batch.scalar0
    feats = feats + Tensor(additive)
    return feats.reshape((batch.n_graphs, batch.n_max, model.cfg.width))


def _forward_batch(model: MTModel, batch: TokenBatch) -> Tensor:
    x = _embed_batch(model, batch)
    mask = Tensor(batch.mask)
    for layer in model.layers:
        x = mt_block(x, mask, layer, model.cfg.n_heads)
    molecule = take_rows(x, [0], axis=1).reshape((batch.n_graphs, model.cfg.width))
    return (molecule @ model.head_w + model.head_b).reshape((batch.n_graphs,))


def mt_forward(model: MTModel, g: TokenGraph) -> float:
    """Predicted value for a single token graph."""
    return float(_forward_batch(model, pad_token_batch([g])).data[0])


def mt_predict(model: MTModel, graphs: list[TokenGraph], chunk: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(graphs), chunk):
        out.append(_forward_batch(model, pad_token_batch(graphs[start : start + chunk])).data)
    return np.concatenate(out) if out else np.zeros(0)


def mt_train(dataset: list[tuple[TokenGraph, float]], cfg: MTConfig) -> tuple[MTModel, dict]:
    """L1-trained model with Adam under the sine LR schedule.

    History records the per-step lr trace, per-epoch mean batch loss, and
    full-dataset MAE before/after training.
    """
    if not dataset:
        raise ValueError("empty dataset")
    model = MTModel(cfg)
    graphs = [g for g, _ in dataset]
    targets = np.asarray([t for _, t in dataset], dtype=np.float64)

    def loss_for_indices(indices):
        batch_graphs = [graphs[i] for i in indices]
        preds = _forward_batch(model, pad_token_batch(batch_graphs))
        return l1_loss(preds, targets[indices])

    def eval_fn():
        return float(np.mean(np.abs(mt_predict(model, graphs) - targets)))

    history = train_with_schedule(
        model.parameters(), loss_for_indices, len(dataset),
        epochs=cfg.epochs, batch_size=cfg.batch_size,
        min_lr=cfg.min_lr, max_lr=cfg.max_lr,
        seed=(cfg.seed, 1), eval_fn=eval_fn,
    )
    return model, history


def save_mt_checkpoint(model: MTModel, path) -> None:
    ckpt.save_checkpoint(path, "mt", asdict(model.cfg),
                         {k: v.data for k, v in model.param_dict().items()})


def load_mt_checkpoint(path) -> MTModel:
    kind, config, params = ckpt.load_checkpoint(path)
    if kind != "mt":
        raise InputError(f"{path}: checkpoint kind {kind!r}, expected 'mt'")
    model = MTModel(MTConfig(**config))
    tensors = model.param_dict()
    for name, arr in params.items():
        tensors[name].data = arr
    return model
