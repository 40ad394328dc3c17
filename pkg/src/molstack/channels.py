"""Structural channel machinery: 2D/3D channel sampling (fixed and
Dirichlet), position noising with its cosine denoising target, additive
attention biases built from graph and spatial distances, and the
knowledge-guided regularization targets (hashed path fingerprint plus a
fixed descriptor vector) with their loss.

All sampling takes an explicit seeded generator; nothing touches global
random state.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import InputError, MissingConformer, ShapeMismatch
from .smiles import BOND_ORDERS, ELEMENTS, MolGraph, Ring, connected_components, molecule_stats, perceive_rings
from .tensor import Tensor, astensor, bce_with_logits_loss, cosine_similarity_loss, mse_loss
from .util import atomic_write_text

MODES = ("2D", "3D", "2D+3D")

FINGERPRINT_BITS = 512
DESCRIPTOR_SIZE = 200
MAX_PATH_BONDS = 4

SPD_CAP = 8  # shortest-path distances clip here (also: unreachable pairs)
N_KERNELS = 8


@dataclass
class ChannelSpec:
    mode_probs: tuple[float, float, float] = (0.25, 0.5, 0.25)
    dirichlet: bool = False
    dirichlet_alpha: tuple[float, float, float] = (0.2, 0.2, 0.6)

    def __post_init__(self):
        probs = np.asarray(self.mode_probs, dtype=np.float64)
        if probs.shape != (3,) or (probs < 0).any():
            raise ValueError("mode_probs must be 3 non-negative reals")
        if abs(float(probs.sum()) - 1.0) > 1e-12:
            raise ValueError(f"mode_probs sum to {probs.sum()}, expected 1")
        alpha = np.asarray(self.dirichlet_alpha, dtype=np.float64)
        if alpha.shape != (3,) or (alpha <= 0).any():
            raise ValueError("dirichlet_alpha must be 3 strictly positive reals")


@dataclass
class Conformer:
    """3D positions, one row per heavy atom."""

    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be [atoms, 3], got {self.positions.shape}")
        if not np.isfinite(self.positions).all():
            raise ValueError("non-finite conformer positions")


@dataclass
class RegTargets:
    y_fp: np.ndarray  # 512 bits
    y_d: np.ndarray  # 200 reals


def sample_mode(rng: np.random.Generator, spec: ChannelSpec) -> str:
    """Draw one of 2D / 3D / 2D+3D according to the fixed probabilities."""
    if spec.dirichlet:
        raise ValueError("sample_mode is for fixed probabilities; use sample_dirichlet_weights")
    r = rng.random()
    acc = 0.0
    for mode, p in zip(MODES, spec.mode_probs):
        acc += p
        if r < acc:
            return mode
    return MODES[-1]


def sample_dirichlet_weights(rng: np.random.Generator, alpha) -> np.ndarray:
    """One point on the 2-simplex via normalized Gamma draws."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if (alpha <= 0).any():
        raise ValueError("alpha must be strictly positive")
    draws = rng.gamma(shape=alpha, scale=1.0)
    total = draws.sum()
    if total == 0.0:  # extreme-alpha underflow; fall back to the mode
        return alpha / alpha.sum()
    return draws / total


def perturb_positions(conformer: Conformer, sigma: float, rng: np.random.Generator
                      ) -> tuple[Conformer, np.ndarray]:
    """Add i.i.d. Gaussian noise per coordinate; returns (noised, noise)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0.0:
        noise = np.zeros_like(conformer.positions)
    else:
        noise = rng.normal(0.0, sigma, size=conformer.positions.shape)
    return Conformer(conformer.positions + noise), noise


def denoise_loss(pred_noise, true_noise) -> Tensor:
    """Mean over atoms of (1 - cosine similarity) between noise rows."""
    return cosine_similarity_loss(pred_noise, true_noise)


def denoising_objective(task_loss, pred_noise, true_noise) -> Tensor:
    """Task loss plus the denoising loss, weighted equally."""
    return astensor(task_loss) + denoise_loss(pred_noise, true_noise)


def shortest_path_matrix(mol: MolGraph, cap: int = SPD_CAP) -> np.ndarray:
    """All-pairs BFS distances, clipped at ``cap`` (unreachable pairs too)."""
    n = mol.n_atoms
    out = np.full((n, n), cap, dtype=np.int64)
    for start in range(n):
        out[start, start] = 0
        dist = {start: 0}
        queue = deque([start])
        while queue:
            v = queue.popleft()
            if dist[v] >= cap:
                continue
            for w in mol.adjacency[v]:
                if w not in dist:
                    dist[w] = dist[v] + 1
                    out[start, w] = min(dist[w], cap)
                    queue.append(w)
    return out


@dataclass
class ChannelBiasParams:
    """Learnable pieces of the additive attention bias: a lookup over
    clipped shortest-path distances (2D) and mixing weights over fixed
    Gaussian distance kernels (3D)."""

    spd_table: np.ndarray
    kernel_weights: np.ndarray
    kernel_centers: np.ndarray
    kernel_widths: np.ndarray


def init_channel_bias_params(rng: np.random.Generator, max_dist: float = 4.0) -> ChannelBiasParams:
    centers = np.linspace(0.0, max_dist, N_KERNELS)
    widths = np.full(N_KERNELS, max_dist / N_KERNELS)
    return ChannelBiasParams(
        spd_table=rng.normal(0.0, 0.1, size=SPD_CAP + 1),
        kernel_weights=rng.normal(0.0, 0.1, size=N_KERNELS),
        kernel_centers=centers,
        kernel_widths=widths,
    )


def bias_2d(mol: MolGraph, params: ChannelBiasParams) -> np.ndarray:
    return params.spd_table[shortest_path_matrix(mol)]


def bias_3d(conformer: Conformer, params: ChannelBiasParams) -> np.ndarray:
    pos = conformer.positions
    delta = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((delta * delta).sum(axis=-1))
    kernels = np.exp(
        -np.square(dist[..., None] - params.kernel_centers)
        / (2.0 * np.square(params.kernel_widths))
    )
    return kernels @ params.kernel_weights


def channel_bias(mol: MolGraph, conformer: Conformer | None, params: ChannelBiasParams,
                 mode: str | None = None, weights=None) -> np.ndarray:
    """Additive [atoms, atoms] attention bias for one molecule.

    Fixed mode: the active channels' biases are summed (2D+3D sums both).
    Dirichlet variant: pass simplex ``weights`` (w_2D, w_3D, w_2D3D) to get
    w_2D*b2 + w_3D*b3 + w_2D3D*(b2 + b3).
    """
    if (mode is None) == (weights is None):
        raise ValueError("pass exactly one of mode= or weights=")
    if mode is not None:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        needs_3d = mode in ("3D", "2D+3D")
        if needs_3d and conformer is None:
            raise MissingConformer(f"mode {mode} needs a conformer")
        out = np.zeros((mol.n_atoms, mol.n_atoms))
        if mode in ("2D", "2D+3D"):
            out += bias_2d(mol, params)
        if needs_3d:
            out += bias_3d(conformer, params)
        return out
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3,):
        raise ValueError("weights must be (w_2D, w_3D, w_2D3D)")
    if (w[1] != 0.0 or w[2] != 0.0) and conformer is None:
        raise MissingConformer("3D channel weight is active but no conformer given")
    b2 = bias_2d(mol, params)
    b3 = bias_3d(conformer, params) if conformer is not None else np.zeros_like(b2)
    return w[0] * b2 + w[1] * b3 + w[2] * (b2 + b3)


# --- fingerprint and descriptors ---------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_BOND_CHAR = {"single": "-", "double": "=", "triple": "#", "aromatic": ":"}


def _fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def _atom_label(mol: MolGraph, i: int) -> str:
    atom = mol.atoms[i]
    return atom.element.lower() if atom.aromatic else atom.element


def _path_label(mol: MolGraph, path: tuple[int, ...], order_of) -> str:
    parts = [_atom_label(mol, path[0])]
    for a, b in zip(path, path[1:]):
        parts.append(_BOND_CHAR[order_of[(a, b) if a < b else (b, a)]])
        parts.append(_atom_label(mol, b))
    forward = "".join(parts)
    backward = "".join(reversed(parts))
    return min(forward, backward)


def iter_simple_paths(mol: MolGraph, max_bonds: int = MAX_PATH_BONDS):
    """All simple paths with 0..max_bonds bonds, one direction each."""
    for start in range(mol.n_atoms):
        stack = [(start,)]
        while stack:
            path = stack.pop()
            if path[0] <= path[-1]:
                yield path
            if len(path) <= max_bonds:
                for nxt in mol.adjacency[path[-1]]:
                    if nxt not in path:
                        stack.append(path + (nxt,))


def fingerprint(mol: MolGraph) -> np.ndarray:
    """512-bit hashed path fingerprint.

    Every simple path of length 0-4 bonds is labeled with its element and
    bond-order string (direction-canonical), hashed with 64-bit FNV-1a,
    and sets bit hash % 512.
    """
    order_of = {bond.key(): bond.order for bond in mol.bonds}
    bits = np.zeros(FINGERPRINT_BITS, dtype=np.uint8)
    for path in iter_simple_paths(mol):
        bits[_fnv1a64(_path_label(mol, path, order_of)) % FINGERPRINT_BITS] = 1
    return bits


# Descriptor vector layout (zero-padded to DESCRIPTOR_SIZE).
DESCRIPTOR_LAYOUT = {
    "heavy_atoms": 0,
    "bonds": 1,
    "rings": 2,
    "element_counts": (3, 3 + len(ELEMENTS)),  # per ELEMENTS order
    "bond_order_counts": (16, 20),  # per BOND_ORDERS order
    "degree_histogram": (20, 32),  # degrees 0..11
    "ring_size_histogram": (32, 45),  # sizes 3..15 (larger rings clip to 15)
    "mean_degree": 45,
    "max_degree": 46,
    "cyclomatic": 47,
}


def descriptors(mol: MolGraph, rings: list[Ring] | None = None) -> np.ndarray:
    """200-dim descriptor vector with the DESCRIPTOR_LAYOUT index map."""
    if rings is None:
        rings = perceive_rings(mol)
    stats = molecule_stats(mol)
    out = np.zeros(DESCRIPTOR_SIZE)
    out[0] = stats.heavy_atoms
    out[1] = mol.n_bonds
    out[2] = len(rings)
    base = DESCRIPTOR_LAYOUT["element_counts"][0]
    for i, element in enumerate(ELEMENTS):
        out[base + i] = stats.element_counts.get(element, 0)
    base = DESCRIPTOR_LAYOUT["bond_order_counts"][0]
    for i, order in enumerate(BOND_ORDERS):
        out[base + i] = stats.bond_order_counts[order]
    base = DESCRIPTOR_LAYOUT["degree_histogram"][0]
    for degree in stats.degrees:
        out[base + min(degree, 11)] += 1
    base = DESCRIPTOR_LAYOUT["ring_size_histogram"][0]
    for ring in rings:
        out[base + min(len(ring), 15) - 3] += 1
    out[DESCRIPTOR_LAYOUT["mean_degree"]] = (
        sum(stats.degrees) / len(stats.degrees) if stats.degrees else 0.0
    )
    out[DESCRIPTOR_LAYOUT["max_degree"]] = max(stats.degrees, default=0)
    out[DESCRIPTOR_LAYOUT["cyclomatic"]] = mol.n_bonds - mol.n_atoms + len(connected_components(mol))
    return out


def reg_targets(mol: MolGraph) -> RegTargets:
    return RegTargets(y_fp=fingerprint(mol), y_d=descriptors(mol))


def kpgt_reg_loss(z, fp_head, d_head, targets: RegTargets,
                  lam_fp: float, lam_d: float, strict_literal: bool = False) -> Tensor:
    """Knowledge-guided regularization on a latent representation:

        lam_fp * BCE(fp_head(z), y_fp) + lam_d * MSE(d_head(z), y_d)

    ``z`` is [rows, width]; each head is a (W, b) pair. With
    ``strict_literal`` the MSE term regresses onto the fingerprint bits
    instead (the descriptor head must then map to 512 outputs).
    """
    z = astensor(z)
    if z.ndim != 2:
        raise ShapeMismatch(f"latent must be [rows, width], got {z.shape}")
    rows = z.shape[0]
    fp_w, fp_b = fp_head
    d_w, d_b = d_head
    fp_logits = z @ astensor(fp_w) + astensor(fp_b)
    if fp_logits.shape[-1] != FINGERPRINT_BITS:
        raise ShapeMismatch(f"fingerprint head outputs {fp_logits.shape[-1]}, expected {FINGERPRINT_BITS}")
    d_pred = z @ astensor(d_w) + astensor(d_b)
    y_fp = np.broadcast_to(targets.y_fp.astype(np.float64), (rows, FINGERPRINT_BITS))
    mse_target = y_fp if strict_literal else np.broadcast_to(targets.y_d, (rows, DESCRIPTOR_SIZE))
    if d_pred.shape != mse_target.shape:
        raise ShapeMismatch(f"descriptor head outputs {d_pred.shape}, targets {mse_target.shape}")
    return lam_fp * bce_with_logits_loss(fp_logits, y_fp) + lam_d * mse_loss(d_pred, mse_target)


# --- conformers ------------------------------------------------------------


def spring_conformer(mol: MolGraph, seed: int, iterations: int = 60) -> Conformer:
    """Deterministic 3D spring embedding (Fruchterman-Reingold style).

    Not a physical geometry; adequate for exercising the noise, denoise,
    and distance-kernel machinery on arbitrary molecules.
    """
    n = mol.n_atoms
    rng = np.random.default_rng(seed)
    pos = rng.normal(0.0, 1.0, size=(n, 3))
    if n == 1:
        return Conformer(pos)
    k = 1.0  # ideal edge length
    adjacency = np.zeros((n, n), dtype=bool)
    for bond in mol.bonds:
        adjacency[bond.a, bond.b] = adjacency[bond.b, bond.a] = True
    temperature = 0.5
    diag = np.arange(n)
    for _ in range(iterations):
        delta = pos[:, None, :] - pos[None, :, :]
        dist = np.sqrt((delta * delta).sum(axis=-1))
        np.fill_diagonal(dist, 1.0)
        repulse = (k * k / np.square(dist))[:, :, None] * delta / dist[:, :, None]
        repulse[diag, diag, :] = 0.0
        attract = np.where(adjacency[:, :, None], -delta / k, 0.0)
        force = repulse.sum(axis=1) + attract.sum(axis=1)
        norms = np.sqrt((force * force).sum(axis=-1, keepdims=True))
        norms = np.maximum(norms, 1e-12)
        pos = pos + force / norms * min(temperature, 1.0)
        temperature *= 0.95
    return Conformer(pos)


CONFORMER_CACHE_HEADER = "molstack-conformer-cache 1"


def save_conformer_cache(path, conformers: dict[str, np.ndarray]) -> None:
    """Text cache: versioned header, then one record per molecule id.

    Floats are written with repr so reloading is bit-exact.
    """
    lines = [CONFORMER_CACHE_HEADER]
    for mol_id in conformers:
        pos = np.asarray(conformers[mol_id], dtype=np.float64)
        lines.append(f"mol {mol_id} {pos.shape[0]}")
        for row in pos:
            lines.append(" ".join(repr(float(v)) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_conformer_cache(path) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh]
    if not lines or lines[0] != CONFORMER_CACHE_HEADER:
        raise InputError(f"{path}: bad conformer cache header")
    out: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        head = lines[i].split()
        if len(head) != 3 or head[0] != "mol":
            raise InputError(f"{path}: bad record header {lines[i]!r}")
        mol_id, count = head[1], int(head[2])
        rows = [[float(v) for v in lines[i + 1 + r].split()] for r in range(count)]
        out[mol_id] = np.asarray(rows, dtype=np.float64).reshape(count, 3)
        i += 1 + count
    return out


def apply_stochastic_depth(x, residual_fn, p: float, rng: np.random.Generator,
                           training: bool):
    """Per-layer Bernoulli skip: at train time the whole residual update is
    dropped with probability ``p``; at eval the layer always runs."""
    if training and rng.random() < p:
        return x
    return residual_fn(x)
