"""SMILES parsing and ring perception on plain molecular graphs.

Supports the grammar subset needed for 2D connectivity: organic-subset
atoms, bracket atoms with charge, explicit bond symbols (- = # :),
aromatic lowercase atoms, branches, ring-closure digits (including %nn),
and dot disconnection. Hydrogens are never materialized; every graph is
heavy atoms only. Stereochemistry and isotopes are rejected.
"""

from __future__ import annotations

import re
from collections import Counter, deque
from dataclasses import dataclass

from .errors import (
    EmptyInput,
    InputError,
    UnbalancedParenthesis,
    UnmatchedRingClosure,
    UnsupportedToken,
)

# Every element the toolkit knows about, in the order used by feature tables.
ELEMENTS = ("B", "C", "N", "O", "F", "Si", "P", "S", "Cl", "As", "Se", "Br", "I")
ELEMENT_INDEX = {el: i for i, el in enumerate(ELEMENTS)}

BOND_ORDERS = ("single", "double", "triple", "aromatic")
BOND_ORDER_INDEX = {order: i for i, order in enumerate(BOND_ORDERS)}

_ORGANIC_TWO = ("Cl", "Br")
_ORGANIC_ONE = set("BCNOPSFI")
_AROMATIC_ORGANIC = set("bcnops")
_BOND_SYMBOLS = {"-": "single", "=": "double", "#": "triple", ":": "aromatic"}

# Bracket atoms: element (possibly aromatic lowercase), optional H count
# (discarded: hydrogens are implicit), optional charge. No isotopes, no
# stereo markers, no atom-map classes.
_BRACKET_RE = re.compile(
    r"^(?P<elem>[A-Z][a-z]?|se|as|[bcnops])"
    r"(?P<hcount>H[0-9]*)?"
    r"(?P<charge>\+\+|--|[+-][0-9]?)?$"
)


@dataclass(frozen=True)
class Atom:
    element: str
    aromatic: bool = False
    formal_charge: int = 0
    index: int = 0


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: str = "single"

    def key(self) -> tuple[int, int]:
        return (self.a, self.b) if self.a < self.b else (self.b, self.a)


@dataclass
class MolGraph:
    atoms: list[Atom]
    bonds: list[Bond]
    adjacency: list[list[int]]

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_bonds(self) -> int:
        return len(self.bonds)


@dataclass(frozen=True)
class Ring:
    """A simple cycle, stored as an ordered atom-index tuple."""

    atom_indices: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.atom_indices)


@dataclass
class MoleculeStats:
    heavy_atoms: int
    degrees: list[int]
    element_counts: dict[str, int]
    bond_order_counts: dict[str, int]


def _parse_charge(text: str | None) -> int:
    if not text:
        return 0
    if text == "++":
        return 2
    if text == "--":
        return -2
    sign = 1 if text[0] == "+" else -1
    return sign * (int(text[1:]) if len(text) > 1 else 1)


def _parse_bracket(body: str) -> Atom:
    m = _BRACKET_RE.match(body)
    if m is None:
        raise UnsupportedToken(f"unsupported bracket atom [{body}]")
    elem = m.group("elem")
    aromatic = elem[0].islower()
    element = elem.capitalize()
    if element not in ELEMENT_INDEX:
        raise UnsupportedToken(f"unknown element {element!r} in [{body}]")
    return Atom(element=element, aromatic=aromatic, formal_charge=_parse_charge(m.group("charge")))


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.atoms: list[Atom] = []
        self.bonds: list[Bond] = []
        self.bond_keys: set[tuple[int, int]] = set()
        self.prev: int | None = None
        self.pending: str | None = None  # explicit bond symbol awaiting its atom
        self.stack: list[int | None] = []
        self.ring_open: dict[int, tuple[int, str | None]] = {}

    def _push_atom(self, atom: Atom) -> None:
        idx = len(self.atoms)
        self.atoms.append(Atom(atom.element, atom.aromatic, atom.formal_charge, idx))
        if self.prev is not None:
            self._add_bond(self.prev, idx, self.pending)
        self.prev = idx
        self.pending = None

    def _add_bond(self, a: int, b: int, symbol: str | None) -> None:
        if a == b:
            raise UnsupportedToken("self-bond is not a molecule")
        if symbol is None:
            aromatic = self.atoms[a].aromatic and self.atoms[b].aromatic
            order = "aromatic" if aromatic else "single"
        else:
            order = _BOND_SYMBOLS[symbol]
        key = (a, b) if a < b else (b, a)
        if key in self.bond_keys:
            raise UnsupportedToken(f"duplicate bond between atoms {a} and {b}")
        self.bond_keys.add(key)
        self.bonds.append(Bond(a, b, order))

    def _ring_closure(self, num: int) -> None:
        if self.prev is None:
            raise UnsupportedToken("ring-closure digit before any atom")
        if num in self.ring_open:
            other, open_sym = self.ring_open.pop(num)
            if open_sym is not None and self.pending is not None and open_sym != self.pending:
                raise UnsupportedToken(f"conflicting bond symbols on ring closure {num}")
            self._add_bond(other, self.prev, self.pending if self.pending is not None else open_sym)
        else:
            self.ring_open[num] = (self.prev, self.pending)
        self.pending = None

    def run(self) -> MolGraph:
        text = self.text
        n = len(text)
        while self.pos < n:
            ch = text[self.pos]
            if ch == "(":
                if self.prev is None:
                    raise UnbalancedParenthesis("branch opened before any atom")
                self.stack.append(self.prev)
                self.pos += 1
            elif ch == ")":
                if not self.stack:
                    raise UnbalancedParenthesis("unexpected ')'")
                if self.pending is not None:
                    raise UnsupportedToken("dangling bond symbol before ')'")
                self.prev = self.stack.pop()
                self.pos += 1
            elif ch in _BOND_SYMBOLS:
                if self.pending is not None:
                    raise UnsupportedToken("two consecutive bond symbols")
                self.pending = ch
                self.pos += 1
            elif ch == ".":
                if self.pending is not None:
                    raise UnsupportedToken("bond symbol before '.'")
                self.prev = None
                self.pos += 1
            elif ch == "%":
                digits = text[self.pos + 1 : self.pos + 3]
                if len(digits) != 2 or not digits.isdigit():
                    raise UnsupportedToken("'%' must be followed by two digits")
                self._ring_closure(int(digits))
                self.pos += 3
            elif ch.isdigit():
                self._ring_closure(int(ch))
                self.pos += 1
            elif ch == "[":
                end = text.find("]", self.pos)
                if end < 0:
                    raise UnsupportedToken("unterminated bracket atom")
                self._push_atom(_parse_bracket(text[self.pos + 1 : end]))
                self.pos = end + 1
            elif text.startswith(_ORGANIC_TWO, self.pos):
                self._push_atom(Atom(element=text[self.pos : self.pos + 2]))
                self.pos += 2
            elif ch in _ORGANIC_ONE:
                self._push_atom(Atom(element=ch))
                self.pos += 1
            elif ch in _AROMATIC_ORGANIC:
                self._push_atom(Atom(element=ch.upper(), aromatic=True))
                self.pos += 1
            else:
                raise UnsupportedToken(f"unsupported character {ch!r} at position {self.pos}")
        if self.stack:
            raise UnbalancedParenthesis(f"{len(self.stack)} unclosed '('")
        if self.ring_open:
            nums = ", ".join(str(k) for k in sorted(self.ring_open))
            raise UnmatchedRingClosure(f"ring closure(s) never closed: {nums}")
        if self.pending is not None:
            raise UnsupportedToken("dangling bond symbol at end of input")
        adjacency: list[list[int]] = [[] for _ in self.atoms]
        for bond in self.bonds:
            adjacency[bond.a].append(bond.b)
            adjacency[bond.b].append(bond.a)
        return MolGraph(self.atoms, self.bonds, adjacency)


def parse_smiles(text: str) -> MolGraph:
    """Parse a SMILES string into a heavy-atom molecular graph.

    Atoms appear in left-to-right encounter order. Ring-closure digits
    produce bonds; bonds between two aromatic atoms default to aromatic
    order when no explicit symbol is given.
    """
    if text is None or not text.strip():
        raise EmptyInput("empty SMILES string")
    stripped = text.strip()
    if any(c.isspace() for c in stripped):
        raise UnsupportedToken("whitespace inside SMILES string")
    return _Parser(stripped).run()


def connected_components(mol: MolGraph) -> list[list[int]]:
    """Connected components as sorted atom-index lists, ordered by smallest member."""
    seen = [False] * mol.n_atoms
    components = []
    for start in range(mol.n_atoms):
        if seen[start]:
            continue
        queue = deque([start])
        seen[start] = True
        comp = []
        while queue:
            v = queue.popleft()
            comp.append(v)
            for w in mol.adjacency[v]:
                if not seen[w]:
                    seen[w] = True
                    queue.append(w)
        components.append(sorted(comp))
    return components


def cyclomatic_number(mol: MolGraph) -> int:
    """Number of independent cycles: bonds - atoms + components."""
    return mol.n_bonds - mol.n_atoms + len(connected_components(mol))


def _bfs_tree(adjacency: list[list[int]], root: int) -> tuple[list[int], list[int]]:
    dist = [-1] * len(adjacency)
    parent = [-1] * len(adjacency)
    dist[root] = 0
    queue = deque([root])
    while queue:
        v = queue.popleft()
        for w in adjacency[v]:
            if dist[w] < 0:
                dist[w] = dist[v] + 1
                parent[w] = v
                queue.append(w)
    return dist, parent


def _path_from_root(parent: list[int], node: int) -> list[int]:
    path = [node]
    while parent[path[-1]] >= 0:
        path.append(parent[path[-1]])
    path.reverse()
    return path


def _normalize_cycle(nodes: list[int]) -> tuple[int, ...]:
    # Rotate so the smallest index leads, then pick the direction with the
    # smaller second element; gives one canonical tuple per cycle.
    i = nodes.index(min(nodes))
    rot = nodes[i:] + nodes[:i]
    if len(rot) > 2 and rot[-1] < rot[1]:
        rot = [rot[0]] + rot[1:][::-1]
    return tuple(rot)


def perceive_rings(mol: MolGraph) -> list[Ring]:
    """Perceive a minimum cycle basis of the molecular graph.

    Returns exactly bonds - atoms + components rings, each a
    smallest-possible simple cycle, ordered by ring size then by smallest
    member index. Candidate cycles are the Horton set (shortest cycle
    through each vertex/edge pair from BFS trees); a greedy GF(2)
    independence check over edge-incidence bitmasks selects the basis.
    """
    target = cyclomatic_number(mol)
    if target == 0:
        return []
    adjacency = mol.adjacency
    bond_bit = {bond.key(): i for i, bond in enumerate(mol.bonds)}

    def edge_mask(nodes: list[int]) -> int:
        mask = 0
        for a, b in zip(nodes, nodes[1:] + nodes[:1]):
            key = (a, b) if a < b else (b, a)
            mask |= 1 << bond_bit[key]
        return mask

    candidates: dict[int, list[int]] = {}
    for v in range(mol.n_atoms):
        dist, parent = _bfs_tree(adjacency, v)
        for bond in mol.bonds:
            x, y = bond.a, bond.b
            if dist[x] < 0 or dist[y] < 0:
                continue
            px = _path_from_root(parent, x)
            py = _path_from_root(parent, y)
            if len(set(px) & set(py)) != 1:
                continue
            nodes = px + py[:0:-1]
            if len(nodes) < 3 or len(set(nodes)) != len(nodes):
                continue
            candidates.setdefault(edge_mask(nodes), nodes)

    ordered = sorted(
        candidates.items(),
        key=lambda item: (len(item[1]), min(item[1]), tuple(sorted(item[1]))),
    )
    reduced: list[tuple[int, int]] = []  # (pivot bit, reduced mask)
    chosen: list[list[int]] = []
    for mask, nodes in ordered:
        cur = mask
        for pivot, basis_mask in reduced:
            if (cur >> pivot) & 1:
                cur ^= basis_mask
        if cur:
            reduced.append((cur.bit_length() - 1, cur))
            chosen.append(nodes)
            if len(chosen) == target:
                break
    if len(chosen) != target:  # pragma: no cover - Horton set always suffices
        raise RuntimeError(f"cycle basis incomplete: {len(chosen)} of {target}")

    rings = [Ring(_normalize_cycle(nodes)) for nodes in chosen]
    rings.sort(key=lambda r: (len(r), min(r.atom_indices), r.atom_indices))
    return rings


def molecule_stats(mol: MolGraph) -> MoleculeStats:
    """Heavy-atom count, per-atom degrees, element counts, bond-order counts."""
    degrees = [len(neighbors) for neighbors in mol.adjacency]
    element_counts = dict(sorted(Counter(a.element for a in mol.atoms).items()))
    order_counts = {order: 0 for order in BOND_ORDERS}
    for bond in mol.bonds:
        order_counts[bond.order] += 1
    return MoleculeStats(mol.n_atoms, degrees, element_counts, order_counts)


@dataclass(frozen=True)
class MoleculeRecord:
    line_no: int
    smiles: str
    target: float | None


def read_molecule_file(path) -> list[MoleculeRecord]:
    """Read a molecule list: one `SMILES<TAB>target` per line, target optional.

    Lines starting with '#' and blank lines are ignored.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) > 2:
                raise InputError(f"line {line_no}: expected 'SMILES<TAB>target', got {len(parts)} fields")
            target = None
            if len(parts) == 2 and parts[1].strip():
                try:
                    target = float(parts[1])
                except ValueError:
                    raise InputError(f"line {line_no}: invalid target {parts[1]!r}") from None
            records.append(MoleculeRecord(line_no, parts[0].strip(), target))
    return records
