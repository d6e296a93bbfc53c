"""Molecule data model, XYZ I/O, covalent bond perception and valence checks."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import networkx as nx
import numpy as np

from vecfield._spatial import SpatialHash


@dataclass(frozen=True)
class Element:
    symbol: str
    covalent_radius: float
    valences: tuple[int, ...]

    @property
    def max_valence(self) -> int:
        return max(self.valences)


# Cordero covalent radii (Å).
ELEMENTS: dict[str, Element] = {
    e.symbol: e
    for e in (
        Element("C", 0.76, (4,)),
        Element("H", 0.31, (1,)),
        Element("O", 0.66, (2,)),
        Element("N", 0.71, (3,)),
        Element("F", 0.57, (1,)),
        Element("S", 1.05, (2, 4, 6)),
        Element("Cl", 1.02, (1,)),
        Element("Br", 1.20, (1,)),
    )
}

QM9_ELEMENTS: tuple[str, ...] = ("C", "H", "O", "N", "F")
GEOM_ELEMENTS: tuple[str, ...] = ("C", "H", "O", "N", "F", "S", "Cl", "Br")

DEFAULT_RHO = 1.5


class XYZParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class Molecule:
    """Atoms (element symbols + coordinates in Å) with an optional bond list.

    Instances are immutable: the position array is read-only and bonds are
    stored as a sorted tuple of ``(i, j, order)`` with ``i < j``.
    """

    __slots__ = ("elements", "positions", "bonds")

    def __init__(
        self,
        elements: Sequence[str],
        positions,
        bonds: Iterable[tuple[int, int, int]] = (),
    ):
        elements = tuple(elements)
        for sym in elements:
            if sym not in ELEMENTS:
                raise ValueError(f"unknown element {sym!r}")
        pos = np.array(positions, dtype=np.float64).reshape(-1, 3) if len(elements) else np.zeros((0, 3))
        if pos.shape[0] != len(elements):
            raise ValueError(f"{len(elements)} elements but {pos.shape[0]} positions")
        if len(elements) > 1 and len(np.unique(pos, axis=0)) != len(elements):
            raise ValueError("two atoms share identical coordinates")

        n = len(elements)
        seen = set()
        norm_bonds = []
        for i, j, order in bonds:
            i, j, order = int(i), int(j), int(order)
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ValueError(f"bad bond indices ({i}, {j}) for {n} atoms")
            if order not in (1, 2, 3):
                raise ValueError(f"bond order must be 1, 2 or 3, got {order}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate bond {key}")
            seen.add(key)
            norm_bonds.append((*key, order))
        pos.setflags(write=False)
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "bonds", tuple(sorted(norm_bonds)))

    def __setattr__(self, name, value):
        raise AttributeError("Molecule is immutable")

    def __reduce__(self):
        return (Molecule, (self.elements, np.array(self.positions), self.bonds))

    def __len__(self) -> int:
        return len(self.elements)

    def __repr__(self) -> str:
        return f"Molecule({self.formula()!r}, n_bonds={len(self.bonds)})"

    def counts(self) -> Counter:
        return Counter(self.elements)

    def formula(self) -> str:
        c = self.counts()
        return "".join(f"{s}{c[s] if c[s] > 1 else ''}" for s in sorted(c))

    def indices_of(self, symbol: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.elements) if s == symbol], dtype=int)

    def positions_of(self, symbol: str) -> np.ndarray:
        return self.positions[self.indices_of(symbol)]

    def centroid(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros(3)
        return self.positions.mean(axis=0)

    def with_bonds(self, bonds) -> "Molecule":
        return Molecule(self.elements, self.positions, bonds)

    def transformed(self, rotation=None, translation=None) -> "Molecule":
        """Apply ``x -> R x + t`` to every atom; bonds are kept."""
        pos = self.positions
        if rotation is not None:
            pos = pos @ np.asarray(rotation).T
        if translation is not None:
            pos = pos + np.asarray(translation)
        return Molecule(self.elements, pos, self.bonds)

    def permuted(self, order: Sequence[int]) -> "Molecule":
        order = list(order)
        inverse = {old: new for new, old in enumerate(order)}
        bonds = [(inverse[i], inverse[j], o) for i, j, o in self.bonds]
        return Molecule([self.elements[i] for i in order], self.positions[order], bonds)

    def valences(self) -> np.ndarray:
        v = np.zeros(len(self), dtype=int)
        for i, j, order in self.bonds:
            v[i] += order
            v[j] += order
        return v

    def graph(self) -> nx.Graph:
        g = nx.Graph()
        for i, sym in enumerate(self.elements):
            g.add_node(i, element=sym)
        for i, j, order in self.bonds:
            g.add_edge(i, j, order=str(order))
        return g

    def fragments(self) -> list[list[int]]:
        return [sorted(c) for c in nx.connected_components(self.graph())]


# ---------------------------------------------------------------------------
# XYZ I/O
# ---------------------------------------------------------------------------

def parse_xyz(text: str) -> Molecule:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise XYZParseError(1, "missing atom count")
    try:
        n = int(lines[0].strip())
    except ValueError:
        raise XYZParseError(1, f"malformed atom count {lines[0].strip()!r}") from None
    if n < 0:
        raise XYZParseError(1, "negative atom count")

    elements, coords = [], []
    body = lines[2:] if len(lines) > 1 else []
    for offset, line in enumerate(body):
        lineno = offset + 3
        fields = line.split()
        if not fields:
            continue
        if len(elements) == n:
            raise XYZParseError(lineno, f"more atom lines than declared count {n}")
        if len(fields) < 4:
            raise XYZParseError(lineno, "expected element and three coordinates")
        sym = fields[0]
        if sym not in ELEMENTS:
            raise XYZParseError(lineno, f"unknown element symbol {sym!r}")
        try:
            xyz = [float(f) for f in fields[1:4]]
        except ValueError:
            raise XYZParseError(lineno, "non-numeric coordinate") from None
        if not all(math.isfinite(c) for c in xyz):
            raise XYZParseError(lineno, "non-finite coordinate")
        elements.append(sym)
        coords.append(xyz)
    if len(elements) != n:
        raise XYZParseError(len(lines) + 1, f"declared {n} atoms, found {len(elements)}")
    return Molecule(elements, coords)


def write_xyz(mol: Molecule, comment: str = "") -> str:
    out = [str(len(mol)), comment]
    for sym, xyz in zip(mol.elements, mol.positions.tolist()):
        # repr of a Python float round-trips float64 exactly
        out.append(f"{sym} {xyz[0]!r} {xyz[1]!r} {xyz[2]!r}")
    return "\n".join(out) + "\n"


def read_xyz(path) -> Molecule:
    with open(path) as fh:
        return parse_xyz(fh.read())


# ---------------------------------------------------------------------------
# Bond perception
# ---------------------------------------------------------------------------

def infer_bonds(mol: Molecule, rho: float = DEFAULT_RHO) -> Molecule:
    """Single bonds between atoms closer than ``rho`` times the sum of their covalent radii."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    n = len(mol)
    if n < 2:
        return mol.with_bonds(())
    radii = np.array([ELEMENTS[s].covalent_radius for s in mol.elements])
    cutoff = 2.0 * rho * radii.max()
    grid = SpatialHash(mol.positions, cutoff)
    bonds = []
    for i, j in grid.pairs_within(cutoff):
        d = np.linalg.norm(mol.positions[i] - mol.positions[j])
        if d <= rho * (radii[i] + radii[j]):
            bonds.append((i, j, 1))
    return mol.with_bonds(bonds)


def _target_valence(symbol: str, current: int) -> int | None:
    allowed = ELEMENTS[symbol].valences
    above = [v for v in allowed if v >= current]
    return min(above) if above else None


def complete_valence(mol: Molecule) -> Molecule:
    """Greedy bond-order upgrade: shortest bonds first while both ends lack valence."""
    if not mol.bonds:
        return mol
    bonds = {(i, j): o for i, j, o in mol.bonds}
    lengths = {k: float(np.linalg.norm(mol.positions[k[0]] - mol.positions[k[1]])) for k in bonds}
    ordered = sorted(bonds, key=lambda k: (lengths[k], k))
    val = mol.valences()

    def deficit(i):
        # Once an element reaches one of its allowed valences it counts as
        # saturated; only S has more than one.
        if val[i] in ELEMENTS[mol.elements[i]].valences:
            return 0
        target = _target_valence(mol.elements[i], val[i])
        return 0 if target is None else target - val[i]

    changed = True
    while changed:
        changed = False
        for k in ordered:
            i, j = k
            if bonds[k] < 3 and deficit(i) > 0 and deficit(j) > 0:
                bonds[k] += 1
                val[i] += 1
                val[j] += 1
                changed = True
    return mol.with_bonds([(i, j, o) for (i, j), o in bonds.items()])


def perceive(mol: Molecule, rho: float = DEFAULT_RHO) -> Molecule:
    return complete_valence(infer_bonds(mol, rho))


# ---------------------------------------------------------------------------
# Stability / validity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StabilityReport:
    stable_atom_fraction: float
    molecule_stable: bool
    valid: bool
    n_fragments: int = 0
    implicit_hydrogens: int = 0

    def to_dict(self) -> dict:
        return {
            "stable_atom_fraction": self.stable_atom_fraction,
            "molecule_stable": self.molecule_stable,
            "valid": self.valid,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def check_stability(mol: Molecule) -> StabilityReport:
    """Valence-based stability of a molecule whose bonds have been inferred.

    Bond orders are first completed greedily (see :func:`complete_valence`).
    ``valid`` means no atom exceeds its maximum valence and all coordinates
    are finite; unsatisfied valences count as hydrogens that could be
    supplemented and are reported in ``implicit_hydrogens`` only.
    """
    n = len(mol)
    if n == 0:
        return StabilityReport(1.0, True, False, 0, 0)
    mol = complete_valence(mol)
    val = mol.valences()
    stable = np.array([v in ELEMENTS[s].valences for s, v in zip(mol.elements, val)])
    overflow = any(v > ELEMENTS[s].max_valence for s, v in zip(mol.elements, val))
    implicit_h = 0
    for s, v in zip(mol.elements, val):
        target = _target_valence(s, v)
        if target is not None:
            implicit_h += int(target - v)
    frac = float(stable.mean())
    valid = (not overflow) and bool(np.isfinite(mol.positions).all())
    return StabilityReport(
        stable_atom_fraction=frac,
        molecule_stable=bool(stable.all()),
        valid=valid,
        n_fragments=len(mol.fragments()),
        implicit_hydrogens=implicit_h,
    )


# ---------------------------------------------------------------------------
# Uniqueness key
# ---------------------------------------------------------------------------

def canonical_hash(mol: Molecule) -> str:
    """Weisfeiler-Leman colour-refinement digest of the labelled bond graph.

    Invariant to atom order and rigid motion. Like any 1-WL test it cannot
    separate some regular graphs (e.g. a 6-ring vs two 3-rings of the same
    element).
    """
    if len(mol) == 0:
        return "0" * 32
    g = mol.graph()
    return nx.weisfeiler_lehman_graph_hash(
        g, node_attr="element", edge_attr="order", iterations=max(len(mol), 1), digest_size=16
    )
