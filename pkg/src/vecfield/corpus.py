"""Synthetic molecule generator for self-contained round-trip studies.

Molecules are grown as saturated sp3 trees: every heavy atom carries a
randomly oriented tetrahedral frame, heavy atoms are attached through free
frame slots, and the remaining valence is filled with hydrogens. Placements
are rejected unless every non-bonded pair sits clear of the bond-perception
cutoff, so ``infer_bonds`` recovers exactly the grown topology and every
molecule is valence-stable.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from vecfield.chem import DEFAULT_RHO, ELEMENTS, QM9_ELEMENTS, Molecule, read_xyz, write_xyz

_TETRA = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) / np.sqrt(3.0)

# (low, high) bond-length ranges in Å
HEAVY_BOND = (1.45, 1.60)
HALOGEN_BOND = (1.35, 1.45)
HYDROGEN_BOND = (1.00, 1.10)
CROWD_RADIUS = 3.0
# keeps every molecule inside a 5^3 grid at 3 Å spacing (half-extent 6 Å)
MAX_RADIUS = 6.0

# Per-molecule caps on minor elements keep every element inside the
# published query budgets (O/N: 30 particles, F: 15).
DEFAULT_CAPS = {"O": 2, "N": 2, "F": 1, "S": 1, "Cl": 1, "Br": 1}
_HEAVY_WEIGHTS = {"C": 0.70, "N": 0.10, "O": 0.12, "F": 0.03, "S": 0.05, "Cl": 0.03, "Br": 0.02}


class GenerationError(RuntimeError):
    pass


def _frame_with_vertex(direction, rng) -> np.ndarray:
    """Tetrahedral directions with vertex 0 along ``direction`` and a random twist."""
    base = Rotation.align_vectors([direction], [_TETRA[0]])[0]
    twist = Rotation.from_rotvec(_TETRA[0] * rng.uniform(0, 2 * np.pi))
    return (base * twist).apply(_TETRA)


def _composition(n_atoms: int, elements, rng, caps) -> list[str] | None:
    # A saturated tree with heavy atoms h_i and H fill has
    # n = 2 + sum(valence_i - 1), so the heavy set must hit that budget.
    heavy = [e for e in elements if e != "H"]
    cost = {e: min(ELEMENTS[e].valences) - 1 for e in heavy}
    remaining = n_atoms - 2
    if remaining < 0:
        return None
    picked: list[str] = []
    weights = np.array([_HEAVY_WEIGHTS.get(e, 0.05) for e in heavy])
    for _ in range(200):
        if remaining == 0:
            break
        allowed = [
            i for i, e in enumerate(heavy)
            if cost[e] <= remaining and picked.count(e) < caps.get(e, n_atoms)
            and (cost[e] > 0 or len(picked) > 0)
        ]
        if not allowed:
            return None
        w = weights[allowed] / weights[allowed].sum()
        e = heavy[allowed[rng.choice(len(allowed), p=w)]]
        picked.append(e)
        remaining -= cost[e]
    if remaining != 0 or not picked:
        return None
    # monovalent atoms are leaves; a chain needs at least one multivalent atom
    # unless the molecule is a single heavy atom
    if len(picked) > 1 and all(cost[e] == 0 for e in picked):
        return None
    rng.shuffle(picked)
    # put a multivalent atom first so the tree can grow from it
    picked.sort(key=lambda e: cost[e] == 0)
    return picked


def _clear(pos, new, new_sym, syms, bonded_to, geminal, rho, min_dist, same_min, steric_min,
           margin=0.05) -> bool:
    """Whether ``new`` can join without creating unintended bonds or clashes.

    ``geminal`` holds the indices two bonds away (the parent's other
    neighbours); every pair further apart must also respect ``steric_min``.
    """
    if not pos:
        return True
    p = np.asarray(pos)
    d = np.linalg.norm(p - new, axis=1)
    if d.min() < min_dist:
        return False
    r_new = ELEMENTS[new_sym].covalent_radius
    for idx, (dist, sym) in enumerate(zip(d, syms)):
        if sym == new_sym and dist < same_min:
            return False
        if idx == bonded_to:
            continue
        if dist <= rho * (r_new + ELEMENTS[sym].covalent_radius) + margin:
            return False
        if idx not in geminal and dist < steric_min:
            return False
    return True


def random_molecule(
    n_atoms: int,
    rng: np.random.Generator,
    elements=QM9_ELEMENTS,
    min_dist: float = 1.0,
    same_element_min: float = 1.45,
    steric_min: float = 1.7,
    rho: float = DEFAULT_RHO,
    caps: dict | None = None,
    max_tries: int = 200,
    max_radius: float | None = MAX_RADIUS,
) -> Molecule:
    """One saturated random molecule with exactly ``n_atoms`` atoms.

    ``min_dist`` bounds every pair, ``same_element_min`` pairs of one element
    and ``steric_min`` pairs separated by three or more bonds. With
    ``max_radius`` set, no atom lies further than that from the centroid.
    """
    caps = DEFAULT_CAPS if caps is None else caps
    for _ in range(max_tries):
        heavy = _composition(n_atoms, elements, rng, caps)
        if heavy is None:
            continue
        mol = _grow(heavy, rng, min_dist, same_element_min, steric_min, rho)
        if mol is None:
            continue
        if max_radius is None or np.linalg.norm(mol.positions, axis=1).max() <= max_radius:
            return mol
    raise GenerationError(f"could not build a {n_atoms}-atom molecule from {elements}")


def _grow(heavy: list[str], rng, min_dist, same_min, steric_min, rho) -> Molecule | None:
    syms: list[str] = []
    pos: list[np.ndarray] = []
    frames: list[np.ndarray] = []
    free: list[list[int]] = []
    bonds: list[tuple[int, int, int]] = []
    capacity: list[int] = []
    nbrs: list[set] = []

    def add(sym, p, frame, used_slot, parent):
        syms.append(sym)
        pos.append(p)
        frames.append(frame)
        slots = [s for s in range(4) if s != used_slot]
        rng.shuffle(slots)
        free.append(slots)
        capacity.append(min(ELEMENTS[sym].valences) - (0 if parent is None else 1))
        nbrs.append(set())
        if parent is not None:
            bonds.append((parent, len(syms) - 1, 1))
            nbrs[parent].add(len(syms) - 1)
            nbrs[-1].add(parent)

    add(heavy[0], np.zeros(3), Rotation.random(random_state=rng).apply(_TETRA), None, None)

    def attach(sym, lengths) -> bool:
        # Among all clear (parent, slot) placements pick one of the least
        # crowded; random choice among ties keeps shapes varied.
        options = []
        for parent in range(len(syms)):
            if capacity[parent] <= 0:
                continue
            for slot in free[parent]:
                u = frames[parent][slot]
                p = pos[parent] + rng.uniform(*lengths) * u
                if _clear(pos, p, sym, syms, parent, nbrs[parent], rho, min_dist, same_min, steric_min):
                    crowd = int(np.sum(np.linalg.norm(np.asarray(pos) - p, axis=1) < CROWD_RADIUS))
                    options.append((crowd, parent, slot, p))
        if not options:
            return False
        least = min(o[0] for o in options)
        best = [o for o in options if o[0] == least]
        _, parent, slot, p = best[rng.integers(len(best))]
        u = frames[parent][slot]
        free[parent].remove(slot)
        capacity[parent] -= 1
        add(sym, p, _frame_with_vertex(-u, rng), 0, parent)
        return True

    for sym in heavy[1:]:
        lengths = HEAVY_BOND if min(ELEMENTS[sym].valences) > 1 else HALOGEN_BOND
        if not attach(sym, lengths):
            return None
    n_heavy = len(syms)
    for i in range(n_heavy):
        while capacity[i] > 0:
            placed = False
            for slot in list(free[i]):
                u = frames[i][slot]
                for _ in range(6):
                    p = pos[i] + rng.uniform(*HYDROGEN_BOND) * u
                    if _clear(pos, p, "H", syms, i, nbrs[i], rho, min_dist, same_min, steric_min):
                        free[i].remove(slot)
                        capacity[i] -= 1
                        add("H", p, np.zeros((4, 3)), 0, i)
                        capacity[-1] = 0
                        placed = True
                        break
                if placed:
                    break
            if not placed:
                return None
    xyz = np.asarray(pos)
    xyz = xyz - xyz.mean(axis=0)
    return Molecule(syms, xyz, bonds)


def generate_corpus(
    n_molecules: int,
    seed: int = 0,
    min_atoms: int = 5,
    max_atoms: int = 30,
    elements=QM9_ELEMENTS,
    min_dist: float = 1.0,
    same_element_min: float = 1.45,
    steric_min: float = 1.7,
    max_radius: float | None = MAX_RADIUS,
) -> list[Molecule]:
    """Deterministic list of synthetic molecules; sizes drawn uniformly in [min_atoms, max_atoms]."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_molecules):
        n = int(rng.integers(min_atoms, max_atoms + 1))
        out.append(random_molecule(n, rng, elements=elements, min_dist=min_dist,
                                   same_element_min=same_element_min, steric_min=steric_min,
                                   max_radius=max_radius))
    return out


def write_corpus(mols, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, mol in enumerate(mols):
        path = directory / f"mol_{i:05d}.xyz"
        path.write_text(write_xyz(mol, comment=mol.formula()))
        paths.append(path)
    return paths


def read_corpus(directory) -> list[Molecule]:
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix == ".xyz")
    return [read_xyz(p) for p in paths]


def corpus_names(directory) -> list[str]:
    return sorted(os.path.basename(p) for p in Path(directory).iterdir() if p.suffix == ".xyz")
