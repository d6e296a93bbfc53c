"""Distribution distances and corpus-level quality metrics for 3D molecules."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import networkx as nx
import numpy as np

from vecfield.chem import Molecule, canonical_hash, check_stability, complete_valence


@dataclass(frozen=True)
class ContinuousDistribution:
    samples: np.ndarray
    unit: str = ""

    def __post_init__(self):
        arr = np.sort(np.asarray(self.samples, dtype=np.float64).ravel())
        if not np.isfinite(arr).all():
            raise ValueError("samples must be finite")
        object.__setattr__(self, "samples", arr)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class CategoricalDistribution:
    probs: dict

    def __post_init__(self):
        p = {k: float(v) for k, v in self.probs.items()}
        if any(v < 0 for v in p.values()):
            raise ValueError("probabilities must be non-negative")
        if p and abs(sum(p.values()) - 1.0) > 1e-12:
            raise ValueError("probabilities must sum to 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_labels(cls, labels) -> "CategoricalDistribution":
        counts = Counter(labels)
        total = sum(counts.values())
        return cls({k: c / total for k, c in counts.items()}) if total else cls({})


def _samples(x) -> np.ndarray:
    if isinstance(x, ContinuousDistribution):
        return x.samples
    return ContinuousDistribution(x).samples


def wasserstein1(a, b) -> float:
    """W1 between two 1-D empirical distributions as the integral of |F_a - F_b|."""
    xa, xb = _samples(a), _samples(b)
    if len(xa) == 0 or len(xb) == 0:
        raise ValueError("Wasserstein distance of an empty distribution")
    allv = np.concatenate([xa, xb])
    allv.sort(kind="mergesort")
    widths = np.diff(allv)
    fa = np.searchsorted(xa, allv[:-1], side="right") / len(xa)
    fb = np.searchsorted(xb, allv[:-1], side="right") / len(xb)
    return float(np.sum(np.abs(fa - fb) * widths))


def _probs(x) -> dict:
    if isinstance(x, CategoricalDistribution):
        return x.probs
    return CategoricalDistribution(dict(x)).probs


def total_variation(p, q) -> float:
    """Half the L1 distance between two categorical distributions over the union of labels."""
    pp, qq = _probs(p), _probs(q)
    labels = sorted(set(pp) | set(qq), key=repr)
    return 0.5 * float(sum(abs(pp.get(k, 0.0) - qq.get(k, 0.0)) for k in labels))


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Geometry:
    bond_lengths: list
    bond_angles: list  # degrees
    valencies: list
    ring_sizes: list


def extract_geometry(mol: Molecule) -> Geometry:
    pos = mol.positions
    lengths = [float(np.linalg.norm(pos[i] - pos[j])) for i, j, _ in mol.bonds]
    nbrs: list[list[int]] = [[] for _ in range(len(mol))]
    for i, j, _ in mol.bonds:
        nbrs[i].append(j)
        nbrs[j].append(i)
    angles = []
    for c, ns in enumerate(nbrs):
        ns = sorted(ns)
        for x in range(len(ns)):
            for y in range(x + 1, len(ns)):
                u, v = pos[ns[x]] - pos[c], pos[ns[y]] - pos[c]
                cos = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
                angles.append(float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))))
    rings = sorted(len(cycle) for cycle in nx.minimum_cycle_basis(mol.graph()))
    return Geometry(lengths, angles, [int(v) for v in mol.valences()], rings)


# ---------------------------------------------------------------------------
# Corpus evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    stable_mol_pct: float
    stable_atom_pct: float
    valid_pct: float
    unique_pct: float
    valency_w1: float
    atom_tv: float
    bond_tv: float
    bond_len_w1: float
    bond_ang_w1: float
    single_fragment_pct: float
    ring_size_tv: float
    atoms_per_mol_tv: float

    CSV_COLUMNS = (
        "stable_mol", "stable_atom", "valid", "unique", "valency_w1", "atom_tv", "bond_tv",
        "bond_len_w1", "bond_ang_w1", "single_fragment", "ring_size_tv", "atoms_per_mol_tv",
    )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        w.writerow([repr(getattr(self, f.name)) for f in fields(self)])
        return buf.getvalue()


@dataclass
class _Stats:
    n_mols: int
    lengths: list
    angles: list
    valencies: list
    rings: list
    atom_types: list
    bond_types: list
    largest_fragment_sizes: list


def _collect(mols: Sequence[Molecule]) -> _Stats:
    st = _Stats(len(mols), [], [], [], [], [], [], [])
    for mol in mols:
        g = extract_geometry(mol)
        st.lengths += g.bond_lengths
        st.angles += g.bond_angles
        st.valencies += g.valencies
        st.rings += g.ring_sizes
        st.atom_types += list(mol.elements)
        st.bond_types += [o for _, _, o in complete_valence(mol).bonds]
        frags = mol.fragments()
        st.largest_fragment_sizes.append(max((len(f) for f in frags), default=0))
    return st


def _w1_or_nan(a, b) -> float:
    if not a and not b:
        return 0.0
    if not a or not b:
        return float("nan")
    return wasserstein1(a, b)


def _tv_labels(a, b) -> float:
    if not a and not b:
        return 0.0
    if not a or not b:
        return 1.0
    return total_variation(CategoricalDistribution.from_labels(a), CategoricalDistribution.from_labels(b))


def evaluate_corpus(generated: Sequence[Molecule], reference: Sequence[Molecule]) -> MetricsReport:
    """Stability, validity, uniqueness and distribution distances to a reference corpus.

    Molecules are expected to carry bonds. A W1 entry is NaN when only one
    side has samples; TV against an empty side is 1.
    """
    if not generated or not reference:
        raise ValueError("both corpora must be non-empty")
    reports = [check_stability(m) for m in generated]
    n = len(generated)
    total_atoms = sum(len(m) for m in generated)
    stable_atoms = sum(r.stable_atom_fraction * len(m) for r, m in zip(reports, generated))
    valid_hashes = {canonical_hash(m) for m, r in zip(generated, reports) if r.valid}
    gen, ref = _collect(generated), _collect(reference)
    return MetricsReport(
        stable_mol_pct=100.0 * sum(r.molecule_stable for r in reports) / n,
        stable_atom_pct=100.0 * stable_atoms / total_atoms if total_atoms else 0.0,
        valid_pct=100.0 * sum(r.valid for r in reports) / n,
        unique_pct=100.0 * len(valid_hashes) / n,
        valency_w1=_w1_or_nan(gen.valencies, ref.valencies),
        atom_tv=_tv_labels(gen.atom_types, ref.atom_types),
        bond_tv=_tv_labels(gen.bond_types, ref.bond_types),
        bond_len_w1=_w1_or_nan(gen.lengths, ref.lengths),
        bond_ang_w1=_w1_or_nan(gen.angles, ref.angles),
        single_fragment_pct=100.0 * sum(r.n_fragments == 1 for r in reports) / n,
        ring_size_tv=_tv_labels(gen.rings, ref.rings),
        atoms_per_mol_tv=_tv_labels(gen.largest_fragment_sizes, ref.largest_fragment_sizes),
    )


def distribution_summary(mols: Sequence[Molecule]) -> Mapping[str, list]:
    st = _collect(mols)
    return {"bond_lengths": st.lengths, "bond_angles": st.angles, "valencies": st.valencies,
            "ring_sizes": st.rings}
