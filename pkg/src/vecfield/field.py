"""Analytic per-element vector fields pointing toward atoms of each type.

For element ``k`` with atoms ``a_j`` the field at ``q`` is

    v_k(q) = sum_j softmax_j(-d_j / sigma_sf) * w_mag(d_j) * (a_j - q) / (d_j + eps)

with ``d_j = |a_j - q|``. The magnitude profile ``w_mag`` depends on the
variant:

* ``gaussian_clip``: ``exp(-dc^2 / (2 sigma_mag^2)) * dc`` with ``dc = min(d, d_clip)``
* ``gaussian``: the same without clipping, so it vanishes far from atoms
* ``tanh``: ``tanh(d / sigma_mag) * exp(-d^2 / (2 (2 sigma_mag)^2))``

Every atom centre is a sink of its own type's field. Element types absent
from the molecule get a repulsive field instead when ``exclusive`` is set.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field, replace
from typing import Sequence

import numpy as np

from vecfield.chem import QM9_ELEMENTS, Molecule

VARIANTS = ("gaussian_clip", "gaussian", "tanh")
REPULSIONS = ("radial", "negated")
_CHUNK = 4096


@dataclass(frozen=True)
class FieldParams:
    variant: str = "gaussian_clip"
    sigma_sf: float = 0.1
    sigma_mag: float = 0.45
    d_clip: float = 0.8
    eps: float = 1e-8
    exclusive: bool = True
    # "radial": outward from the molecular centroid; "negated": minus the
    # attraction toward all atoms regardless of type
    repulsion: str = "radial"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown field variant {self.variant!r}; choose from {VARIANTS}")
        if self.repulsion not in REPULSIONS:
            raise ValueError(f"unknown repulsion {self.repulsion!r}; choose from {REPULSIONS}")
        for name in ("sigma_sf", "sigma_mag", "d_clip", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def max_magnitude(self) -> float:
        """Supremum of the magnitude profile, which bounds every field vector."""
        return max_magnitude(self)


@dataclass(frozen=True)
class FieldSample:
    query: np.ndarray
    vectors: np.ndarray  # (K, 3), rows in element order
    elements: tuple[str, ...]
    absent: frozenset = dc_field(default_factory=frozenset)

    def __getitem__(self, element: str) -> np.ndarray:
        return self.vectors[self.elements.index(element)]


def softmax_weights(distances, sigma_sf: float) -> np.ndarray:
    """Softmax of ``-d / sigma_sf`` along the last axis (max-subtracted)."""
    d = np.asarray(distances, dtype=np.float64)
    if d.shape[-1] == 0:
        raise ValueError("softmax over an empty distance list")
    if sigma_sf <= 0:
        raise ValueError("sigma_sf must be positive")
    logits = -d / sigma_sf
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def magnitude_weight(d, params: FieldParams = FieldParams()) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    s = params.sigma_mag
    if params.variant == "gaussian_clip":
        dc = np.minimum(d, params.d_clip)
        return np.exp(-dc * dc / (2 * s * s)) * dc
    if params.variant == "gaussian":
        return np.exp(-d * d / (2 * s * s)) * d
    wide = 2.0 * s
    return np.tanh(d / s) * np.exp(-d * d / (2 * wide * wide))


def max_magnitude(params: FieldParams) -> float:
    s = params.sigma_mag
    if params.variant == "gaussian_clip":
        # d * exp(-d^2 / 2s^2) peaks at d = s
        return float(magnitude_weight(min(s, params.d_clip), params))
    if params.variant == "gaussian":
        return float(magnitude_weight(s, params))
    grid = np.linspace(0.0, 10.0 * s, 200001)
    return float(magnitude_weight(grid, params).max()) * (1 + 1e-9)


def _attraction(queries: np.ndarray, atoms: np.ndarray, params: FieldParams) -> np.ndarray:
    """Vectorised attraction of ``queries`` (m, 3) toward ``atoms`` (n, 3)."""
    m = queries.shape[0]
    if atoms.shape[0] == 0:
        return np.zeros((m, 3))
    out = np.empty((m, 3))
    for start in range(0, m, _CHUNK):
        q = queries[start:start + _CHUNK]
        diff = atoms[None, :, :] - q[:, None, :]
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        w = softmax_weights(d, params.sigma_sf) * magnitude_weight(d, params) / (d + params.eps)
        out[start:start + _CHUNK] = np.einsum("ij,ijk->ik", w, diff)
    return out


def _repulsion(queries: np.ndarray, mol: Molecule, params: FieldParams) -> np.ndarray:
    """Outward field for element types absent from ``mol``.

    The radial form points away from the molecular centroid with the same
    magnitude profile as the attraction. The centroid is its only zero, and
    it is a source, so no particle of an absent type can settle anywhere.
    The negated form repels from every atom but has zeros (and stable
    sinks) wherever pushes from surrounding atoms cancel.
    """
    if len(mol) == 0:
        return np.zeros((queries.shape[0], 3))
    if params.repulsion == "negated":
        return -_attraction(queries, mol.positions, params)
    diff = queries - mol.centroid()
    r = np.linalg.norm(diff, axis=1)
    w = magnitude_weight(r, params) / (r + params.eps)
    return w[:, None] * diff


def _as_queries(q) -> tuple[np.ndarray, bool]:
    arr = np.asarray(q, dtype=np.float64)
    single = arr.ndim == 1
    return arr.reshape(-1, 3), single


def element_field(queries, mol: Molecule, element: str, params: FieldParams = FieldParams()) -> np.ndarray:
    """Field of one element type at many query points, shape (m, 3).

    Absent types give the repulsive field when ``params.exclusive`` is set
    and zeros otherwise.
    """
    q, single = _as_queries(queries)
    atoms = mol.positions_of(element)
    if len(atoms):
        out = _attraction(q, atoms, params)
    elif params.exclusive:
        out = _repulsion(q, mol, params)
    else:
        out = np.zeros_like(q)
    return out[0] if single else out


def ground_truth_field(q, mol: Molecule, element: str, params: FieldParams = FieldParams()) -> np.ndarray:
    """Gaussian-Clip field of ``element`` at a single point (or an (m, 3) array)."""
    if params.variant != "gaussian_clip":
        params = replace(params, variant="gaussian_clip")
    return element_field(q, mol, element, params)


def variant_field(q, mol: Molecule, element: str, params: FieldParams = FieldParams()) -> np.ndarray:
    """Field of ``element`` using ``params.variant``'s magnitude profile."""
    return element_field(q, mol, element, params)


def exclusive_field(q, mol: Molecule, absent: str, params: FieldParams = FieldParams()) -> np.ndarray:
    if absent in mol.elements:
        raise ValueError(f"{absent} is present in the molecule; the exclusive field is for absent types")
    qq, single = _as_queries(q)
    out = _repulsion(qq, mol, params)
    return out[0] if single else out


def field_batch(
    queries,
    mol: Molecule,
    params: FieldParams = FieldParams(),
    elements: Sequence[str] = QM9_ELEMENTS,
    workers: int = 1,
) -> list[FieldSample]:
    """Evaluate all element fields at every query point.

    Query points are independent, so chunks may run on a thread pool; the
    per-query arithmetic is the same either way and results are identical.
    """
    q, _ = _as_queries(queries)
    if q.shape[0] == 0:
        raise ValueError("empty query set")
    elements = tuple(elements)
    absent = frozenset(e for e in elements if e not in mol.elements)

    def run(chunk):
        return np.stack([element_field(chunk, mol, e, params) for e in elements], axis=1)

    chunks = [q[i:i + 256] for i in range(0, len(q), 256)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    vecs = np.concatenate(parts, axis=0)
    return [FieldSample(q[i].copy(), vecs[i], elements, absent) for i in range(len(q))]


def plane_points(point, normal, half_extent: float, resolution: int) -> np.ndarray:
    """Square grid of ``resolution`` x ``resolution`` points on a plane.

    ``resolution == 1`` yields just ``point``.
    """
    point = np.asarray(point, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    norm = np.linalg.norm(n)
    if norm == 0 or resolution < 1 or half_extent < 0:
        raise ValueError("plane needs a non-zero normal, resolution >= 1 and half_extent >= 0")
    n = n / norm
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(n, helper)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    if resolution == 1:
        return point[None, :]
    s = np.linspace(-half_extent, half_extent, resolution)
    a, b = np.meshgrid(s, s, indexing="ij")
    return point + a.reshape(-1, 1) * u + b.reshape(-1, 1) * v


def slice_csv(samples: list[FieldSample]) -> str:
    """CSV rows ``x,y,z,element,vx,vy,vz,magnitude`` for every sample and element."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "z", "element", "vx", "vy", "vz", "magnitude"])
    for s in samples:
        x, y, z = s.query.tolist()
        for e, vec in zip(s.elements, s.vectors.tolist()):
            w.writerow([repr(x), repr(y), repr(z), e, repr(vec[0]), repr(vec[1]), repr(vec[2]),
                        repr(float(np.linalg.norm(vec)))])
    return buf.getvalue()
