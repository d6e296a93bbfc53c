"""Field sources behind one query interface.

* :class:`AnalyticProvider` evaluates the closed-form field of a molecule.
* :class:`GridProvider` trilinearly interpolates field values sampled on a
  regular anchor grid, a stand-in for a decoded latent grid.
* :class:`NoisyProvider` adds a fixed, position-keyed Gaussian perturbation.
* :class:`SpuriousAttractorProvider` injects ghost wells into the channels of
  absent element types, reproducing the failure the exclusive field guards
  against.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from vecfield.chem import GEOM_ELEMENTS, QM9_ELEMENTS, Molecule
from vecfield.field import FieldParams, element_field


class FieldProvider(Protocol):
    elements: tuple[str, ...]

    def query(self, queries: np.ndarray, element: str) -> np.ndarray: ...


def query(provider: FieldProvider, queries, element: str) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if q.shape[0] == 0:
        raise ValueError("empty query set")
    return provider.query(q, element)


class AnalyticProvider:
    def __init__(self, mol: Molecule, params: FieldParams = FieldParams(), elements=QM9_ELEMENTS):
        self.mol = mol
        self.params = params
        self.elements = tuple(elements)

    def query(self, queries, element):
        return element_field(np.asarray(queries, dtype=np.float64).reshape(-1, 3), self.mol, element, self.params)


# ---------------------------------------------------------------------------
# Grid provider
# ---------------------------------------------------------------------------

GRID_MAGIC = b"VFGRID1"
_HEADER = struct.Struct("<7sII4d")


@dataclass(frozen=True)
class LatentGrid:
    """Field vectors on an L x L x L anchor grid.

    ``samples`` has shape (L, L, L, K, 3) indexed ``[iz, iy, ix, k, c]``;
    the anchor ``(ix, iy, iz)`` sits at ``origin + spacing * (ix, iy, iz)``.
    """

    size: int
    spacing: float
    origin: np.ndarray
    samples: np.ndarray
    elements: tuple[str, ...] = QM9_ELEMENTS

    def __post_init__(self):
        if self.size < 2 or self.spacing <= 0:
            raise ValueError("grid needs size >= 2 and positive spacing")
        L, K = self.size, len(self.elements)
        if self.samples.shape != (L, L, L, K, 3):
            raise ValueError(f"samples shape {self.samples.shape} != {(L, L, L, K, 3)}")

    @property
    def extent(self) -> float:
        return self.spacing * (self.size - 1)

    def anchors(self) -> np.ndarray:
        """Anchor positions in storage order (z-major), shape (L**3, 3)."""
        idx = np.arange(self.size)
        iz, iy, ix = np.meshgrid(idx, idx, idx, indexing="ij")
        return self.origin + self.spacing * np.stack([ix, iy, iz], axis=-1).reshape(-1, 3)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(GRID_MAGIC, self.size, len(self.elements), self.spacing, *map(float, self.origin))
        return head + np.ascontiguousarray(self.samples, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, elements: Sequence[str] | None = None) -> "LatentGrid":
        magic, L, K, spacing, ox, oy, oz = _HEADER.unpack_from(data)
        if magic != GRID_MAGIC:
            raise ValueError("not a vector-field grid file")
        if elements is None:
            elements = {len(QM9_ELEMENTS): QM9_ELEMENTS, len(GEOM_ELEMENTS): GEOM_ELEMENTS}.get(K)
            if elements is None:
                raise ValueError(f"cannot infer element order for K={K}")
        body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
        if body.size != L ** 3 * K * 3:
            raise ValueError("truncated grid payload")
        return cls(L, spacing, np.array([ox, oy, oz]), body.reshape(L, L, L, K, 3).copy(), tuple(elements))


def required_size(mol: Molecule, spacing: float) -> int:
    if len(mol) == 0:
        return 2
    half = np.abs(mol.positions - mol.centroid()).max()
    return max(2, int(math.ceil(2 * half / spacing - 1e-12)) + 1)


def build_grid(
    mol: Molecule,
    size: int = 5,
    spacing: float = 3.0,
    params: FieldParams = FieldParams(),
    elements=QM9_ELEMENTS,
) -> LatentGrid:
    """Sample the analytic field on a grid centred on the molecule's centroid."""
    if size < 2:
        raise ValueError("grid size must be at least 2")
    need = required_size(mol, spacing)
    if need > size:
        raise ValueError(f"molecule does not fit a {size}^3 grid at spacing {spacing}; need size >= {need}")
    origin = mol.centroid() - spacing * (size - 1) / 2.0
    grid = LatentGrid(size, spacing, origin, np.zeros((size,) * 3 + (len(elements), 3)), tuple(elements))
    anchors = grid.anchors()
    samples = np.stack([element_field(anchors, mol, e, params) for e in elements], axis=1)
    return LatentGrid(size, spacing, origin, samples.reshape(grid.samples.shape), tuple(elements))


class GridProvider:
    """Trilinear interpolation of a :class:`LatentGrid`; outside points are clamped."""

    def __init__(self, grid: LatentGrid):
        self.grid = grid
        self.elements = grid.elements

    def query(self, queries, element, return_clamped: bool = False):
        g = self.grid
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        f = (q - g.origin) / g.spacing
        top = g.size - 1
        clamped = np.any((f < 0) | (f > top), axis=1)
        f = np.clip(f, 0, top)
        i0 = np.minimum(np.floor(f).astype(int), top - 1)
        t = f - i0
        k = g.elements.index(element)
        vals = g.samples[..., k, :]
        out = np.zeros((len(q), 3))
        for dz in (0, 1):
            wz = t[:, 2] if dz else 1 - t[:, 2]
            for dy in (0, 1):
                wy = t[:, 1] if dy else 1 - t[:, 1]
                for dx in (0, 1):
                    wx = t[:, 0] if dx else 1 - t[:, 0]
                    corner = vals[i0[:, 2] + dz, i0[:, 1] + dy, i0[:, 0] + dx]
                    out += (wx * wy * wz)[:, None] * corner
        if return_clamped:
            return out, clamped
        return out


# ---------------------------------------------------------------------------
# Noise wrapper
# ---------------------------------------------------------------------------

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix(x: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def hashed_normals(seed: int, element_index: int, queries: np.ndarray, quantum: float = 1e-6) -> np.ndarray:
    """Standard normal 3-vectors keyed on (seed, element, position rounded to ``quantum``)."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    keys = np.round(q / quantum).astype(np.int64).view(np.uint64)
    with np.errstate(over="ignore"):
        h = _mix(np.full(len(q), np.uint64(seed & 0xFFFFFFFFFFFFFFFF)) + np.uint64(element_index) * _GOLDEN)
        for c in range(3):
            h = _mix(h ^ keys[:, c])
        u = []
        for i in range(4):
            x = _mix(h + np.uint64(i + 1) * _GOLDEN)
            u.append(((x >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53)
    r1 = np.sqrt(-2.0 * np.log(u[0]))
    r2 = np.sqrt(-2.0 * np.log(u[2]))
    return np.stack(
        [r1 * np.cos(2 * np.pi * u[1]), r1 * np.sin(2 * np.pi * u[1]), r2 * np.cos(2 * np.pi * u[3])],
        axis=1,
    )


@dataclass(frozen=True)
class NoiseSpec:
    sigma_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_noise < 0:
            raise ValueError("sigma_noise must be non-negative")


class NoisyProvider:
    """Adds ``N(0, sigma^2 I)`` to every returned vector.

    The perturbation is a deterministic function of (seed, element, query
    position), so the wrapped field is a fixed noisy field rather than fresh
    noise on each call.
    """

    def __init__(self, base: FieldProvider, spec: NoiseSpec):
        self.base = base
        self.spec = spec
        self.elements = base.elements

    def query(self, queries, element):
        clean = self.base.query(queries, element)
        if self.spec.sigma_noise == 0:
            return clean
        idx = GEOM_ELEMENTS.index(element)
        return clean + self.spec.sigma_noise * hashed_normals(self.spec.seed, idx, queries)


def wrap_noise(provider: FieldProvider, spec: NoiseSpec) -> FieldProvider:
    return NoisyProvider(provider, spec)


# ---------------------------------------------------------------------------
# Ghost attractors for the exclusive-field study
# ---------------------------------------------------------------------------

class SpuriousAttractorProvider:
    """Analytic field plus Gaussian wells in the channels of absent types.

    Each well pulls with ``strength * exp(-r^2 / (2 width^2)) * (site - q)``;
    its peak magnitude ``strength * width * exp(-1/2)`` stays below the
    clipped attraction plateau so a repulsive channel can overpower it.
    Wells of one type are kept ``min_separation`` apart so their pulls do
    not stack above that peak. Sites sit near randomly chosen atoms,
    mimicking a learned field that leaks one element's basins into another
    element's channel.
    """

    def __init__(
        self,
        mol: Molecule,
        params: FieldParams = FieldParams(),
        elements=QM9_ELEMENTS,
        sites_per_type: int = 2,
        strength: float = 0.2,
        width: float = 1.0,
        offset: float = 0.3,
        min_separation: float = 4.0,
        seed: int = 0,
    ):
        self.base = AnalyticProvider(mol, params, elements)
        self.elements = tuple(elements)
        self.strength = strength
        self.width = width
        rng = np.random.default_rng(seed)
        self.sites: dict[str, np.ndarray] = {}
        for e in self.elements:
            if e in mol.elements or len(mol) == 0:
                continue
            chosen: list[np.ndarray] = []
            for atom in rng.permutation(len(mol)):
                if len(chosen) == sites_per_type:
                    break
                jitter = rng.normal(size=3)
                site = mol.positions[atom] + offset * jitter / np.linalg.norm(jitter)
                if all(np.linalg.norm(site - c) >= min_separation for c in chosen):
                    chosen.append(site)
            self.sites[e] = np.array(chosen).reshape(-1, 3)

    def query(self, queries, element):
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        out = self.base.query(q, element)
        for site in self.sites.get(element, ()):
            diff = site - q
            r2 = np.einsum("ij,ij->i", diff, diff)
            out = out + (self.strength * np.exp(-r2 / (2 * self.width ** 2)))[:, None] * diff
        return out
