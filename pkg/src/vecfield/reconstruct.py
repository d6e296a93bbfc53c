"""Field-to-molecule reconstruction by particle gradient ascent and density clustering.

Particles of each element type start uniformly (or adaptively) inside a box,
follow ``q <- q + eta * v_k(q)`` until the field norm drops below ``tau`` or
the iteration budget runs out, and are then grouped with DBSCAN. Each dense
cluster becomes one atom of that type.
"""

from __future__ import annotations

import csv
import io
import json
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.stats import qmc

from vecfield._spatial import SpatialHash
from vecfield.chem import DEFAULT_RHO, GEOM_ELEMENTS, Molecule, infer_bonds

SAMPLERS = ("halton", "random")
QM9_BUDGET = {"C": 200, "H": 200, "O": 30, "N": 30, "F": 15}
GEOM_BUDGET = {"C": 1000, "H": 1000, "O": 100, "N": 150, "F": 20, "S": 20, "Cl": 20, "Br": 20}


@dataclass(frozen=True)
class ReconstructionConfig:
    eta: float = 0.1
    # Near an atom |v| ~ distance, so tau bounds the final offset from the
    # attractor; 1e-7 keeps round-trip errors well below 1e-6 Å.
    tau: float = 1e-7
    t_max: int = 500
    eps_db: float = 0.1
    n_min: int = 3
    query_budget: dict = field(default_factory=lambda: dict(QM9_BUDGET))
    # pool-and-select initialisation; uniform starts starve small basins
    adaptive: bool = True
    sampler: str = "halton"
    pool_multiplier: int = 4
    knn_k: int = 8
    softmax_temp: float | None = None
    rho: float = DEFAULT_RHO
    padding: float = 2.0

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not self.tau >= 0:
            raise ValueError("tau must be non-negative")
        if self.t_max < 1:
            raise ValueError("t_max must be at least 1")
        if not self.eps_db > 0:
            raise ValueError("eps_db must be positive")
        if self.n_min < 1:
            raise ValueError("n_min must be at least 1")
        if self.pool_multiplier < 1 or self.knn_k < 2:
            raise ValueError("pool_multiplier >= 1 and knn_k >= 2 required")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if any(int(n) < 0 for n in self.query_budget.values()):
            raise ValueError("query budgets must be non-negative")

    def with_(self, **changes) -> "ReconstructionConfig":
        return replace(self, **changes)


def scaled_budget(budget: dict, factor: float) -> dict:
    return {e: max(1, int(round(n * factor))) for e, n in budget.items()}


# ---------------------------------------------------------------------------
# Bounding volume and initialisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Parallelepiped ``origin + u @ edges`` for ``u`` in the unit cube.

    Rows of ``edges`` are the edge vectors; an axis-aligned box has a
    diagonal ``edges``. Keeping edges explicit lets a box be rotated along
    with the molecule it encloses.
    """

    origin: np.ndarray
    edges: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "edges", np.asarray(self.edges, dtype=np.float64).reshape(3, 3))

    @classmethod
    def axis_aligned(cls, lo, hi) -> "Box":
        lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        return cls(lo, np.diag(hi - lo))

    @classmethod
    def around(cls, mol: Molecule, padding: float = 2.0) -> "Box":
        if len(mol) == 0:
            return cls.axis_aligned(np.full(3, -padding), np.full(3, padding))
        return cls.axis_aligned(mol.positions.min(axis=0) - padding, mol.positions.max(axis=0) + padding)

    @property
    def volume(self) -> float:
        return float(abs(np.linalg.det(self.edges)))

    @property
    def center(self) -> np.ndarray:
        return self.origin + 0.5 * self.edges.sum(axis=0)

    def sample(self, u: np.ndarray) -> np.ndarray:
        return self.origin + u @ self.edges

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        u = np.linalg.solve(self.edges.T, (np.asarray(points) - self.origin).T).T
        return np.all((u >= -tol) & (u <= 1 + tol), axis=-1)

    def transformed(self, rotation=None, translation=None) -> "Box":
        origin, edges = self.origin, self.edges
        if rotation is not None:
            r = np.asarray(rotation)
            origin, edges = r @ origin, edges @ r.T
        if translation is not None:
            origin = origin + np.asarray(translation)
        return Box(origin, edges)


@dataclass
class ParticleSet:
    positions: np.ndarray
    converged: np.ndarray
    diverged: np.ndarray
    iterations: np.ndarray

    @classmethod
    def fresh(cls, positions) -> "ParticleSet":
        p = np.array(positions, dtype=np.float64).reshape(-1, 3)
        n = len(p)
        return cls(p, np.zeros(n, bool), np.zeros(n, bool), np.zeros(n, int))

    def __len__(self) -> int:
        return len(self.positions)

    def copy(self) -> "ParticleSet":
        return ParticleSet(self.positions.copy(), self.converged.copy(), self.diverged.copy(),
                           self.iterations.copy())


@dataclass
class TrajectoryBatch:
    particles: dict[str, ParticleSet]

    def __getitem__(self, element: str) -> ParticleSet:
        return self.particles[element]

    def elements(self) -> list[str]:
        return list(self.particles)

    def counts(self) -> dict[str, int]:
        return {e: len(p) for e, p in self.particles.items()}

    def copy(self) -> "TrajectoryBatch":
        return TrajectoryBatch({e: p.copy() for e, p in self.particles.items()})


def _element_rng(seed: int, element: str) -> np.random.Generator:
    # one independent stream per element, stable regardless of budget order
    return np.random.default_rng([int(seed), GEOM_ELEMENTS.index(element)])


def unit_samples(n: int, seed: int, element: str, sampler: str = "halton") -> np.ndarray:
    """``n`` points in the unit cube, each marginally uniform.

    ``"random"`` draws i.i.d. points; ``"halton"`` draws a scrambled Halton
    sequence whose even coverage keeps the number of points landing in any
    small region close to its expected value.
    """
    rng = _element_rng(seed, element)
    if sampler == "random":
        return rng.random((n, 3))
    if sampler == "halton":
        return qmc.Halton(3, scramble=True, seed=rng).random(n)
    raise ValueError(f"unknown sampler {sampler!r}")


def init_uniform(budget: dict, bbox: Box, seed: int = 0, sampler: str = "halton") -> TrajectoryBatch:
    if not bbox.volume > 0:
        raise ValueError("bounding box has zero volume")
    particles = {}
    for e, n in budget.items():
        particles[e] = ParticleSet.fresh(bbox.sample(unit_samples(int(n), seed, e, sampler)))
    return TrajectoryBatch(particles)


def adaptive_select(
    provider,
    element: str,
    pool,
    budget: int,
    knn_k: int = 8,
    softmax_temp: float | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Draw ``budget`` pool points, favouring regions where the field magnitude varies.

    A candidate's score is the variance of field magnitudes over its
    ``knn_k`` nearest neighbours in magnitude space (itself included).
    Selection probabilities are ``softmax(score / temp)`` with ``temp``
    defaulting to the mean score; equal scores give a uniform draw.
    """
    pool = np.asarray(pool, dtype=np.float64).reshape(-1, 3)
    if budget > len(pool):
        raise ValueError(f"budget {budget} exceeds pool size {len(pool)}")
    if knn_k < 2:
        raise ValueError("knn_k must be at least 2")
    rng = np.random.default_rng([int(seed), GEOM_ELEMENTS.index(element), 1])
    if budget == 0:
        return np.zeros((0, 3))
    mags = np.linalg.norm(provider.query(pool, element), axis=1)
    k = min(knn_k, len(pool))
    _, idx = cKDTree(mags[:, None]).query(mags[:, None], k=k)
    idx = np.asarray(idx).reshape(len(pool), k)
    scores = mags[idx].var(axis=1)
    temp = float(scores.mean()) if softmax_temp is None else float(softmax_temp)
    if temp > 0 and np.ptp(scores) > 0:
        logits = scores / temp
        p = np.exp(logits - logits.max())
        # keep every candidate drawable so sampling without replacement never runs dry
        p = np.maximum(p / p.sum(), 1e-300)
        p /= p.sum()
    else:
        p = None
    chosen = rng.choice(len(pool), size=budget, replace=False, p=p)
    return pool[chosen]


def init_adaptive(provider, budget: dict, bbox: Box, cfg: ReconstructionConfig, seed: int = 0) -> TrajectoryBatch:
    if not bbox.volume > 0:
        raise ValueError("bounding box has zero volume")
    particles = {}
    for e, n in budget.items():
        pool = bbox.sample(unit_samples(int(n) * cfg.pool_multiplier, seed, e, cfg.sampler))
        picked = adaptive_select(provider, e, pool, int(n), cfg.knn_k, cfg.softmax_temp, seed)
        particles[e] = ParticleSet.fresh(picked)
    return TrajectoryBatch(particles)


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------

def evolve(
    provider,
    batch: TrajectoryBatch,
    cfg: ReconstructionConfig,
    trajectory: list | None = None,
    record_every: int = 1,
) -> TrajectoryBatch:
    """Euler ascent with a convergence check before every step.

    A particle converges at the first check where ``|v| < tau``; its
    iteration count is the number of steps it took. Non-finite field values
    flag the particle as diverged. Only active particles are queried, and
    every particle's update depends on its own position alone.
    If ``trajectory`` is a list, ``(step, element, positions)`` snapshots are
    appended every ``record_every`` steps.
    """
    out = batch.copy()
    for e, ps in out.particles.items():
        pos, conv, div, iters = ps.positions, ps.converged, ps.diverged, ps.iterations
        for t in range(cfg.t_max + 1):
            if trajectory is not None and t % record_every == 0:
                trajectory.append((t, e, pos.copy()))
            active = np.flatnonzero(~conv & ~div)
            if active.size == 0:
                break
            v = provider.query(pos[active], e)
            bad = ~np.isfinite(v).all(axis=1)
            div[active[bad]] = True
            iters[active[bad]] = t
            done = ~bad & (np.linalg.norm(np.where(bad[:, None], 0.0, v), axis=1) < cfg.tau)
            conv[active[done]] = True
            iters[active[done]] = t
            if t == cfg.t_max:
                iters[active[~bad & ~done]] = t
                break
            move = ~bad & ~done
            pos[active[move]] += cfg.eta * v[move]
            escaped = active[move][~np.isfinite(pos[active[move]]).all(axis=1)]
            div[escaped] = True
            iters[escaped] = t + 1
    return out


# ---------------------------------------------------------------------------
# Clustering and extraction
# ---------------------------------------------------------------------------

def _expand(neighbors: Sequence[np.ndarray], core: np.ndarray) -> np.ndarray:
    n = len(neighbors)
    labels = np.full(n, -1, dtype=int)
    visited = np.zeros(n, bool)
    cluster = 0
    for i in range(n):
        if visited[i] or not core[i]:
            continue
        visited[i] = True
        labels[i] = cluster
        queue = deque([i])
        while queue:
            p = queue.popleft()
            for j in neighbors[p]:
                if labels[j] == -1:
                    labels[j] = cluster
                if core[j] and not visited[j]:
                    visited[j] = True
                    queue.append(j)
        cluster += 1
    return labels


def dbscan(points, eps_db: float = 0.1, n_min: int = 3) -> np.ndarray:
    """DBSCAN labels (noise = -1) with spatial-hash neighbour search.

    Clusters are numbered in order of their lowest-index core point. A border
    point reachable from several clusters joins the first one expanded.
    """
    if not eps_db > 0 or n_min < 1:
        raise ValueError("eps_db must be positive and n_min >= 1")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros(0, dtype=int)
    neighbors = SpatialHash(pts, eps_db).neighbor_lists(eps_db)
    core = np.array([len(nb) >= n_min for nb in neighbors])
    return _expand(neighbors, core)


def dbscan_bruteforce(points, eps_db: float = 0.1, n_min: int = 3) -> np.ndarray:
    """O(n^2) reference with the same visiting order as :func:`dbscan`."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros(0, dtype=int)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    neighbors = [np.flatnonzero(row <= eps_db * eps_db) for row in d2]
    core = np.array([len(nb) >= n_min for nb in neighbors])
    return _expand(neighbors, core)


@dataclass
class ElementClusters:
    labels: np.ndarray  # over the non-diverged particles, in particle order
    centroids: np.ndarray
    sizes: np.ndarray


def cluster_element(ps: ParticleSet, cfg: ReconstructionConfig) -> ElementClusters:
    """Cluster one element's non-diverged particles.

    Particles stopped by the iteration budget take part in clustering so that
    slowly settling or noisy fields still yield atoms; a cluster's position is
    the mean of its converged members when it has any.
    """
    keep = ~ps.diverged
    pts = ps.positions[keep]
    conv = ps.converged[keep]
    labels = dbscan(pts, cfg.eps_db, cfg.n_min)
    n_clusters = int(labels.max()) + 1 if labels.size else 0
    cents = np.zeros((n_clusters, 3))
    sizes = np.zeros(n_clusters, dtype=int)
    for c in range(n_clusters):
        members = labels == c
        sizes[c] = members.sum()
        settled = members & conv
        cents[c] = pts[settled if settled.any() else members].mean(axis=0)
    return ElementClusters(labels, cents, sizes)


def extract_atoms(batch: TrajectoryBatch, cfg: ReconstructionConfig) -> Molecule:
    elements, coords = [], []
    for e, ps in batch.particles.items():
        cl = cluster_element(ps, cfg)
        elements.extend([e] * len(cl.centroids))
        coords.extend(cl.centroids)
    return Molecule(elements, np.asarray(coords).reshape(-1, 3))


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------

@dataclass
class Reconstruction:
    molecule: Molecule
    batch: TrajectoryBatch
    noise_fraction: float
    wall_time_ms: float


def reconstruct_detailed(provider, cfg: ReconstructionConfig, bbox: Box, seed: int = 0,
                         trajectory: list | None = None) -> Reconstruction:
    start = time.perf_counter()
    budget = {e: n for e, n in cfg.query_budget.items() if e in provider.elements}
    if cfg.adaptive:
        batch = init_adaptive(provider, budget, bbox, cfg, seed)
    else:
        batch = init_uniform(budget, bbox, seed, cfg.sampler)
    batch = evolve(provider, batch, cfg, trajectory)
    elements, coords = [], []
    noise = total = 0
    for e, ps in batch.particles.items():
        cl = cluster_element(ps, cfg)
        elements.extend([e] * len(cl.centroids))
        coords.extend(cl.centroids)
        noise += int((cl.labels == -1).sum()) + int(ps.diverged.sum())
        total += len(ps)
    mol = infer_bonds(Molecule(elements, np.asarray(coords).reshape(-1, 3)), cfg.rho)
    elapsed = (time.perf_counter() - start) * 1000.0
    return Reconstruction(mol, batch, noise / total if total else 0.0, elapsed)


def reconstruct(provider, cfg: ReconstructionConfig = ReconstructionConfig(), bbox: Box | None = None,
                seed: int = 0) -> Molecule:
    if bbox is None:
        mol = getattr(provider, "mol", None)
        if mol is None:
            raise ValueError("a bounding box is required for providers without a reference molecule")
        bbox = Box.around(mol, cfg.padding)
    return reconstruct_detailed(provider, cfg, bbox, seed).molecule


# ---------------------------------------------------------------------------
# Scoring and reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CountMismatch:
    """Element counts differ; ``deltas[e]`` is count in the second molecule minus the first."""

    deltas: dict

    def __bool__(self) -> bool:
        return False


def rmsd(a: Molecule, b: Molecule) -> float | CountMismatch:
    """Per-element optimal-assignment RMSD, or :class:`CountMismatch`."""
    ca, cb = a.counts(), b.counts()
    if ca != cb:
        deltas = {e: cb.get(e, 0) - ca.get(e, 0) for e in sorted(set(ca) | set(cb))}
        return CountMismatch({e: d for e, d in deltas.items() if d != 0})
    if len(a) == 0:
        return 0.0
    total = 0.0
    for e in sorted(ca):
        pa, pb = a.positions_of(e), b.positions_of(e)
        cost = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1)
        rows, cols = linear_sum_assignment(cost)
        total += float(cost[rows, cols].sum())
    return float(np.sqrt(total / len(a)))


def iterations_histogram(batch: TrajectoryBatch, t_max: int, bins: int = 10) -> dict:
    iters = np.concatenate([ps.iterations for ps in batch.particles.values()] or [np.zeros(0, int)])
    edges = np.linspace(0, t_max + 1, bins + 1)
    counts, _ = np.histogram(iters, bins=edges)
    return {f"{int(np.ceil(lo))}-{int(np.ceil(hi)) - 1}": int(c) for lo, hi, c in zip(edges[:-1], edges[1:], counts)}


def reconstruction_report(reference: Molecule, result: Reconstruction, cfg: ReconstructionConfig,
                          include_timing: bool = False) -> dict:
    score = rmsd(reference, result.molecule)
    ok = not isinstance(score, CountMismatch)
    rep = {
        "success": ok,
        "rmsd": float(score) if ok else None,
        "atom_count_deltas": {} if ok else dict(score.deltas),
        "iterations_histogram": iterations_histogram(result.batch, cfg.t_max),
        "noise_particle_fraction": result.noise_fraction,
    }
    if include_timing:
        rep["wall_time_ms"] = result.wall_time_ms
    return rep


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=False)


def trajectory_csv(trajectory: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "element", "particle", "x", "y", "z"])
    for step, element, pos in trajectory:
        for i, (x, y, z) in enumerate(pos.tolist()):
            w.writerow([step, element, i, repr(x), repr(y), repr(z)])
    return buf.getvalue()
