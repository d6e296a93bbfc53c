import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import linprog

from vecfield.chem import Molecule, canonical_hash, check_stability, infer_bonds
from vecfield.corpus import generate_corpus
from vecfield.metrics import (CategoricalDistribution, ContinuousDistribution, MetricsReport, distribution_summary,
                              evaluate_corpus, extract_geometry, total_variation, wasserstein1)

samples = st.lists(st.floats(-100, 100), min_size=1, max_size=40)


def lp_w1(a, b):
    """Optimal transport between uniform empirical measures solved as an LP."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    n, m = len(a), len(b)
    cost = np.abs(a[:, None] - b[None, :]).ravel()
    rows = np.zeros((n, n * m))
    cols = np.zeros((m, n * m))
    for i in range(n):
        rows[i, i * m:(i + 1) * m] = 1
    for j in range(m):
        cols[j, j::m] = 1
    res = linprog(cost, A_eq=np.vstack([rows, cols]), b_eq=np.r_[np.full(n, 1 / n), np.full(m, 1 / m)],
                  bounds=(0, None), method="highs", options={"primal_feasibility_tolerance": 1e-10,
                                                             "dual_feasibility_tolerance": 1e-10})
    return res.fun


def test_w1_examples():
    assert wasserstein1([1, 2, 3], [3, 2, 1]) == 0.0
    assert wasserstein1([0], [1]) == 1.0
    with pytest.raises(ValueError):
        wasserstein1([], [1])
    with pytest.raises(ValueError):
        ContinuousDistribution([1.0, float("nan")])


@pytest.mark.parametrize("seed", range(10))
def test_w1_matches_lp(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=50), rng.normal(1, 2, size=37)
    assert wasserstein1(a, b) == pytest.approx(lp_w1(a, b), abs=1e-9)


@given(samples, samples, samples)
def test_w1_metric_properties(a, b, c):
    ab, ba = wasserstein1(a, b), wasserstein1(b, a)
    assert ab == pytest.approx(ba, abs=1e-9)
    assert ab <= wasserstein1(a, c) + wasserstein1(c, b) + 1e-9


@given(samples, samples, st.floats(-10, 10))
def test_w1_scale_equivariance(a, b, c):
    scaled = wasserstein1([c * x for x in a], [c * x for x in b])
    assert scaled == pytest.approx(abs(c) * wasserstein1(a, b), rel=1e-9, abs=1e-9)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30))
def test_w1_equal_sizes_is_sorted_matching(a):
    rng = np.random.default_rng(len(a))
    b = rng.normal(size=len(a))
    assert wasserstein1(a, b) == pytest.approx(np.mean(np.abs(np.sort(a) - np.sort(b))), abs=1e-9)


def test_tv_examples():
    assert total_variation({"a": 0.5, "b": 0.5}, {"a": 0.5, "b": 0.5}) == 0.0
    assert total_variation({"a": 1.0}, {"b": 1.0}) == 1.0
    assert total_variation({"x": 0.7, "y": 0.3}, {"x": 0.5, "y": 0.5}) == pytest.approx(0.2, abs=1e-15)
    with pytest.raises(ValueError):
        CategoricalDistribution({"a": 0.5})
    with pytest.raises(ValueError):
        CategoricalDistribution({"a": 1.5, "b": -0.5})


dists = st.lists(st.floats(0.01, 1.0), min_size=1, max_size=6).map(
    lambda w: {f"l{i}": x / sum(w) for i, x in enumerate(w)})


@given(dists, dists, dists)
def test_tv_metric_properties(p, q, r):
    assert total_variation(p, q) == pytest.approx(total_variation(q, p), abs=1e-15)
    assert total_variation(p, q) <= total_variation(p, r) + total_variation(r, q) + 1e-12
    assert 0 <= total_variation(p, q) <= 1 + 1e-12


@given(dists, dists)
def test_tv_label_permutation_invariant(p, q):
    rename = {k: f"z{len(k)}{k[::-1]}" for k in set(p) | set(q)}
    pp = {rename[k]: v for k, v in p.items()}
    qq = {rename[k]: v for k, v in q.items()}
    assert total_variation(pp, qq) == pytest.approx(total_variation(p, q), abs=1e-15)


def test_geometry_examples(water):
    g = extract_geometry(infer_bonds(water))
    assert g.bond_lengths == pytest.approx([0.96, 0.96])
    assert g.bond_angles == pytest.approx([104.5])
    assert g.valencies == [2, 1, 1]
    chain = infer_bonds(Molecule(["C", "C", "C"], [[0, 0, 0], [1.5, 0, 0], [3.0, 0, 0]]))
    assert extract_geometry(chain).bond_angles == pytest.approx([180.0])
    ring = Molecule(["C"] * 6, [[1.4 * math.cos(k * math.pi / 3), 1.4 * math.sin(k * math.pi / 3), 0] for k in range(6)])
    assert extract_geometry(infer_bonds(ring)).ring_sizes == [6]
    empty = extract_geometry(Molecule(["C"], [[0, 0, 0]]))
    assert empty.bond_lengths == [] and empty.bond_angles == [] and empty.ring_sizes == []


def test_angle_count_per_centre(methane):
    # four bonds on carbon give C(4,2) = 6 angles, all tetrahedral
    g = extract_geometry(infer_bonds(methane))
    assert len(g.bond_angles) == 6
    assert g.bond_angles == pytest.approx([math.degrees(math.acos(-1 / 3))] * 6)


@pytest.fixture(scope="module")
def corpus():
    return [infer_bonds(m) for m in generate_corpus(50, seed=12, max_atoms=20)]


def test_self_comparison(corpus):
    rep = evaluate_corpus(corpus, corpus)
    for name in ("valency_w1", "atom_tv", "bond_tv", "bond_len_w1", "bond_ang_w1", "ring_size_tv", "atoms_per_mol_tv"):
        assert getattr(rep, name) == 0.0
    assert rep.unique_pct == 100.0 * len({canonical_hash(m) for m in corpus}) / len(corpus)
    assert rep.stable_mol_pct == 100.0 and rep.valid_pct == 100.0 and rep.single_fragment_pct == 100.0


def test_repeated_molecule_uniqueness(corpus):
    rep = evaluate_corpus([corpus[0]] * 100, corpus)
    assert rep.unique_pct == 1.0


def test_order_invariance(corpus):
    rng = np.random.default_rng(0)
    gen = corpus[:25]
    a = evaluate_corpus(gen, corpus)
    b = evaluate_corpus([gen[i] for i in rng.permutation(25)], [corpus[i] for i in rng.permutation(50)])
    assert a.to_dict() == pytest.approx(b.to_dict(), abs=1e-12)


def test_metrics_match_independent_computation(corpus):
    gen = [infer_bonds(m) for m in generate_corpus(50, seed=13, max_atoms=20)]
    rep = evaluate_corpus(gen, corpus)

    def pooled(mols, f):
        return np.concatenate([np.asarray(f(m), float) for m in mols])

    def lengths(m):
        return [np.linalg.norm(m.positions[i] - m.positions[j]) for i, j, _ in m.bonds]

    ref_len, gen_len = pooled(corpus, lengths), pooled(gen, lengths)
    # W1 via quantile functions on a fine common grid
    u = (np.arange(200_000) + 0.5) / 200_000
    w1 = np.mean(np.abs(np.quantile(gen_len, u, method="inverted_cdf") - np.quantile(ref_len, u, method="inverted_cdf")))
    assert rep.bond_len_w1 == pytest.approx(w1, abs=1e-6)

    def freqs(labels):
        vals, counts = np.unique(labels, return_counts=True)
        return dict(zip(vals.tolist(), (counts / counts.sum()).tolist()))

    g_atoms = freqs(np.concatenate([m.elements for m in gen]))
    r_atoms = freqs(np.concatenate([m.elements for m in corpus]))
    tv = 0.5 * sum(abs(g_atoms.get(k, 0) - r_atoms.get(k, 0)) for k in set(g_atoms) | set(r_atoms))
    assert rep.atom_tv == pytest.approx(tv, abs=1e-12)
    stable = np.mean([check_stability(m).molecule_stable for m in gen]) * 100
    assert rep.stable_mol_pct == pytest.approx(stable)


def test_empty_sides_and_errors(corpus):
    with pytest.raises(ValueError):
        evaluate_corpus([], corpus)
    lone = [Molecule(["C"], [[0, 0, 0]])]
    rep = evaluate_corpus(lone, corpus)
    assert math.isnan(rep.bond_len_w1)
    assert rep.bond_tv == 1.0


def test_report_serialisation(corpus):
    rep = evaluate_corpus(corpus[:10], corpus)
    header, row = rep.to_csv().splitlines()
    assert header.split(",") == list(MetricsReport.CSV_COLUMNS)
    assert len(row.split(",")) == 12
    assert set(rep.to_dict()) == {f for f in rep.to_dict()}
    assert "bond_len_w1" in rep.to_json()
    for k, v in rep.to_dict().items():
        if k.endswith("_pct"):
            assert 0 <= v <= 100
        else:
            assert v >= 0


def test_distribution_summary(corpus):
    s = distribution_summary(corpus[:3])
    assert len(s["bond_lengths"]) == sum(len(m.bonds) for m in corpus[:3])
